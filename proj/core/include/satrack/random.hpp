#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "satrack/tensor.hpp"

namespace satrack {

/// Seeded RNG wrapper so every stochastic path in the library draws from an
/// explicitly threaded generator. No global random state anywhere.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    int64_t uniform_int(int64_t lo, int64_t hi) { // inclusive bounds
        return std::uniform_int_distribution<int64_t>(lo, hi)(engine_);
    }

    uint64_t next() { return engine_(); }

    std::mt19937_64& engine() { return engine_; }

    Tensor uniform_tensor(Shape shape, double lo, double hi,
                          bool requires_grad = false) {
        Tensor t = Tensor::zeros(std::move(shape), requires_grad);
        for (double& v : t.values()) v = uniform(lo, hi);
        return t;
    }

    Tensor normal_tensor(Shape shape, double mean, double stddev,
                         bool requires_grad = false) {
        Tensor t = Tensor::zeros(std::move(shape), requires_grad);
        for (double& v : t.values()) v = normal(mean, stddev);
        return t;
    }

    /// Xavier-uniform init for a [fan_in x fan_out] weight.
    Tensor xavier_tensor(int64_t fan_in, int64_t fan_out,
                         bool requires_grad = true) {
        double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        return uniform_tensor({fan_in, fan_out}, -bound, bound, requires_grad);
    }

private:
    std::mt19937_64 engine_;
};

} // namespace satrack
