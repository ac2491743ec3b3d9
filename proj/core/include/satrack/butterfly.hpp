#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "satrack/random.hpp"
#include "satrack/tensor.hpp"

namespace satrack {

/// Channel-fusion layer factored into log2(N) sparse mixing stages with
/// FFT-style wiring: at stage s, output i mixes inputs i and i XOR 2^s.
/// Replaces a dense 1x1 pointwise convolution; after all stages every
/// output channel depends on every input channel.
struct ButterflyLayer {
    int64_t channels = 0;
    /// One [2 x N] tensor per stage; row 0 holds the weight on input i
    /// (self edge), row 1 the weight on input i XOR 2^s (cross edge).
    std::vector<Tensor> stages;
    std::optional<Tensor> bias;

    static ButterflyLayer identity(int64_t channels, bool with_bias = false);
    /// Near-identity init: self edges 1 + noise, cross edges noise.
    static ButterflyLayer random_init(int64_t channels, Rng& rng,
                                      double sigma = 0.02,
                                      bool with_bias = false);

    int64_t stage_count() const { return static_cast<int64_t>(stages.size()); }
};

/// Applies the stages in order to x [B x N x H x W]. Differentiable in the
/// stage weights and the input.
Tensor bt_forward(const ButterflyLayer& layer, const Tensor& x);

/// Materializes the equivalent dense [N x N] matrix: column j is the layer
/// applied to the j-th standard basis vector.
Tensor to_dense(const ButterflyLayer& layer);

/// Exact multiply-accumulate count of one forward over an H x W map:
/// 2 * N * log2(N) * H * W.
uint64_t bt_macs(const ButterflyLayer& layer, int64_t h, int64_t w);

/// Number of stored weights: 2 * N * log2(N), plus N if biased.
uint64_t bt_param_count(const ButterflyLayer& layer);

/// log2 of a power of two; throws ConfigError otherwise.
int64_t log2_exact(int64_t n);

} // namespace satrack
