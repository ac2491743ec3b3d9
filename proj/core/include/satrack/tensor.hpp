#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "satrack/errors.hpp"

namespace satrack {

using Shape = std::vector<int64_t>;

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until backward touches this node
    bool requires_grad = false;
};

} // namespace detail

/// Dense row-major tensor of 64-bit floats. Copies are shallow handles to
/// the same storage, so parameters can be captured by backward closures
/// and updated in place by an optimizer.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int ndim() const { return static_cast<int>(shape().size()); }
    int64_t dim(int i) const;
    int64_t numel() const;

    double* data();
    const double* data() const;
    std::vector<double>& values();
    const std::vector<double>& values() const;

    /// Value of a 0-d/1-element tensor.
    double item() const;
    /// Read element by multi-index (row-major), for tests and glue code.
    double at(std::initializer_list<int64_t> idx) const;
    double& at(std::initializer_list<int64_t> idx);

    bool requires_grad() const;
    void set_requires_grad(bool rg);

    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();

    /// Deep copy that does not participate in gradient computation.
    Tensor detach() const;
    /// Deep copy preserving the requires_grad flag.
    Tensor clone() const;

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node)
        : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;
};

/// Records backward closures for ops executed while it is the active tape.
/// The record order is a topological order of the computation, so replaying
/// it in reverse is exact reverse-topological traversal.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();

    void record(std::function<void()> backward);
    size_t size() const { return ops_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse
    /// order. Throws TapeError if called again without reset().
    void backward(const Tensor& loss);
    void reset();

private:
    std::vector<std::function<void()>> ops_;
    Tape* previous_ = nullptr;
    bool used_ = false;
};

/// Temporarily deactivates the current tape (forward-only evaluation
/// inside an otherwise recorded region, e.g. finite differences).
class TapeSuspend {
public:
    TapeSuspend();
    ~TapeSuspend();
    TapeSuspend(const TapeSuspend&) = delete;
    TapeSuspend& operator=(const TapeSuspend&) = delete;

private:
    Tape* saved_;
};

/// Counts multiply-accumulate operations executed by the forward kernels
/// while active. One MAC = one multiply paired with an accumulate; bias
/// adds, residuals, softmax and activations do not count.
class MacCounter {
public:
    MacCounter();
    ~MacCounter();
    MacCounter(const MacCounter&) = delete;
    MacCounter& operator=(const MacCounter&) = delete;

    uint64_t total() const { return total_; }

    static void add(uint64_t n);
    static bool active();

private:
    uint64_t total_ = 0;
    MacCounter* previous_ = nullptr;
};

/// Runs `forward` under a fresh MacCounter and returns the exact number of
/// multiply-accumulates the kernels executed.
uint64_t instrumented_count(const std::function<void()>& forward);

namespace detail {

/// Row-major flat offset for a multi-index.
int64_t flat_index(const Shape& shape, std::initializer_list<int64_t> idx);

/// Allocates (zero-filled) grad storage if absent.
void ensure_grad(TensorNode& node);

/// Accumulates `src` into the grad buffer of `node`.
void accumulate_grad(TensorNode& node, const std::vector<double>& src);

} // namespace detail

} // namespace satrack
