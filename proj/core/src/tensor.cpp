#include "satrack/tensor.hpp"

#include <numeric>
#include <string>

namespace satrack {

namespace {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) {
            throw DimensionError("tensor dimensions must be positive, got " +
                                 std::to_string(d));
        }
        n *= d;
    }
    return n;
}

thread_local Tape* g_current_tape = nullptr;
thread_local MacCounter* g_current_counter = nullptr;

} // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto node = std::make_shared<detail::TensorNode>();
    int64_t n = shape_numel(shape);
    node->shape = std::move(shape);
    node->data.assign(static_cast<size_t>(n), 0.0);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
    int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(values.size())) {
        throw DimensionError("data length " + std::to_string(values.size()) +
                             " does not match shape product " +
                             std::to_string(n));
    }
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw Error("use of an undefined tensor");
    return node_->shape;
}

int64_t Tensor::dim(int i) const {
    const Shape& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size())) {
        throw DimensionError("dimension index " + std::to_string(i) +
                             " out of range for rank " +
                             std::to_string(s.size()));
    }
    return s[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const {
    return static_cast<int64_t>(values().size());
}

double* Tensor::data() { return values().data(); }
const double* Tensor::data() const { return values().data(); }

std::vector<double>& Tensor::values() {
    if (!node_) throw Error("use of an undefined tensor");
    return node_->data;
}

const std::vector<double>& Tensor::values() const {
    if (!node_) throw Error("use of an undefined tensor");
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw DimensionError("item() requires a single-element tensor, got " +
                             std::to_string(numel()) + " elements");
    }
    return values()[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    return values()[static_cast<size_t>(detail::flat_index(shape(), idx))];
}

double& Tensor::at(std::initializer_list<int64_t> idx) {
    return values()[static_cast<size_t>(detail::flat_index(shape(), idx))];
}

bool Tensor::requires_grad() const {
    return node_ && node_->requires_grad;
}

void Tensor::set_requires_grad(bool rg) {
    if (!node_) throw Error("use of an undefined tensor");
    node_->requires_grad = rg;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!node_) throw Error("use of an undefined tensor");
    if (node_->grad.empty()) {
        throw Error("tensor has no gradient; run backward first");
    }
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_) throw Error("use of an undefined tensor");
    node_->grad.clear();
}

Tensor Tensor::detach() const {
    return from_data(shape(), values(), false);
}

Tensor Tensor::clone() const {
    return from_data(shape(), values(), requires_grad());
}

Tape::Tape() : previous_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = previous_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> backward) {
    ops_.push_back(std::move(backward));
}

void Tape::backward(const Tensor& loss) {
    if (used_) {
        throw TapeError("backward called twice on the same tape without reset");
    }
    if (loss.numel() != 1) {
        throw DimensionError("backward requires a scalar loss, got " +
                             std::to_string(loss.numel()) + " elements");
    }
    used_ = true;
    detail::ensure_grad(*loss.node());
    loss.node()->grad[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void Tape::reset() {
    ops_.clear();
    used_ = false;
}

TapeSuspend::TapeSuspend() : saved_(g_current_tape) { g_current_tape = nullptr; }

TapeSuspend::~TapeSuspend() { g_current_tape = saved_; }

MacCounter::MacCounter() : previous_(g_current_counter) {
    g_current_counter = this;
}

MacCounter::~MacCounter() { g_current_counter = previous_; }

void MacCounter::add(uint64_t n) {
    if (g_current_counter) g_current_counter->total_ += n;
}

bool MacCounter::active() { return g_current_counter != nullptr; }

uint64_t instrumented_count(const std::function<void()>& forward) {
    MacCounter counter;
    forward();
    return counter.total();
}

namespace detail {

int64_t flat_index(const Shape& shape, std::initializer_list<int64_t> idx) {
    if (idx.size() != shape.size()) {
        throw DimensionError("index rank " + std::to_string(idx.size()) +
                             " does not match tensor rank " +
                             std::to_string(shape.size()));
    }
    int64_t flat = 0;
    size_t k = 0;
    for (int64_t i : idx) {
        if (i < 0 || i >= shape[k]) {
            throw DimensionError("index " + std::to_string(i) +
                                 " out of range for dimension " +
                                 std::to_string(shape[k]));
        }
        flat = flat * shape[k] + i;
        ++k;
    }
    return flat;
}

void ensure_grad(TensorNode& node) {
    if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0);
}

void accumulate_grad(TensorNode& node, const std::vector<double>& src) {
    ensure_grad(node);
    for (size_t i = 0; i < src.size(); ++i) node.grad[i] += src[i];
}

} // namespace detail

} // namespace satrack
