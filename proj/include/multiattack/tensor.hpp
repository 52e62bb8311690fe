#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace multiattack {

namespace detail {
struct TensorState;
}

// Dense row-major f64 n-d array with reverse-mode autodiff.
//
// Ops record a tape node on their result whenever gradients are enabled and
// at least one input participates in differentiation. backward() on a scalar
// walks the tape in reverse topological order, visiting each node once, and
// accumulates (+=) into the grad buffers of requires_grad leaves.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<int64_t> shape, double value);
    static Tensor from_data(std::vector<int64_t> shape, std::vector<double> data);
    static Tensor scalar(double value);

    bool defined() const { return state_ != nullptr; }
    const std::vector<int64_t>& shape() const;
    size_t rank() const;
    int64_t dim(size_t axis) const;
    int64_t numel() const;

    std::span<const double> data() const;
    // Direct writes are for leaf tensors between optimization steps; they do
    // not invalidate tapes already built from the old values.
    std::span<double> mutable_data();
    double value() const;  // scalar tensors only
    double at(std::initializer_list<int64_t> index) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Scalar tensors only. Gradients accumulate into requires_grad leaves.
    void backward() const;

    // Copy of the values with no tape and no grad.
    Tensor detach() const;

private:
    explicit Tensor(std::shared_ptr<detail::TensorState> state) : state_(std::move(state)) {}
    std::shared_ptr<detail::TensorState> state_;

    friend Tensor make_op_result(std::vector<int64_t> shape, std::vector<double> data,
                                 std::vector<Tensor> parents,
                                 std::function<void(detail::TensorState&)> backward_fn);
    friend detail::TensorState& state_of(const Tensor& t);
};

// --- elementwise / structural ops ---

// Same shapes, or one operand with leading dimension 1 (and equal trailing
// dims) broadcast across the other's leading dimension.
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);
Tensor relu(const Tensor& a);
// Gradient passes where lo <= x <= hi, zero outside.
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor reshape(const Tensor& a, std::vector<int64_t> new_shape);

// --- network ops ---

// 3x3 cross-correlation, padding 1, stride 1. input [B,Cin,H,W],
// kernel [Cout,Cin,3,3], bias [Cout] -> [B,Cout,H,W].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);
// 2x2 average pooling; H and W must be even.
Tensor mean_pool2(const Tensor& input);
// input [B,D], weight [K,D], bias [K] -> [B,K].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);
// Mean over the batch of -log softmax(z)[target]; max-subtraction stabilized.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets);
// Bilinear interpolation with half-pixel centers. image [B,C,H,W].
Tensor resize_bilinear(const Tensor& image, int64_t out_h, int64_t out_w);
// (x/255 - mean[c]) / std[c] per channel. image [B,C,H,W], one constant per channel.
Tensor normalize_channels(const Tensor& image, const std::vector<double>& mean,
                          const std::vector<double>& stddev);

// --- affine-slice batch builders ---

// out[i] = x0 + (i+1) * p for i in [0, n). x0 and p are [1,C,H,W].
Tensor line_batch(const Tensor& x0, const Tensor& p, int n);
// out[beta*width + alpha] = x0 + alpha*px + beta*py over the integer grid.
Tensor plane_batch(const Tensor& x0, const Tensor& px, const Tensor& py, int width, int height);

// --- tape-free helpers ---

// Lowest index wins ties.
std::vector<int> argmax_rows(const Tensor& logits);
// Row-major [B*C] softmax probabilities, max-subtraction stabilized.
std::vector<double> softmax_rows(const Tensor& logits);

// Disables tape construction on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

}  // namespace multiattack
