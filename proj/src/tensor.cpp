#include "multiattack/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "multiattack/errors.hpp"

namespace multiattack {

namespace detail {

struct TensorState {
    std::vector<int64_t> shape;
    std::vector<double> data;
    // Persistent for requires_grad leaves (accumulates across backward calls),
    // transient for interior nodes (zeroed per backward, freed once consumed).
    std::vector<double> grad;
    bool requires_grad = false;

    std::vector<Tensor> parents;
    std::function<void(TensorState&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    bool needs_grad() const { return requires_grad || backward_fn != nullptr; }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

using detail::TensorState;

namespace {

thread_local bool g_grad_enabled = true;

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

void check_defined(const Tensor& t, const char* what) {
    if (!t.defined()) throw ContractError(std::string(what) + ": undefined tensor");
}

// Fixed-order 4-lane dot product; vectorizes well and keeps the reduction
// order independent of everything but n.
double dot(const double* a, const double* b, int64_t n) {
    double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc0 += a[i] * b[i];
        acc1 += a[i + 1] * b[i + 1];
        acc2 += a[i + 2] * b[i + 2];
        acc3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) acc0 += a[i] * b[i];
    return (acc0 + acc1) + (acc2 + acc3);
}

void axpy(double* out, double w, const double* in, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] += w * in[i];
}

}  // namespace

// --- Tensor basics ---

Tensor make_op_result(std::vector<int64_t> shape, std::vector<double> data,
                      std::vector<Tensor> parents,
                      std::function<void(TensorState&)> backward_fn) {
    auto state = std::make_shared<TensorState>();
    state->shape = std::move(shape);
    state->data = std::move(data);
    bool track = grad_enabled();
    if (track) {
        bool any = false;
        for (const Tensor& p : parents) any = any || state_of(p).needs_grad();
        track = any;
    }
    if (track) {
        state->parents = std::move(parents);
        state->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(state));
}

detail::TensorState& state_of(const Tensor& t) {
    return *t.state_;
}

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
    for (int64_t d : shape)
        if (d < 0) throw ShapeError("zeros: negative dimension in " + shape_str(shape));
    auto state = std::make_shared<TensorState>();
    state->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    state->shape = std::move(shape);
    state->requires_grad = requires_grad;
    return Tensor(std::move(state));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.state_->data.begin(), t.state_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
    auto state = std::make_shared<TensorState>();
    state->shape = std::move(shape);
    state->data = std::move(data);
    return Tensor(std::move(state));
}

Tensor Tensor::scalar(double value) {
    return from_data({}, {value});
}

const std::vector<int64_t>& Tensor::shape() const {
    check_defined(*this, "shape");
    return state_->shape;
}

size_t Tensor::rank() const {
    return shape().size();
}

int64_t Tensor::dim(size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw IndexError("dim: axis out of range");
    return s[axis];
}

int64_t Tensor::numel() const {
    check_defined(*this, "numel");
    return static_cast<int64_t>(state_->data.size());
}

std::span<const double> Tensor::data() const {
    check_defined(*this, "data");
    return state_->data;
}

std::span<double> Tensor::mutable_data() {
    check_defined(*this, "mutable_data");
    return state_->data;
}

double Tensor::value() const {
    check_defined(*this, "value");
    if (state_->data.size() != 1) throw ContractError("value: tensor is not a scalar");
    return state_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw IndexError("at: rank mismatch");
    int64_t flat = 0;
    size_t axis = 0;
    for (int64_t i : index) {
        if (i < 0 || i >= s[axis]) throw IndexError("at: index out of range");
        flat = flat * s[axis] + i;
        ++axis;
    }
    return state_->data[static_cast<size_t>(flat)];
}

bool Tensor::requires_grad() const {
    check_defined(*this, "requires_grad");
    return state_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool value) {
    check_defined(*this, "set_requires_grad");
    if (!state_->is_leaf())
        throw ContractError("set_requires_grad: only leaf tensors can be toggled");
    state_->requires_grad = value;
    if (!value) state_->grad.clear();
    return *this;
}

bool Tensor::has_grad() const {
    check_defined(*this, "has_grad");
    return state_->grad.size() == state_->data.size();
}

std::span<const double> Tensor::grad() const {
    check_defined(*this, "grad");
    if (!has_grad()) throw ContractError("grad: no gradient present; call backward first");
    return state_->grad;
}

void Tensor::zero_grad() {
    check_defined(*this, "zero_grad");
    std::fill(state_->grad.begin(), state_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    check_defined(*this, "detach");
    return from_data(state_->shape, state_->data);
}

void Tensor::backward() const {
    check_defined(*this, "backward");
    if (state_->data.size() != 1)
        throw ContractError("backward: loss must be a scalar, got " + shape_str(state_->shape));

    // Post-order DFS: parents appear before their consumers.
    std::vector<TensorState*> order;
    std::unordered_set<TensorState*> seen;
    std::vector<std::pair<TensorState*, size_t>> stack;
    stack.emplace_back(state_.get(), 0);
    seen.insert(state_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorState* parent = &state_of(node->parents[next]);
            ++next;
            if (parent->needs_grad() && seen.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (TensorState* node : order) {
        const bool persistent = node->requires_grad && node->is_leaf();
        if (persistent) {
            node->ensure_grad();
        } else {
            node->grad.assign(node->data.size(), 0.0);
        }
    }

    state_->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorState* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
        if (!(node->requires_grad && node->is_leaf())) {
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

bool grad_enabled() {
    return g_grad_enabled;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
    g_grad_enabled = previous_;
}

// --- elementwise / structural ops ---

Tensor add(const Tensor& a, const Tensor& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    const auto& sa = a.shape();
    const auto& sb = b.shape();

    auto trailing_match = [](const std::vector<int64_t>& x, const std::vector<int64_t>& y) {
        if (x.size() != y.size()) return false;
        for (size_t i = 1; i < x.size(); ++i)
            if (x[i] != y[i]) return false;
        return true;
    };

    const bool same = sa == sb;
    const bool broadcast_b = !same && !sa.empty() && sb.size() == sa.size() && sb[0] == 1 &&
                             trailing_match(sa, sb);
    const bool broadcast_a = !same && !sb.empty() && sa.size() == sb.size() && sa[0] == 1 &&
                             trailing_match(sa, sb);
    if (!same && !broadcast_a && !broadcast_b)
        throw ShapeError("add: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));

    const Tensor& big = broadcast_a ? b : a;
    const Tensor& small = broadcast_a ? a : b;
    const auto big_data = big.data();
    const auto small_data = small.data();
    std::vector<double> out(big_data.begin(), big_data.end());
    if (same) {
        for (size_t i = 0; i < out.size(); ++i) out[i] += small_data[i];
    } else {
        const int64_t chunk = small.numel();
        const int64_t repeats = big.numel() / chunk;
#pragma omp parallel for
        for (int64_t r = 0; r < repeats; ++r)
            for (int64_t i = 0; i < chunk; ++i)
                out[static_cast<size_t>(r * chunk + i)] += small_data[static_cast<size_t>(i)];
    }

    TensorState* sa_ptr = &state_of(broadcast_a ? b : a);
    TensorState* sb_ptr = &state_of(broadcast_a ? a : b);
    const int64_t chunk = small.numel();
    const int64_t repeats = big.numel() / chunk;
    return make_op_result(big.shape(), std::move(out), {a, b}, [=](TensorState& self) {
        if (sa_ptr->needs_grad())
            for (size_t i = 0; i < self.grad.size(); ++i) sa_ptr->grad[i] += self.grad[i];
        if (sb_ptr->needs_grad()) {
            if (same) {
                for (size_t i = 0; i < self.grad.size(); ++i) sb_ptr->grad[i] += self.grad[i];
            } else {
                for (int64_t r = 0; r < repeats; ++r)
                    for (int64_t i = 0; i < chunk; ++i)
                        sb_ptr->grad[static_cast<size_t>(i)] +=
                            self.grad[static_cast<size_t>(r * chunk + i)];
            }
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    check_defined(a, "scale");
    const auto in = a.data();
    std::vector<double> out(in.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = factor * in[i];
    TensorState* pa = &state_of(a);
    return make_op_result(a.shape(), std::move(out), {a}, [=](TensorState& self) {
        if (pa->needs_grad())
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += factor * self.grad[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    if (a.shape() != b.shape())
        throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const auto da = a.data();
    const auto db = b.data();
    std::vector<double> out(da.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
    TensorState* pa = &state_of(a);
    TensorState* pb = &state_of(b);
    return make_op_result(a.shape(), std::move(out), {a, b}, [=](TensorState& self) {
        if (pa->needs_grad())
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += pb->data[i] * self.grad[i];
        if (pb->needs_grad())
            for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += pa->data[i] * self.grad[i];
    });
}

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    const auto in = a.data();
    double total = 0.0;
    for (double v : in) total += v;
    TensorState* pa = &state_of(a);
    return make_op_result({}, {total}, {a}, [=](TensorState& self) {
        if (pa->needs_grad()) {
            const double g = self.grad[0];
            for (double& v : pa->grad) v += g;
        }
    });
}

Tensor relu(const Tensor& a) {
    check_defined(a, "relu");
    const auto in = a.data();
    std::vector<double> out(in.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
    TensorState* pa = &state_of(a);
    return make_op_result(a.shape(), std::move(out), {a}, [=](TensorState& self) {
        if (pa->needs_grad())
            for (size_t i = 0; i < self.grad.size(); ++i)
                if (pa->data[i] > 0.0) pa->grad[i] += self.grad[i];
    });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    check_defined(a, "clamp");
    if (lo > hi) throw ContractError("clamp: lo > hi");
    const auto in = a.data();
    std::vector<double> out(in.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, in[i]));
    TensorState* pa = &state_of(a);
    return make_op_result(a.shape(), std::move(out), {a}, [=](TensorState& self) {
        if (pa->needs_grad())
            for (size_t i = 0; i < self.grad.size(); ++i)
                if (pa->data[i] >= lo && pa->data[i] <= hi) pa->grad[i] += self.grad[i];
    });
}

Tensor reshape(const Tensor& a, std::vector<int64_t> new_shape) {
    check_defined(a, "reshape");
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    const auto in = a.data();
    std::vector<double> out(in.begin(), in.end());
    TensorState* pa = &state_of(a);
    return make_op_result(std::move(new_shape), std::move(out), {a}, [=](TensorState& self) {
        if (pa->needs_grad())
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    });
}

// --- conv2d ---

namespace {

// Copies one [H,W] plane into a zero-padded [H+2,W+2] buffer.
void pad_plane(const double* src, double* dst, int64_t h, int64_t w) {
    const int64_t pw = w + 2;
    std::memset(dst, 0, sizeof(double) * static_cast<size_t>(pw));
    for (int64_t y = 0; y < h; ++y) {
        double* row = dst + (y + 1) * pw;
        row[0] = 0.0;
        std::memcpy(row + 1, src + y * w, sizeof(double) * static_cast<size_t>(w));
        row[w + 1] = 0.0;
    }
    std::memset(dst + (h + 1) * pw, 0, sizeof(double) * static_cast<size_t>(pw));
}

std::vector<double> pad_batch(const double* src, int64_t planes, int64_t h, int64_t w) {
    std::vector<double> padded(static_cast<size_t>(planes * (h + 2) * (w + 2)));
#pragma omp parallel for
    for (int64_t p = 0; p < planes; ++p)
        pad_plane(src + p * h * w, padded.data() + p * (h + 2) * (w + 2), h, w);
    return padded;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    check_defined(input, "conv2d");
    check_defined(kernel, "conv2d");
    check_defined(bias, "conv2d");
    if (input.rank() != 4) throw ShapeError("conv2d: input must be [B,Cin,H,W]");
    if (kernel.rank() != 4 || kernel.dim(2) != 3 || kernel.dim(3) != 3)
        throw ShapeError("conv2d: kernel must be [Cout,Cin,3,3]");
    const int64_t b = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int64_t cout = kernel.dim(0);
    if (kernel.dim(1) != cin)
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, kernel expects " +
                         std::to_string(kernel.dim(1)));
    if (bias.rank() != 1 || bias.dim(0) != cout)
        throw ShapeError("conv2d: bias must be [Cout]");

    const int64_t ph = h + 2, pw = w + 2;
    const double* in = input.data().data();
    const double* k = kernel.data().data();
    const double* bi = bias.data().data();

    std::vector<double> padded = pad_batch(in, b * cin, h, w);
    std::vector<double> out(static_cast<size_t>(b * cout * h * w));

#pragma omp parallel for collapse(2)
    for (int64_t bb = 0; bb < b; ++bb) {
        for (int64_t co = 0; co < cout; ++co) {
            double* op = out.data() + (bb * cout + co) * h * w;
            std::fill(op, op + h * w, bi[co]);
            for (int64_t ci = 0; ci < cin; ++ci) {
                const double* pp = padded.data() + (bb * cin + ci) * ph * pw;
                const double* kk = k + (co * cin + ci) * 9;
                for (int64_t ky = 0; ky < 3; ++ky) {
                    for (int64_t kx = 0; kx < 3; ++kx) {
                        const double kv = kk[ky * 3 + kx];
                        for (int64_t y = 0; y < h; ++y)
                            axpy(op + y * w, kv, pp + (y + ky) * pw + kx, w);
                    }
                }
            }
        }
    }

    TensorState* pin = &state_of(input);
    TensorState* pker = &state_of(kernel);
    TensorState* pbias = &state_of(bias);
    return make_op_result({b, cout, h, w}, std::move(out), {input, kernel, bias},
                          [=](TensorState& self) {
        const double* go = self.grad.data();
        if (pin->needs_grad()) {
#pragma omp parallel for collapse(2)
            for (int64_t bb = 0; bb < b; ++bb) {
                for (int64_t ci = 0; ci < cin; ++ci) {
                    std::vector<double> gpad(static_cast<size_t>(ph * pw), 0.0);
                    for (int64_t co = 0; co < cout; ++co) {
                        const double* gp = go + (bb * cout + co) * h * w;
                        const double* kk = pker->data.data() + (co * cin + ci) * 9;
                        for (int64_t ky = 0; ky < 3; ++ky)
                            for (int64_t kx = 0; kx < 3; ++kx) {
                                const double kv = kk[ky * 3 + kx];
                                for (int64_t y = 0; y < h; ++y)
                                    axpy(gpad.data() + (y + ky) * pw + kx, kv, gp + y * w, w);
                            }
                    }
                    double* gi = pin->grad.data() + (bb * cin + ci) * h * w;
                    for (int64_t y = 0; y < h; ++y)
                        for (int64_t x = 0; x < w; ++x)
                            gi[y * w + x] += gpad[static_cast<size_t>((y + 1) * pw + x + 1)];
                }
            }
        }
        if (pker->needs_grad() || pbias->needs_grad()) {
            std::vector<double> padded_in = pad_batch(pin->data.data(), b * cin, h, w);
#pragma omp parallel for
            for (int64_t co = 0; co < cout; ++co) {
                for (int64_t bb = 0; bb < b; ++bb) {
                    const double* gp = go + (bb * cout + co) * h * w;
                    if (pker->needs_grad()) {
                        for (int64_t ci = 0; ci < cin; ++ci) {
                            const double* pp = padded_in.data() + (bb * cin + ci) * ph * pw;
                            double* gk = pker->grad.data() + (co * cin + ci) * 9;
                            for (int64_t ky = 0; ky < 3; ++ky)
                                for (int64_t kx = 0; kx < 3; ++kx) {
                                    double acc = 0.0;
                                    for (int64_t y = 0; y < h; ++y)
                                        acc += dot(gp + y * w, pp + (y + ky) * pw + kx, w);
                                    gk[ky * 3 + kx] += acc;
                                }
                        }
                    }
                    if (pbias->needs_grad()) {
                        double acc = 0.0;
                        for (int64_t i = 0; i < h * w; ++i) acc += gp[i];
                        pbias->grad[static_cast<size_t>(co)] += acc;
                    }
                }
            }
        }
    });
}

Tensor mean_pool2(const Tensor& input) {
    check_defined(input, "mean_pool2");
    if (input.rank() != 4) throw ShapeError("mean_pool2: input must be [B,C,H,W]");
    const int64_t b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h % 2 != 0 || w % 2 != 0)
        throw ShapeError("mean_pool2: spatial dims must be even, got " + shape_str(input.shape()));
    const int64_t oh = h / 2, ow = w / 2;
    const double* in = input.data().data();
    std::vector<double> out(static_cast<size_t>(b * c * oh * ow));
#pragma omp parallel for
    for (int64_t p = 0; p < b * c; ++p) {
        const double* ip = in + p * h * w;
        double* op = out.data() + p * oh * ow;
        for (int64_t y = 0; y < oh; ++y)
            for (int64_t x = 0; x < ow; ++x) {
                const double* blk = ip + (2 * y) * w + 2 * x;
                op[y * ow + x] = 0.25 * (blk[0] + blk[1] + blk[w] + blk[w + 1]);
            }
    }
    TensorState* pin = &state_of(input);
    return make_op_result({b, c, oh, ow}, std::move(out), {input}, [=](TensorState& self) {
        if (!pin->needs_grad()) return;
        const double* go = self.grad.data();
#pragma omp parallel for
        for (int64_t p = 0; p < b * c; ++p) {
            double* gi = pin->grad.data() + p * h * w;
            const double* gp = go + p * oh * ow;
            for (int64_t y = 0; y < oh; ++y)
                for (int64_t x = 0; x < ow; ++x) {
                    const double g = 0.25 * gp[y * ow + x];
                    double* blk = gi + (2 * y) * w + 2 * x;
                    blk[0] += g;
                    blk[1] += g;
                    blk[w] += g;
                    blk[w + 1] += g;
                }
        }
    });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    check_defined(input, "linear");
    check_defined(weight, "linear");
    check_defined(bias, "linear");
    if (input.rank() != 2 || weight.rank() != 2)
        throw ShapeError("linear: input must be [B,D] and weight [K,D]");
    const int64_t b = input.dim(0), d = input.dim(1), k = weight.dim(0);
    if (weight.dim(1) != d)
        throw ShapeError("linear: input dim " + std::to_string(d) + " vs weight dim " +
                         std::to_string(weight.dim(1)));
    if (bias.rank() != 1 || bias.dim(0) != k) throw ShapeError("linear: bias must be [K]");

    const double* in = input.data().data();
    const double* wt = weight.data().data();
    const double* bi = bias.data().data();
    std::vector<double> out(static_cast<size_t>(b * k));
#pragma omp parallel for
    for (int64_t bb = 0; bb < b; ++bb)
        for (int64_t kk = 0; kk < k; ++kk)
            out[static_cast<size_t>(bb * k + kk)] = bi[kk] + dot(in + bb * d, wt + kk * d, d);

    TensorState* pin = &state_of(input);
    TensorState* pw = &state_of(weight);
    TensorState* pb = &state_of(bias);
    return make_op_result({b, k}, std::move(out), {input, weight, bias}, [=](TensorState& self) {
        const double* go = self.grad.data();
        if (pin->needs_grad()) {
#pragma omp parallel for
            for (int64_t bb = 0; bb < b; ++bb) {
                double* gi = pin->grad.data() + bb * d;
                for (int64_t kk = 0; kk < k; ++kk)
                    axpy(gi, go[bb * k + kk], pw->data.data() + kk * d, d);
            }
        }
        if (pw->needs_grad()) {
#pragma omp parallel for
            for (int64_t kk = 0; kk < k; ++kk) {
                double* gw = pw->grad.data() + kk * d;
                for (int64_t bb = 0; bb < b; ++bb)
                    axpy(gw, go[bb * k + kk], pin->data.data() + bb * d, d);
            }
        }
        if (pb->needs_grad())
            for (int64_t bb = 0; bb < b; ++bb)
                for (int64_t kk = 0; kk < k; ++kk) pb->grad[static_cast<size_t>(kk)] += go[bb * k + kk];
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    check_defined(logits, "softmax_cross_entropy");
    if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [B,C]");
    const int64_t b = logits.dim(0), c = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != b)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for batch of " + std::to_string(b));
    for (int t : targets)
        if (t < 0 || t >= c)
            throw IndexError("softmax_cross_entropy: target " + std::to_string(t) +
                             " outside [0," + std::to_string(c) + ")");

    const double* z = logits.data().data();
    // Probabilities are cached for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(b * c));
    double total = 0.0;
    for (int64_t bb = 0; bb < b; ++bb) {
        const double* row = z + bb * c;
        double m = row[0];
        for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
        const double lse = m + std::log(denom);
        for (int64_t j = 0; j < c; ++j)
            (*probs)[static_cast<size_t>(bb * c + j)] = std::exp(row[j] - m) / denom;
        total += lse - row[targets[static_cast<size_t>(bb)]];
    }
    total /= static_cast<double>(b);

    TensorState* pz = &state_of(logits);
    std::vector<int> tgt = targets;
    return make_op_result({}, {total}, {logits}, [=](TensorState& self) {
        if (!pz->needs_grad()) return;
        const double g = self.grad[0] / static_cast<double>(b);
        for (int64_t bb = 0; bb < b; ++bb) {
            double* gz = pz->grad.data() + bb * c;
            const double* p = probs->data() + bb * c;
            for (int64_t j = 0; j < c; ++j) gz[j] += g * p[j];
            gz[tgt[static_cast<size_t>(bb)]] -= g;
        }
    });
}

// --- resize_bilinear ---

namespace {

struct Bilin {
    std::vector<int64_t> lo, hi;
    std::vector<double> frac;
};

// Half-pixel-center source coordinates, clamped to the valid range.
Bilin bilinear_axis(int64_t in, int64_t out) {
    Bilin a;
    a.lo.resize(static_cast<size_t>(out));
    a.hi.resize(static_cast<size_t>(out));
    a.frac.resize(static_cast<size_t>(out));
    const double s = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t i = 0; i < out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * s - 0.5;
        if (src < 0.0) src = 0.0;
        double fl = std::floor(src);
        int64_t lo = static_cast<int64_t>(fl);
        if (lo > in - 1) lo = in - 1;
        int64_t hi = std::min<int64_t>(lo + 1, in - 1);
        a.lo[static_cast<size_t>(i)] = lo;
        a.hi[static_cast<size_t>(i)] = hi;
        a.frac[static_cast<size_t>(i)] = src - static_cast<double>(lo);
    }
    return a;
}

}  // namespace

Tensor resize_bilinear(const Tensor& image, int64_t out_h, int64_t out_w) {
    check_defined(image, "resize_bilinear");
    if (image.rank() != 4) throw ShapeError("resize_bilinear: image must be [B,C,H,W]");
    if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output size must be >= 1");
    const int64_t b = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
    if (h < 1 || w < 1) throw ShapeError("resize_bilinear: empty input image");

    const Bilin ay = bilinear_axis(h, out_h);
    const Bilin ax = bilinear_axis(w, out_w);
    const double* in = image.data().data();
    std::vector<double> out(static_cast<size_t>(b * c * out_h * out_w));
#pragma omp parallel for
    for (int64_t p = 0; p < b * c; ++p) {
        const double* ip = in + p * h * w;
        double* op = out.data() + p * out_h * out_w;
        for (int64_t y = 0; y < out_h; ++y) {
            const int64_t y0 = ay.lo[static_cast<size_t>(y)], y1 = ay.hi[static_cast<size_t>(y)];
            const double ty = ay.frac[static_cast<size_t>(y)];
            for (int64_t x = 0; x < out_w; ++x) {
                const int64_t x0 = ax.lo[static_cast<size_t>(x)], x1 = ax.hi[static_cast<size_t>(x)];
                const double tx = ax.frac[static_cast<size_t>(x)];
                const double v00 = ip[y0 * w + x0], v01 = ip[y0 * w + x1];
                const double v10 = ip[y1 * w + x0], v11 = ip[y1 * w + x1];
                op[y * out_w + x] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) +
                                    ty * ((1.0 - tx) * v10 + tx * v11);
            }
        }
    }

    TensorState* pin = &state_of(image);
    return make_op_result({b, c, out_h, out_w}, std::move(out), {image}, [=](TensorState& self) {
        if (!pin->needs_grad()) return;
        const double* go = self.grad.data();
#pragma omp parallel for
        for (int64_t p = 0; p < b * c; ++p) {
            double* gi = pin->grad.data() + p * h * w;
            const double* gp = go + p * out_h * out_w;
            for (int64_t y = 0; y < out_h; ++y) {
                const int64_t y0 = ay.lo[static_cast<size_t>(y)], y1 = ay.hi[static_cast<size_t>(y)];
                const double ty = ay.frac[static_cast<size_t>(y)];
                for (int64_t x = 0; x < out_w; ++x) {
                    const int64_t x0 = ax.lo[static_cast<size_t>(x)],
                                  x1 = ax.hi[static_cast<size_t>(x)];
                    const double tx = ax.frac[static_cast<size_t>(x)];
                    const double g = gp[y * out_w + x];
                    gi[y0 * w + x0] += (1.0 - ty) * (1.0 - tx) * g;
                    gi[y0 * w + x1] += (1.0 - ty) * tx * g;
                    gi[y1 * w + x0] += ty * (1.0 - tx) * g;
                    gi[y1 * w + x1] += ty * tx * g;
                }
            }
        }
    });
}

Tensor normalize_channels(const Tensor& image, const std::vector<double>& mean,
                          const std::vector<double>& stddev) {
    check_defined(image, "normalize_channels");
    if (image.rank() != 4) throw ShapeError("normalize_channels: image must be [B,C,H,W]");
    const int64_t b = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
    if (static_cast<int64_t>(mean.size()) != c || static_cast<int64_t>(stddev.size()) != c)
        throw ShapeError("normalize_channels: need one mean/std per channel");
    for (double s : stddev)
        if (s <= 0.0) throw ContractError("normalize_channels: std must be positive");

    const int64_t plane = h * w;
    const double* in = image.data().data();
    std::vector<double> out(static_cast<size_t>(b * c * plane));
#pragma omp parallel for collapse(2)
    for (int64_t bb = 0; bb < b; ++bb)
        for (int64_t ch = 0; ch < c; ++ch) {
            const double inv = 1.0 / stddev[static_cast<size_t>(ch)];
            const double m = mean[static_cast<size_t>(ch)];
            const double* ip = in + (bb * c + ch) * plane;
            double* op = out.data() + (bb * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) op[i] = (ip[i] / 255.0 - m) * inv;
        }

    TensorState* pin = &state_of(image);
    std::vector<double> sd = stddev;
    return make_op_result(image.shape(), std::move(out), {image}, [=](TensorState& self) {
        if (!pin->needs_grad()) return;
        const double* go = self.grad.data();
#pragma omp parallel for collapse(2)
        for (int64_t bb = 0; bb < b; ++bb)
            for (int64_t ch = 0; ch < c; ++ch) {
                const double inv = 1.0 / (255.0 * sd[static_cast<size_t>(ch)]);
                double* gi = pin->grad.data() + (bb * c + ch) * plane;
                const double* gp = go + (bb * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) gi[i] += inv * gp[i];
            }
    });
}

// --- affine-slice batch builders ---

namespace {

void check_slice_operand(const Tensor& t, const char* name) {
    if (t.rank() != 4 || t.dim(0) != 1)
        throw ShapeError(std::string(name) + " must be [1,C,H,W]");
}

}  // namespace

Tensor line_batch(const Tensor& x0, const Tensor& p, int n) {
    check_defined(x0, "line_batch");
    check_defined(p, "line_batch");
    check_slice_operand(x0, "line_batch: x0");
    check_slice_operand(p, "line_batch: p");
    if (x0.shape() != p.shape()) throw ShapeError("line_batch: x0 and p shapes differ");
    if (n < 1) throw ConfigError("line_batch: need at least one multiple");

    const int64_t chunk = x0.numel();
    const double* xd = x0.data().data();
    const double* pd = p.data().data();
    std::vector<double> out(static_cast<size_t>(n) * static_cast<size_t>(chunk));
#pragma omp parallel for
    for (int64_t i = 0; i < n; ++i) {
        const double a = static_cast<double>(i + 1);
        double* op = out.data() + i * chunk;
        for (int64_t j = 0; j < chunk; ++j) op[j] = xd[j] + a * pd[j];
    }

    std::vector<int64_t> shape = x0.shape();
    shape[0] = n;
    TensorState* px0 = &state_of(x0);
    TensorState* pp = &state_of(p);
    return make_op_result(std::move(shape), std::move(out), {x0, p}, [=](TensorState& self) {
        const double* go = self.grad.data();
        for (int64_t i = 0; i < n; ++i) {
            const double a = static_cast<double>(i + 1);
            const double* g = go + i * chunk;
            if (px0->needs_grad())
                for (int64_t j = 0; j < chunk; ++j) px0->grad[static_cast<size_t>(j)] += g[j];
            if (pp->needs_grad())
                for (int64_t j = 0; j < chunk; ++j) pp->grad[static_cast<size_t>(j)] += a * g[j];
        }
    });
}

Tensor plane_batch(const Tensor& x0, const Tensor& px, const Tensor& py, int width, int height) {
    check_defined(x0, "plane_batch");
    check_defined(px, "plane_batch");
    check_defined(py, "plane_batch");
    check_slice_operand(x0, "plane_batch: x0");
    check_slice_operand(px, "plane_batch: px");
    check_slice_operand(py, "plane_batch: py");
    if (x0.shape() != px.shape() || x0.shape() != py.shape())
        throw ShapeError("plane_batch: operand shapes differ");
    if (width < 1 || height < 1) throw ConfigError("plane_batch: grid must be at least 1x1");

    const int64_t chunk = x0.numel();
    const int64_t n = static_cast<int64_t>(width) * height;
    const double* xd = x0.data().data();
    const double* pxd = px.data().data();
    const double* pyd = py.data().data();
    std::vector<double> out(static_cast<size_t>(n * chunk));
#pragma omp parallel for
    for (int64_t idx = 0; idx < n; ++idx) {
        const double a = static_cast<double>(idx % width);
        const double b = static_cast<double>(idx / width);
        double* op = out.data() + idx * chunk;
        for (int64_t j = 0; j < chunk; ++j) op[j] = xd[j] + a * pxd[j] + b * pyd[j];
    }

    std::vector<int64_t> shape = x0.shape();
    shape[0] = n;
    TensorState* px0 = &state_of(x0);
    TensorState* ppx = &state_of(px);
    TensorState* ppy = &state_of(py);
    return make_op_result(std::move(shape), std::move(out), {x0, px, py}, [=](TensorState& self) {
        const double* go = self.grad.data();
        for (int64_t idx = 0; idx < n; ++idx) {
            const double a = static_cast<double>(idx % width);
            const double b = static_cast<double>(idx / width);
            const double* g = go + idx * chunk;
            if (px0->needs_grad())
                for (int64_t j = 0; j < chunk; ++j) px0->grad[static_cast<size_t>(j)] += g[j];
            if (ppx->needs_grad() && a != 0.0)
                for (int64_t j = 0; j < chunk; ++j) ppx->grad[static_cast<size_t>(j)] += a * g[j];
            if (ppy->needs_grad() && b != 0.0)
                for (int64_t j = 0; j < chunk; ++j) ppy->grad[static_cast<size_t>(j)] += b * g[j];
        }
    });
}

// --- tape-free helpers ---

std::vector<int> argmax_rows(const Tensor& logits) {
    check_defined(logits, "argmax_rows");
    if (logits.rank() != 2) throw ShapeError("argmax_rows: expected [B,C]");
    const int64_t b = logits.dim(0), c = logits.dim(1);
    const double* z = logits.data().data();
    std::vector<int> out(static_cast<size_t>(b));
    for (int64_t bb = 0; bb < b; ++bb) {
        const double* row = z + bb * c;
        int best = 0;
        for (int64_t j = 1; j < c; ++j)
            if (row[j] > row[best]) best = static_cast<int>(j);
        out[static_cast<size_t>(bb)] = best;
    }
    return out;
}

std::vector<double> softmax_rows(const Tensor& logits) {
    check_defined(logits, "softmax_rows");
    if (logits.rank() != 2) throw ShapeError("softmax_rows: expected [B,C]");
    const int64_t b = logits.dim(0), c = logits.dim(1);
    const double* z = logits.data().data();
    std::vector<double> out(static_cast<size_t>(b * c));
    for (int64_t bb = 0; bb < b; ++bb) {
        const double* row = z + bb * c;
        double m = row[0];
        for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
        for (int64_t j = 0; j < c; ++j)
            out[static_cast<size_t>(bb * c + j)] = std::exp(row[j] - m) / denom;
    }
    return out;
}

}  // namespace multiattack
