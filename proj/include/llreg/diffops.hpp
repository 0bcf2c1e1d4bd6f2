#pragma once

// Reverse-mode differentiation over dense tensors.
//
// Spatial tensors are channel-last: [D, H, W, C] with W (x) varying fastest
// among the spatial axes, matching the interleaved VOL1 payload. Token
// matrices are [N, C]. Scalars have shape {1}.
//
// A result records its parents and a backward closure only when gradient
// recording is enabled and at least one input requires a gradient, so frozen
// sub-graphs cost nothing beyond the forward pass.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace llreg::ad {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until materialized
    bool requires_grad = false;
    bool leaf = true;
    bool consumed = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Var constant(Shape shape, std::vector<T> data);
    static Var zeros(Shape shape);
    /// Leaf that accumulates gradients.
    static Var parameter(Shape shape, std::vector<T> data);

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int64_t dim(std::size_t i) const { return n_->shape.at(i); }
    std::size_t rank() const { return n_->shape.size(); }
    int64_t numel() const { return static_cast<int64_t>(n_->data.size()); }

    std::span<const T> data() const { return n_->data; }
    /// Direct write access; only meaningful for leaves (optimizer updates, loading).
    std::span<T> mutable_data() { return n_->data; }
    const std::vector<T>& values() const { return n_->data; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool on);
    bool has_grad() const { return !n_->grad.empty(); }
    std::span<const T> grad() const { return n_->grad; }
    void zero_grad() { std::vector<T>().swap(n_->grad); }

    bool is_leaf() const { return n_->leaf; }
    const char* op_name() const { return n_->op; }
    T item() const;

    /// Back-propagates from this scalar. The recorded graph is released
    /// afterwards; calling again on the same result throws.
    void backward();

    Node<T>* node() const { return n_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return n_; }

private:
    std::shared_ptr<Node<T>> n_;
};

/// Disables graph recording on this thread while alive.
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

// Elementwise
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> square(const Var<T>& a);
template <typename T> Var<T> leaky_relu(const Var<T>& a, T slope);
template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> gelu(const Var<T>& a);

// Reductions to shape {1}
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);

// Dense algebra
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& a);
/// x [N, in], weight [out, in], bias [out] (may be undefined) -> [N, out].
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// Volumetric
/// x [D,H,W,Ci], weight [3,3,3,Ci,Co], bias [Co]; kernel 3, padding 1, stride 1 or 2.
template <typename T> Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride);
/// x [D,H,W,Ci], weight [Ci,2,2,2,Co], bias [Co]; kernel 2, stride 2 -> [2D,2H,2W,Co].
template <typename T> Var<T> conv_transpose3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
/// Samples vol [D,H,W,C] at (x+ux, y+uy, z+uz) with disp [D,H,W,3], clamping
/// coordinates into the grid.
template <typename T> Var<T> gather_trilinear(const Var<T>& vol, const Var<T>& disp);
/// Voxel-centre aligned trilinear resampling of [D,H,W,C] to a new grid.
template <typename T> Var<T> resample_trilinear(const Var<T>& x, int64_t d, int64_t h, int64_t w);
/// [D,H,W,r^3*C] -> [rD,rH,rW,C]; input channel ((dz*r+dy)*r+dx)*C + c lands at sub-voxel (dz,dy,dx).
template <typename T> Var<T> voxel_shuffle(const Var<T>& x, int64_t r);

// Sequence / attention
template <typename T> Var<T> softmax(const Var<T>& x, int axis);
/// x [N, N]: entries above the diagonal become -inf.
template <typename T> Var<T> causal_mask(const Var<T>& x);
/// Normalizes over the last axis: x / sqrt(mean(x^2) + eps) * weight.
template <typename T> Var<T> rms_norm(const Var<T>& x, const Var<T>& weight, T eps);
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);
/// x [N, heads*head_dim]; row n is rotated by position n, adjacent pairs per head.
template <typename T> Var<T> rotary_embed(const Var<T>& x, int64_t head_dim, T base = T(10000));

// Structural
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, int axis);
template <typename T> Var<T> slice(const Var<T>& x, int axis, int64_t start, int64_t length);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

}  // namespace llreg::ad
