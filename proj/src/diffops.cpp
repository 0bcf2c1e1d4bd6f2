#include "llreg/diffops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace llreg::ad {

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

thread_local bool t_grad_enabled = true;

void check_shape(const Shape& s) {
    for (auto d : s)
        if (d < 1) throw ShapeError("non-positive dimension in shape " + shape_str(s));
}

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
bool needs_grad(const NodePtr<T>& n) {
    return n && n->requires_grad;
}

/// Builds the result node and attaches `fn` when any parent requires grad.
template <typename T, typename Fn>
Var<T> make_result(Shape shape, std::vector<T> data, const char* op, std::vector<NodePtr<T>> parents, Fn&& fn) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    n->leaf = false;
    bool any = false;
    for (auto& p : parents) any = any || needs_grad(p);
    if (t_grad_enabled && any) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::forward<Fn>(fn);
    }
    return Var<T>(std::move(n));
}

template <typename T>
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, T alpha, const T* a, int64_t lda, const T* b,
          int64_t ldb, T beta, T* c, int64_t ldc) {
    const auto TA = ta ? CblasTrans : CblasNoTrans;
    const auto TB = tb ? CblasTrans : CblasNoTrans;
    if constexpr (std::is_same_v<T, float>)
        cblas_sgemm(CblasRowMajor, TA, TB, int(m), int(n), int(k), alpha, a, int(lda), b, int(ldb), beta, c,
                    int(ldc));
    else
        cblas_dgemm(CblasRowMajor, TA, TB, int(m), int(n), int(k), alpha, a, int(lda), b, int(ldb), beta, c,
                    int(ldc));
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank(const Var<T>& a, std::size_t r, const char* op) {
    if (a.rank() != r)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(a.shape()));
}

int normalize_axis(int axis, std::size_t rank, const char* op) {
    const int r = static_cast<int>(rank);
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError(std::string(op) + ": invalid axis");
    return axis;
}

struct AxisSplit {
    int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
    AxisSplit a;
    for (int i = 0; i < axis; ++i) a.outer *= s[i];
    a.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

template <typename T, typename F>
Var<T> unary(const Var<T>& a, const char* op, F&& f) {
    // f(x) -> {y, dy/dx}
    const auto& x = a.values();
    std::vector<T> y(x.size());
    std::vector<T> dydx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        auto [v, d] = f(x[i]);
        y[i] = v;
        dydx[i] = d;
    }
    auto pa = a.node_ptr();
    return make_result<T>(a.shape(), std::move(y), op, {pa}, [pa, dydx = std::move(dydx)](Node<T>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < dydx.size(); ++i) pa->grad[i] += dydx[i] * self.grad[i];
    });
}

}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Var

template <typename T>
Var<T> Var<T>::constant(Shape shape, std::vector<T> data) {
    check_shape(shape);
    if (ad::numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return Var(std::move(n));
}

template <typename T>
Var<T> Var<T>::zeros(Shape shape) {
    check_shape(shape);
    const auto count = static_cast<std::size_t>(ad::numel(shape));
    return constant(std::move(shape), std::vector<T>(count, T(0)));
}

template <typename T>
Var<T> Var<T>::parameter(Shape shape, std::vector<T> data) {
    auto v = constant(std::move(shape), std::move(data));
    v.n_->requires_grad = true;
    return v;
}

template <typename T>
void Var<T>::set_requires_grad(bool on) {
    if (!n_->leaf) throw GraphError("requires_grad can only be changed on leaves");
    n_->requires_grad = on;
    if (!on) zero_grad();
}

template <typename T>
T Var<T>::item() const {
    if (n_->data.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(n_->shape));
    return n_->data[0];
}

template <typename T>
void Var<T>::backward() {
    if (n_->data.size() != 1) throw GraphError("backward() requires a scalar, got " + shape_str(n_->shape));
    if (n_->consumed) throw GraphError("backward() called twice on the same graph");
    if (!n_->requires_grad) throw GraphError("backward() on a value that does not require grad");

    // Iterative post-order DFS gives a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{n_.get(), 0}};
    seen.insert(n_.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    n_->ensure_grad();
    n_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->leaf) continue;
        if (node->backward && !node->grad.empty()) node->backward(*node);
        node->backward = nullptr;
        if (node != n_.get()) std::vector<T>().swap(node->grad);
    }
    for (auto* node : order)
        if (!node->leaf) node->parents.clear();
    n_->consumed = true;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "add");
    std::vector<T> y(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return make_result<T>(a.shape(), std::move(y), "add", {pa, pb}, [pa, pb](Node<T>& self) {
        for (auto& p : {pa, pb}) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "sub");
    std::vector<T> y(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return make_result<T>(a.shape(), std::move(y), "sub", {pa, pb}, [pa, pb](Node<T>& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "mul");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> y(av.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return make_result<T>(a.shape(), std::move(y), "mul", {pa, pb}, [pa, pb](Node<T>& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->data[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    std::vector<T> y(a.values());
    for (auto& v : y) v *= s;
    auto pa = a.node_ptr();
    return make_result<T>(a.shape(), std::move(y), "scale", {pa}, [pa, s](Node<T>& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += s * self.grad[i];
    });
}

template <typename T>
Var<T> square(const Var<T>& a) {
    return unary(a, "square", [](T x) { return std::pair<T, T>{x * x, T(2) * x}; });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
    return unary(a, "leaky_relu", [slope](T x) {
        return x > T(0) ? std::pair<T, T>{x, T(1)} : std::pair<T, T>{slope * x, slope};
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    return unary(a, "silu", [](T x) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return std::pair<T, T>{x * s, s * (T(1) + x * (T(1) - s))};
    });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
    return unary(a, "gelu", [](T x) {
        const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        return std::pair<T, T>{x * cdf, cdf + x * pdf};
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
    T acc = 0;
    for (T v : a.values()) acc += v;
    auto pa = a.node_ptr();
    return make_result<T>({1}, {acc}, "sum", {pa}, [pa](Node<T>& self) {
        pa->ensure_grad();
        for (auto& g : pa->grad) g += self.grad[0];
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    T acc = 0;
    for (T v : a.values()) acc += v;
    const T n = T(a.numel());
    auto pa = a.node_ptr();
    return make_result<T>({1}, {acc / n}, "mean", {pa}, [pa, n](Node<T>& self) {
        pa->ensure_grad();
        const T g = self.grad[0] / n;
        for (auto& v : pa->grad) v += g;
    });
}

// ---------------------------------------------------------------------------
// Dense algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<T> y(static_cast<std::size_t>(m * n));
    gemm<T>(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), y.data(), n);
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return make_result<T>({m, n}, std::move(y), "matmul", {pa, pb}, [pa, pb, m, n, k](Node<T>& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            gemm<T>(false, true, m, k, n, T(1), self.grad.data(), n, pb->data.data(), n, T(1), pa->grad.data(), k);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            gemm<T>(true, false, k, n, m, T(1), pa->data.data(), k, self.grad.data(), n, T(1), pb->grad.data(), n);
        }
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    require_rank(a, 2, "transpose");
    const int64_t m = a.dim(0), n = a.dim(1);
    const auto& x = a.values();
    std::vector<T> y(x.size());
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
    auto pa = a.node_ptr();
    return make_result<T>({n, m}, std::move(y), "transpose", {pa}, [pa, m, n](Node<T>& self) {
        pa->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    const int64_t n = x.dim(0), in = x.dim(1), out = weight.dim(0);
    if (weight.dim(1) != in)
        throw ShapeError("linear: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out))
        throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
    std::vector<T> y(static_cast<std::size_t>(n * out));
    if (bias.defined()) {
        const auto& b = bias.values();
        for (int64_t r = 0; r < n; ++r) std::copy(b.begin(), b.end(), y.begin() + r * out);
    }
    gemm<T>(false, true, n, out, in, T(1), x.data().data(), in, weight.data().data(), in,
            bias.defined() ? T(1) : T(0), y.data(), out);
    auto px = x.node_ptr(), pw = weight.node_ptr();
    NodePtr<T> pb = bias.defined() ? bias.node_ptr() : nullptr;
    std::vector<NodePtr<T>> parents{px, pw};
    if (pb) parents.push_back(pb);
    return make_result<T>({n, out}, std::move(y), "linear", std::move(parents), [px, pw, pb, n, in, out](Node<T>& self) {
        const T* g = self.grad.data();
        if (px->requires_grad) {
            px->ensure_grad();
            gemm<T>(false, false, n, in, out, T(1), g, out, pw->data.data(), in, T(1), px->grad.data(), in);
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            gemm<T>(true, false, out, in, n, T(1), g, out, px->data.data(), in, T(1), pw->grad.data(), in);
        }
        if (pb && pb->requires_grad) {
            pb->ensure_grad();
            for (int64_t r = 0; r < n; ++r)
                for (int64_t c = 0; c < out; ++c) pb->grad[c] += g[r * out + c];
        }
    });
}

// ---------------------------------------------------------------------------
// Volumetric

namespace {

struct ConvGeom {
    int64_t d, h, w, ci;      // input
    int64_t od, oh, ow, co;   // output
    int stride;
    int64_t in_voxels() const { return d * h * w; }
    int64_t out_voxels() const { return od * oh * ow; }
    int64_t k() const { return 27 * ci; }
};

// col[p, (kz*9 + ky*3 + kx) * Ci + ci]; out-of-range taps are zero.
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* col) {
    const int64_t K = g.k();
#pragma omp parallel for schedule(static)
    for (int64_t zo = 0; zo < g.od; ++zo) {
        for (int64_t yo = 0; yo < g.oh; ++yo) {
            for (int64_t xo = 0; xo < g.ow; ++xo) {
                const int64_t p = (zo * g.oh + yo) * g.ow + xo;
                T* row = col + p * K;
                for (int kz = 0; kz < 3; ++kz) {
                    const int64_t zi = zo * g.stride + kz - 1;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int64_t yi = yo * g.stride + ky - 1;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int64_t xi = xo * g.stride + kx - 1;
                            T* dst = row + ((kz * 3 + ky) * 3 + kx) * g.ci;
                            if (zi < 0 || zi >= g.d || yi < 0 || yi >= g.h || xi < 0 || xi >= g.w) {
                                std::fill(dst, dst + g.ci, T(0));
                            } else {
                                const T* src = x + ((zi * g.h + yi) * g.w + xi) * g.ci;
                                std::copy(src, src + g.ci, dst);
                            }
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add of col back onto the input grid. For a fixed tap the map from
// output voxel to input voxel is injective, so each tap is a race-free pass
// and the accumulation order is independent of the thread count.
template <typename T>
void col2im(const ConvGeom& g, const T* col, T* gx) {
    const int64_t K = g.k();
    for (int tap = 0; tap < 27; ++tap) {
        const int kz = tap / 9, ky = (tap / 3) % 3, kx = tap % 3;
#pragma omp parallel for schedule(static)
        for (int64_t zo = 0; zo < g.od; ++zo) {
            const int64_t zi = zo * g.stride + kz - 1;
            if (zi < 0 || zi >= g.d) continue;
            for (int64_t yo = 0; yo < g.oh; ++yo) {
                const int64_t yi = yo * g.stride + ky - 1;
                if (yi < 0 || yi >= g.h) continue;
                for (int64_t xo = 0; xo < g.ow; ++xo) {
                    const int64_t xi = xo * g.stride + kx - 1;
                    if (xi < 0 || xi >= g.w) continue;
                    const int64_t p = (zo * g.oh + yo) * g.ow + xo;
                    const T* src = col + p * K + tap * g.ci;
                    T* dst = gx + ((zi * g.h + yi) * g.w + xi) * g.ci;
                    for (int64_t c = 0; c < g.ci; ++c) dst[c] += src[c];
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride) {
    require_rank(x, 4, "conv3d");
    if (stride != 1 && stride != 2) throw ShapeError("conv3d: stride must be 1 or 2");
    const int64_t ci = x.dim(3);
    if (weight.rank() != 5 || weight.dim(0) != 3 || weight.dim(1) != 3 || weight.dim(2) != 3 || weight.dim(3) != ci)
        throw ShapeError("conv3d: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
    const int64_t co = weight.dim(4);
    if (!bias.defined() || bias.rank() != 1 || bias.dim(0) != co) throw ShapeError("conv3d: bias must be [Co]");

    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), ci, 0, 0, 0, co, stride};
    g.od = (g.d - 1) / stride + 1;
    g.oh = (g.h - 1) / stride + 1;
    g.ow = (g.w - 1) / stride + 1;
    const int64_t P = g.out_voxels(), K = g.k();

    auto col = std::make_shared<std::vector<T>>(static_cast<std::size_t>(P * K));
    im2col(g, x.data().data(), col->data());
    std::vector<T> y(static_cast<std::size_t>(P * co));
    const auto& b = bias.values();
    for (int64_t p = 0; p < P; ++p) std::copy(b.begin(), b.end(), y.begin() + p * co);
    gemm<T>(false, false, P, co, K, T(1), col->data(), K, weight.data().data(), co, T(1), y.data(), co);

    auto px = x.node_ptr(), pw = weight.node_ptr(), pb = bias.node_ptr();
    if (!pw->requires_grad) col.reset();
    return make_result<T>({g.od, g.oh, g.ow, co}, std::move(y), "conv3d", {px, pw, pb},
                          [px, pw, pb, g, col](Node<T>& self) {
                              const int64_t P = g.out_voxels(), K = g.k();
                              const T* gy = self.grad.data();
                              if (pw->requires_grad) {
                                  pw->ensure_grad();
                                  gemm<T>(true, false, K, g.co, P, T(1), col->data(), K, gy, g.co, T(1),
                                          pw->grad.data(), g.co);
                              }
                              if (pb->requires_grad) {
                                  pb->ensure_grad();
                                  for (int64_t p = 0; p < P; ++p)
                                      for (int64_t c = 0; c < g.co; ++c) pb->grad[c] += gy[p * g.co + c];
                              }
                              if (px->requires_grad) {
                                  px->ensure_grad();
                                  std::vector<T> gcol(static_cast<std::size_t>(P * K));
                                  gemm<T>(false, true, P, K, g.co, T(1), gy, g.co, pw->data.data(), g.co, T(0),
                                          gcol.data(), K);
                                  col2im(g, gcol.data(), px->grad.data());
                              }
                          });
}

template <typename T>
Var<T> conv_transpose3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    require_rank(x, 4, "conv_transpose3d");
    const int64_t d = x.dim(0), h = x.dim(1), w = x.dim(2), ci = x.dim(3);
    if (weight.rank() != 5 || weight.dim(0) != ci || weight.dim(1) != 2 || weight.dim(2) != 2 || weight.dim(3) != 2)
        throw ShapeError("conv_transpose3d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
    const int64_t co = weight.dim(4);
    if (!bias.defined() || bias.rank() != 1 || bias.dim(0) != co)
        throw ShapeError("conv_transpose3d: bias must be [Co]");
    const int64_t P = d * h * w, N = 8 * co;

    std::vector<T> cols(static_cast<std::size_t>(P * N));
    gemm<T>(false, false, P, N, ci, T(1), x.data().data(), ci, weight.data().data(), N, T(0), cols.data(), N);

    const int64_t od = 2 * d, oh = 2 * h, ow = 2 * w;
    std::vector<T> y(static_cast<std::size_t>(od * oh * ow * co));
    const auto& b = bias.values();
    // out voxel (2z+dz, 2y+dy, 2x+dx) takes column block k = (dz*2+dy)*2+dx.
    auto out_index = [=](int64_t z, int64_t yy, int64_t xx, int k) {
        const int64_t dz = k >> 2, dy = (k >> 1) & 1, dx = k & 1;
        return (((2 * z + dz) * oh + (2 * yy + dy)) * ow + (2 * xx + dx)) * co;
    };
    for (int64_t z = 0; z < d; ++z)
        for (int64_t yy = 0; yy < h; ++yy)
            for (int64_t xx = 0; xx < w; ++xx) {
                const int64_t p = (z * h + yy) * w + xx;
                for (int k = 0; k < 8; ++k) {
                    const T* src = cols.data() + p * N + k * co;
                    T* dst = y.data() + out_index(z, yy, xx, k);
                    for (int64_t c = 0; c < co; ++c) dst[c] = src[c] + b[c];
                }
            }

    auto px = x.node_ptr(), pw = weight.node_ptr(), pb = bias.node_ptr();
    return make_result<T>({od, oh, ow, co}, std::move(y), "conv_transpose3d", {px, pw, pb},
                          [px, pw, pb, d, h, w, ci, co, P, N, out_index](Node<T>& self) {
                              std::vector<T> gcols(static_cast<std::size_t>(P * N));
                              for (int64_t z = 0; z < d; ++z)
                                  for (int64_t yy = 0; yy < h; ++yy)
                                      for (int64_t xx = 0; xx < w; ++xx) {
                                          const int64_t p = (z * h + yy) * w + xx;
                                          for (int k = 0; k < 8; ++k) {
                                              const T* src = self.grad.data() + out_index(z, yy, xx, k);
                                              std::copy(src, src + co, gcols.data() + p * N + k * co);
                                          }
                                      }
                              if (px->requires_grad) {
                                  px->ensure_grad();
                                  gemm<T>(false, true, P, ci, N, T(1), gcols.data(), N, pw->data.data(), N, T(1),
                                          px->grad.data(), ci);
                              }
                              if (pw->requires_grad) {
                                  pw->ensure_grad();
                                  gemm<T>(true, false, ci, N, P, T(1), px->data.data(), ci, gcols.data(), N, T(1),
                                          pw->grad.data(), N);
                              }
                              if (pb->requires_grad) {
                                  pb->ensure_grad();
                                  for (int64_t r = 0; r < P * 8; ++r)
                                      for (int64_t c = 0; c < co; ++c) pb->grad[c] += gcols[r * co + c];
                              }
                          });
}

namespace {

template <typename T>
struct Tap {
    int64_t i0, i1;
    T f;
    T dc;  // d(clamped)/d(raw): 0 when clamped
};

template <typename T>
Tap<T> clamp_tap(T c, int64_t n) {
    T dc = T(1);
    const T hi = T(n - 1);
    if (c < T(0)) {
        c = T(0);
        dc = T(0);
    } else if (c > hi) {
        c = hi;
        dc = T(0);
    }
    int64_t i0 = static_cast<int64_t>(std::floor(c));
    i0 = std::min(i0, n - 1);
    return {i0, std::min(i0 + 1, n - 1), c - T(i0), dc};
}

template <typename T>
inline T lerp(T a, T b, T f) {
    return a + f * (b - a);
}

}  // namespace

template <typename T>
Var<T> gather_trilinear(const Var<T>& vol, const Var<T>& disp) {
    require_rank(vol, 4, "gather_trilinear");
    require_rank(disp, 4, "gather_trilinear");
    const int64_t d = vol.dim(0), h = vol.dim(1), w = vol.dim(2), C = vol.dim(3);
    if (disp.dim(0) != d || disp.dim(1) != h || disp.dim(2) != w || disp.dim(3) != 3)
        throw ShapeError("gather_trilinear: geometry mismatch " + shape_str(vol.shape()) + " vs field " +
                         shape_str(disp.shape()));
    const T* v = vol.data().data();
    const T* u = disp.data().data();
    const int64_t P = d * h * w;
    std::vector<T> y(static_cast<std::size_t>(P * C));
    auto at = [=](int64_t z, int64_t yy, int64_t xx) { return ((z * h + yy) * w + xx) * C; };

#pragma omp parallel for schedule(static)
    for (int64_t z = 0; z < d; ++z)
        for (int64_t yy = 0; yy < h; ++yy)
            for (int64_t xx = 0; xx < w; ++xx) {
                const int64_t p = (z * h + yy) * w + xx;
                const auto tx = clamp_tap<T>(T(xx) + u[3 * p], w);
                const auto ty = clamp_tap<T>(T(yy) + u[3 * p + 1], h);
                const auto tz = clamp_tap<T>(T(z) + u[3 * p + 2], d);
                const T* v000 = v + at(tz.i0, ty.i0, tx.i0);
                const T* v001 = v + at(tz.i0, ty.i0, tx.i1);
                const T* v010 = v + at(tz.i0, ty.i1, tx.i0);
                const T* v011 = v + at(tz.i0, ty.i1, tx.i1);
                const T* v100 = v + at(tz.i1, ty.i0, tx.i0);
                const T* v101 = v + at(tz.i1, ty.i0, tx.i1);
                const T* v110 = v + at(tz.i1, ty.i1, tx.i0);
                const T* v111 = v + at(tz.i1, ty.i1, tx.i1);
                T* out = y.data() + p * C;
                for (int64_t c = 0; c < C; ++c) {
                    const T c00 = lerp(v000[c], v001[c], tx.f), c01 = lerp(v010[c], v011[c], tx.f);
                    const T c10 = lerp(v100[c], v101[c], tx.f), c11 = lerp(v110[c], v111[c], tx.f);
                    out[c] = lerp(lerp(c00, c01, ty.f), lerp(c10, c11, ty.f), tz.f);
                }
            }

    auto pv = vol.node_ptr(), pu = disp.node_ptr();
    return make_result<T>(vol.shape(), std::move(y), "gather_trilinear", {pv, pu},
                          [pv, pu, d, h, w, C, at](Node<T>& self) {
                              const T* v = pv->data.data();
                              const T* u = pu->data.data();
                              const T* g = self.grad.data();
                              if (pv->requires_grad) pv->ensure_grad();
                              if (pu->requires_grad) pu->ensure_grad();
                              for (int64_t z = 0; z < d; ++z)
                                  for (int64_t yy = 0; yy < h; ++yy)
                                      for (int64_t xx = 0; xx < w; ++xx) {
                                          const int64_t p = (z * h + yy) * w + xx;
                                          const auto tx = clamp_tap<T>(T(xx) + u[3 * p], w);
                                          const auto ty = clamp_tap<T>(T(yy) + u[3 * p + 1], h);
                                          const auto tz = clamp_tap<T>(T(z) + u[3 * p + 2], d);
                                          const int64_t off[8] = {
                                              at(tz.i0, ty.i0, tx.i0), at(tz.i0, ty.i0, tx.i1),
                                              at(tz.i0, ty.i1, tx.i0), at(tz.i0, ty.i1, tx.i1),
                                              at(tz.i1, ty.i0, tx.i0), at(tz.i1, ty.i0, tx.i1),
                                              at(tz.i1, ty.i1, tx.i0), at(tz.i1, ty.i1, tx.i1)};
                                          const T wx[2] = {T(1) - tx.f, tx.f};
                                          const T wy[2] = {T(1) - ty.f, ty.f};
                                          const T wz[2] = {T(1) - tz.f, tz.f};
                                          const T* gp = g + p * C;
                                          if (pv->requires_grad) {
                                              for (int k = 0; k < 8; ++k) {
                                                  const T wk = wz[k >> 2] * wy[(k >> 1) & 1] * wx[k & 1];
                                                  T* dst = pv->grad.data() + off[k];
                                                  for (int64_t c = 0; c < C; ++c) dst[c] += wk * gp[c];
                                              }
                                          }
                                          if (pu->requires_grad) {
                                              T gx = 0, gy = 0, gz = 0;
                                              for (int64_t c = 0; c < C; ++c) {
                                                  T s[8];
                                                  for (int k = 0; k < 8; ++k) s[k] = v[off[k] + c];
                                                  // d/dfx: differences along x, weighted in y,z
                                                  const T dfx = wz[0] * (wy[0] * (s[1] - s[0]) + wy[1] * (s[3] - s[2])) +
                                                                wz[1] * (wy[0] * (s[5] - s[4]) + wy[1] * (s[7] - s[6]));
                                                  const T dfy = wz[0] * (wx[0] * (s[2] - s[0]) + wx[1] * (s[3] - s[1])) +
                                                                wz[1] * (wx[0] * (s[6] - s[4]) + wx[1] * (s[7] - s[5]));
                                                  const T dfz = wy[0] * (wx[0] * (s[4] - s[0]) + wx[1] * (s[5] - s[1])) +
                                                                wy[1] * (wx[0] * (s[6] - s[2]) + wx[1] * (s[7] - s[3]));
                                                  gx += gp[c] * dfx;
                                                  gy += gp[c] * dfy;
                                                  gz += gp[c] * dfz;
                                              }
                                              pu->grad[3 * p] += gx * tx.dc;
                                              pu->grad[3 * p + 1] += gy * ty.dc;
                                              pu->grad[3 * p + 2] += gz * tz.dc;
                                          }
                                      }
                          });
}

namespace {

template <typename T>
std::vector<Tap<T>> resample_taps(int64_t n_src, int64_t n_dst) {
    std::vector<Tap<T>> taps(static_cast<std::size_t>(n_dst));
    for (int64_t t = 0; t < n_dst; ++t) {
        const double c = double((2 * t + 1) * n_src - n_dst) / double(2 * n_dst);
        taps[t] = clamp_tap<T>(static_cast<T>(c), n_src);
    }
    return taps;
}

}  // namespace

template <typename T>
Var<T> resample_trilinear(const Var<T>& x, int64_t od, int64_t oh, int64_t ow) {
    require_rank(x, 4, "resample_trilinear");
    if (od < 1 || oh < 1 || ow < 1) throw ShapeError("resample_trilinear: target dims must be >= 1");
    const int64_t d = x.dim(0), h = x.dim(1), w = x.dim(2), C = x.dim(3);
    auto tz = resample_taps<T>(d, od), ty = resample_taps<T>(h, oh), tx = resample_taps<T>(w, ow);
    const T* v = x.data().data();
    auto at = [=](int64_t z, int64_t yy, int64_t xx) { return ((z * h + yy) * w + xx) * C; };
    std::vector<T> y(static_cast<std::size_t>(od * oh * ow * C));
#pragma omp parallel for schedule(static)
    for (int64_t z = 0; z < od; ++z)
        for (int64_t yy = 0; yy < oh; ++yy)
            for (int64_t xx = 0; xx < ow; ++xx) {
                const auto &cz = tz[z], &cy = ty[yy], &cx = tx[xx];
                T* out = y.data() + ((z * oh + yy) * ow + xx) * C;
                for (int64_t c = 0; c < C; ++c) {
                    const T c00 = lerp(v[at(cz.i0, cy.i0, cx.i0) + c], v[at(cz.i0, cy.i0, cx.i1) + c], cx.f);
                    const T c01 = lerp(v[at(cz.i0, cy.i1, cx.i0) + c], v[at(cz.i0, cy.i1, cx.i1) + c], cx.f);
                    const T c10 = lerp(v[at(cz.i1, cy.i0, cx.i0) + c], v[at(cz.i1, cy.i0, cx.i1) + c], cx.f);
                    const T c11 = lerp(v[at(cz.i1, cy.i1, cx.i0) + c], v[at(cz.i1, cy.i1, cx.i1) + c], cx.f);
                    out[c] = lerp(lerp(c00, c01, cy.f), lerp(c10, c11, cy.f), cz.f);
                }
            }
    auto px = x.node_ptr();
    return make_result<T>({od, oh, ow, C}, std::move(y), "resample_trilinear", {px},
                          [px, tz = std::move(tz), ty = std::move(ty), tx = std::move(tx), od, oh, ow, C,
                           at](Node<T>& self) {
                              px->ensure_grad();
                              T* gx = px->grad.data();
                              for (int64_t z = 0; z < od; ++z)
                                  for (int64_t yy = 0; yy < oh; ++yy)
                                      for (int64_t xx = 0; xx < ow; ++xx) {
                                          const auto &cz = tz[z], &cy = ty[yy], &cx = tx[xx];
                                          const T* g = self.grad.data() + ((z * oh + yy) * ow + xx) * C;
                                          const int64_t zs[2] = {cz.i0, cz.i1}, ys[2] = {cy.i0, cy.i1},
                                                        xs[2] = {cx.i0, cx.i1};
                                          const T wz[2] = {T(1) - cz.f, cz.f}, wy[2] = {T(1) - cy.f, cy.f},
                                                  wx[2] = {T(1) - cx.f, cx.f};
                                          for (int k = 0; k < 8; ++k) {
                                              const T wk = wz[k >> 2] * wy[(k >> 1) & 1] * wx[k & 1];
                                              T* dst = gx + at(zs[k >> 2], ys[(k >> 1) & 1], xs[k & 1]);
                                              for (int64_t c = 0; c < C; ++c) dst[c] += wk * g[c];
                                          }
                                      }
                          });
}

template <typename T>
Var<T> voxel_shuffle(const Var<T>& x, int64_t r) {
    require_rank(x, 4, "voxel_shuffle");
    if (r < 1) throw ShapeError("voxel_shuffle: factor must be >= 1");
    const int64_t d = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
    const int64_t r3 = r * r * r;
    if (cin % r3 != 0)
        throw ShapeError("voxel_shuffle: " + std::to_string(cin) + " channels not divisible by " + std::to_string(r3));
    const int64_t C = cin / r3, od = d * r, oh = h * r, ow = w * r;
    // Index map from output element to input element.
    auto index = std::make_shared<std::vector<int64_t>>(static_cast<std::size_t>(x.numel()));
    for (int64_t z = 0; z < od; ++z)
        for (int64_t yy = 0; yy < oh; ++yy)
            for (int64_t xx = 0; xx < ow; ++xx) {
                const int64_t sub = ((z % r) * r + (yy % r)) * r + (xx % r);
                const int64_t src = (((z / r) * h + yy / r) * w + xx / r) * cin + sub * C;
                const int64_t dst = ((z * oh + yy) * ow + xx) * C;
                for (int64_t c = 0; c < C; ++c) (*index)[dst + c] = src + c;
            }
    const auto& xv = x.values();
    std::vector<T> y(xv.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[(*index)[i]];
    auto px = x.node_ptr();
    return make_result<T>({od, oh, ow, C}, std::move(y), "voxel_shuffle", {px}, [px, index](Node<T>& self) {
        px->ensure_grad();
        for (std::size_t i = 0; i < index->size(); ++i) px->grad[(*index)[i]] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Sequence / attention

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
    axis = normalize_axis(axis, x.rank(), "softmax");
    const auto s = split_axis(x.shape(), axis);
    const auto& xv = x.values();
    std::vector<T> y(xv.size());
    for (int64_t o = 0; o < s.outer; ++o)
        for (int64_t in = 0; in < s.inner; ++in) {
            const int64_t base = o * s.extent * s.inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (int64_t e = 0; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
            T z = 0;
            for (int64_t e = 0; e < s.extent; ++e) {
                const T ev = std::exp(xv[base + e * s.inner] - mx);
                y[base + e * s.inner] = ev;
                z += ev;
            }
            for (int64_t e = 0; e < s.extent; ++e) y[base + e * s.inner] /= z;
        }
    auto px = x.node_ptr();
    return make_result<T>(x.shape(), std::move(y), "softmax", {px}, [px, s](Node<T>& self) {
        px->ensure_grad();
        // the node's own data holds the softmax output
        const auto& yv = self.data;
        for (int64_t o = 0; o < s.outer; ++o)
            for (int64_t in = 0; in < s.inner; ++in) {
                const int64_t base = o * s.extent * s.inner + in;
                T dot = 0;
                for (int64_t e = 0; e < s.extent; ++e) dot += self.grad[base + e * s.inner] * yv[base + e * s.inner];
                for (int64_t e = 0; e < s.extent; ++e) {
                    const int64_t i = base + e * s.inner;
                    px->grad[i] += yv[i] * (self.grad[i] - dot);
                }
            }
    });
}

template <typename T>
Var<T> causal_mask(const Var<T>& x) {
    require_rank(x, 2, "causal_mask");
    const int64_t n = x.dim(0), m = x.dim(1);
    std::vector<T> y(x.values());
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < m; ++j) y[i * m + j] = -std::numeric_limits<T>::infinity();
    auto px = x.node_ptr();
    return make_result<T>(x.shape(), std::move(y), "causal_mask", {px}, [px, n, m](Node<T>& self) {
        px->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j <= std::min(i, m - 1); ++j) px->grad[i * m + j] += self.grad[i * m + j];
    });
}

template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& weight, T eps) {
    if (x.rank() < 1) throw ShapeError("rms_norm: rank 0 input");
    const int64_t dmod = x.shape().back();
    if (weight.rank() != 1 || weight.dim(0) != dmod) throw ShapeError("rms_norm: weight must be [" + std::to_string(dmod) + "]");
    const int64_t rows = x.numel() / dmod;
    const auto& xv = x.values();
    const auto& wv = weight.values();
    std::vector<T> y(xv.size()), inv(static_cast<std::size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * dmod;
        T ss = 0;
        for (int64_t j = 0; j < dmod; ++j) ss += xr[j] * xr[j];
        inv[r] = T(1) / std::sqrt(ss / T(dmod) + eps);
        for (int64_t j = 0; j < dmod; ++j) y[r * dmod + j] = xr[j] * inv[r] * wv[j];
    }
    auto px = x.node_ptr(), pw = weight.node_ptr();
    return make_result<T>(x.shape(), std::move(y), "rms_norm", {px, pw},
                          [px, pw, rows, dmod, inv = std::move(inv)](Node<T>& self) {
                              const T* xv = px->data.data();
                              const T* wv = pw->data.data();
                              if (pw->requires_grad) pw->ensure_grad();
                              if (px->requires_grad) px->ensure_grad();
                              for (int64_t r = 0; r < rows; ++r) {
                                  const T* xr = xv + r * dmod;
                                  const T* g = self.grad.data() + r * dmod;
                                  if (pw->requires_grad)
                                      for (int64_t j = 0; j < dmod; ++j) pw->grad[j] += g[j] * xr[j] * inv[r];
                                  if (px->requires_grad) {
                                      T dot = 0;
                                      for (int64_t j = 0; j < dmod; ++j) dot += g[j] * wv[j] * xr[j];
                                      const T c = inv[r] * inv[r] * inv[r] * dot / T(dmod);
                                      for (int64_t j = 0; j < dmod; ++j)
                                          px->grad[r * dmod + j] += inv[r] * wv[j] * g[j] - c * xr[j];
                                  }
                              }
                          });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank 0 input");
    const int64_t dmod = x.shape().back();
    if (gamma.rank() != 1 || gamma.dim(0) != dmod || beta.rank() != 1 || beta.dim(0) != dmod)
        throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(dmod) + "]");
    const int64_t rows = x.numel() / dmod;
    const auto& xv = x.values();
    std::vector<T> y(xv.size()), xhat(xv.size()), inv(static_cast<std::size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * dmod;
        T mu = 0;
        for (int64_t j = 0; j < dmod; ++j) mu += xr[j];
        mu /= T(dmod);
        T var = 0;
        for (int64_t j = 0; j < dmod; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= T(dmod);
        inv[r] = T(1) / std::sqrt(var + eps);
        for (int64_t j = 0; j < dmod; ++j) {
            xhat[r * dmod + j] = (xr[j] - mu) * inv[r];
            y[r * dmod + j] = xhat[r * dmod + j] * gamma.values()[j] + beta.values()[j];
        }
    }
    auto px = x.node_ptr(), pg = gamma.node_ptr(), pb = beta.node_ptr();
    return make_result<T>(x.shape(), std::move(y), "layer_norm", {px, pg, pb},
                          [px, pg, pb, rows, dmod, xhat = std::move(xhat), inv = std::move(inv)](Node<T>& self) {
                              for (auto& p : {px, pg, pb})
                                  if (p->requires_grad) p->ensure_grad();
                              for (int64_t r = 0; r < rows; ++r) {
                                  const T* g = self.grad.data() + r * dmod;
                                  const T* xh = xhat.data() + r * dmod;
                                  T m1 = 0, m2 = 0;
                                  for (int64_t j = 0; j < dmod; ++j) {
                                      if (pg->requires_grad) pg->grad[j] += g[j] * xh[j];
                                      if (pb->requires_grad) pb->grad[j] += g[j];
                                      const T gh = g[j] * pg->data[j];
                                      m1 += gh;
                                      m2 += gh * xh[j];
                                  }
                                  if (!px->requires_grad) continue;
                                  m1 /= T(dmod);
                                  m2 /= T(dmod);
                                  for (int64_t j = 0; j < dmod; ++j) {
                                      const T gh = g[j] * pg->data[j];
                                      px->grad[r * dmod + j] += inv[r] * (gh - m1 - xh[j] * m2);
                                  }
                              }
                          });
}

template <typename T>
Var<T> rotary_embed(const Var<T>& x, int64_t head_dim, T base) {
    require_rank(x, 2, "rotary_embed");
    const int64_t n = x.dim(0), dmod = x.dim(1);
    if (head_dim < 2 || head_dim % 2 != 0 || dmod % head_dim != 0)
        throw ShapeError("rotary_embed: width " + std::to_string(dmod) + " incompatible with head_dim " +
                         std::to_string(head_dim));
    const int64_t half = head_dim / 2;
    std::vector<T> cs(static_cast<std::size_t>(n * half)), sn(cs.size());
    for (int64_t pos = 0; pos < n; ++pos)
        for (int64_t j = 0; j < half; ++j) {
            const T theta = T(pos) * std::pow(base, -T(2 * j) / T(head_dim));
            cs[pos * half + j] = std::cos(theta);
            sn[pos * half + j] = std::sin(theta);
        }
    const auto& xv = x.values();
    std::vector<T> y(xv.size());
    for (int64_t pos = 0; pos < n; ++pos)
        for (int64_t c = 0; c < dmod; c += 2) {
            const int64_t j = (c % head_dim) / 2;
            const T co = cs[pos * half + j], si = sn[pos * half + j];
            const T a = xv[pos * dmod + c], b = xv[pos * dmod + c + 1];
            y[pos * dmod + c] = a * co - b * si;
            y[pos * dmod + c + 1] = a * si + b * co;
        }
    auto px = x.node_ptr();
    return make_result<T>(x.shape(), std::move(y), "rotary_embed", {px},
                          [px, n, dmod, head_dim, half, cs = std::move(cs), sn = std::move(sn)](Node<T>& self) {
                              px->ensure_grad();
                              for (int64_t pos = 0; pos < n; ++pos)
                                  for (int64_t c = 0; c < dmod; c += 2) {
                                      const int64_t j = (c % head_dim) / 2;
                                      const T co = cs[pos * half + j], si = sn[pos * half + j];
                                      const T ga = self.grad[pos * dmod + c], gb = self.grad[pos * dmod + c + 1];
                                      px->grad[pos * dmod + c] += ga * co + gb * si;
                                      px->grad[pos * dmod + c + 1] += -ga * si + gb * co;
                                  }
                          });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    axis = normalize_axis(axis, parts[0].rank(), "concat");
    Shape out_shape = parts[0].shape();
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < p.rank(); ++i)
            if (int(i) != axis && p.dim(i) != parts[0].dim(i))
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
        out_shape[axis] += p.dim(axis);
    }
    const auto so = split_axis(out_shape, axis);
    std::vector<T> y(static_cast<std::size_t>(numel(out_shape)));
    std::vector<int64_t> offsets;
    int64_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const int64_t chunk = p.dim(axis) * so.inner;
        const T* src = p.data().data();
        for (int64_t o = 0; o < so.outer; ++o)
            std::copy(src + o * chunk, src + (o + 1) * chunk, y.data() + o * so.extent * so.inner + off * so.inner);
        off += p.dim(axis);
    }
    std::vector<NodePtr<T>> parents;
    std::vector<int64_t> extents;
    for (const auto& p : parts) {
        parents.push_back(p.node_ptr());
        extents.push_back(p.dim(axis));
    }
    auto captured = parents;
    return make_result<T>(out_shape, std::move(y), "concat", std::move(parents),
                          [captured, offsets, extents, so](Node<T>& self) {
                              for (std::size_t i = 0; i < captured.size(); ++i) {
                                  auto& p = captured[i];
                                  if (!p->requires_grad) continue;
                                  p->ensure_grad();
                                  const int64_t chunk = extents[i] * so.inner;
                                  for (int64_t o = 0; o < so.outer; ++o) {
                                      const T* src = self.grad.data() + o * so.extent * so.inner + offsets[i] * so.inner;
                                      T* dst = p->grad.data() + o * chunk;
                                      for (int64_t k = 0; k < chunk; ++k) dst[k] += src[k];
                                  }
                              }
                          });
}

template <typename T>
Var<T> slice(const Var<T>& x, int axis, int64_t start, int64_t length) {
    axis = normalize_axis(axis, x.rank(), "slice");
    if (start < 0 || length < 1 || start + length > x.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis of extent " + std::to_string(x.dim(axis)));
    const auto s = split_axis(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    const int64_t chunk = length * s.inner;
    std::vector<T> y(static_cast<std::size_t>(s.outer * chunk));
    const T* src = x.data().data();
    for (int64_t o = 0; o < s.outer; ++o)
        std::copy(src + o * s.extent * s.inner + start * s.inner, src + o * s.extent * s.inner + start * s.inner + chunk,
                  y.data() + o * chunk);
    auto px = x.node_ptr();
    return make_result<T>(out_shape, std::move(y), "slice", {px}, [px, s, start, chunk](Node<T>& self) {
        px->ensure_grad();
        for (int64_t o = 0; o < s.outer; ++o) {
            T* dst = px->grad.data() + o * s.extent * s.inner + start * s.inner;
            const T* g = self.grad.data() + o * chunk;
            for (int64_t k = 0; k < chunk; ++k) dst[k] += g[k];
        }
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    check_shape(shape);
    if (numel(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    auto px = x.node_ptr();
    return make_result<T>(std::move(shape), x.values(), "reshape", {px}, [px](Node<T>& self) {
        px->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Explicit instantiation for the runtime (float) and checking (double) types.

#define LLREG_INSTANTIATE(T)                                                                  \
    template class Var<T>;                                                                    \
    template Var<T> add(const Var<T>&, const Var<T>&);                                        \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                        \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                        \
    template Var<T> scale(const Var<T>&, T);                                                  \
    template Var<T> square(const Var<T>&);                                                    \
    template Var<T> leaky_relu(const Var<T>&, T);                                             \
    template Var<T> silu(const Var<T>&);                                                      \
    template Var<T> gelu(const Var<T>&);                                                      \
    template Var<T> sum(const Var<T>&);                                                       \
    template Var<T> mean(const Var<T>&);                                                      \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                     \
    template Var<T> transpose(const Var<T>&);                                                 \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                      \
    template Var<T> conv3d(const Var<T>&, const Var<T>&, const Var<T>&, int);                 \
    template Var<T> conv_transpose3d(const Var<T>&, const Var<T>&, const Var<T>&);            \
    template Var<T> gather_trilinear(const Var<T>&, const Var<T>&);                           \
    template Var<T> resample_trilinear(const Var<T>&, int64_t, int64_t, int64_t);             \
    template Var<T> voxel_shuffle(const Var<T>&, int64_t);                                    \
    template Var<T> softmax(const Var<T>&, int);                                              \
    template Var<T> causal_mask(const Var<T>&);                                               \
    template Var<T> rms_norm(const Var<T>&, const Var<T>&, T);                                \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);               \
    template Var<T> rotary_embed(const Var<T>&, int64_t, T);                                  \
    template Var<T> concat(const std::vector<Var<T>>&, int);                                  \
    template Var<T> slice(const Var<T>&, int, int64_t, int64_t);                              \
    template Var<T> reshape(const Var<T>&, Shape);

LLREG_INSTANTIATE(float)
LLREG_INSTANTIATE(double)

#undef LLREG_INSTANTIATE

}  // namespace llreg::ad
