#pragma once

// Reverse-mode automatic differentiation over dense tensors. Dynamic graph:
// each op allocates a node holding the forward value and a closure that
// accumulates gradients into its inputs. Graphs are single-worker;
// independent graphs may run concurrently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "p2tag/rng.hpp"
#include "p2tag/tensor.hpp"

namespace p2tag {

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf checks after every forward value and backward pass; can be
// switched off for hot loops once a configuration is trusted
inline bool& finite_checks_enabled() {
    static bool on = true;
    return on;
}

template <typename R>
void check_finite(const Tensor<R>& t, const char* what) {
    if (!finite_checks_enabled()) return;
    if (!t.all_finite()) throw NumericError(std::string(what) + ": non-finite value");
}

template <typename R>
struct VarNode {
    Tensor<R> value;
    Tensor<R> grad;  // empty until backward touches it
    bool requires_grad = false;
    std::vector<std::shared_ptr<VarNode<R>>> inputs;
    std::function<void(VarNode<R>&)> backprop;

    void ensure_grad() {
        if (grad.empty()) grad = Tensor<R>::zeros(value.shape);
    }
};

template <typename R>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<VarNode<R>> n) : node_(std::move(n)) {}

    static Var leaf(Tensor<R> value, bool requires_grad) {
        auto n = std::make_shared<VarNode<R>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<R>& value() const { return node_->value; }
    Tensor<R>& value() { return node_->value; }  // in-place updates for optimizers
    const Tensor<R>& grad() const { return node_->grad; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    void zero_grad() { node_->grad = Tensor<R>(); }
    const Shape& shape() const { return node_->value.shape; }
    std::int64_t numel() const { return node_->value.numel(); }

    std::shared_ptr<VarNode<R>> node() const { return node_; }
    VarNode<R>* raw() const { return node_.get(); }

private:
    std::shared_ptr<VarNode<R>> node_;
};

template <typename R>
Var<R> constant(Tensor<R> value) {
    return Var<R>::leaf(std::move(value), false);
}

template <typename R>
Var<R> parameter(Tensor<R> value) {
    return Var<R>::leaf(std::move(value), true);
}

namespace detail {

template <typename R>
Var<R> make_op(Tensor<R> value, std::vector<Var<R>> inputs,
               std::function<void(VarNode<R>&)> backprop, const char* name) {
    check_finite(value, name);
    auto n = std::make_shared<VarNode<R>>();
    n->value = std::move(value);
    for (const auto& in : inputs)
        if (in.requires_grad()) n->requires_grad = true;
    if (n->requires_grad) {
        n->inputs.reserve(inputs.size());
        for (auto& in : inputs) n->inputs.push_back(in.node());
        n->backprop = std::move(backprop);
    }
    return Var<R>(std::move(n));
}

template <typename R>
void accum(VarNode<R>& node, const R* g, std::int64_t n) {
    node.ensure_grad();
    R* dst = node.grad.ptr();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul kernels (row-major; accumulation order over k is always ascending,
// so results are independent of how rows are batched)
// ---------------------------------------------------------------------------

namespace kernels {

// C(n,m) += A(n,k) * B(k,m)
template <typename R>
void mm_nn(const R* A, const R* B, R* C, std::int64_t n, std::int64_t k, std::int64_t m) {
    for (std::int64_t i = 0; i < n; ++i) {
        R* crow = C + i * m;
        const R* arow = A + i * k;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            R a = arow[kk];
            const R* brow = B + kk * m;
            for (std::int64_t j = 0; j < m; ++j) crow[j] += a * brow[j];
        }
    }
}

// C(n,m) += A(n,k) * B(m,k)^T
template <typename R>
void mm_nt(const R* A, const R* B, R* C, std::int64_t n, std::int64_t k, std::int64_t m) {
    for (std::int64_t i = 0; i < n; ++i) {
        const R* arow = A + i * k;
        R* crow = C + i * m;
        for (std::int64_t j = 0; j < m; ++j) {
            const R* brow = B + j * k;
            R s = 0;
            for (std::int64_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
            crow[j] += s;
        }
    }
}

// C(n,m) += A(k,n)^T * B(k,m)
template <typename R>
void mm_tn(const R* A, const R* B, R* C, std::int64_t n, std::int64_t k, std::int64_t m) {
    for (std::int64_t kk = 0; kk < k; ++kk) {
        const R* arow = A + kk * n;
        const R* brow = B + kk * m;
        for (std::int64_t i = 0; i < n; ++i) {
            R a = arow[i];
            R* crow = C + i * m;
            for (std::int64_t j = 0; j < m; ++j) crow[j] += a * brow[j];
        }
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// elementwise and structural ops
// ---------------------------------------------------------------------------

// same-shape add, or bias add where b has shape (last_dim)
template <typename R>
Var<R> add(const Var<R>& a, const Var<R>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    bool same = av.shape == bv.shape;
    bool bias = bv.ndim() == 1 && av.ndim() >= 1 && av.shape.back() == bv.shape[0];
    require_shapes(same || bias, "add", av.shape, bv.shape);

    Tensor<R> out(av.shape);
    if (same) {
        for (std::int64_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] + bv.data[i];
    } else {
        std::int64_t d = bv.shape[0], rows = av.numel() / d;
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < d; ++j)
                out.data[r * d + j] = av.data[r * d + j] + bv.data[j];
    }
    return detail::make_op<R>(
        std::move(out), {a, b},
        [same](VarNode<R>& n) {
            auto& ai = *n.inputs[0];
            auto& bi = *n.inputs[1];
            const R* g = n.grad.ptr();
            if (ai.requires_grad) detail::accum(ai, g, n.grad.numel());
            if (bi.requires_grad) {
                if (same) {
                    detail::accum(bi, g, n.grad.numel());
                } else {
                    bi.ensure_grad();
                    std::int64_t d = bi.value.shape[0], rows = n.grad.numel() / d;
                    for (std::int64_t r = 0; r < rows; ++r)
                        for (std::int64_t j = 0; j < d; ++j) bi.grad.data[j] += g[r * d + j];
                }
            }
        },
        "add");
}

// same-shape multiply, or column broadcast where b has shape (rows, 1)
template <typename R>
Var<R> mul(const Var<R>& a, const Var<R>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    bool same = av.shape == bv.shape;
    bool col = av.ndim() == 2 && bv.ndim() == 2 && bv.shape[1] == 1 && bv.shape[0] == av.shape[0];
    require_shapes(same || col, "mul", av.shape, bv.shape);

    Tensor<R> out(av.shape);
    if (same) {
        for (std::int64_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] * bv.data[i];
    } else {
        std::int64_t rows = av.shape[0], d = av.shape[1];
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < d; ++j) out.data[r * d + j] = av.data[r * d + j] * bv.data[r];
    }
    return detail::make_op<R>(
        std::move(out), {a, b},
        [same](VarNode<R>& n) {
            auto& ai = *n.inputs[0];
            auto& bi = *n.inputs[1];
            const R* g = n.grad.ptr();
            const R* avp = ai.value.ptr();
            const R* bvp = bi.value.ptr();
            if (same) {
                if (ai.requires_grad) {
                    ai.ensure_grad();
                    for (std::int64_t i = 0; i < n.grad.numel(); ++i) ai.grad.data[i] += g[i] * bvp[i];
                }
                if (bi.requires_grad) {
                    bi.ensure_grad();
                    for (std::int64_t i = 0; i < n.grad.numel(); ++i) bi.grad.data[i] += g[i] * avp[i];
                }
            } else {
                std::int64_t rows = ai.value.shape[0], d = ai.value.shape[1];
                if (ai.requires_grad) {
                    ai.ensure_grad();
                    for (std::int64_t r = 0; r < rows; ++r)
                        for (std::int64_t j = 0; j < d; ++j) ai.grad.data[r * d + j] += g[r * d + j] * bvp[r];
                }
                if (bi.requires_grad) {
                    bi.ensure_grad();
                    for (std::int64_t r = 0; r < rows; ++r) {
                        R s = 0;
                        for (std::int64_t j = 0; j < d; ++j) s += g[r * d + j] * avp[r * d + j];
                        bi.grad.data[r] += s;
                    }
                }
            }
        },
        "mul");
}

template <typename R>
Var<R> scale(const Var<R>& a, double c) {
    Tensor<R> out(a.value().shape);
    R rc = static_cast<R>(c);
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data[i] = a.value().data[i] * rc;
    return detail::make_op<R>(
        std::move(out), {a},
        [rc](VarNode<R>& n) {
            auto& ai = *n.inputs[0];
            if (!ai.requires_grad) return;
            ai.ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) ai.grad.data[i] += n.grad.data[i] * rc;
        },
        "scale");
}

template <typename R>
Var<R> matmul(const Var<R>& a, const Var<R>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    require_shapes(av.ndim() == 2 && bv.ndim() == 2 && av.shape[1] == bv.shape[0], "matmul",
                   av.shape, bv.shape);
    std::int64_t n = av.shape[0], k = av.shape[1], m = bv.shape[1];
    Tensor<R> out({n, m});
    kernels::mm_nn(av.ptr(), bv.ptr(), out.ptr(), n, k, m);
    return detail::make_op<R>(
        std::move(out), {a, b},
        [n, k, m](VarNode<R>& nd) {
            auto& ai = *nd.inputs[0];
            auto& bi = *nd.inputs[1];
            if (ai.requires_grad) {
                ai.ensure_grad();
                kernels::mm_nt(nd.grad.ptr(), bi.value.ptr(), ai.grad.ptr(), n, m, k);
            }
            if (bi.requires_grad) {
                bi.ensure_grad();
                kernels::mm_tn(ai.value.ptr(), nd.grad.ptr(), bi.grad.ptr(), k, n, m);
            }
        },
        "matmul");
}

// grouped matmul over the leading dimension; optional transpose of either
// operand's trailing two dims. a: (g,n,k) [or (g,k,n) if ta], b: (g,k,m)
// [or (g,m,k) if tb] -> (g,n,m)
template <typename R>
Var<R> batched_matmul(const Var<R>& a, const Var<R>& b, bool ta = false, bool tb = false) {
    const auto& av = a.value();
    const auto& bv = b.value();
    require_shapes(av.ndim() == 3 && bv.ndim() == 3 && av.shape[0] == bv.shape[0],
                   "batched_matmul", av.shape, bv.shape);
    std::int64_t g = av.shape[0];
    std::int64_t n = ta ? av.shape[2] : av.shape[1];
    std::int64_t k = ta ? av.shape[1] : av.shape[2];
    std::int64_t kb = tb ? bv.shape[2] : bv.shape[1];
    std::int64_t m = tb ? bv.shape[1] : bv.shape[2];
    require_shapes(k == kb, "batched_matmul", av.shape, bv.shape);

    Tensor<R> out({g, n, m});
    std::int64_t sa = av.shape[1] * av.shape[2];
    std::int64_t sb = bv.shape[1] * bv.shape[2];
    std::int64_t sc = n * m;
    for (std::int64_t gi = 0; gi < g; ++gi) {
        const R* A = av.ptr() + gi * sa;
        const R* B = bv.ptr() + gi * sb;
        R* C = out.ptr() + gi * sc;
        if (!ta && !tb) kernels::mm_nn(A, B, C, n, k, m);
        else if (!ta && tb) kernels::mm_nt(A, B, C, n, k, m);
        else if (ta && !tb) kernels::mm_tn(A, B, C, n, k, m);
        else throw ShapeError("batched_matmul: ta && tb unsupported");
    }
    return detail::make_op<R>(
        std::move(out), {a, b},
        [g, n, k, m, sa, sb, sc, ta, tb](VarNode<R>& nd) {
            auto& ai = *nd.inputs[0];
            auto& bi = *nd.inputs[1];
            for (std::int64_t gi = 0; gi < g; ++gi) {
                const R* G = nd.grad.ptr() + gi * sc;
                const R* A = ai.value.ptr() + gi * sa;
                const R* B = bi.value.ptr() + gi * sb;
                if (ai.requires_grad) {
                    ai.ensure_grad();
                    R* dA = ai.grad.ptr() + gi * sa;
                    if (!ta) {
                        // dA = tb ? G*B : G*B^T
                        if (tb) kernels::mm_nn(G, B, dA, n, m, k);
                        else kernels::mm_nt(G, B, dA, n, m, k);
                    } else {
                        // a stored as (k,n): dA = B * G^T when !tb
                        if (tb) throw ShapeError("batched_matmul backward: ta && tb");
                        kernels::mm_nt(B, G, dA, k, m, n);
                    }
                }
                if (bi.requires_grad) {
                    bi.ensure_grad();
                    R* dB = bi.grad.ptr() + gi * sb;
                    if (!tb) {
                        // dB = ta ? A*G : A^T*G
                        if (ta) kernels::mm_nn(A, G, dB, k, n, m);
                        else kernels::mm_tn(A, G, dB, k, n, m);
                    } else {
                        // b stored as (m,k): dB = G^T * A
                        kernels::mm_tn(G, A, dB, m, n, k);
                    }
                }
            }
        },
        "batched_matmul");
}

// out[p] = a[ids[p]]; repeated ids accumulate grads additively
template <typename R>
Var<R> row_gather(const Var<R>& a, std::vector<std::int64_t> ids) {
    const auto& av = a.value();
    require_shapes(av.ndim() == 2, "row_gather", av.shape, {});
    std::int64_t rows = av.shape[0], d = av.shape[1];
    for (auto id : ids)
        if (id < 0 || id >= rows)
            throw ShapeError("row_gather: index " + std::to_string(id) + " out of range");
    Tensor<R> out({static_cast<std::int64_t>(ids.size()), d});
    for (std::size_t p = 0; p < ids.size(); ++p)
        std::copy_n(av.ptr() + ids[p] * d, d, out.ptr() + static_cast<std::int64_t>(p) * d);
    return detail::make_op<R>(
        std::move(out), {a},
        [ids = std::move(ids), d](VarNode<R>& n) {
            auto& ai = *n.inputs[0];
            if (!ai.requires_grad) return;
            ai.ensure_grad();
            for (std::size_t p = 0; p < ids.size(); ++p) {
                const R* g = n.grad.ptr() + static_cast<std::int64_t>(p) * d;
                R* dst = ai.grad.ptr() + ids[p] * d;
                for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        },
        "row_gather");
}

// 2D concatenation along axis 0 or 1
template <typename R>
Var<R> concat(const std::vector<Var<R>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: empty input list");
    if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
    for (const auto& x : xs)
        require_shapes(x.value().ndim() == 2, "concat", x.value().shape, {});

    std::int64_t rows = 0, cols = 0;
    if (axis == 0) {
        cols = xs[0].value().shape[1];
        for (const auto& x : xs) {
            require_shapes(x.value().shape[1] == cols, "concat", x.value().shape, xs[0].value().shape);
            rows += x.value().shape[0];
        }
    } else {
        rows = xs[0].value().shape[0];
        for (const auto& x : xs) {
            require_shapes(x.value().shape[0] == rows, "concat", x.value().shape, xs[0].value().shape);
            cols += x.value().shape[1];
        }
    }

    Tensor<R> out({rows, cols});
    if (axis == 0) {
        std::int64_t r0 = 0;
        for (const auto& x : xs) {
            std::copy_n(x.value().ptr(), x.value().numel(), out.ptr() + r0 * cols);
            r0 += x.value().shape[0];
        }
    } else {
        std::int64_t c0 = 0;
        for (const auto& x : xs) {
            std::int64_t xc = x.value().shape[1];
            for (std::int64_t r = 0; r < rows; ++r)
                std::copy_n(x.value().ptr() + r * xc, xc, out.ptr() + r * cols + c0);
            c0 += xc;
        }
    }
    std::vector<std::int64_t> sizes;
    for (const auto& x : xs) sizes.push_back(axis == 0 ? x.value().shape[0] : x.value().shape[1]);
    return detail::make_op<R>(
        std::move(out), xs,
        [axis, sizes, rows, cols](VarNode<R>& n) {
            std::int64_t off = 0;
            for (std::size_t i = 0; i < n.inputs.size(); ++i) {
                auto& in = *n.inputs[i];
                std::int64_t sz = sizes[i];
                if (in.requires_grad) {
                    in.ensure_grad();
                    if (axis == 0) {
                        const R* g = n.grad.ptr() + off * cols;
                        for (std::int64_t e = 0; e < sz * cols; ++e) in.grad.data[e] += g[e];
                    } else {
                        for (std::int64_t r = 0; r < rows; ++r) {
                            const R* g = n.grad.ptr() + r * cols + off;
                            R* dst = in.grad.ptr() + r * sz;
                            for (std::int64_t j = 0; j < sz; ++j) dst[j] += g[j];
                        }
                    }
                }
                off += sz;
            }
        },
        "concat");
}

template <typename R>
Var<R> reshape(const Var<R>& a, Shape new_shape) {
    require_shapes(shape_numel(new_shape) == a.numel(), "reshape", a.shape(), new_shape);
    Tensor<R> out(std::move(new_shape), a.value().data);
    return detail::make_op<R>(
        std::move(out), {a},
        [](VarNode<R>& n) {
            auto& ai = *n.inputs[0];
            if (!ai.requires_grad) return;
            detail::accum(ai, n.grad.ptr(), n.grad.numel());
        },
        "reshape");
}

// general axis permutation: out dim i = in dim perm[i]
template <typename R>
Var<R> permute(const Var<R>& a, std::vector<int> perm) {
    const auto& av = a.value();
    if (static_cast<int>(perm.size()) != av.ndim())
        throw ShapeError("permute: rank mismatch");
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = av.shape[static_cast<std::size_t>(perm[i])];

    auto apply = [](const Tensor<R>& in, const std::vector<int>& p) {
        int nd = in.ndim();
        Shape os(static_cast<std::size_t>(nd));
        for (int i = 0; i < nd; ++i) os[static_cast<std::size_t>(i)] = in.shape[static_cast<std::size_t>(p[static_cast<std::size_t>(i)])];
        std::vector<std::int64_t> in_strides(static_cast<std::size_t>(nd), 1);
        for (int i = nd - 2; i >= 0; --i)
            in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i) + 1] * in.shape[static_cast<std::size_t>(i) + 1];
        Tensor<R> out(os);
        std::vector<std::int64_t> coord(static_cast<std::size_t>(nd), 0);
        for (std::int64_t idx = 0; idx < out.numel(); ++idx) {
            std::int64_t rem = idx, src = 0;
            for (int i = 0; i < nd; ++i) {
                std::int64_t c = rem / (i + 1 < nd ? 1 : 1);  // placeholder, computed below
                (void)c;
                ++i;
                --i;
                break;
            }
            // decompose idx into out coords
            std::int64_t r = idx;
            for (int i = nd - 1; i >= 0; --i) {
                coord[static_cast<std::size_t>(i)] = r % os[static_cast<std::size_t>(i)];
                r /= os[static_cast<std::size_t>(i)];
            }
            for (int i = 0; i < nd; ++i)
                src += coord[static_cast<std::size_t>(i)] * in_strides[static_cast<std::size_t>(p[static_cast<std::size_t>(i)])];
            out.data[static_cast<std::size_t>(idx)] = in.data[static_cast<std::size_t>(src)];
            (void)rem;
        }
        return out;
    };

    Tensor<R> out = apply(av, perm);
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    return detail::make_op<R>(
        std::move(out), {a},
        [apply, inv](VarNode<R>& n) {
            auto& ai = *n.inputs[0];
            if (!ai.requires_grad) return;
            Tensor<R> g = apply(n.grad, inv);
            detail::accum(ai, g.ptr(), g.numel());
        },
        "permute");
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

template <typename R>
Var<R> relu(const Var<R>& a) {
    Tensor<R> out(a.value().shape);
    for (std::int64_t i = 0; i < a.numel(); ++i)
        out.data[i] = a.value().data[i] > R(0) ? a.value().data[i] : R(0);
    return detail::make_op<R>(
        std::move(out), {a},
        [](VarNode<R>& n) {
            auto& ai = *n.inputs[0];
            if (!ai.requires_grad) return;
            ai.ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                if (ai.value.data[i] > R(0)) ai.grad.data[i] += n.grad.data[i];
        },
        "relu");
}

template <typename R>
Var<R> leaky_relu(const Var<R>& a, double slope) {
    R s = static_cast<R>(slope);
    Tensor<R> out(a.value().shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        R x = a.value().data[i];
        out.data[i] = x > R(0) ? x : s * x;
    }
    return detail::make_op<R>(
        std::move(out), {a},
        [s](VarNode<R>& n) {
            auto& ai = *n.inputs[0];
            if (!ai.requires_grad) return;
            ai.ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                ai.grad.data[i] += n.grad.data[i] * (ai.value.data[i] > R(0) ? R(1) : s);
        },
        "leaky_relu");
}

template <typename R>
Var<R> elu(const Var<R>& a) {
    Tensor<R> out(a.value().shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        R x = a.value().data[i];
        out.data[i] = x > R(0) ? x : static_cast<R>(std::expm1(static_cast<double>(x)));
    }
    return detail::make_op<R>(
        std::move(out), {a},
        [](VarNode<R>& n) {
            auto& ai = *n.inputs[0];
            if (!ai.requires_grad) return;
            ai.ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
                R x = ai.value.data[i];
                R d = x > R(0) ? R(1) : static_cast<R>(std::exp(static_cast<double>(x)));
                ai.grad.data[i] += n.grad.data[i] * d;
            }
        },
        "elu");
}

// exact erf-based GELU
template <typename R>
Var<R> gelu(const Var<R>& a) {
    Tensor<R> out(a.value().shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        double x = static_cast<double>(a.value().data[i]);
        out.data[i] = static_cast<R>(0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)));
    }
    return detail::make_op<R>(
        std::move(out), {a},
        [](VarNode<R>& n) {
            auto& ai = *n.inputs[0];
            if (!ai.requires_grad) return;
            ai.ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
                double x = static_cast<double>(ai.value.data[i]);
                double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
                double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
                ai.grad.data[i] += n.grad.data[i] * static_cast<R>(cdf + x * pdf);
            }
        },
        "gelu");
}

// ---------------------------------------------------------------------------
// normalization and softmax
// ---------------------------------------------------------------------------

template <typename R>
Var<R> layer_norm(const Var<R>& x, const Var<R>& gamma, const Var<R>& beta, double eps = 1e-5) {
    const auto& xv = x.value();
    std::int64_t d = xv.shape.back();
    require_shapes(gamma.value().shape == Shape{d} && beta.value().shape == Shape{d}, "layer_norm",
                   xv.shape, gamma.value().shape);
    std::int64_t rows = xv.numel() / d;

    Tensor<R> out(xv.shape);
    Tensor<R> xhat(xv.shape);
    Tensor<R> inv_std({rows});
    for (std::int64_t r = 0; r < rows; ++r) {
        const R* xr = xv.ptr() + r * d;
        double mean = 0;
        for (std::int64_t j = 0; j < d; ++j) mean += static_cast<double>(xr[j]);
        mean /= static_cast<double>(d);
        double var = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            double c = static_cast<double>(xr[j]) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std.data[static_cast<std::size_t>(r)] = static_cast<R>(is);
        for (std::int64_t j = 0; j < d; ++j) {
            R xh = static_cast<R>((static_cast<double>(xr[j]) - mean) * is);
            xhat.data[static_cast<std::size_t>(r * d + j)] = xh;
            out.data[static_cast<std::size_t>(r * d + j)] =
                xh * gamma.value().data[static_cast<std::size_t>(j)] + beta.value().data[static_cast<std::size_t>(j)];
        }
    }
    return detail::make_op<R>(
        std::move(out), {x, gamma, beta},
        [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](VarNode<R>& n) {
            auto& xi = *n.inputs[0];
            auto& gi = *n.inputs[1];
            auto& bi = *n.inputs[2];
            const R* g = n.grad.ptr();
            if (gi.requires_grad) {
                gi.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < d; ++j)
                        gi.grad.data[static_cast<std::size_t>(j)] += g[r * d + j] * xhat.data[static_cast<std::size_t>(r * d + j)];
            }
            if (bi.requires_grad) {
                bi.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < d; ++j) bi.grad.data[static_cast<std::size_t>(j)] += g[r * d + j];
            }
            if (xi.requires_grad) {
                xi.ensure_grad();
                const R* gam = gi.value.ptr();
                for (std::int64_t r = 0; r < rows; ++r) {
                    double m1 = 0, m2 = 0;
                    for (std::int64_t j = 0; j < d; ++j) {
                        double dxh = static_cast<double>(g[r * d + j]) * static_cast<double>(gam[j]);
                        m1 += dxh;
                        m2 += dxh * static_cast<double>(xhat.data[static_cast<std::size_t>(r * d + j)]);
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    double is = static_cast<double>(inv_std.data[static_cast<std::size_t>(r)]);
                    for (std::int64_t j = 0; j < d; ++j) {
                        double dxh = static_cast<double>(g[r * d + j]) * static_cast<double>(gam[j]);
                        double xh = static_cast<double>(xhat.data[static_cast<std::size_t>(r * d + j)]);
                        xi.grad.data[static_cast<std::size_t>(r * d + j)] +=
                            static_cast<R>(is * (dxh - m1 - xh * m2));
                    }
                }
            }
        },
        "layer_norm");
}

template <typename R>
Var<R> softmax_last(const Var<R>& x) {
    const auto& xv = x.value();
    std::int64_t d = xv.shape.back();
    std::int64_t rows = xv.numel() / d;
    Tensor<R> out(xv.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const R* xr = xv.ptr() + r * d;
        R* yr = out.ptr() + r * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < d; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
        double sum = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            double e = std::exp(static_cast<double>(xr[j]) - mx);
            yr[j] = static_cast<R>(e);
            sum += e;
        }
        double inv = 1.0 / sum;
        for (std::int64_t j = 0; j < d; ++j) yr[j] = static_cast<R>(static_cast<double>(yr[j]) * inv);
    }
    return detail::make_op<R>(
        std::move(out), {x},
        [rows, d](VarNode<R>& n) {
            auto& xi = *n.inputs[0];
            if (!xi.requires_grad) return;
            xi.ensure_grad();
            const R* y = n.value.ptr();
            const R* g = n.grad.ptr();
            for (std::int64_t r = 0; r < rows; ++r) {
                double dot = 0;
                for (std::int64_t j = 0; j < d; ++j)
                    dot += static_cast<double>(g[r * d + j]) * static_cast<double>(y[r * d + j]);
                for (std::int64_t j = 0; j < d; ++j)
                    xi.grad.data[static_cast<std::size_t>(r * d + j)] += static_cast<R>(
                        static_cast<double>(y[r * d + j]) * (static_cast<double>(g[r * d + j]) - dot));
            }
        },
        "softmax_last");
}

template <typename R>
Var<R> log_softmax_last(const Var<R>& x) {
    const auto& xv = x.value();
    std::int64_t d = xv.shape.back();
    std::int64_t rows = xv.numel() / d;
    Tensor<R> out(xv.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const R* xr = xv.ptr() + r * d;
        R* yr = out.ptr() + r * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < d; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
        double sum = 0;
        for (std::int64_t j = 0; j < d; ++j) sum += std::exp(static_cast<double>(xr[j]) - mx);
        double lse = mx + std::log(sum);
        for (std::int64_t j = 0; j < d; ++j) yr[j] = static_cast<R>(static_cast<double>(xr[j]) - lse);
    }
    return detail::make_op<R>(
        std::move(out), {x},
        [rows, d](VarNode<R>& n) {
            auto& xi = *n.inputs[0];
            if (!xi.requires_grad) return;
            xi.ensure_grad();
            const R* y = n.value.ptr();
            const R* g = n.grad.ptr();
            for (std::int64_t r = 0; r < rows; ++r) {
                double gsum = 0;
                for (std::int64_t j = 0; j < d; ++j) gsum += static_cast<double>(g[r * d + j]);
                for (std::int64_t j = 0; j < d; ++j)
                    xi.grad.data[static_cast<std::size_t>(r * d + j)] += static_cast<R>(
                        static_cast<double>(g[r * d + j]) -
                        std::exp(static_cast<double>(y[r * d + j])) * gsum);
            }
        },
        "log_softmax_last");
}

// identity when rate == 0 or not training; inverted scaling otherwise
template <typename R>
Var<R> dropout(const Var<R>& x, double rate, Rng& rng, bool training) {
    if (!training || rate <= 0.0) return x;
    if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
    R keep_scale = static_cast<R>(1.0 / (1.0 - rate));
    Tensor<R> mask(x.value().shape);
    Tensor<R> out(x.value().shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        R m = rng.uniform() < rate ? R(0) : keep_scale;
        mask.data[i] = m;
        out.data[i] = x.value().data[i] * m;
    }
    return detail::make_op<R>(
        std::move(out), {x},
        [mask = std::move(mask)](VarNode<R>& n) {
            auto& xi = *n.inputs[0];
            if (!xi.requires_grad) return;
            xi.ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                xi.grad.data[i] += n.grad.data[i] * mask.data[i];
        },
        "dropout");
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

template <typename R>
Var<R> sum(const Var<R>& x) {
    double s = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) s += static_cast<double>(x.value().data[i]);
    return detail::make_op<R>(
        Tensor<R>::scalar(static_cast<R>(s)), {x},
        [](VarNode<R>& n) {
            auto& xi = *n.inputs[0];
            if (!xi.requires_grad) return;
            xi.ensure_grad();
            R g = n.grad.data[0];
            for (auto& v : xi.grad.data) v += g;
        },
        "sum");
}

template <typename R>
Var<R> mean_axis0(const Var<R>& x) {
    const auto& xv = x.value();
    require_shapes(xv.ndim() == 2 && xv.shape[0] >= 1, "mean_axis0", xv.shape, {});
    std::int64_t n = xv.shape[0], d = xv.shape[1];
    Tensor<R> out({1, d});
    for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t j = 0; j < d; ++j) out.data[static_cast<std::size_t>(j)] += xv.data[static_cast<std::size_t>(r * d + j)];
    for (std::int64_t j = 0; j < d; ++j) out.data[static_cast<std::size_t>(j)] /= static_cast<R>(n);
    return detail::make_op<R>(
        std::move(out), {x},
        [n, d](VarNode<R>& nd) {
            auto& xi = *nd.inputs[0];
            if (!xi.requires_grad) return;
            xi.ensure_grad();
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t j = 0; j < d; ++j)
                    xi.grad.data[static_cast<std::size_t>(r * d + j)] += nd.grad.data[static_cast<std::size_t>(j)] / static_cast<R>(n);
        },
        "mean_axis0");
}

// weighted-mean negative log-likelihood; rows with weight 0 contribute
// nothing; all-zero weights yield loss 0 by definition
template <typename R>
Var<R> cross_entropy(const Var<R>& logits, std::vector<std::int64_t> targets,
                     std::vector<R> weights = {}) {
    const auto& lv = logits.value();
    require_shapes(lv.ndim() == 2, "cross_entropy", lv.shape, {});
    std::int64_t n = lv.shape[0], V = lv.shape[1];
    if (static_cast<std::int64_t>(targets.size()) != n)
        throw ShapeError("cross_entropy: targets length mismatch");
    if (weights.empty()) weights.assign(static_cast<std::size_t>(n), R(1));
    if (static_cast<std::int64_t>(weights.size()) != n)
        throw ShapeError("cross_entropy: weights length mismatch");
    for (auto t : targets)
        if (t < 0 || t >= V) throw ShapeError("cross_entropy: target id out of range");

    double wsum = 0;
    for (auto w : weights) wsum += static_cast<double>(w);
    double loss = 0;
    std::vector<double> lse(static_cast<std::size_t>(n));
    if (wsum > 0) {
        for (std::int64_t r = 0; r < n; ++r) {
            const R* xr = lv.ptr() + r * V;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
            double s = 0;
            for (std::int64_t j = 0; j < V; ++j) s += std::exp(static_cast<double>(xr[j]) - mx);
            lse[static_cast<std::size_t>(r)] = mx + std::log(s);
            loss += static_cast<double>(weights[static_cast<std::size_t>(r)]) *
                    (lse[static_cast<std::size_t>(r)] - static_cast<double>(xr[targets[static_cast<std::size_t>(r)]]));
        }
        loss /= wsum;
    }
    return detail::make_op<R>(
        Tensor<R>::scalar(static_cast<R>(loss)), {logits},
        [targets = std::move(targets), weights = std::move(weights), lse = std::move(lse), wsum, n,
         V](VarNode<R>& nd) {
            auto& li = *nd.inputs[0];
            if (!li.requires_grad || wsum <= 0) return;
            li.ensure_grad();
            R g = nd.grad.data[0];
            for (std::int64_t r = 0; r < n; ++r) {
                double w = static_cast<double>(weights[static_cast<std::size_t>(r)]) / wsum;
                if (w == 0) continue;
                const R* xr = li.value.ptr() + r * V;
                R* dr = li.grad.ptr() + r * V;
                for (std::int64_t j = 0; j < V; ++j) {
                    double p = std::exp(static_cast<double>(xr[j]) - lse[static_cast<std::size_t>(r)]);
                    double ind = (j == targets[static_cast<std::size_t>(r)]) ? 1.0 : 0.0;
                    dr[j] += static_cast<R>(static_cast<double>(g) * w * (p - ind));
                }
            }
        },
        "cross_entropy");
}

// ---------------------------------------------------------------------------
// segment ops for neighborhood attention (segments must be sorted ascending)
// ---------------------------------------------------------------------------

namespace detail {
inline void check_segments(const std::vector<std::int64_t>& seg, std::int64_t n_seg) {
    for (std::size_t i = 0; i < seg.size(); ++i) {
        if (seg[i] < 0 || seg[i] >= n_seg)
            throw ShapeError("segment op: segment id out of range");
        if (i > 0 && seg[i] < seg[i - 1])
            throw ShapeError("segment op: segment ids must be sorted ascending");
    }
}
}  // namespace detail

// per-segment, per-column softmax over rows of x (E, h)
template <typename R>
Var<R> segment_softmax(const Var<R>& x, std::vector<std::int64_t> seg, std::int64_t n_seg) {
    const auto& xv = x.value();
    require_shapes(xv.ndim() == 2, "segment_softmax", xv.shape, {});
    std::int64_t E = xv.shape[0], h = xv.shape[1];
    if (static_cast<std::int64_t>(seg.size()) != E)
        throw ShapeError("segment_softmax: segment list length mismatch");
    detail::check_segments(seg, n_seg);

    Tensor<R> out(xv.shape);
    std::int64_t start = 0;
    while (start < E) {
        std::int64_t end = start;
        while (end < E && seg[static_cast<std::size_t>(end)] == seg[static_cast<std::size_t>(start)]) ++end;
        for (std::int64_t c = 0; c < h; ++c) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t e = start; e < end; ++e)
                mx = std::max(mx, static_cast<double>(xv.data[static_cast<std::size_t>(e * h + c)]));
            double s = 0;
            for (std::int64_t e = start; e < end; ++e) {
                double v = std::exp(static_cast<double>(xv.data[static_cast<std::size_t>(e * h + c)]) - mx);
                out.data[static_cast<std::size_t>(e * h + c)] = static_cast<R>(v);
                s += v;
            }
            double inv = 1.0 / s;
            for (std::int64_t e = start; e < end; ++e)
                out.data[static_cast<std::size_t>(e * h + c)] =
                    static_cast<R>(static_cast<double>(out.data[static_cast<std::size_t>(e * h + c)]) * inv);
        }
        start = end;
    }
    return detail::make_op<R>(
        std::move(out), {x},
        [seg = std::move(seg), E, h](VarNode<R>& n) {
            auto& xi = *n.inputs[0];
            if (!xi.requires_grad) return;
            xi.ensure_grad();
            const R* y = n.value.ptr();
            const R* g = n.grad.ptr();
            std::int64_t start = 0;
            while (start < E) {
                std::int64_t end = start;
                while (end < E && seg[static_cast<std::size_t>(end)] == seg[static_cast<std::size_t>(start)]) ++end;
                for (std::int64_t c = 0; c < h; ++c) {
                    double dot = 0;
                    for (std::int64_t e = start; e < end; ++e)
                        dot += static_cast<double>(g[e * h + c]) * static_cast<double>(y[e * h + c]);
                    for (std::int64_t e = start; e < end; ++e)
                        xi.grad.data[static_cast<std::size_t>(e * h + c)] += static_cast<R>(
                            static_cast<double>(y[e * h + c]) * (static_cast<double>(g[e * h + c]) - dot));
                }
                start = end;
            }
        },
        "segment_softmax");
}

// out[s] = sum of rows e with seg[e] == s; rows accumulate in edge order
template <typename R>
Var<R> segment_sum(const Var<R>& x, std::vector<std::int64_t> seg, std::int64_t n_seg) {
    const auto& xv = x.value();
    require_shapes(xv.ndim() == 2, "segment_sum", xv.shape, {});
    std::int64_t E = xv.shape[0], d = xv.shape[1];
    if (static_cast<std::int64_t>(seg.size()) != E)
        throw ShapeError("segment_sum: segment list length mismatch");
    detail::check_segments(seg, n_seg);

    Tensor<R> out({n_seg, d});
    for (std::int64_t e = 0; e < E; ++e) {
        const R* src = xv.ptr() + e * d;
        R* dst = out.ptr() + seg[static_cast<std::size_t>(e)] * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    return detail::make_op<R>(
        std::move(out), {x},
        [seg = std::move(seg), E, d](VarNode<R>& n) {
            auto& xi = *n.inputs[0];
            if (!xi.requires_grad) return;
            xi.ensure_grad();
            for (std::int64_t e = 0; e < E; ++e) {
                const R* g = n.grad.ptr() + seg[static_cast<std::size_t>(e)] * d;
                R* dst = xi.grad.ptr() + e * d;
                for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        },
        "segment_sum");
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename R>
void backward(const Var<R>& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!loss.requires_grad()) return;

    // iterative post-order DFS over the requires_grad subgraph
    struct Frame {
        VarNode<R>* node;
        std::size_t next;
    };
    std::vector<VarNode<R>*> topo;
    std::unordered_set<VarNode<R>*> seen;
    std::vector<Frame> stack;
    stack.push_back({loss.raw(), 0});
    seen.insert(loss.raw());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->inputs.size()) {
            VarNode<R>* child = f.node->inputs[f.next++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.raw()->ensure_grad();
    loss.raw()->grad.data[0] = R(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        VarNode<R>* node = *it;
        if (node->backprop && !node->grad.empty()) node->backprop(*node);
    }
    if (finite_checks_enabled()) {
        for (VarNode<R>* node : topo)
            if (!node->grad.empty()) check_finite(node->grad, "backward gradient");
    }
}

}  // namespace p2tag
