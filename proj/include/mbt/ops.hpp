#pragma once

// Differentiable primitives over Tensor<T>. Every op is a pure function of
// its inputs; when a Tape is active and an input requires grad, the op
// records a backward rule. Backward rules work on raw buffers and never
// re-enter the op layer.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mbt/common.hpp"
#include "mbt/parallel.hpp"
#include "mbt/tensor.hpp"

namespace mbt {

enum class PadMode { Zero, Reflect };
enum class PoolMode { Avg, Max };

namespace debug {
/// Test hook: deliberately corrupts the gelu backward rule so gradient
/// verification can be shown to catch a broken rule.
inline bool corrupt_gelu_backward = false;
}  // namespace debug

namespace detail {

template <typename T>
inline bool recording(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::active()) return false;
    for (const Tensor<T>* t : inputs)
        if (t && t->defined() && t->requires_grad()) return true;
    return false;
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn_acc(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    for (i64 i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (i64 p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    for (i64 i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (i64 j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (i64 p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
    for (i64 i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (i64 p = 0; p < k; ++p) {
            const T av = arow[p];
            T* crow = c + p * n;
            for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Mirror index without edge duplication (…2,1,0,1,2…). Total for any i.
inline i64 reflect_index(i64 i, i64 size) {
    if (size == 1) return 0;
    const i64 period = 2 * (size - 1);
    i64 j = i % period;
    if (j < 0) j += period;
    return j < size ? j : period - j;
}

template <typename T>
inline void require_4d(const Tensor<T>& t, const char* who) {
    if (t.rank() != 4) throw ShapeError(std::string(who) + ": expected rank-4 tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const i64 n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (i64 i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (detail::recording<T>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        Tape<T>::active()->record("add", {out}, [ac, bc, oc]() mutable {
            if (ac.requires_grad()) ac.accumulate_grad(oc.grad());
            if (bc.requires_grad()) bc.accumulate_grad(oc.grad());
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const i64 n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (i64 i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    if (detail::recording<T>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        Tape<T>::active()->record("sub", {out}, [ac, bc, oc]() mutable {
            const i64 m = oc.numel();
            const T* g = oc.grad();
            if (ac.requires_grad()) ac.accumulate_grad(g);
            if (bc.requires_grad()) {
                T* gb = bc.grad();
                for (i64 i = 0; i < m; ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const i64 n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (i64 i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (detail::recording<T>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        Tape<T>::active()->record("mul", {out}, [ac, bc, oc]() mutable {
            const i64 m = oc.numel();
            const T* g = oc.grad();
            if (ac.requires_grad()) {
                T* ga = ac.grad();
                const T* pb2 = bc.data();
                for (i64 i = 0; i < m; ++i) ga[i] += g[i] * pb2[i];
            }
            if (bc.requires_grad()) {
                T* gb = bc.grad();
                const T* pa2 = ac.data();
                for (i64 i = 0; i < m; ++i) gb[i] += g[i] * pa2[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    const i64 n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (i64 i = 0; i < n; ++i) po[i] = pa[i] * s;
    if (detail::recording<T>({&a})) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        Tape<T>::active()->record("mul_scalar", {out}, [ac, oc, s]() mutable {
            if (!ac.requires_grad()) return;
            const i64 m = oc.numel();
            const T* g = oc.grad();
            T* ga = ac.grad();
            for (i64 i = 0; i < m; ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const i64 n = x.numel();
    const T* px = x.data();
    T* po = out.data();
    for (i64 i = 0; i < n; ++i) {
        const double v = static_cast<double>(px[i]);
        po[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244)));
    }
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        Tape<T>::active()->record("gelu", {out}, [xc, oc]() mutable {
            if (!xc.requires_grad()) return;
            const i64 m = oc.numel();
            const T* g = oc.grad();
            const T* px2 = xc.data();
            T* gx = xc.grad();
            const double skew = debug::corrupt_gelu_backward ? 1.01 : 1.0;
            for (i64 i = 0; i < m; ++i) {
                const double v = static_cast<double>(px2[i]);
                const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
                const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014326779;
                gx[i] += g[i] * static_cast<T>((cdf + v * pdf) * skew);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const i64 n = x.numel();
    const T* px = x.data();
    T* po = out.data();
    for (i64 i = 0; i < n; ++i) po[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(px[i]))));
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        Tape<T>::active()->record("sigmoid", {out}, [xc, oc]() mutable {
            if (!xc.requires_grad()) return;
            const i64 m = oc.numel();
            const T* g = oc.grad();
            const T* py = oc.data();
            T* gx = xc.grad();
            for (i64 i = 0; i < m; ++i) gx[i] += g[i] * py[i] * (T(1) - py[i]);
        });
    }
    return out;
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const i64 n = x.numel();
    const T* px = x.data();
    T* po = out.data();
    for (i64 i = 0; i < n; ++i) po[i] = std::log(px[i]);
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        Tape<T>::active()->record("log", {out}, [xc, oc]() mutable {
            if (!xc.requires_grad()) return;
            const i64 m = oc.numel();
            const T* g = oc.grad();
            const T* px2 = xc.data();
            T* gx = xc.grad();
            for (i64 i = 0; i < m; ++i) gx[i] += g[i] / px2[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<i64> shape) {
    if (numel_of(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    Tensor<T> out = Tensor<T>::from_data(std::move(shape), x.buffer());
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        Tape<T>::active()->record("reshape", {out}, [xc, oc]() mutable {
            if (xc.requires_grad()) xc.accumulate_grad(oc.grad());
        });
    }
    return out;
}

namespace detail {

template <typename T>
void permute_copy(const T* src, T* dst, const std::vector<i64>& in_shape, const std::vector<i64>& axes) {
    const i64 rank = static_cast<i64>(in_shape.size());
    std::vector<i64> in_strides(rank, 1);
    for (i64 i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    std::vector<i64> out_shape(rank);
    for (i64 i = 0; i < rank; ++i) out_shape[i] = in_shape[axes[i]];
    std::vector<i64> idx(rank, 0);
    const i64 n = numel_of(in_shape);
    for (i64 flat = 0; flat < n; ++flat) {
        i64 src_off = 0;
        for (i64 i = 0; i < rank; ++i) src_off += idx[i] * in_strides[axes[i]];
        dst[flat] = src[src_off];
        for (i64 i = rank - 1; i >= 0; --i) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<i64>& axes) {
    const i64 rank = x.rank();
    if (static_cast<i64>(axes.size()) != rank) throw ShapeError("permute: axes rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(rank), false);
    for (i64 a : axes) {
        if (a < 0 || a >= rank || seen[static_cast<size_t>(a)]) throw ShapeError("permute: invalid axes");
        seen[static_cast<size_t>(a)] = true;
    }
    std::vector<i64> out_shape(static_cast<size_t>(rank));
    for (i64 i = 0; i < rank; ++i) out_shape[static_cast<size_t>(i)] = x.dim(axes[static_cast<size_t>(i)]);
    Tensor<T> out(out_shape);
    detail::permute_copy(x.data(), out.data(), x.shape(), axes);
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        std::vector<i64> inverse(static_cast<size_t>(rank));
        for (i64 i = 0; i < rank; ++i) inverse[static_cast<size_t>(axes[static_cast<size_t>(i)])] = i;
        Tensor<T> xc = x, oc = out;
        Tape<T>::active()->record("permute", {out}, [xc, oc, inverse]() mutable {
            if (!xc.requires_grad()) return;
            std::vector<T> gx(static_cast<size_t>(xc.numel()));
            detail::permute_copy(oc.grad(), gx.data(), oc.shape(), inverse);
            xc.accumulate_grad(gx.data());
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, i64 axis) {
    if (parts.empty()) throw ValueError("concat: no inputs");
    const i64 rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
    i64 total = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
        for (i64 i = 0; i < rank; ++i)
            if (i != axis && p.dim(i) != parts[0].dim(i)) throw ShapeError("concat: dim mismatch off-axis");
        total += p.dim(axis);
    }
    std::vector<i64> out_shape = parts[0].shape();
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor<T> out(out_shape);

    i64 outer = 1, inner = 1;
    for (i64 i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
    for (i64 i = axis + 1; i < rank; ++i) inner *= out_shape[static_cast<size_t>(i)];

    T* po = out.data();
    i64 offset = 0;
    for (const auto& p : parts) {
        const i64 span = p.dim(axis) * inner;
        const T* ps = p.data();
        for (i64 o = 0; o < outer; ++o)
            std::memcpy(po + (o * total * inner + offset * inner), ps + o * span, static_cast<size_t>(span) * sizeof(T));
        offset += p.dim(axis);
    }

    bool any_rg = false;
    for (const auto& p : parts) any_rg = any_rg || p.requires_grad();
    if (Tape<T>::active() && any_rg) {
        out.set_requires_grad(true);
        std::vector<Tensor<T>> pc = parts;
        Tensor<T> oc = out;
        Tape<T>::active()->record("concat", {out}, [pc, oc, outer, inner, total, axis]() mutable {
            const T* g = oc.grad();
            i64 off = 0;
            for (auto& p : pc) {
                const i64 span = p.dim(axis) * inner;
                if (p.requires_grad()) {
                    T* gp = p.grad();
                    for (i64 o = 0; o < outer; ++o) {
                        const T* gsrc = g + (o * total * inner + off * inner);
                        T* gdst = gp + o * span;
                        for (i64 i = 0; i < span; ++i) gdst[i] += gsrc[i];
                    }
                }
                off += p.dim(axis);
            }
        });
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, i64 axis, const std::vector<i64>& sizes) {
    const i64 rank = x.rank();
    if (axis < 0 || axis >= rank) throw ShapeError("split: axis out of range");
    i64 total = 0;
    for (i64 s : sizes) {
        if (s <= 0) throw ShapeError("split: sizes must be positive");
        total += s;
    }
    if (total != x.dim(axis))
        throw ShapeError("split: sizes sum " + std::to_string(total) + " != dim " + std::to_string(x.dim(axis)));

    i64 outer = 1, inner = 1;
    for (i64 i = 0; i < axis; ++i) outer *= x.dim(i);
    for (i64 i = axis + 1; i < rank; ++i) inner *= x.dim(i);

    std::vector<Tensor<T>> parts;
    parts.reserve(sizes.size());
    const T* px = x.data();
    i64 offset = 0;
    for (i64 s : sizes) {
        std::vector<i64> shape = x.shape();
        shape[static_cast<size_t>(axis)] = s;
        Tensor<T> part(shape);
        T* pp = part.data();
        const i64 span = s * inner;
        for (i64 o = 0; o < outer; ++o)
            std::memcpy(pp + o * span, px + (o * total * inner + offset * inner), static_cast<size_t>(span) * sizeof(T));
        offset += s;
        parts.push_back(part);
    }

    if (detail::recording<T>({&x})) {
        std::vector<Tensor<T>> outs;
        for (auto& p : parts) {
            p.set_requires_grad(true);
            outs.push_back(p);
        }
        Tensor<T> xc = x;
        std::vector<Tensor<T>> pc = parts;
        Tape<T>::active()->record("split", outs, [xc, pc, outer, inner, total, axis]() mutable {
            if (!xc.requires_grad()) return;
            T* gx = xc.grad();
            i64 off = 0;
            for (auto& p : pc) {
                const i64 span = p.dim(axis) * inner;
                const T* gp = p.grad();
                for (i64 o = 0; o < outer; ++o) {
                    T* gdst = gx + (o * total * inner + off * inner);
                    const T* gsrc = gp + o * span;
                    for (i64 i = 0; i < span; ++i) gdst[i] += gsrc[i];
                }
                off += p.dim(axis);
            }
        });
    }
    return parts;
}

/// [N, C*r*r, H, W] -> [N, C, r*H, r*W]; input channel c*r*r + dy*r + dx
/// feeds output pixel (y*r + dy, x*r + dx) of channel c.
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, i64 r) {
    detail::require_4d(x, "pixel_shuffle");
    const i64 n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (r < 1 || cin % (r * r) != 0)
        throw ShapeError("pixel_shuffle: channels " + std::to_string(cin) + " not divisible by r^2");
    const i64 c = cin / (r * r);
    Tensor<T> out({n, c, h * r, w * r});
    const T* px = x.data();
    T* po = out.data();
    const i64 oh = h * r, ow = w * r;
    for (i64 in = 0; in < n; ++in)
        for (i64 ic = 0; ic < cin; ++ic) {
            const i64 oc = ic / (r * r);
            const i64 dy = (ic / r) % r;
            const i64 dx = ic % r;
            const T* src = px + (in * cin + ic) * h * w;
            T* dst = po + (in * c + oc) * oh * ow;
            for (i64 y = 0; y < h; ++y)
                for (i64 xw = 0; xw < w; ++xw)
                    dst[(y * r + dy) * ow + (xw * r + dx)] = src[y * w + xw];
        }
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc_t = out;
        Tape<T>::active()->record("pixel_shuffle", {out}, [xc, oc_t, r]() mutable {
            if (!xc.requires_grad()) return;
            const i64 n2 = xc.dim(0), cin2 = xc.dim(1), h2 = xc.dim(2), w2 = xc.dim(3);
            const i64 c2 = cin2 / (r * r), oh2 = h2 * r, ow2 = w2 * r;
            const T* g = oc_t.grad();
            T* gx = xc.grad();
            for (i64 in = 0; in < n2; ++in)
                for (i64 ic = 0; ic < cin2; ++ic) {
                    const i64 occ = ic / (r * r);
                    const i64 dy = (ic / r) % r;
                    const i64 dx = ic % r;
                    const T* gsrc = g + (in * c2 + occ) * oh2 * ow2;
                    T* gdst = gx + (in * cin2 + ic) * h2 * w2;
                    for (i64 y = 0; y < h2; ++y)
                        for (i64 xw = 0; xw < w2; ++xw)
                            gdst[y * w2 + xw] += gsrc[(y * r + dy) * ow2 + (xw * r + dx)];
                }
        });
    }
    return out;
}

/// Exact inverse of pixel_shuffle.
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, i64 r) {
    detail::require_4d(x, "pixel_unshuffle");
    const i64 n = x.dim(0), c = x.dim(1), oh = x.dim(2), ow = x.dim(3);
    if (r < 1 || oh % r != 0 || ow % r != 0) throw ShapeError("pixel_unshuffle: dims not divisible by r");
    const i64 h = oh / r, w = ow / r, cin = c * r * r;
    Tensor<T> out({n, cin, h, w});
    const T* px = x.data();
    T* po = out.data();
    for (i64 in = 0; in < n; ++in)
        for (i64 ic = 0; ic < cin; ++ic) {
            const i64 oc = ic / (r * r);
            const i64 dy = (ic / r) % r;
            const i64 dx = ic % r;
            const T* src = px + (in * c + oc) * oh * ow;
            T* dst = po + (in * cin + ic) * h * w;
            for (i64 y = 0; y < h; ++y)
                for (i64 xw = 0; xw < w; ++xw)
                    dst[y * w + xw] = src[(y * r + dy) * ow + (xw * r + dx)];
        }
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc_t = out;
        Tape<T>::active()->record("pixel_unshuffle", {out}, [xc, oc_t, r]() mutable {
            if (!xc.requires_grad()) return;
            const i64 n2 = xc.dim(0), c2 = xc.dim(1), oh2 = xc.dim(2), ow2 = xc.dim(3);
            const i64 h2 = oh2 / r, w2 = ow2 / r, cin2 = c2 * r * r;
            const T* g = oc_t.grad();
            T* gx = xc.grad();
            for (i64 in = 0; in < n2; ++in)
                for (i64 ic = 0; ic < cin2; ++ic) {
                    const i64 occ = ic / (r * r);
                    const i64 dy = (ic / r) % r;
                    const i64 dx = ic % r;
                    T* gdst = gx + (in * c2 + occ) * oh2 * ow2;
                    const T* gsrc = g + (in * cin2 + ic) * h2 * w2;
                    for (i64 y = 0; y < h2; ++y)
                        for (i64 xw = 0; xw < w2; ++xw)
                            gdst[(y * r + dy) * ow2 + (xw * r + dx)] += gsrc[y * w2 + xw];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = T(0);
    const T* px = x.data();
    const i64 n = x.numel();
    for (i64 i = 0; i < n; ++i) acc += px[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        Tape<T>::active()->record("sum_all", {out}, [xc, oc]() mutable {
            if (!xc.requires_grad()) return;
            const T g = oc.grad()[0];
            T* gx = xc.grad();
            const i64 m = xc.numel();
            for (i64 i = 0; i < m; ++i) gx[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::require_4d(x, "global_avg_pool");
    const i64 n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> out({n, c, 1, 1});
    const T* px = x.data();
    T* po = out.data();
    const i64 hw = h * w;
    for (i64 i = 0; i < n * c; ++i) {
        T acc = T(0);
        const T* plane = px + i * hw;
        for (i64 j = 0; j < hw; ++j) acc += plane[j];
        po[i] = acc / static_cast<T>(hw);
    }
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        Tape<T>::active()->record("global_avg_pool", {out}, [xc, oc, hw]() mutable {
            if (!xc.requires_grad()) return;
            const T* g = oc.grad();
            T* gx = xc.grad();
            const i64 planes = xc.dim(0) * xc.dim(1);
            const T inv = T(1) / static_cast<T>(hw);
            for (i64 i = 0; i < planes; ++i) {
                const T gv = g[i] * inv;
                T* gp = gx + i * hw;
                for (i64 j = 0; j < hw; ++j) gp[j] += gv;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// y[..., o] = sum_k x[..., k] * w[o, k] + b[o]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>()) {
    if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2");
    const i64 k = x.dim(x.rank() - 1);
    const i64 o = w.dim(0);
    if (w.dim(1) != k)
        throw ShapeError("linear: weight " + shape_str(w.shape()) + " does not match input " + shape_str(x.shape()));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != o)) throw ShapeError("linear: bias must be [out]");
    const i64 rows = x.numel() / k;
    std::vector<i64> out_shape = x.shape();
    out_shape.back() = o;
    Tensor<T> out(out_shape);
    T* po = out.data();
    if (b.defined()) {
        const T* pb = b.data();
        for (i64 t = 0; t < rows; ++t) std::memcpy(po + t * o, pb, static_cast<size_t>(o) * sizeof(T));
    }
    detail::gemm_nt_acc(x.data(), w.data(), po, rows, k, o);

    if (detail::recording<T>({&x, &w, &b})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, wc = w, bc = b, oc = out;
        Tape<T>::active()->record("linear", {out}, [xc, wc, bc, oc, rows, k, o]() mutable {
            const T* g = oc.grad();
            if (xc.requires_grad()) detail::gemm_nn_acc(g, wc.data(), xc.grad(), rows, o, k);
            if (wc.requires_grad()) detail::gemm_tn_acc(g, xc.data(), wc.grad(), rows, o, k);
            if (bc.defined() && bc.requires_grad()) {
                T* gb = bc.grad();
                for (i64 t = 0; t < rows; ++t) {
                    const T* gr = g + t * o;
                    for (i64 j = 0; j < o; ++j) gb[j] += gr[j];
                }
            }
        });
    }
    return out;
}

/// Batched matmul over matching leading dims: a[...,M,K] x b[...,K,N]
/// (or b[...,N,K] with transpose_b).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
    if (a.rank() < 2 || b.rank() != a.rank()) throw ShapeError("matmul: rank mismatch");
    const i64 rank = a.rank();
    for (i64 i = 0; i < rank - 2; ++i)
        if (a.dim(i) != b.dim(i)) throw ShapeError("matmul: batch dim mismatch");
    const i64 m = a.dim(rank - 2), k = a.dim(rank - 1);
    const i64 bk = transpose_b ? b.dim(rank - 1) : b.dim(rank - 2);
    const i64 n = transpose_b ? b.dim(rank - 2) : b.dim(rank - 1);
    if (bk != k) throw ShapeError("matmul: inner dim mismatch");
    i64 batch = 1;
    for (i64 i = 0; i < rank - 2; ++i) batch *= a.dim(i);

    std::vector<i64> out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<T> out(out_shape);

    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const i64 a_sz = m * k, b_sz = k * n, o_sz = m * n;
    parallel_for(batch, m * k * n, [&](i64 lo, i64 hi) {
        for (i64 bi = lo; bi < hi; ++bi) {
            if (transpose_b)
                detail::gemm_nt_acc(pa + bi * a_sz, pb + bi * b_sz, po + bi * o_sz, m, k, n);
            else
                detail::gemm_nn_acc(pa + bi * a_sz, pb + bi * b_sz, po + bi * o_sz, m, k, n);
        }
    });

    if (detail::recording<T>({&a, &b})) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        Tape<T>::active()->record("matmul", {out}, [ac, bc, oc, m, k, n, batch, transpose_b]() mutable {
            const T* g = oc.grad();
            const i64 a_sz2 = m * k, b_sz2 = k * n, o_sz2 = m * n;
            T* ga0 = ac.requires_grad() ? ac.grad() : nullptr;
            T* gb0 = bc.requires_grad() ? bc.grad() : nullptr;
            parallel_for(batch, 2 * m * k * n, [&](i64 lo, i64 hi) {
                for (i64 bi = lo; bi < hi; ++bi) {
                    const T* gb = g + bi * o_sz2;
                    if (ga0) {
                        T* ga = ga0 + bi * a_sz2;
                        if (transpose_b)
                            detail::gemm_nn_acc(gb, bc.data() + bi * b_sz2, ga, m, n, k);
                        else
                            detail::gemm_nt_acc(gb, bc.data() + bi * b_sz2, ga, m, n, k);
                    }
                    if (gb0) {
                        T* gbb = gb0 + bi * b_sz2;
                        if (transpose_b)
                            detail::gemm_tn_acc(gb, ac.data() + bi * a_sz2, gbb, m, n, k);
                        else
                            detail::gemm_tn_acc(ac.data() + bi * a_sz2, gb, gbb, m, k, n);
                    }
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization / activation over structured axes
// ---------------------------------------------------------------------------

/// Row-wise softmax over the last axis, stabilized by row-max subtraction.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    const i64 d = x.dim(x.rank() - 1);
    const i64 rows = x.numel() / d;
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    parallel_for(rows, 8 * d, [&](i64 lo, i64 hi) {
        for (i64 r = lo; r < hi; ++r) {
            const T* xr = px + r * d;
            T* yr = po + r * d;
            T mx = xr[0];
            for (i64 i = 1; i < d; ++i) mx = std::max(mx, xr[i]);
            // Double accumulator: keeps long rows summing to 1 within float eps.
            double sum = 0.0;
            for (i64 i = 0; i < d; ++i) {
                yr[i] = std::exp(xr[i] - mx);
                sum += static_cast<double>(yr[i]);
            }
            const T inv = static_cast<T>(1.0 / sum);
            for (i64 i = 0; i < d; ++i) yr[i] *= inv;
        }
    });
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        Tape<T>::active()->record("softmax", {out}, [xc, oc, rows, d]() mutable {
            if (!xc.requires_grad()) return;
            const T* g = oc.grad();
            const T* p = oc.data();
            T* gx = xc.grad();
            parallel_for(rows, 4 * d, [&](i64 lo, i64 hi) {
                for (i64 r = lo; r < hi; ++r) {
                    const T* gr = g + r * d;
                    const T* pr = p + r * d;
                    T* gxr = gx + r * d;
                    T dot = T(0);
                    for (i64 i = 0; i < d; ++i) dot += gr[i] * pr[i];
                    for (i64 i = 0; i < d; ++i) gxr[i] += pr[i] * (gr[i] - dot);
                }
            });
        });
    }
    return out;
}

/// Layer normalization over the channel axis of [N,C,H,W], independently at
/// each spatial position, with per-channel scale/shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    detail::require_4d(x, "layer_norm");
    const i64 n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.numel() != c || beta.numel() != c) throw ShapeError("layer_norm: scale/shift must have C elements");
    const i64 hw = h * w;
    Tensor<T> out(x.shape());
    std::vector<T> invstd(static_cast<size_t>(n * hw));
    std::vector<T> mean(static_cast<size_t>(n * hw));
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pbta = beta.data();
    T* po = out.data();
    for (i64 in = 0; in < n; ++in)
        for (i64 p = 0; p < hw; ++p) {
            const T* base = px + in * c * hw + p;
            T mu = T(0);
            for (i64 ic = 0; ic < c; ++ic) mu += base[ic * hw];
            mu /= static_cast<T>(c);
            T var = T(0);
            for (i64 ic = 0; ic < c; ++ic) {
                const T dv = base[ic * hw] - mu;
                var += dv * dv;
            }
            var /= static_cast<T>(c);
            const T inv = T(1) / std::sqrt(var + eps);
            mean[static_cast<size_t>(in * hw + p)] = mu;
            invstd[static_cast<size_t>(in * hw + p)] = inv;
            T* obase = po + in * c * hw + p;
            for (i64 ic = 0; ic < c; ++ic)
                obase[ic * hw] = (base[ic * hw] - mu) * inv * pg[ic] + pbta[ic];
        }
    if (detail::recording<T>({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, gc = gamma, bc = beta, oc = out;
        Tape<T>::active()->record("layer_norm", {out},
                                  [xc, gc, bc, oc, mean = std::move(mean), invstd = std::move(invstd), n, c, hw]() mutable {
            const T* g = oc.grad();
            const T* px2 = xc.data();
            const T* pg2 = gc.data();
            T* gx = xc.requires_grad() ? xc.grad() : nullptr;
            T* gg = gc.requires_grad() ? gc.grad() : nullptr;
            T* gb = bc.requires_grad() ? bc.grad() : nullptr;
            for (i64 in = 0; in < n; ++in)
                for (i64 p = 0; p < hw; ++p) {
                    const T mu = mean[static_cast<size_t>(in * hw + p)];
                    const T inv = invstd[static_cast<size_t>(in * hw + p)];
                    const T* xb = px2 + in * c * hw + p;
                    const T* gy = g + in * c * hw + p;
                    T sum_dxh = T(0), sum_dxh_xh = T(0);
                    for (i64 ic = 0; ic < c; ++ic) {
                        const T xh = (xb[ic * hw] - mu) * inv;
                        const T dxh = gy[ic * hw] * pg2[ic];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        if (gg) gg[ic] += gy[ic * hw] * xh;
                        if (gb) gb[ic] += gy[ic * hw];
                    }
                    if (gx) {
                        const T invc = T(1) / static_cast<T>(c);
                        T* gxb = gx + in * c * hw + p;
                        for (i64 ic = 0; ic < c; ++ic) {
                            const T xh = (xb[ic * hw] - mu) * inv;
                            const T dxh = gy[ic * hw] * pg2[ic];
                            gxb[ic * hw] += inv * (dxh - sum_dxh * invc - xh * sum_dxh_xh * invc);
                        }
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Padding, convolution, pooling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, i64 top, i64 bottom, i64 left, i64 right, PadMode mode) {
    detail::require_4d(x, "pad2d");
    if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ShapeError("pad2d: negative padding");
    const i64 n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const i64 oh = h + top + bottom, ow = w + left + right;
    Tensor<T> out({n, c, oh, ow});
    const T* px = x.data();
    T* po = out.data();
    for (i64 plane = 0; plane < n * c; ++plane) {
        const T* src = px + plane * h * w;
        T* dst = po + plane * oh * ow;
        for (i64 y = 0; y < oh; ++y)
            for (i64 xw = 0; xw < ow; ++xw) {
                const i64 sy = y - top, sx = xw - left;
                if (mode == PadMode::Zero) {
                    dst[y * ow + xw] = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? src[sy * w + sx] : T(0);
                } else {
                    dst[y * ow + xw] = src[detail::reflect_index(sy, h) * w + detail::reflect_index(sx, w)];
                }
            }
    }
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        Tape<T>::active()->record("pad2d", {out}, [xc, oc, top, left, mode]() mutable {
            if (!xc.requires_grad()) return;
            const i64 n2 = xc.dim(0), c2 = xc.dim(1), h2 = xc.dim(2), w2 = xc.dim(3);
            const i64 oh2 = oc.dim(2), ow2 = oc.dim(3);
            const T* g = oc.grad();
            T* gx = xc.grad();
            for (i64 plane = 0; plane < n2 * c2; ++plane) {
                const T* gsrc = g + plane * oh2 * ow2;
                T* gdst = gx + plane * h2 * w2;
                for (i64 y = 0; y < oh2; ++y)
                    for (i64 xw = 0; xw < ow2; ++xw) {
                        const i64 sy = y - top, sx = xw - left;
                        if (mode == PadMode::Zero) {
                            if (sy >= 0 && sy < h2 && sx >= 0 && sx < w2)
                                gdst[sy * w2 + sx] += gsrc[y * ow2 + xw];
                        } else {
                            gdst[detail::reflect_index(sy, h2) * w2 + detail::reflect_index(sx, w2)] +=
                                gsrc[y * ow2 + xw];
                        }
                    }
            }
        });
    }
    return out;
}

namespace detail {

template <typename T>
void im2col(const T* x, T* col, i64 cin, i64 h, i64 w, i64 kh, i64 kw, i64 stride, i64 oh, i64 ow) {
    for (i64 ci = 0; ci < cin; ++ci)
        for (i64 ky = 0; ky < kh; ++ky)
            for (i64 kx = 0; kx < kw; ++kx) {
                T* crow = col + ((ci * kh + ky) * kw + kx) * oh * ow;
                for (i64 y = 0; y < oh; ++y) {
                    const T* srow = x + ci * h * w + (y * stride + ky) * w + kx;
                    T* drow = crow + y * ow;
                    if (stride == 1) {
                        std::memcpy(drow, srow, static_cast<size_t>(ow) * sizeof(T));
                    } else {
                        for (i64 xo = 0; xo < ow; ++xo) drow[xo] = srow[xo * stride];
                    }
                }
            }
}

template <typename T>
void col2im_acc(const T* col, T* x, i64 cin, i64 h, i64 w, i64 kh, i64 kw, i64 stride, i64 oh, i64 ow) {
    for (i64 ci = 0; ci < cin; ++ci)
        for (i64 ky = 0; ky < kh; ++ky)
            for (i64 kx = 0; kx < kw; ++kx) {
                const T* crow = col + ((ci * kh + ky) * kw + kx) * oh * ow;
                for (i64 y = 0; y < oh; ++y) {
                    T* drow = x + ci * h * w + (y * stride + ky) * w + kx;
                    const T* srow = crow + y * ow;
                    for (i64 xo = 0; xo < ow; ++xo) drow[xo * stride] += srow[xo];
                }
            }
}

// Valid (unpadded) convolution via im2col + small GEMM kernels.
template <typename T>
Tensor<T> conv2d_valid(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, i64 stride) {
    const i64 n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
    const i64 cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin)
        throw ShapeError("conv2d: weight channels " + std::to_string(w.dim(1)) + " != input channels " + std::to_string(cin));
    if (h < kh || ww < kw) throw ShapeError("conv2d: input smaller than kernel after padding");
    if ((h - kh) % stride != 0 || (ww - kw) % stride != 0)
        throw ShapeError("conv2d: non-integral output size (input " + shape_str(x.shape()) + ", kernel " +
                         std::to_string(kh) + "x" + std::to_string(kw) + ", stride " + std::to_string(stride) + ")");
    const i64 oh = (h - kh) / stride + 1, ow = (ww - kw) / stride + 1;
    const i64 ckk = cin * kh * kw, ohw = oh * ow;
    const bool pointwise = (kh == 1 && kw == 1 && stride == 1);

    Tensor<T> out({n, cout, oh, ow});
    const T* pw = w.data();
    T* po = out.data();
    parallel_for(n, cout * ckk * ohw, [&](i64 lo, i64 hi) {
        std::vector<T> col;
        if (!pointwise) col.resize(static_cast<size_t>(ckk * ohw));
        for (i64 in = lo; in < hi; ++in) {
            const T* xin = x.data() + in * cin * h * ww;
            const T* cols = pointwise ? xin : col.data();
            if (!pointwise) im2col(xin, col.data(), cin, h, ww, kh, kw, stride, oh, ow);
            T* oslice = po + in * cout * ohw;
            if (b.defined()) {
                const T* pb = b.data();
                for (i64 co = 0; co < cout; ++co) std::fill(oslice + co * ohw, oslice + (co + 1) * ohw, pb[co]);
            }
            gemm_nn_acc(pw, cols, oslice, cout, ckk, ohw);
        }
    });

    if (recording<T>({&x, &w, &b})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, wc = w, bc = b, oc = out;
        Tape<T>::active()->record("conv2d", {out},
                                  [xc, wc, bc, oc, n, cin, h, ww, cout, kh, kw, stride, oh, ow, ckk, ohw, pointwise]() mutable {
            const T* g = oc.grad();
            std::vector<T> col2;
            std::vector<T> dcol;
            if (!pointwise) {
                col2.resize(static_cast<size_t>(ckk * ohw));
                if (xc.requires_grad()) dcol.resize(static_cast<size_t>(ckk * ohw));
            }
            T* gx = xc.requires_grad() ? xc.grad() : nullptr;
            T* gw = wc.requires_grad() ? wc.grad() : nullptr;
            T* gb = (bc.defined() && bc.requires_grad()) ? bc.grad() : nullptr;
            for (i64 in = 0; in < n; ++in) {
                const T* xin = xc.data() + in * cin * h * ww;
                const T* gout = g + in * cout * ohw;
                const T* cols = nullptr;
                if (gw) {
                    if (pointwise) {
                        cols = xin;
                    } else {
                        im2col(xin, col2.data(), cin, h, ww, kh, kw, stride, oh, ow);
                        cols = col2.data();
                    }
                    gemm_nt_acc(gout, cols, gw, cout, ohw, ckk);
                }
                if (gx) {
                    if (pointwise) {
                        gemm_tn_acc(wc.data(), gout, gx + in * cin * h * ww, cout, ckk, ohw);
                    } else {
                        std::fill(dcol.begin(), dcol.end(), T(0));
                        gemm_tn_acc(wc.data(), gout, dcol.data(), cout, ckk, ohw);
                        col2im_acc(dcol.data(), gx + in * cin * h * ww, cin, h, ww, kh, kw, stride, oh, ow);
                    }
                }
                if (gb) {
                    for (i64 co = 0; co < cout; ++co) {
                        const T* grow = gout + co * ohw;
                        T acc = T(0);
                        for (i64 j = 0; j < ohw; ++j) acc += grow[j];
                        gb[co] += acc;
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace detail

/// 2-D convolution over [N,Cin,H,W] with [Cout,Cin,kH,kW] weights, optional
/// bias, stride, and zero or reflect padding of the given size.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>(), i64 stride = 1,
                 PadMode mode = PadMode::Zero, i64 pad = 0) {
    detail::require_4d(x, "conv2d");
    detail::require_4d(w, "conv2d weight");
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(0))) throw ShapeError("conv2d: bias must be [Cout]");
    if (pad == 0) return detail::conv2d_valid(x, w, b, stride);
    Tensor<T> padded = pad2d(x, pad, pad, pad, pad, mode);
    return detail::conv2d_valid(padded, w, b, stride);
}

/// Non-overlapping s x s pooling. Avg backward spreads 1/s^2; max backward
/// routes to the first (row-major) maximum of each window.
template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, PoolMode mode, i64 s) {
    detail::require_4d(x, "pool2d");
    if (s < 1) throw ShapeError("pool2d: ratio must be >= 1");
    const i64 n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % s != 0 || w % s != 0)
        throw ShapeError("pool2d: dims " + shape_str(x.shape()) + " not divisible by ratio " + std::to_string(s));
    const i64 oh = h / s, ow = w / s;
    Tensor<T> out({n, c, oh, ow});
    const T* px = x.data();
    T* po = out.data();
    std::vector<i64> argmax;
    if (mode == PoolMode::Max) argmax.resize(static_cast<size_t>(out.numel()));
    const T inv = T(1) / static_cast<T>(s * s);
    for (i64 plane = 0; plane < n * c; ++plane) {
        const T* src = px + plane * h * w;
        T* dst = po + plane * oh * ow;
        for (i64 y = 0; y < oh; ++y)
            for (i64 xw = 0; xw < ow; ++xw) {
                if (mode == PoolMode::Avg) {
                    T acc = T(0);
                    for (i64 ky = 0; ky < s; ++ky) {
                        const T* row = src + (y * s + ky) * w + xw * s;
                        for (i64 kx = 0; kx < s; ++kx) acc += row[kx];
                    }
                    dst[y * ow + xw] = acc * inv;
                } else {
                    i64 best = (y * s) * w + xw * s;
                    T bv = src[best];
                    for (i64 ky = 0; ky < s; ++ky)
                        for (i64 kx = 0; kx < s; ++kx) {
                            const i64 idx = (y * s + ky) * w + xw * s + kx;
                            if (src[idx] > bv) {
                                bv = src[idx];
                                best = idx;
                            }
                        }
                    dst[y * ow + xw] = bv;
                    argmax[static_cast<size_t>(plane * oh * ow + y * ow + xw)] = best;
                }
            }
    }
    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        Tape<T>::active()->record("pool2d", {out},
                                  [xc, oc, mode, s, inv, argmax = std::move(argmax), n, c, h, w, oh, ow]() mutable {
            if (!xc.requires_grad()) return;
            const T* g = oc.grad();
            T* gx = xc.grad();
            for (i64 plane = 0; plane < n * c; ++plane) {
                const T* gsrc = g + plane * oh * ow;
                T* gdst = gx + plane * h * w;
                for (i64 y = 0; y < oh; ++y)
                    for (i64 xw = 0; xw < ow; ++xw) {
                        const T gv = gsrc[y * ow + xw];
                        if (mode == PoolMode::Avg) {
                            for (i64 ky = 0; ky < s; ++ky) {
                                T* row = gdst + (y * s + ky) * w + xw * s;
                                for (i64 kx = 0; kx < s; ++kx) row[kx] += gv * inv;
                            }
                        } else {
                            gdst[argmax[static_cast<size_t>(plane * oh * ow + y * ow + xw)]] += gv;
                        }
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Scaled dot-product attention on [N,h,L,d] tensors. When probs_out is
/// given it receives the softmax matrix [N,h,Lq,Lkv].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Tensor<T>* probs_out = nullptr) {
    detail::require_4d(q, "attention Q");
    detail::require_4d(k, "attention K");
    detail::require_4d(v, "attention V");
    const i64 d = q.dim(3);
    if (d < 1) throw ShapeError("attention: head dim must be >= 1");
    if (k.dim(0) != q.dim(0) || k.dim(1) != q.dim(1) || k.dim(3) != d)
        throw ShapeError("attention: K shape " + shape_str(k.shape()) + " incompatible with Q " + shape_str(q.shape()));
    if (v.shape() != k.shape()) throw ShapeError("attention: V must match K shape");
    Tensor<T> scores = matmul(q, k, /*transpose_b=*/true);
    Tensor<T> scaled = mul_scalar(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    Tensor<T> probs = softmax_lastdim(scaled);
    if (probs_out) *probs_out = probs;
    return matmul(probs, v);
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

namespace detail {

// Half-pixel-center source coordinate for output index i.
inline double src_coord(i64 i, i64 out_size, i64 in_size) {
    return (static_cast<double>(i) + 0.5) * (static_cast<double>(in_size) / static_cast<double>(out_size)) - 0.5;
}

inline i64 clamp_idx(i64 i, i64 size) { return std::max<i64>(0, std::min<i64>(i, size - 1)); }

// Catmull-Rom-family cubic kernel, a = -0.5.
inline double cubic_weight(double t) {
    const double a = -0.5;
    const double at = std::abs(t);
    if (at <= 1.0) return ((a + 2.0) * at - (a + 3.0)) * at * at + 1.0;
    if (at < 2.0) return (((at - 5.0) * at + 8.0) * at - 4.0) * a;
    return 0.0;
}

}  // namespace detail

/// Bilinear resampling to (out_h, out_w), half-pixel centers, clamped edges.
/// Differentiable.
template <typename T>
Tensor<T> resample_bilinear(const Tensor<T>& x, i64 out_h, i64 out_w) {
    detail::require_4d(x, "resample_bilinear");
    if (out_h < 1 || out_w < 1) throw ShapeError("resample_bilinear: non-positive target size");
    const i64 n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> out({n, c, out_h, out_w});

    // Per-axis taps are shared by every row/column; precompute once.
    std::vector<i64> y0(static_cast<size_t>(out_h)), y1(static_cast<size_t>(out_h));
    std::vector<T> fy(static_cast<size_t>(out_h));
    for (i64 y = 0; y < out_h; ++y) {
        const double s = detail::src_coord(y, out_h, h);
        const i64 base = static_cast<i64>(std::floor(s));
        y0[static_cast<size_t>(y)] = detail::clamp_idx(base, h);
        y1[static_cast<size_t>(y)] = detail::clamp_idx(base + 1, h);
        fy[static_cast<size_t>(y)] = static_cast<T>(s - static_cast<double>(base));
    }
    std::vector<i64> x0(static_cast<size_t>(out_w)), x1(static_cast<size_t>(out_w));
    std::vector<T> fx(static_cast<size_t>(out_w));
    for (i64 xw = 0; xw < out_w; ++xw) {
        const double s = detail::src_coord(xw, out_w, w);
        const i64 base = static_cast<i64>(std::floor(s));
        x0[static_cast<size_t>(xw)] = detail::clamp_idx(base, w);
        x1[static_cast<size_t>(xw)] = detail::clamp_idx(base + 1, w);
        fx[static_cast<size_t>(xw)] = static_cast<T>(s - static_cast<double>(base));
    }

    const T* px = x.data();
    T* po = out.data();
    for (i64 plane = 0; plane < n * c; ++plane) {
        const T* src = px + plane * h * w;
        T* dst = po + plane * out_h * out_w;
        for (i64 y = 0; y < out_h; ++y) {
            const T wy = fy[static_cast<size_t>(y)];
            const T* r0 = src + y0[static_cast<size_t>(y)] * w;
            const T* r1 = src + y1[static_cast<size_t>(y)] * w;
            for (i64 xw = 0; xw < out_w; ++xw) {
                const T wx = fx[static_cast<size_t>(xw)];
                const T top = r0[x0[static_cast<size_t>(xw)]] * (T(1) - wx) + r0[x1[static_cast<size_t>(xw)]] * wx;
                const T bot = r1[x0[static_cast<size_t>(xw)]] * (T(1) - wx) + r1[x1[static_cast<size_t>(xw)]] * wx;
                dst[y * out_w + xw] = top * (T(1) - wy) + bot * wy;
            }
        }
    }

    if (detail::recording<T>({&x})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, oc = out;
        Tape<T>::active()->record("resample_bilinear", {out},
                                  [xc, oc, y0 = std::move(y0), y1 = std::move(y1), fy = std::move(fy),
                                   x0 = std::move(x0), x1 = std::move(x1), fx = std::move(fx), n, c, h, w, out_h,
                                   out_w]() mutable {
            if (!xc.requires_grad()) return;
            const T* g = oc.grad();
            T* gx = xc.grad();
            for (i64 plane = 0; plane < n * c; ++plane) {
                const T* gsrc = g + plane * out_h * out_w;
                T* gdst = gx + plane * h * w;
                for (i64 y = 0; y < out_h; ++y) {
                    const T wy = fy[static_cast<size_t>(y)];
                    T* r0 = gdst + y0[static_cast<size_t>(y)] * w;
                    T* r1 = gdst + y1[static_cast<size_t>(y)] * w;
                    for (i64 xw = 0; xw < out_w; ++xw) {
                        const T wx = fx[static_cast<size_t>(xw)];
                        const T gv = gsrc[y * out_w + xw];
                        r0[x0[static_cast<size_t>(xw)]] += gv * (T(1) - wy) * (T(1) - wx);
                        r0[x1[static_cast<size_t>(xw)]] += gv * (T(1) - wy) * wx;
                        r1[x0[static_cast<size_t>(xw)]] += gv * wy * (T(1) - wx);
                        r1[x1[static_cast<size_t>(xw)]] += gv * wy * wx;
                    }
                }
            }
        });
    }
    return out;
}

/// Bicubic resampling (a = -0.5), forward only; used for data synthesis.
template <typename T>
Tensor<T> resample_bicubic(const Tensor<T>& x, i64 out_h, i64 out_w) {
    detail::require_4d(x, "resample_bicubic");
    if (out_h < 1 || out_w < 1) throw ShapeError("resample_bicubic: non-positive target size");
    if (detail::recording<T>({&x})) throw ValueError("resample_bicubic: no gradient rule (forward-only)");
    const i64 n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> out({n, c, out_h, out_w});

    std::vector<i64> ty(static_cast<size_t>(out_h * 4)), tx(static_cast<size_t>(out_w * 4));
    std::vector<double> wy(static_cast<size_t>(out_h * 4)), wx(static_cast<size_t>(out_w * 4));
    for (i64 y = 0; y < out_h; ++y) {
        const double s = detail::src_coord(y, out_h, h);
        const i64 base = static_cast<i64>(std::floor(s));
        for (i64 t = 0; t < 4; ++t) {
            ty[static_cast<size_t>(y * 4 + t)] = detail::clamp_idx(base - 1 + t, h);
            wy[static_cast<size_t>(y * 4 + t)] = detail::cubic_weight(s - static_cast<double>(base - 1 + t));
        }
    }
    for (i64 xw = 0; xw < out_w; ++xw) {
        const double s = detail::src_coord(xw, out_w, w);
        const i64 base = static_cast<i64>(std::floor(s));
        for (i64 t = 0; t < 4; ++t) {
            tx[static_cast<size_t>(xw * 4 + t)] = detail::clamp_idx(base - 1 + t, w);
            wx[static_cast<size_t>(xw * 4 + t)] = detail::cubic_weight(s - static_cast<double>(base - 1 + t));
        }
    }

    const T* px = x.data();
    T* po = out.data();
    for (i64 plane = 0; plane < n * c; ++plane) {
        const T* src = px + plane * h * w;
        T* dst = po + plane * out_h * out_w;
        for (i64 y = 0; y < out_h; ++y)
            for (i64 xw = 0; xw < out_w; ++xw) {
                double acc = 0.0;
                for (i64 a = 0; a < 4; ++a) {
                    const T* row = src + ty[static_cast<size_t>(y * 4 + a)] * w;
                    double racc = 0.0;
                    for (i64 b2 = 0; b2 < 4; ++b2)
                        racc += wx[static_cast<size_t>(xw * 4 + b2)] *
                                static_cast<double>(row[tx[static_cast<size_t>(xw * 4 + b2)]]);
                    acc += wy[static_cast<size_t>(y * 4 + a)] * racc;
                }
                dst[y * out_w + xw] = static_cast<T>(acc);
            }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gates and losses
// ---------------------------------------------------------------------------

/// out[n,c,h,w] = x[n,c,h,w] * gate[n,c,0,0]
template <typename T>
Tensor<T> mul_channel_gate(const Tensor<T>& x, const Tensor<T>& gate) {
    detail::require_4d(x, "mul_channel_gate");
    detail::require_4d(gate, "mul_channel_gate gate");
    if (gate.dim(0) != x.dim(0) || gate.dim(1) != x.dim(1) || gate.dim(2) != 1 || gate.dim(3) != 1)
        throw ShapeError("mul_channel_gate: gate must be [N,C,1,1] matching x");
    const i64 planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out(x.shape());
    const T* px = x.data();
    const T* pg = gate.data();
    T* po = out.data();
    for (i64 p = 0; p < planes; ++p) {
        const T gv = pg[p];
        const T* src = px + p * hw;
        T* dst = po + p * hw;
        for (i64 i = 0; i < hw; ++i) dst[i] = src[i] * gv;
    }
    if (detail::recording<T>({&x, &gate})) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, gc = gate, oc = out;
        Tape<T>::active()->record("mul_channel_gate", {out}, [xc, gc, oc, planes, hw]() mutable {
            const T* g = oc.grad();
            if (xc.requires_grad()) {
                T* gx = xc.grad();
                const T* pg2 = gc.data();
                for (i64 p = 0; p < planes; ++p) {
                    const T gv = pg2[p];
                    const T* gr = g + p * hw;
                    T* gd = gx + p * hw;
                    for (i64 i = 0; i < hw; ++i) gd[i] += gr[i] * gv;
                }
            }
            if (gc.requires_grad()) {
                T* gg = gc.grad();
                const T* px2 = xc.data();
                for (i64 p = 0; p < planes; ++p) {
                    const T* gr = g + p * hw;
                    const T* xr = px2 + p * hw;
                    T acc = T(0);
                    for (i64 i = 0; i < hw; ++i) acc += gr[i] * xr[i];
                    gg[p] += acc;
                }
            }
        });
    }
    return out;
}

/// Mean absolute difference; subgradient 0 at exact ties.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape())
        throw ShapeError("l1_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    const i64 n = pred.numel();
    const T* pp = pred.data();
    const T* pt = target.data();
    T acc = T(0);
    for (i64 i = 0; i < n; ++i) acc += std::abs(pp[i] - pt[i]);
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
    if (detail::recording<T>({&pred, &target})) {
        out.set_requires_grad(true);
        Tensor<T> pc = pred, tc = target, oc = out;
        Tape<T>::active()->record("l1_loss", {out}, [pc, tc, oc, n]() mutable {
            const T g = oc.grad()[0] / static_cast<T>(n);
            const T* pp2 = pc.data();
            const T* pt2 = tc.data();
            T* gp = pc.requires_grad() ? pc.grad() : nullptr;
            T* gt = tc.requires_grad() ? tc.grad() : nullptr;
            for (i64 i = 0; i < n; ++i) {
                const T d = pp2[i] - pt2[i];
                const T s = d > T(0) ? g : (d < T(0) ? -g : T(0));
                if (gp) gp[i] += s;
                if (gt) gt[i] -= s;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar-valued function, used as the
/// independent oracle for every analytic backward rule.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, double eps = 0) {
    if (eps <= 0) eps = sizeof(T) == 8 ? 1e-5 : 1e-3;
    Tensor<T> probe = x.clone();
    probe.set_requires_grad(false);
    {
        Tensor<T> y = f(probe);
        if (y.numel() != 1) throw ShapeError("finite_diff_grad: f must return a scalar");
    }
    Tensor<T> grad(x.shape());
    T* pg = grad.data();
    T* pp = probe.data();
    const i64 n = probe.numel();
    for (i64 i = 0; i < n; ++i) {
        const T saved = pp[i];
        pp[i] = saved + static_cast<T>(eps);
        const double fp = static_cast<double>(f(probe).item());
        pp[i] = saved - static_cast<T>(eps);
        const double fm = static_cast<double>(f(probe).item());
        pp[i] = saved;
        pg[i] = static_cast<T>((fp - fm) / (2.0 * eps));
    }
    return grad;
}

}  // namespace mbt
