#pragma once

#include <Eigen/Core>
#include <functional>
#include <utility>
#include <vector>

#include "editshield/tensor.hpp"

namespace editshield::ad {

// Reverse-mode autodiff over a dynamic tape. Each op appends a node holding
// the forward value and a closure that scatters the node's gradient into its
// parents. Graphs are built per forward pass and thrown away; at the sizes
// this library works with, tape overhead is negligible next to the GEMMs.

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Graph {
public:
    // record=false skips all gradient bookkeeping (sampling loops).
    explicit Graph(bool record = true) : record_(record) {}

    Var constant(Tensor t) { return push(std::move(t), false, nullptr); }

    Var leaf(Tensor t) { return push(std::move(t), record_, nullptr); }

    const Tensor& val(Var x) const { return nodes_[static_cast<size_t>(x.id)].value; }

    const Tensor& grad(Var x) const {
        const Node& n = nodes_[static_cast<size_t>(x.id)];
        require(!n.grad.v.empty(), ErrorKind::invalid_input, "gradient not computed for this var");
        return n.grad;
    }

    size_t size() const { return nodes_.size(); }

    void backward(Var loss) {
        require(record_, ErrorKind::invalid_input, "backward on a non-recording graph");
        Node& ln = node(loss);
        require(ln.value.numel() == 1, ErrorKind::invalid_input, "backward expects a scalar loss");
        ensure_grad(loss.id);
        ln.grad.v[0] = 1.0f;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.back && !n.grad.v.empty()) n.back(*this);
        }
    }

    // ----- elementwise -----

    Var add(Var a, Var b) { return binary_pointwise(a, b, /*mul=*/false); }
    Var sub(Var a, Var b) { return add(a, scale(b, -1.0f)); }
    Var mul(Var a, Var b) { return binary_pointwise(a, b, /*mul=*/true); }

    Var div(Var a, Var b) {
        const Tensor& tb = val(b);
        Tensor inv(tb.shape);
        for (int64_t i = 0; i < tb.numel(); ++i) inv.v[i] = 1.0f / tb.v[i];
        Var ib = unary(b, std::move(inv), [](float /*x*/, float y) { return -y * y; });
        return mul(a, ib);
    }

    Var scale(Var a, float k) {
        const Tensor& ta = val(a);
        Tensor out(ta.shape);
        for (int64_t i = 0; i < ta.numel(); ++i) out.v[i] = ta.v[i] * k;
        Var r = push(std::move(out), needs(a), nullptr);
        attach(r, [a, r, k](Graph& g) { g.axpy(a, g.node(r).grad, k); });
        return r;
    }

    Var add_scalar(Var a, float k) {
        const Tensor& ta = val(a);
        Tensor out(ta.shape);
        for (int64_t i = 0; i < ta.numel(); ++i) out.v[i] = ta.v[i] + k;
        Var r = push(std::move(out), needs(a), nullptr);
        attach(r, [a, r](Graph& g) { g.axpy(a, g.node(r).grad, 1.0f); });
        return r;
    }

    Var silu(Var a) {
        return unary_fwd(a,
                         [](float x) {
                             const float s = 1.0f / (1.0f + std::exp(-x));
                             return x * s;
                         },
                         [](float x, float /*y*/) {
                             const float s = 1.0f / (1.0f + std::exp(-x));
                             return s * (1.0f + x * (1.0f - s));
                         });
    }

    Var sigmoid(Var a) {
        return unary_fwd(a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
                         [](float /*x*/, float y) { return y * (1.0f - y); });
    }

    Var abs(Var a) {
        return unary_fwd(a, [](float x) { return std::fabs(x); },
                         [](float x, float /*y*/) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
    }

    Var exp_(Var a) {
        return unary_fwd(a, [](float x) { return std::exp(x); },
                         [](float /*x*/, float y) { return y; });
    }

    Var log_(Var a) {
        return unary_fwd(a, [](float x) { return std::log(x); },
                         [](float x, float /*y*/) { return 1.0f / x; });
    }

    Var sqrt_(Var a) {
        return unary_fwd(a, [](float x) { return std::sqrt(x); },
                         [](float /*x*/, float y) { return 0.5f / std::max(y, 1e-12f); });
    }

    // clamp to [0,1]; subgradient passes wherever the input is inside the box.
    Var clamp01(Var a) {
        return unary_fwd(a, [](float x) { return std::min(1.0f, std::max(0.0f, x)); },
                         [](float x, float /*y*/) { return (x >= 0.0f && x <= 1.0f) ? 1.0f : 0.0f; });
    }

    // ----- reductions -----

    Var sum_all(Var a) {
        const Tensor& ta = val(a);
        double acc = 0.0;
        for (float x : ta.v) acc += x;
        Var r = push(Tensor::scalar(static_cast<float>(acc)), needs(a), nullptr);
        attach(r, [a, r](Graph& g) {
            const float go = g.node(r).grad.v[0];
            Tensor& da = g.ensure_grad(a.id);
            for (auto& x : da.v) x += go;
        });
        return r;
    }

    Var mean_all(Var a) { return scale(sum_all(a), 1.0f / static_cast<float>(val(a).numel())); }

    Var dot(Var a, Var b) { return sum_all(mul(a, b)); }

    // ----- shape -----

    Var reshape(Var a, std::vector<int> shape) {
        const Tensor& ta = val(a);
        require(Tensor::numel_of(shape) == ta.numel(), ErrorKind::invalid_input, "reshape size mismatch");
        Tensor out(std::move(shape), ta.v);
        Var r = push(std::move(out), needs(a), nullptr);
        attach(r, [a, r](Graph& g) {
            const Tensor& go = g.node(r).grad;
            Tensor& da = g.ensure_grad(a.id);
            for (int64_t i = 0; i < go.numel(); ++i) da.v[i] += go.v[i];
        });
        return r;
    }

    Var permute(Var a, std::vector<int> perm) {
        const Tensor& ta = val(a);
        const int nd = ta.ndim();
        require(static_cast<int>(perm.size()) == nd, ErrorKind::invalid_input, "permute rank mismatch");
        std::vector<int> out_shape(perm.size());
        for (int i = 0; i < nd; ++i) out_shape[i] = ta.shape[static_cast<size_t>(perm[i])];
        std::vector<int64_t> in_strides(perm.size()), map = permute_map(ta.shape, perm);
        Tensor out(out_shape);
        for (int64_t o = 0; o < out.numel(); ++o) out.v[o] = ta.v[map[static_cast<size_t>(o)]];
        Var r = push(std::move(out), needs(a), nullptr);
        attach(r, [a, r, map = std::move(map)](Graph& g) {
            const Tensor& go = g.node(r).grad;
            Tensor& da = g.ensure_grad(a.id);
            for (int64_t o = 0; o < go.numel(); ++o) da.v[map[static_cast<size_t>(o)]] += go.v[o];
        });
        return r;
    }

    // x: [N,C,H,W] -> channels [c0, c1)
    Var slice_channels(Var a, int c0, int c1) {
        const Tensor& ta = val(a);
        require(ta.ndim() == 4 && 0 <= c0 && c0 < c1 && c1 <= ta.dim(1), ErrorKind::invalid_input,
                "bad channel slice");
        const int N = ta.dim(0), C = ta.dim(1), HW = ta.dim(2) * ta.dim(3);
        Tensor out({N, c1 - c0, ta.dim(2), ta.dim(3)});
        for (int n = 0; n < N; ++n)
            for (int c = c0; c < c1; ++c)
                std::copy_n(&ta.v[(static_cast<size_t>(n) * C + c) * HW], HW,
                            &out.v[(static_cast<size_t>(n) * (c1 - c0) + (c - c0)) * HW]);
        Var r = push(std::move(out), needs(a), nullptr);
        attach(r, [a, r, c0, c1, N, C, HW](Graph& g) {
            const Tensor& go = g.node(r).grad;
            Tensor& da = g.ensure_grad(a.id);
            for (int n = 0; n < N; ++n)
                for (int c = c0; c < c1; ++c) {
                    const float* src = &go.v[(static_cast<size_t>(n) * (c1 - c0) + (c - c0)) * HW];
                    float* dst = &da.v[(static_cast<size_t>(n) * C + c) * HW];
                    for (int i = 0; i < HW; ++i) dst[i] += src[i];
                }
        });
        return r;
    }

    Var concat_channels(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        require(ta.ndim() == 4 && tb.ndim() == 4 && ta.dim(0) == tb.dim(0) &&
                    ta.dim(2) == tb.dim(2) && ta.dim(3) == tb.dim(3),
                ErrorKind::invalid_input, "concat shape mismatch");
        const int N = ta.dim(0), Ca = ta.dim(1), Cb = tb.dim(1), HW = ta.dim(2) * ta.dim(3);
        Tensor out({N, Ca + Cb, ta.dim(2), ta.dim(3)});
        for (int n = 0; n < N; ++n) {
            std::copy_n(&ta.v[static_cast<size_t>(n) * Ca * HW], static_cast<size_t>(Ca) * HW,
                        &out.v[static_cast<size_t>(n) * (Ca + Cb) * HW]);
            std::copy_n(&tb.v[static_cast<size_t>(n) * Cb * HW], static_cast<size_t>(Cb) * HW,
                        &out.v[(static_cast<size_t>(n) * (Ca + Cb) + Ca) * HW]);
        }
        Var r = push(std::move(out), needs(a) || needs(b), nullptr);
        attach(r, [a, b, r, N, Ca, Cb, HW](Graph& g) {
            const Tensor& go = g.node(r).grad;
            if (g.needs(a)) {
                Tensor& da = g.ensure_grad(a.id);
                for (int n = 0; n < N; ++n) {
                    const float* src = &go.v[static_cast<size_t>(n) * (Ca + Cb) * HW];
                    float* dst = &da.v[static_cast<size_t>(n) * Ca * HW];
                    for (int64_t i = 0; i < static_cast<int64_t>(Ca) * HW; ++i) dst[i] += src[i];
                }
            }
            if (g.needs(b)) {
                Tensor& db = g.ensure_grad(b.id);
                for (int n = 0; n < N; ++n) {
                    const float* src = &go.v[(static_cast<size_t>(n) * (Ca + Cb) + Ca) * HW];
                    float* dst = &db.v[static_cast<size_t>(n) * Cb * HW];
                    for (int64_t i = 0; i < static_cast<int64_t>(Cb) * HW; ++i) dst[i] += src[i];
                }
            }
        });
        return r;
    }

    // ----- linear algebra -----

    // a: [m,k], b: [k,n] -> [m,n]
    Var matmul(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        require(ta.ndim() == 2 && tb.ndim() == 2 && ta.dim(1) == tb.dim(0), ErrorKind::invalid_input,
                "matmul shape mismatch");
        const int m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
        Tensor out({m, n});
        gemm(out.v.data(), ta.v.data(), tb.v.data(), m, k, n, false, false, false);
        Var r = push(std::move(out), needs(a) || needs(b), nullptr);
        attach(r, [a, b, r, m, k, n](Graph& g) {
            const Tensor& go = g.node(r).grad;
            if (g.needs(a))  // dA += dC * B^T
                gemm(g.ensure_grad(a.id).v.data(), go.v.data(), g.val(b).v.data(), m, n, k, false, true, true);
            if (g.needs(b))  // dB += A^T * dC
                gemm(g.ensure_grad(b.id).v.data(), g.val(a).v.data(), go.v.data(), k, m, n, true, false, true);
        });
        return r;
    }

    // a: [B,m,k], b: [B,k,n] (or [B,n,k] when trans_b) -> [B,m,n]
    Var bmm(Var a, Var b, bool trans_b = false) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        require(ta.ndim() == 3 && tb.ndim() == 3 && ta.dim(0) == tb.dim(0), ErrorKind::invalid_input,
                "bmm batch mismatch");
        const int B = ta.dim(0), m = ta.dim(1), k = ta.dim(2);
        const int n = trans_b ? tb.dim(1) : tb.dim(2);
        require(trans_b ? tb.dim(2) == k : tb.dim(1) == k, ErrorKind::invalid_input, "bmm inner mismatch");
        Tensor out({B, m, n});
        for (int bi = 0; bi < B; ++bi)
            gemm(&out.v[static_cast<size_t>(bi) * m * n], &ta.v[static_cast<size_t>(bi) * m * k],
                 &tb.v[static_cast<size_t>(bi) * (trans_b ? n * k : k * n)], m, k, n, false, trans_b, false);
        Var r = push(std::move(out), needs(a) || needs(b), nullptr);
        attach(r, [a, b, r, B, m, k, n, trans_b](Graph& g) {
            const Tensor& go = g.node(r).grad;
            const Tensor& va = g.val(a);
            const Tensor& vb = g.val(b);
            for (int bi = 0; bi < B; ++bi) {
                const float* dc = &go.v[static_cast<size_t>(bi) * m * n];
                if (g.needs(a)) {
                    float* da = &g.ensure_grad(a.id).v[static_cast<size_t>(bi) * m * k];
                    const float* pb = &vb.v[static_cast<size_t>(bi) * (trans_b ? n * k : k * n)];
                    // dA += dC * B^T (or dC * B when B given transposed)
                    gemm(da, dc, pb, m, n, k, false, !trans_b, true);
                }
                if (g.needs(b)) {
                    float* db = &g.ensure_grad(b.id).v[static_cast<size_t>(bi) * (trans_b ? n * k : k * n)];
                    const float* pa = &va.v[static_cast<size_t>(bi) * m * k];
                    if (trans_b)  // dB(n,k) += dC^T * A
                        gemm(db, dc, pa, n, m, k, true, false, true);
                    else  // dB(k,n) += A^T * dC
                        gemm(db, pa, dc, k, m, n, true, false, true);
                }
            }
        });
        return r;
    }

    // x: [..., in], w: [out, in], b: [out] (optional) -> [..., out]
    Var linear(Var x, Var w, Var b = {}) {
        const Tensor& tx = val(x);
        const Tensor& tw = val(w);
        const int in = tw.dim(1), out_dim = tw.dim(0);
        require(tx.ndim() >= 1 && tx.shape.back() == in, ErrorKind::invalid_input, "linear shape mismatch");
        const int rows = static_cast<int>(tx.numel() / in);
        std::vector<int> out_shape = tx.shape;
        out_shape.back() = out_dim;
        Tensor out(out_shape);
        gemm(out.v.data(), tx.v.data(), tw.v.data(), rows, in, out_dim, false, true, false);
        if (b.valid()) {
            const Tensor& tb = val(b);
            require(tb.numel() == out_dim, ErrorKind::invalid_input, "linear bias mismatch");
            for (int rI = 0; rI < rows; ++rI)
                for (int c = 0; c < out_dim; ++c) out.v[static_cast<size_t>(rI) * out_dim + c] += tb.v[c];
        }
        Var r = push(std::move(out), needs(x) || needs(w) || (b.valid() && needs(b)), nullptr);
        attach(r, [x, w, b, r, rows, in, out_dim](Graph& g) {
            const Tensor& go = g.node(r).grad;
            if (g.needs(x))  // dX += dY * W
                gemm(g.ensure_grad(x.id).v.data(), go.v.data(), g.val(w).v.data(), rows, out_dim, in, false,
                     false, true);
            if (g.needs(w))  // dW += dY^T * X
                gemm(g.ensure_grad(w.id).v.data(), go.v.data(), g.val(x).v.data(), out_dim, rows, in, true,
                     false, true);
            if (b.valid() && g.needs(b)) {
                Tensor& db = g.ensure_grad(b.id);
                for (int rI = 0; rI < rows; ++rI)
                    for (int c = 0; c < out_dim; ++c) db.v[c] += go.v[static_cast<size_t>(rI) * out_dim + c];
            }
        });
        return r;
    }

    // ----- conv / resample -----

    // x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout] (optional)
    Var conv2d(Var x, Var w, Var b, int stride, int pad) {
        const Tensor& tx = val(x);
        const Tensor& tw = val(w);
        require(tx.ndim() == 4 && tw.ndim() == 4 && tx.dim(1) == tw.dim(1), ErrorKind::invalid_input,
                "conv2d shape mismatch");
        const int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
        const int O = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
        const int Ho = (H + 2 * pad - kh) / stride + 1;
        const int Wo = (W + 2 * pad - kw) / stride + 1;
        const int K = C * kh * kw, L = Ho * Wo;
        Tensor out({N, O, Ho, Wo});
        std::vector<float> col(static_cast<size_t>(K) * L);
        for (int n = 0; n < N; ++n) {
            im2col(&tx.v[static_cast<size_t>(n) * C * H * W], col.data(), C, H, W, kh, kw, stride, pad, Ho, Wo);
            gemm(&out.v[static_cast<size_t>(n) * O * L], tw.v.data(), col.data(), O, K, L, false, false, false);
        }
        if (b.valid()) {
            const Tensor& tb = val(b);
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) {
                    float* dst = &out.v[(static_cast<size_t>(n) * O + o) * L];
                    for (int i = 0; i < L; ++i) dst[i] += tb.v[o];
                }
        }
        Var r = push(std::move(out), needs(x) || needs(w) || (b.valid() && needs(b)), nullptr);
        attach(r, [x, w, b, r, N, C, H, W, O, kh, kw, stride, pad, Ho, Wo, K, L](Graph& g) {
            const Tensor& go = g.node(r).grad;
            const Tensor& tx2 = g.val(x);
            const Tensor& tw2 = g.val(w);
            std::vector<float> col(static_cast<size_t>(K) * L);
            std::vector<float> dcol(static_cast<size_t>(K) * L);
            for (int n = 0; n < N; ++n) {
                const float* dy = &go.v[static_cast<size_t>(n) * O * L];
                if (g.needs(w)) {
                    im2col(&tx2.v[static_cast<size_t>(n) * C * H * W], col.data(), C, H, W, kh, kw, stride,
                           pad, Ho, Wo);
                    gemm(g.ensure_grad(w.id).v.data(), dy, col.data(), O, L, K, false, true, true);
                }
                if (g.needs(x)) {
                    std::fill(dcol.begin(), dcol.end(), 0.0f);
                    gemm(dcol.data(), tw2.v.data(), dy, K, O, L, true, false, true);
                    col2im(dcol.data(), &g.ensure_grad(x.id).v[static_cast<size_t>(n) * C * H * W], C, H, W,
                           kh, kw, stride, pad, Ho, Wo);
                }
                if (b.valid() && g.needs(b)) {
                    Tensor& db = g.ensure_grad(b.id);
                    for (int o = 0; o < O; ++o) {
                        double acc = 0.0;
                        const float* src = dy + static_cast<size_t>(o) * L;
                        for (int i = 0; i < L; ++i) acc += src[i];
                        db.v[o] += static_cast<float>(acc);
                    }
                }
            }
        });
        return r;
    }

    Var upsample_nearest2x(Var x) {
        const Tensor& tx = val(x);
        require(tx.ndim() == 4, ErrorKind::invalid_input, "upsample expects NCHW");
        const int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
        Tensor out({N, C, H * 2, W * 2});
        for (int nc = 0; nc < N * C; ++nc) {
            const float* src = &tx.v[static_cast<size_t>(nc) * H * W];
            float* dst = &out.v[static_cast<size_t>(nc) * H * W * 4];
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const float s = src[i * W + j];
                    dst[(2 * i) * 2 * W + 2 * j] = s;
                    dst[(2 * i) * 2 * W + 2 * j + 1] = s;
                    dst[(2 * i + 1) * 2 * W + 2 * j] = s;
                    dst[(2 * i + 1) * 2 * W + 2 * j + 1] = s;
                }
        }
        Var r = push(std::move(out), needs(x), nullptr);
        attach(r, [x, r, N, C, H, W](Graph& g) {
            const Tensor& go = g.node(r).grad;
            Tensor& dx = g.ensure_grad(x.id);
            for (int nc = 0; nc < N * C; ++nc) {
                const float* src = &go.v[static_cast<size_t>(nc) * H * W * 4];
                float* dst = &dx.v[static_cast<size_t>(nc) * H * W];
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j)
                        dst[i * W + j] += src[(2 * i) * 2 * W + 2 * j] + src[(2 * i) * 2 * W + 2 * j + 1] +
                                          src[(2 * i + 1) * 2 * W + 2 * j] +
                                          src[(2 * i + 1) * 2 * W + 2 * j + 1];
            }
        });
        return r;
    }

    // ----- normalization / softmax -----

    // x: [N,C,H,W], gamma/beta: [C]
    Var group_norm(Var x, int groups, Var gamma, Var beta, float eps = 1e-5f) {
        const Tensor& tx = val(x);
        require(tx.ndim() == 4 && tx.dim(1) % groups == 0, ErrorKind::invalid_input, "group_norm shape");
        const int N = tx.dim(0), C = tx.dim(1), HW = tx.dim(2) * tx.dim(3);
        const int cs = C / groups;
        const int m = cs * HW;
        const Tensor& tg = val(gamma);
        const Tensor& tb = val(beta);
        Tensor out(tx.shape);
        std::vector<float> mean(static_cast<size_t>(N) * groups), inv(static_cast<size_t>(N) * groups);
        for (int n = 0; n < N; ++n)
            for (int g0 = 0; g0 < groups; ++g0) {
                const float* src = &tx.v[(static_cast<size_t>(n) * C + static_cast<size_t>(g0) * cs) * HW];
                double s = 0.0, s2 = 0.0;
                for (int i = 0; i < m; ++i) {
                    s += src[i];
                    s2 += static_cast<double>(src[i]) * src[i];
                }
                const double mu = s / m;
                const double var = std::max(0.0, s2 / m - mu * mu);
                const float iv = static_cast<float>(1.0 / std::sqrt(var + eps));
                mean[static_cast<size_t>(n) * groups + g0] = static_cast<float>(mu);
                inv[static_cast<size_t>(n) * groups + g0] = iv;
                float* dst = &out.v[(static_cast<size_t>(n) * C + static_cast<size_t>(g0) * cs) * HW];
                for (int c = 0; c < cs; ++c) {
                    const float ga = tg.v[static_cast<size_t>(g0) * cs + c];
                    const float be = tb.v[static_cast<size_t>(g0) * cs + c];
                    for (int i = 0; i < HW; ++i) {
                        const float xv = src[c * HW + i];
                        dst[c * HW + i] = (xv - static_cast<float>(mu)) * iv * ga + be;
                    }
                }
            }
        Var r = push(std::move(out), needs(x) || needs(gamma) || needs(beta), nullptr);
        attach(r, [x, gamma, beta, r, N, C, HW, groups, cs, m, mean = std::move(mean),
                   inv = std::move(inv)](Graph& g) {
            const Tensor& go = g.node(r).grad;
            const Tensor& tx2 = g.val(x);
            const Tensor& tg2 = g.val(gamma);
            for (int n = 0; n < N; ++n)
                for (int g0 = 0; g0 < groups; ++g0) {
                    const size_t base = (static_cast<size_t>(n) * C + static_cast<size_t>(g0) * cs) * HW;
                    const float mu = mean[static_cast<size_t>(n) * groups + g0];
                    const float iv = inv[static_cast<size_t>(n) * groups + g0];
                    double s1 = 0.0, s2 = 0.0;
                    for (int c = 0; c < cs; ++c) {
                        const float ga = tg2.v[static_cast<size_t>(g0) * cs + c];
                        for (int i = 0; i < HW; ++i) {
                            const float xh = (tx2.v[base + c * HW + i] - mu) * iv;
                            const float dxh = go.v[base + c * HW + i] * ga;
                            s1 += dxh;
                            s2 += static_cast<double>(dxh) * xh;
                        }
                    }
                    if (g.needs(x)) {
                        Tensor& dx = g.ensure_grad(x.id);
                        const float c1 = static_cast<float>(s1 / m), c2 = static_cast<float>(s2 / m);
                        for (int c = 0; c < cs; ++c) {
                            const float ga = tg2.v[static_cast<size_t>(g0) * cs + c];
                            for (int i = 0; i < HW; ++i) {
                                const float xh = (tx2.v[base + c * HW + i] - mu) * iv;
                                const float dxh = go.v[base + c * HW + i] * ga;
                                dx.v[base + c * HW + i] += iv * (dxh - c1 - xh * c2);
                            }
                        }
                    }
                    if (g.needs(gamma)) {
                        Tensor& dg = g.ensure_grad(gamma.id);
                        Tensor& db = g.ensure_grad(beta.id);
                        for (int c = 0; c < cs; ++c) {
                            double ag = 0.0, ab = 0.0;
                            for (int i = 0; i < HW; ++i) {
                                const float xh = (tx2.v[base + c * HW + i] - mu) * iv;
                                ag += static_cast<double>(go.v[base + c * HW + i]) * xh;
                                ab += go.v[base + c * HW + i];
                            }
                            dg.v[static_cast<size_t>(g0) * cs + c] += static_cast<float>(ag);
                            db.v[static_cast<size_t>(g0) * cs + c] += static_cast<float>(ab);
                        }
                    }
                }
        });
        return r;
    }

    Var softmax_last(Var x) {
        const Tensor& tx = val(x);
        const int cols = tx.shape.back();
        const int rows = static_cast<int>(tx.numel() / cols);
        Tensor out(tx.shape);
        for (int rI = 0; rI < rows; ++rI) {
            const float* src = &tx.v[static_cast<size_t>(rI) * cols];
            float* dst = &out.v[static_cast<size_t>(rI) * cols];
            float mx = src[0];
            for (int c = 1; c < cols; ++c) mx = std::max(mx, src[c]);
            double s = 0.0;
            for (int c = 0; c < cols; ++c) {
                dst[c] = std::exp(src[c] - mx);
                s += dst[c];
            }
            const float invs = static_cast<float>(1.0 / s);
            for (int c = 0; c < cols; ++c) dst[c] *= invs;
        }
        Var r = push(std::move(out), needs(x), nullptr);
        attach(r, [x, r, rows, cols](Graph& g) {
            const Tensor& go = g.node(r).grad;
            const Tensor& y = g.node(r).value;
            Tensor& dx = g.ensure_grad(x.id);
            for (int rI = 0; rI < rows; ++rI) {
                const float* gy = &go.v[static_cast<size_t>(rI) * cols];
                const float* yy = &y.v[static_cast<size_t>(rI) * cols];
                double s = 0.0;
                for (int c = 0; c < cols; ++c) s += static_cast<double>(gy[c]) * yy[c];
                float* dst = &dx.v[static_cast<size_t>(rI) * cols];
                for (int c = 0; c < cols; ++c) dst[c] += yy[c] * (gy[c] - static_cast<float>(s));
            }
        });
        return r;
    }

    // table: [V,d]; ids index rows; out: lead_shape + [d]
    Var embedding(Var table, const std::vector<int>& ids, std::vector<int> lead_shape) {
        const Tensor& tt = val(table);
        const int d = tt.dim(1);
        require(static_cast<int64_t>(ids.size()) == Tensor::numel_of(lead_shape), ErrorKind::invalid_input,
                "embedding id count mismatch");
        std::vector<int> out_shape = std::move(lead_shape);
        out_shape.push_back(d);
        Tensor out(out_shape);
        for (size_t i = 0; i < ids.size(); ++i) {
            require(ids[i] >= 0 && ids[i] < tt.dim(0), ErrorKind::invalid_input, "embedding id out of range");
            std::copy_n(&tt.v[static_cast<size_t>(ids[i]) * d], d, &out.v[i * d]);
        }
        Var r = push(std::move(out), needs(table), nullptr);
        attach(r, [table, r, ids, d](Graph& g) {
            const Tensor& go = g.node(r).grad;
            Tensor& dt = g.ensure_grad(table.id);
            for (size_t i = 0; i < ids.size(); ++i) {
                float* dst = &dt.v[static_cast<size_t>(ids[i]) * d];
                const float* src = &go.v[i * d];
                for (int c = 0; c < d; ++c) dst[c] += src[c];
            }
        });
        return r;
    }

    // x: [N,C,H,W] + v: [N,C] broadcast over spatial dims.
    Var add_channel_bias(Var x, Var v) {
        const Tensor& tx = val(x);
        const Tensor& tv = val(v);
        require(tx.ndim() == 4 && tv.ndim() == 2 && tv.dim(0) == tx.dim(0) && tv.dim(1) == tx.dim(1),
                ErrorKind::invalid_input, "add_channel_bias shape mismatch");
        const int NC = tx.dim(0) * tx.dim(1), HW = tx.dim(2) * tx.dim(3);
        Tensor out(tx.shape);
        for (int nc = 0; nc < NC; ++nc) {
            const float bias = tv.v[nc];
            const float* src = &tx.v[static_cast<size_t>(nc) * HW];
            float* dst = &out.v[static_cast<size_t>(nc) * HW];
            for (int i = 0; i < HW; ++i) dst[i] = src[i] + bias;
        }
        Var r = push(std::move(out), needs(x) || needs(v), nullptr);
        attach(r, [x, v, r, NC, HW](Graph& g) {
            const Tensor& go = g.node(r).grad;
            if (g.needs(x)) {
                Tensor& dx = g.ensure_grad(x.id);
                for (int64_t i = 0; i < go.numel(); ++i) dx.v[i] += go.v[i];
            }
            if (g.needs(v)) {
                Tensor& dv = g.ensure_grad(v.id);
                for (int nc = 0; nc < NC; ++nc) {
                    double acc = 0.0;
                    const float* src = &go.v[static_cast<size_t>(nc) * HW];
                    for (int i = 0; i < HW; ++i) acc += src[i];
                    dv.v[nc] += static_cast<float>(acc);
                }
            }
        });
        return r;
    }

    bool needs(Var x) const { return nodes_[static_cast<size_t>(x.id)].requires_grad; }

    Tensor& ensure_grad(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.v.empty()) n.grad = Tensor(n.value.shape);
        return n.grad;
    }

    // C[m,n] (+)= op(A) * op(B); row-major buffers.
    static void gemm(float* c, const float* a, const float* b, int m, int k, int n, bool ta, bool tb,
                     bool accumulate) {
        using M = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        using CM = Eigen::Map<M>;
        using CCM = Eigen::Map<const M>;
        CM mc(c, m, n);
        CCM ma(a, ta ? k : m, ta ? m : k);
        CCM mb(b, tb ? n : k, tb ? k : n);
        auto expr = [&]() -> M {
            if (!ta && !tb) return ma * mb;
            if (!ta && tb) return ma * mb.transpose();
            if (ta && !tb) return ma.transpose() * mb;
            return ma.transpose() * mb.transpose();
        };
        if (accumulate)
            mc += expr();
        else
            mc = expr();
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Graph&)> back;
    };

    Node& node(Var x) { return nodes_[static_cast<size_t>(x.id)]; }

    Var push(Tensor t, bool requires_grad, std::function<void(Graph&)> back) {
        Node n;
        n.value = std::move(t);
        n.requires_grad = record_ && requires_grad;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void attach(Var r, std::function<void(Graph&)> back) {
        Node& n = node(r);
        if (n.requires_grad) n.back = std::move(back);
    }

    Var binary_pointwise(Var a, Var b, bool is_mul) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        const bool a_scalar = ta.numel() == 1, b_scalar = tb.numel() == 1;
        require(ta.same_shape(tb) || a_scalar || b_scalar, ErrorKind::invalid_input,
                "elementwise shape mismatch " + shape_string(ta.shape) + " vs " + shape_string(tb.shape));
        const Tensor& big = b_scalar ? ta : tb;
        Tensor out(big.shape);
        const int64_t n = out.numel();
        for (int64_t i = 0; i < n; ++i) {
            const float xa = a_scalar ? ta.v[0] : ta.v[i];
            const float xb = b_scalar ? tb.v[0] : tb.v[i];
            out.v[i] = is_mul ? xa * xb : xa + xb;
        }
        Var r = push(std::move(out), needs(a) || needs(b), nullptr);
        attach(r, [a, b, r, is_mul, a_scalar, b_scalar, n](Graph& g) {
            const Tensor& go = g.node(r).grad;
            const Tensor& ta2 = g.val(a);
            const Tensor& tb2 = g.val(b);
            if (g.needs(a)) {
                Tensor& da = g.ensure_grad(a.id);
                for (int64_t i = 0; i < n; ++i) {
                    const float w = is_mul ? (b_scalar ? tb2.v[0] : tb2.v[i]) : 1.0f;
                    da.v[a_scalar ? 0 : i] += go.v[i] * w;
                }
            }
            if (g.needs(b)) {
                Tensor& db = g.ensure_grad(b.id);
                for (int64_t i = 0; i < n; ++i) {
                    const float w = is_mul ? (a_scalar ? ta2.v[0] : ta2.v[i]) : 1.0f;
                    db.v[b_scalar ? 0 : i] += go.v[i] * w;
                }
            }
        });
        return r;
    }

    template <typename F, typename DF>
    Var unary_fwd(Var a, F f, DF df) {
        const Tensor& ta = val(a);
        Tensor out(ta.shape);
        for (int64_t i = 0; i < ta.numel(); ++i) out.v[i] = f(ta.v[i]);
        return unary_common(a, std::move(out), df);
    }

    template <typename DF>
    Var unary(Var a, Tensor precomputed, DF df) {
        return unary_common(a, std::move(precomputed), df);
    }

    template <typename DF>
    Var unary_common(Var a, Tensor out, DF df) {
        Var r = push(std::move(out), needs(a), nullptr);
        attach(r, [a, r, df](Graph& g) {
            const Tensor& go = g.node(r).grad;
            const Tensor& y = g.node(r).value;
            const Tensor& xin = g.val(a);
            Tensor& da = g.ensure_grad(a.id);
            for (int64_t i = 0; i < go.numel(); ++i) da.v[i] += go.v[i] * df(xin.v[i], y.v[i]);
        });
        return r;
    }

    void axpy(Var a, const Tensor& g_out, float k) {
        Tensor& da = ensure_grad(a.id);
        for (int64_t i = 0; i < g_out.numel(); ++i) da.v[i] += k * g_out.v[i];
    }

    static std::vector<int64_t> permute_map(const std::vector<int>& in_shape, const std::vector<int>& perm) {
        const int nd = static_cast<int>(in_shape.size());
        std::vector<int64_t> in_strides(static_cast<size_t>(nd), 1);
        for (int i = nd - 2; i >= 0; --i)
            in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i) + 1] * in_shape[static_cast<size_t>(i) + 1];
        std::vector<int> out_shape(static_cast<size_t>(nd));
        for (int i = 0; i < nd; ++i) out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        int64_t total = 1;
        for (int d : out_shape) total *= d;
        std::vector<int64_t> map(static_cast<size_t>(total));
        std::vector<int> idx(static_cast<size_t>(nd), 0);
        for (int64_t o = 0; o < total; ++o) {
            int64_t src = 0;
            for (int i = 0; i < nd; ++i)
                src += static_cast<int64_t>(idx[static_cast<size_t>(i)]) * in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
            map[static_cast<size_t>(o)] = src;
            for (int i = nd - 1; i >= 0; --i) {
                if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
                idx[static_cast<size_t>(i)] = 0;
            }
        }
        return map;
    }

    static void im2col(const float* x, float* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int Ho, int Wo) {
        const int L = Ho * Wo;
        for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    float* dst = col + (static_cast<size_t>(c) * kh * kw + static_cast<size_t>(ki) * kw + kj) * L;
                    for (int oh = 0; oh < Ho; ++oh) {
                        const int ih = oh * stride - pad + ki;
                        if (ih < 0 || ih >= H) {
                            std::fill_n(dst + static_cast<size_t>(oh) * Wo, Wo, 0.0f);
                            continue;
                        }
                        const float* src = x + (static_cast<size_t>(c) * H + ih) * W;
                        for (int ow = 0; ow < Wo; ++ow) {
                            const int iw = ow * stride - pad + kj;
                            dst[static_cast<size_t>(oh) * Wo + ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0f;
                        }
                    }
                }
    }

    static void col2im(const float* col, float* dx, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int Ho, int Wo) {
        const int L = Ho * Wo;
        for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    const float* src = col + (static_cast<size_t>(c) * kh * kw + static_cast<size_t>(ki) * kw + kj) * L;
                    for (int oh = 0; oh < Ho; ++oh) {
                        const int ih = oh * stride - pad + ki;
                        if (ih < 0 || ih >= H) continue;
                        float* dst = dx + (static_cast<size_t>(c) * H + ih) * W;
                        for (int ow = 0; ow < Wo; ++ow) {
                            const int iw = ow * stride - pad + kj;
                            if (iw >= 0 && iw < W) dst[iw] += src[static_cast<size_t>(oh) * Wo + ow];
                        }
                    }
                }
    }

    std::vector<Node> nodes_;
    bool record_;
};

}  // namespace editshield::ad
