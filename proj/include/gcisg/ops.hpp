#pragma once

#include <cmath>
#include <cstring>
#include <limits>

#include "gcisg/tensor.hpp"

namespace gcisg {

constexpr double kNormEps = 1e-8;

// ============================================================================
// Raw matmul kernels (row-major, accumulate into C)
// ============================================================================

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
inline void mm_nn(const double* A, const double* B, double* C,
                  std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double a = A[i * K + k];
            const double* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void mm_nt(const double* A, const double* B, double* C,
                  std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        for (std::size_t j = 0; j < N; ++j) {
            const double* b = B + j * K;
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
            C[i * N + j] += s;
        }
    }
}

// C[M,N] += A[P,M]^T * B[P,N]
inline void mm_tn(const double* A, const double* B, double* C,
                  std::size_t M, std::size_t P, std::size_t N) {
    for (std::size_t p = 0; p < P; ++p) {
        const double* b = B + p * N;
        for (std::size_t i = 0; i < M; ++i) {
            const double a = A[p * M + i];
            double* c = C + i * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

}  // namespace detail

// ============================================================================
// matmul
// ============================================================================

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    std::vector<double> out(M * N, 0.0);
    detail::mm_nn(a.data().data(), b.data().data(), out.data(), M, K, N);
    return make_op_result({M, N}, std::move(out), {a, b}, [M, K, N](detail::TensorNode& node) {
        const double* dy = node.grad.data();
        const double* A = node.parents[0]->data.data();
        const double* B = node.parents[1]->data.data();
        if (detail::parent_needs(node, 0))  // dA = dC * B^T
            detail::mm_nt(dy, B, detail::parent_grad(node, 0).data(), M, N, K);
        if (detail::parent_needs(node, 1))  // dB = A^T * dC
            detail::mm_tn(A, dy, detail::parent_grad(node, 1).data(), K, M, N);
    });
}

// ============================================================================
// softmax / log_softmax / nll (all along the last axis, max-subtracted)
// ============================================================================

namespace detail {

inline void rows_of(const Tensor& a, std::size_t& outer, std::size_t& inner) {
    if (a.rank() == 0) throw ShapeError("expected tensor of rank >= 1");
    inner = a.shape().back();
    outer = a.numel() / inner;
}

}  // namespace detail

inline Tensor softmax_last(const Tensor& a) {
    std::size_t outer, n;
    detail::rows_of(a, outer, n);
    std::vector<double> out(a.numel());
    const auto av = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        const double* x = av.data() + o * n;
        double* y = out.data() + o * n;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) m = std::max(m, x[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) { y[i] = std::exp(x[i] - m); z += y[i]; }
        const double inv = 1.0 / z;
        for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
    }
    return make_op_result(a.shape(), std::move(out), {a}, [outer, n](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* y = node.data.data() + o * n;
            const double* dy = node.grad.data() + o * n;
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += dy[i] * y[i];
            for (std::size_t i = 0; i < n; ++i) g[o * n + i] += y[i] * (dy[i] - dot);
        }
    });
}

// softmax along an arbitrary axis; non-terminal axes go through an explicit
// permute rather than hidden broadcasting.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(a.shape()));
    if (axis == a.rank() - 1) return softmax_last(a);
    std::vector<std::size_t> perm;
    for (std::size_t d = 0; d < a.rank(); ++d)
        if (d != axis) perm.push_back(d);
    perm.push_back(axis);
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    return transpose(softmax_last(transpose(a, perm)), inv);
}

inline Tensor softmax(const Tensor& a) { return softmax_last(a); }

inline Tensor log_softmax_last(const Tensor& a) {
    std::size_t outer, n;
    detail::rows_of(a, outer, n);
    std::vector<double> out(a.numel());
    const auto av = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        const double* x = av.data() + o * n;
        double* y = out.data() + o * n;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) m = std::max(m, x[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) z += std::exp(x[i] - m);
        const double lse = m + std::log(z);
        for (std::size_t i = 0; i < n; ++i) y[i] = x[i] - lse;
    }
    return make_op_result(a.shape(), std::move(out), {a}, [outer, n](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* y = node.data.data() + o * n;
            const double* dy = node.grad.data() + o * n;
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += dy[i];
            for (std::size_t i = 0; i < n; ++i) g[o * n + i] += dy[i] - std::exp(y[i]) * s;
        }
    });
}

// Mean negative picked log-probability: -1/N * sum_n logp[n, labels[n]].
inline Tensor nll_loss(const Tensor& logp, const std::vector<int>& labels) {
    if (logp.rank() != 2)
        throw ShapeError("nll_loss: expected [N,C] log-probabilities, got " + shape_str(logp.shape()));
    const std::size_t N = logp.shape()[0], C = logp.shape()[1];
    if (labels.size() != N)
        throw ShapeError("nll_loss: got " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(N) + " rows");
    for (std::size_t n = 0; n < N; ++n)
        if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= C)
            throw ConfigError("nll_loss: label " + std::to_string(labels[n]) +
                              " out of range for " + std::to_string(C) + " classes");
    const auto lv = logp.data();
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) s += lv[n * C + static_cast<std::size_t>(labels[n])];
    const double invn = 1.0 / static_cast<double>(N);
    return make_op_result({}, {-s * invn}, {logp}, [labels, N, C, invn](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        const double d = -node.grad[0] * invn;
        for (std::size_t n = 0; n < N; ++n)
            g[n * C + static_cast<std::size_t>(labels[n])] += d;
    });
}

// ============================================================================
// l2 normalization (rows)
// ============================================================================

// Unit-normalizes a vector [d] or each row of [N,d]. Rows with norm <= eps are
// rejected: a zero embedding has no direction and silently inventing one would
// poison the queue.
inline Tensor l2_normalize(const Tensor& a, double eps = kNormEps) {
    if (a.rank() != 1 && a.rank() != 2)
        throw ShapeError("l2_normalize: expected [d] or [N,d], got " + shape_str(a.shape()));
    const std::size_t d = a.shape().back();
    const std::size_t rows = a.numel() / d;
    std::vector<double> out(a.numel());
    std::vector<double> norms(rows);
    const auto av = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * d;
        double sq = 0.0;
        for (std::size_t i = 0; i < d; ++i) sq += x[i] * x[i];
        const double nrm = std::sqrt(sq);
        if (!(nrm > eps))
            throw DegenerateInputError("l2_normalize: row " + std::to_string(r) +
                                       " has near-zero norm " + std::to_string(nrm));
        norms[r] = nrm;
        const double inv = 1.0 / nrm;
        for (std::size_t i = 0; i < d; ++i) out[r * d + i] = x[i] * inv;
    }
    return make_op_result(a.shape(), std::move(out), {a},
        [rows, d, norms](detail::TensorNode& node) {
            if (!detail::parent_needs(node, 0)) return;
            auto g = detail::parent_grad(node, 0);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* u = node.data.data() + r * d;
                const double* dy = node.grad.data() + r * d;
                double dot = 0.0;
                for (std::size_t i = 0; i < d; ++i) dot += u[i] * dy[i];
                const double inv = 1.0 / norms[r];
                for (std::size_t i = 0; i < d; ++i)
                    g[r * d + i] += (dy[i] - u[i] * dot) * inv;
            }
        });
}

// ============================================================================
// conv2d (cross-correlation), stride/padding, optional channel bias
// ============================================================================

namespace detail {

struct ConvDims {
    std::size_t N, Cin, H, W, Cout, kh, kw, stride, pad, OH, OW;
    bool batched;
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
    if (w.rank() != 4)
        throw ShapeError("conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(w.shape()));
    if (x.rank() != 3 && x.rank() != 4)
        throw ShapeError("conv2d: input must be [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    ConvDims d{};
    d.batched = x.rank() == 4;
    d.N = d.batched ? x.shape()[0] : 1;
    d.Cin = x.shape()[d.batched ? 1 : 0];
    d.H = x.shape()[d.batched ? 2 : 1];
    d.W = x.shape()[d.batched ? 3 : 2];
    d.Cout = w.shape()[0];
    d.kh = w.shape()[2];
    d.kw = w.shape()[3];
    d.stride = stride;
    d.pad = pad;
    if (w.shape()[1] != d.Cin)
        throw ShapeError("conv2d: input channels " + shape_str(x.shape()) +
                         " do not match weight " + shape_str(w.shape()));
    if (d.kh > d.H + 2 * pad || d.kw > d.W + 2 * pad)
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
    d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
    d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
    return d;
}

inline void im2col(const double* x, const ConvDims& d, double* col) {
    // col is [Cin*kh*kw, OH*OW]
    const std::size_t P = d.OH * d.OW;
    for (std::size_t c = 0; c < d.Cin; ++c) {
        for (std::size_t i = 0; i < d.kh; ++i) {
            for (std::size_t j = 0; j < d.kw; ++j) {
                double* row = col + ((c * d.kh + i) * d.kw + j) * P;
                for (std::size_t oh = 0; oh < d.OH; ++oh) {
                    const long ih = static_cast<long>(oh * d.stride + i) - static_cast<long>(d.pad);
                    if (ih < 0 || ih >= static_cast<long>(d.H)) {
                        std::fill(row + oh * d.OW, row + (oh + 1) * d.OW, 0.0);
                        continue;
                    }
                    const double* xr = x + (c * d.H + static_cast<std::size_t>(ih)) * d.W;
                    for (std::size_t ow = 0; ow < d.OW; ++ow) {
                        const long iw = static_cast<long>(ow * d.stride + j) - static_cast<long>(d.pad);
                        row[oh * d.OW + ow] =
                            (iw < 0 || iw >= static_cast<long>(d.W)) ? 0.0 : xr[iw];
                    }
                }
            }
        }
    }
}

inline void col2im_add(const double* col, const ConvDims& d, double* gx) {
    const std::size_t P = d.OH * d.OW;
    for (std::size_t c = 0; c < d.Cin; ++c) {
        for (std::size_t i = 0; i < d.kh; ++i) {
            for (std::size_t j = 0; j < d.kw; ++j) {
                const double* row = col + ((c * d.kh + i) * d.kw + j) * P;
                for (std::size_t oh = 0; oh < d.OH; ++oh) {
                    const long ih = static_cast<long>(oh * d.stride + i) - static_cast<long>(d.pad);
                    if (ih < 0 || ih >= static_cast<long>(d.H)) continue;
                    double* xr = gx + (c * d.H + static_cast<std::size_t>(ih)) * d.W;
                    for (std::size_t ow = 0; ow < d.OW; ++ow) {
                        const long iw = static_cast<long>(ow * d.stride + j) - static_cast<long>(d.pad);
                        if (iw < 0 || iw >= static_cast<long>(d.W)) continue;
                        xr[iw] += row[oh * d.OW + ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     std::size_t stride = 1, std::size_t pad = 0) {
    const detail::ConvDims d = detail::conv_dims(x, w, stride, pad);
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.shape()[0] != d.Cout))
        throw ShapeError("conv2d: bias must be [Cout], got " + shape_str(bias.shape()));

    const std::size_t P = d.OH * d.OW;
    const std::size_t CKK = d.Cin * d.kh * d.kw;
    std::vector<double> out(d.N * d.Cout * P, 0.0);
    std::vector<double> col(CKK * P);
    const double* xp = x.data().data();
    for (std::size_t n = 0; n < d.N; ++n) {
        detail::im2col(xp + n * d.Cin * d.H * d.W, d, col.data());
        detail::mm_nn(w.data().data(), col.data(), out.data() + n * d.Cout * P, d.Cout, CKK, P);
    }
    if (has_bias) {
        const auto bv = bias.data();
        for (std::size_t n = 0; n < d.N; ++n)
            for (std::size_t c = 0; c < d.Cout; ++c) {
                double* yc = out.data() + (n * d.Cout + c) * P;
                for (std::size_t p = 0; p < P; ++p) yc[p] += bv[c];
            }
    }

    Shape out_shape = d.batched ? Shape{d.N, d.Cout, d.OH, d.OW} : Shape{d.Cout, d.OH, d.OW};
    std::vector<Tensor> parents = has_bias ? std::vector<Tensor>{x, w, bias}
                                           : std::vector<Tensor>{x, w};
    return make_op_result(std::move(out_shape), std::move(out), std::move(parents),
        [d, P, CKK, has_bias](detail::TensorNode& node) {
            const double* dy = node.grad.data();
            const double* xp = node.parents[0]->data.data();
            const double* wp = node.parents[1]->data.data();
            const bool need_x = detail::parent_needs(node, 0);
            const bool need_w = detail::parent_needs(node, 1);
            std::vector<double> col(CKK * P);
            std::vector<double> dcol(need_x ? CKK * P : 0);
            for (std::size_t n = 0; n < d.N; ++n) {
                const double* dyn = dy + n * d.Cout * P;
                if (need_w) {
                    detail::im2col(xp + n * d.Cin * d.H * d.W, d, col.data());
                    // dW += dY * col^T
                    detail::mm_nt(dyn, col.data(), detail::parent_grad(node, 1).data(),
                                  d.Cout, P, CKK);
                }
                if (need_x) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    // dcol = W^T * dY
                    detail::mm_tn(wp, dyn, dcol.data(), CKK, d.Cout, P);
                    detail::col2im_add(dcol.data(), d,
                                       detail::parent_grad(node, 0).data() + n * d.Cin * d.H * d.W);
                }
            }
            if (has_bias && detail::parent_needs(node, 2)) {
                auto gb = detail::parent_grad(node, 2);
                for (std::size_t n = 0; n < d.N; ++n)
                    for (std::size_t c = 0; c < d.Cout; ++c) {
                        const double* dyc = dy + (n * d.Cout + c) * P;
                        double s = 0.0;
                        for (std::size_t p = 0; p < P; ++p) s += dyc[p];
                        gb[c] += s;
                    }
            }
        });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                     std::size_t pad = 0) {
    return conv2d(x, w, Tensor(), stride, pad);
}

// ============================================================================
// pooling
// ============================================================================

inline Tensor avg_pool2d(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t stride) {
    if (x.rank() != 3 && x.rank() != 4)
        throw ShapeError("avg_pool2d: input must be [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
    const bool batched = x.rank() == 4;
    const std::size_t N = batched ? x.shape()[0] : 1;
    const std::size_t C = x.shape()[batched ? 1 : 0];
    const std::size_t H = x.shape()[batched ? 2 : 1];
    const std::size_t W = x.shape()[batched ? 3 : 2];
    if (kh == 0 || kw == 0 || stride == 0 || kh > H || kw > W)
        throw ShapeError("avg_pool2d: window " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " invalid for input " + shape_str(x.shape()));
    const std::size_t OH = (H - kh) / stride + 1;
    const std::size_t OW = (W - kw) / stride + 1;
    const double inv = 1.0 / static_cast<double>(kh * kw);

    std::vector<double> out(N * C * OH * OW, 0.0);
    const auto xv = x.data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* xp = xv.data() + nc * H * W;
        double* yp = out.data() + nc * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
                double s = 0.0;
                for (std::size_t i = 0; i < kh; ++i)
                    for (std::size_t j = 0; j < kw; ++j)
                        s += xp[(oh * stride + i) * W + ow * stride + j];
                yp[oh * OW + ow] = s * inv;
            }
    }
    Shape out_shape = batched ? Shape{N, C, OH, OW} : Shape{C, OH, OW};
    return make_op_result(std::move(out_shape), std::move(out), {x},
        [N, C, H, W, OH, OW, kh, kw, stride, inv](detail::TensorNode& node) {
            if (!detail::parent_needs(node, 0)) return;
            auto g = detail::parent_grad(node, 0);
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                double* gp = g.data() + nc * H * W;
                const double* dyp = node.grad.data() + nc * OH * OW;
                for (std::size_t oh = 0; oh < OH; ++oh)
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        const double dv = dyp[oh * OW + ow] * inv;
                        for (std::size_t i = 0; i < kh; ++i)
                            for (std::size_t j = 0; j < kw; ++j)
                                gp[(oh * stride + i) * W + ow * stride + j] += dv;
                    }
            }
        });
}

// [N,C,H,W] -> [N,C] or [C,H,W] -> [C]
inline Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 3 && x.rank() != 4)
        throw ShapeError("global_avg_pool: input must be [C,H,W] or [N,C,H,W], got " +
                         shape_str(x.shape()));
    const bool batched = x.rank() == 4;
    Shape flat = batched ? Shape{x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]}
                         : Shape{x.shape()[0], x.shape()[1] * x.shape()[2]};
    return mean_last(reshape(x, std::move(flat)));
}

// ============================================================================
// linear-layer helpers
// ============================================================================

// y[n,f] = x[n,f] + b[f]
inline Tensor add_bias_rows(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.shape()[0] != x.shape()[1])
        throw ShapeError("add_bias_rows: incompatible " + shape_str(x.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t N = x.shape()[0], F = x.shape()[1];
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto bv = b.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f) out[n * F + f] += bv[f];
    return make_op_result(x.shape(), std::move(out), {x, b}, [N, F](detail::TensorNode& node) {
        if (detail::parent_needs(node, 0)) {
            auto g = detail::parent_grad(node, 0);
            for (std::size_t i = 0; i < N * F; ++i) g[i] += node.grad[i];
        }
        if (detail::parent_needs(node, 1)) {
            auto gb = detail::parent_grad(node, 1);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t f = 0; f < F; ++f) gb[f] += node.grad[n * F + f];
        }
    });
}

}  // namespace gcisg
