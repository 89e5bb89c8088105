#pragma once

// Neural primitives on Tensor<T>: convolutions, pooling, resampling,
// normalization, activations, attention building blocks. Every op records a
// reverse rule; parallel loops are partitioned so that each output element is
// written by exactly one thread, keeping results independent of worker count.

#include <cmath>
#include <cstring>
#include <utility>

#include "lfinet/gemm.hpp"
#include "lfinet/tensor.hpp"

namespace lfinet {

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    require(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()), " vs ",
            shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    std::vector<T> out(a.data().size());
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
    auto na = a.node(), nb = b.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {na, nb},
                                  [na, nb](detail::Node<T>& self) {
                                      if (na->requires_grad) accumulate_grad(*na, {self.grad});
                                      if (nb->requires_grad) accumulate_grad(*nb, {self.grad});
                                  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    std::vector<T> out(a.data().size());
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
    auto na = a.node(), nb = b.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {na, nb},
                                  [na, nb](detail::Node<T>& self) {
                                      if (na->requires_grad) accumulate_grad(*na, {self.grad});
                                      if (nb->requires_grad) {
                                          nb->ensure_grad();
                                          for (size_t i = 0; i < self.grad.size(); ++i)
                                              nb->grad[i] -= self.grad[i];
                                      }
                                  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    std::vector<T> out(a.data().size());
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
    auto na = a.node(), nb = b.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {na, nb},
                                  [na, nb](detail::Node<T>& self) {
                                      if (na->requires_grad) {
                                          na->ensure_grad();
                                          for (size_t i = 0; i < self.grad.size(); ++i)
                                              na->grad[i] += self.grad[i] * nb->value[i];
                                      }
                                      if (nb->requires_grad) {
                                          nb->ensure_grad();
                                          for (size_t i = 0; i < self.grad.size(); ++i)
                                              nb->grad[i] += self.grad[i] * na->value[i];
                                      }
                                  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data().size());
    const T* pa = a.data().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * c;
    auto na = a.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {na},
                                  [na, c](detail::Node<T>& self) {
                                      if (!na->requires_grad) return;
                                      na->ensure_grad();
                                      for (size_t i = 0; i < self.grad.size(); ++i)
                                          na->grad[i] += self.grad[i] * c;
                                  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Act { relu, gelu, sigmoid };

template <typename T>
inline T sigmoid_value(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Act kind) {
    constexpr T inv_sqrt2 = T(0.7071067811865475244);
    constexpr T inv_sqrt2pi = T(0.3989422804014326779);
    std::vector<T> out(x.data().size());
    const T* px = x.data().data();
    switch (kind) {
        case Act::relu:
            for (size_t i = 0; i < out.size(); ++i) out[i] = px[i] > T(0) ? px[i] : T(0);
            break;
        case Act::gelu:
            // exact Gaussian-CDF form
            for (size_t i = 0; i < out.size(); ++i)
                out[i] = px[i] * T(0.5) * (T(1) + std::erf(px[i] * inv_sqrt2));
            break;
        case Act::sigmoid:
            for (size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(px[i]);
            break;
    }
    auto nx = x.node();
    auto saved = out;  // sigmoid reuses y; relu/gelu use x from the parent node
    return Tensor<T>::make_result(
        x.shape(), std::move(out), {nx}, [nx, kind, saved](detail::Node<T>& self) {
            if (!nx->requires_grad) return;
            nx->ensure_grad();
            const T* gy = self.grad.data();
            T* gx = nx->grad.data();
            const T* px = nx->value.data();
            switch (kind) {
                case Act::relu:
                    for (size_t i = 0; i < self.grad.size(); ++i)
                        if (px[i] > T(0)) gx[i] += gy[i];
                    break;
                case Act::gelu:
                    for (size_t i = 0; i < self.grad.size(); ++i) {
                        T cdf = T(0.5) * (T(1) + std::erf(px[i] * inv_sqrt2));
                        T pdf = inv_sqrt2pi * std::exp(T(-0.5) * px[i] * px[i]);
                        gx[i] += gy[i] * (cdf + px[i] * pdf);
                    }
                    break;
                case Act::sigmoid:
                    for (size_t i = 0; i < self.grad.size(); ++i)
                        gx[i] += gy[i] * saved[i] * (T(1) - saved[i]);
                    break;
            }
        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Act::relu); }
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) { return activation(x, Act::gelu); }
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Act::sigmoid); }

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

inline index_t conv_out_extent(index_t in, index_t pad, index_t dil, index_t k, index_t stride) {
    return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

namespace detail {

// col is [Cg*kh*kw, OH*OW] for one image and one channel group.
template <typename T>
void im2col(const T* x, index_t C, index_t H, index_t W, index_t kh, index_t kw, index_t stride,
            index_t pad, index_t dil, index_t oh_n, index_t ow_n, T* col) {
    for (index_t c = 0; c < C; ++c) {
        for (index_t ki = 0; ki < kh; ++ki) {
            for (index_t kj = 0; kj < kw; ++kj) {
                T* dst = col + ((c * kh + ki) * kw + kj) * (oh_n * ow_n);
                for (index_t oh = 0; oh < oh_n; ++oh) {
                    index_t ih = oh * stride - pad + ki * dil;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst + oh * ow_n, dst + (oh + 1) * ow_n, T(0));
                        continue;
                    }
                    const T* src = x + (c * H + ih) * W;
                    for (index_t ow = 0; ow < ow_n; ++ow) {
                        index_t iw = ow * stride - pad + kj * dil;
                        dst[oh * ow_n + ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, index_t C, index_t H, index_t W, index_t kh, index_t kw,
                index_t stride, index_t pad, index_t dil, index_t oh_n, index_t ow_n, T* x) {
    for (index_t c = 0; c < C; ++c) {
        for (index_t ki = 0; ki < kh; ++ki) {
            for (index_t kj = 0; kj < kw; ++kj) {
                const T* src = col + ((c * kh + ki) * kw + kj) * (oh_n * ow_n);
                for (index_t oh = 0; oh < oh_n; ++oh) {
                    index_t ih = oh * stride - pad + ki * dil;
                    if (ih < 0 || ih >= H) continue;
                    T* dst = x + (c * H + ih) * W;
                    for (index_t ow = 0; ow < ow_n; ++ow) {
                        index_t iw = ow * stride - pad + kj * dil;
                        if (iw >= 0 && iw < W) dst[iw] += src[oh * ow_n + ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail

namespace detail {

// Cross-correlation with stride/padding/dilation/groups. x is NCHW, w is
// [Cout, Cin/groups, kh, kw], optional bias is [Cout]. groups == channels
// with one channel per group takes a direct depthwise path.
template <typename T>
Tensor<T> conv2d_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                      index_t stride, index_t pad, index_t dil, index_t groups) {
    require(x.ndim() == 4, "conv2d: input must be 4-d NCHW, got ", shape_str(x.shape()));
    require(w.ndim() == 4, "conv2d: weight must be 4-d, got ", shape_str(w.shape()));
    const index_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const index_t Cout = w.dim(0), Cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    require(stride >= 1 && dil >= 1 && pad >= 0 && groups >= 1, "conv2d: bad hyperparameters");
    require(Cin % groups == 0, "conv2d: in-channels (", Cin, ") not divisible by groups (",
            groups, ")");
    require(Cout % groups == 0, "conv2d: out-channels (", Cout, ") not divisible by groups (",
            groups, ")");
    require(Cg == Cin / groups, "conv2d: weight in-channels-per-group (", Cg, ") must be ",
            Cin / groups);
    if (bias)
        require(bias->numel() == Cout, "conv2d: bias length (", bias->numel(),
                ") must equal out-channels (", Cout, ")");
    const index_t OH = conv_out_extent(H, pad, dil, kh, stride);
    const index_t OW = conv_out_extent(W, pad, dil, kw, stride);
    require(OH >= 1 && OW >= 1, "conv2d: output extent ", OH, "x", OW,
            " is empty for input height/width ", H, "x", W);

    const bool depthwise = (groups == Cin && groups == Cout && Cg == 1);
    const index_t cog = Cout / groups;          // out channels per group
    const index_t K = Cg * kh * kw;             // col rows
    const index_t P = OH * OW;                  // col cols

    std::vector<T> out(static_cast<size_t>(N * Cout * P), T(0));
    const T* px = x.data().data();
    const T* pw = w.data().data();

    if (depthwise) {
#pragma omp parallel for collapse(2) schedule(static)
        for (index_t n = 0; n < N; ++n) {
            for (index_t c = 0; c < Cout; ++c) {
                const T* xin = px + (n * Cin + c) * H * W;
                const T* ker = pw + c * kh * kw;
                T* dst = out.data() + (n * Cout + c) * P;
                for (index_t oh = 0; oh < OH; ++oh) {
                    for (index_t ow = 0; ow < OW; ++ow) {
                        T acc = 0;
                        for (index_t ki = 0; ki < kh; ++ki) {
                            index_t ih = oh * stride - pad + ki * dil;
                            if (ih < 0 || ih >= H) continue;
                            for (index_t kj = 0; kj < kw; ++kj) {
                                index_t iw = ow * stride - pad + kj * dil;
                                if (iw < 0 || iw >= W) continue;
                                acc += ker[ki * kw + kj] * xin[ih * W + iw];
                            }
                        }
                        dst[oh * OW + ow] = acc;
                    }
                }
            }
        }
    } else {
#pragma omp parallel for schedule(static)
        for (index_t n = 0; n < N; ++n) {
            std::vector<T> col(static_cast<size_t>(K * P));
            for (index_t g = 0; g < groups; ++g) {
                detail::im2col(px + (n * Cin + g * Cg) * H * W, Cg, H, W, kh, kw, stride, pad,
                               dil, OH, OW, col.data());
                gemm(false, false, cog, P, K, T(1), pw + g * cog * K, K, col.data(), P, T(0),
                     out.data() + (n * Cout + g * cog) * P, P);
            }
        }
    }
    if (bias) {
        const T* pb = bias->data().data();
        for (index_t n = 0; n < N; ++n)
            for (index_t c = 0; c < Cout; ++c) {
                T* dst = out.data() + (n * Cout + c) * P;
                for (index_t i = 0; i < P; ++i) dst[i] += pb[c];
            }
    }

    auto nx = x.node(), nw = w.node();
    std::vector<std::shared_ptr<detail::Node<T>>> parents{nx, nw};
    std::shared_ptr<detail::Node<T>> nb;
    if (bias) {
        nb = bias->node();
        parents.push_back(nb);
    }
    auto backward = [=](detail::Node<T>& self) {
        const T* gy = self.grad.data();
        if (nb && nb->requires_grad) {
            nb->ensure_grad();
            for (index_t n = 0; n < N; ++n)
                for (index_t c = 0; c < Cout; ++c) {
                    const T* g = gy + (n * Cout + c) * P;
                    T acc = 0;
                    for (index_t i = 0; i < P; ++i) acc += g[i];
                    nb->grad[c] += acc;
                }
        }
        const T* pxv = nx->value.data();
        const T* pwv = nw->value.data();
        if (depthwise) {
            if (nw->requires_grad) {
                nw->ensure_grad();
#pragma omp parallel for schedule(static)
                for (index_t c = 0; c < Cout; ++c) {
                    T* gw = nw->grad.data() + c * kh * kw;
                    for (index_t n = 0; n < N; ++n) {
                        const T* xin = pxv + (n * Cin + c) * H * W;
                        const T* g = gy + (n * Cout + c) * P;
                        for (index_t ki = 0; ki < kh; ++ki)
                            for (index_t kj = 0; kj < kw; ++kj) {
                                T acc = 0;
                                for (index_t oh = 0; oh < OH; ++oh) {
                                    index_t ih = oh * stride - pad + ki * dil;
                                    if (ih < 0 || ih >= H) continue;
                                    for (index_t ow = 0; ow < OW; ++ow) {
                                        index_t iw = ow * stride - pad + kj * dil;
                                        if (iw < 0 || iw >= W) continue;
                                        acc += g[oh * OW + ow] * xin[ih * W + iw];
                                    }
                                }
                                gw[ki * kw + kj] += acc;
                            }
                    }
                }
            }
            if (nx->requires_grad) {
                nx->ensure_grad();
#pragma omp parallel for collapse(2) schedule(static)
                for (index_t n = 0; n < N; ++n)
                    for (index_t c = 0; c < Cin; ++c) {
                        T* gx = nx->grad.data() + (n * Cin + c) * H * W;
                        const T* ker = pwv + c * kh * kw;
                        const T* g = gy + (n * Cout + c) * P;
                        for (index_t oh = 0; oh < OH; ++oh)
                            for (index_t ow = 0; ow < OW; ++ow) {
                                T gv = g[oh * OW + ow];
                                if (gv == T(0)) continue;
                                for (index_t ki = 0; ki < kh; ++ki) {
                                    index_t ih = oh * stride - pad + ki * dil;
                                    if (ih < 0 || ih >= H) continue;
                                    for (index_t kj = 0; kj < kw; ++kj) {
                                        index_t iw = ow * stride - pad + kj * dil;
                                        if (iw < 0 || iw >= W) continue;
                                        gx[ih * W + iw] += gv * ker[ki * kw + kj];
                                    }
                                }
                            }
                    }
            }
            return;
        }
        if (nw->requires_grad) {
            nw->ensure_grad();
            std::vector<T> col(static_cast<size_t>(K * P));
            for (index_t n = 0; n < N; ++n)
                for (index_t g = 0; g < groups; ++g) {
                    detail::im2col(pxv + (n * Cin + g * Cg) * H * W, Cg, H, W, kh, kw, stride,
                                   pad, dil, OH, OW, col.data());
                    gemm(false, true, cog, K, P, T(1), gy + (n * Cout + g * cog) * P, P,
                         col.data(), P, T(1), nw->grad.data() + g * cog * K, K);
                }
        }
        if (nx->requires_grad) {
            nx->ensure_grad();
#pragma omp parallel for schedule(static)
            for (index_t n = 0; n < N; ++n) {
                std::vector<T> colg(static_cast<size_t>(K * P));
                for (index_t g = 0; g < groups; ++g) {
                    gemm(true, false, K, P, cog, T(1), pwv + g * cog * K, K,
                         gy + (n * Cout + g * cog) * P, P, T(0), colg.data(), P);
                    detail::col2im_add(colg.data(), Cg, H, W, kh, kw, stride, pad, dil, OH, OW,
                                       nx->grad.data() + (n * Cin + g * Cg) * H * W);
                }
            }
        }
    };
    return Tensor<T>::make_result({N, Cout, OH, OW}, std::move(out), std::move(parents),
                                  std::move(backward));
}

// Transposed convolution, w is [Cin, Cout, k, k]; output extent (in-1)*stride + k.
template <typename T>
Tensor<T> conv_transpose2d_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                                index_t stride) {
    require(x.ndim() == 4, "conv_transpose2d: input must be 4-d NCHW, got ",
            shape_str(x.shape()));
    require(w.ndim() == 4, "conv_transpose2d: weight must be 4-d, got ", shape_str(w.shape()));
    const index_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const index_t WCin = w.dim(0), Cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    require(WCin == Cin, "conv_transpose2d: weight in-channels (", WCin, ") must equal input (",
            Cin, ")");
    if (bias)
        require(bias->numel() == Cout, "conv_transpose2d: bias length (", bias->numel(),
                ") must equal out-channels (", Cout, ")");
    const index_t OH = (H - 1) * stride + kh;
    const index_t OW = (W - 1) * stride + kw;

    std::vector<T> out(static_cast<size_t>(N * Cout * OH * OW), T(0));
    const T* px = x.data().data();
    const T* pw = w.data().data();
#pragma omp parallel for collapse(2) schedule(static)
    for (index_t n = 0; n < N; ++n)
        for (index_t co = 0; co < Cout; ++co) {
            T* dst = out.data() + (n * Cout + co) * OH * OW;
            for (index_t ci = 0; ci < Cin; ++ci) {
                const T* src = px + (n * Cin + ci) * H * W;
                const T* ker = pw + (ci * Cout + co) * kh * kw;
                for (index_t ih = 0; ih < H; ++ih)
                    for (index_t iw = 0; iw < W; ++iw) {
                        T v = src[ih * W + iw];
                        if (v == T(0)) continue;
                        for (index_t ki = 0; ki < kh; ++ki)
                            for (index_t kj = 0; kj < kw; ++kj)
                                dst[(ih * stride + ki) * OW + iw * stride + kj] +=
                                    v * ker[ki * kw + kj];
                    }
            }
            if (bias) {
                T b = bias->data()[co];
                for (index_t i = 0; i < OH * OW; ++i) dst[i] += b;
            }
        }

    auto nx = x.node(), nw = w.node();
    std::vector<std::shared_ptr<detail::Node<T>>> parents{nx, nw};
    std::shared_ptr<detail::Node<T>> nb;
    if (bias) {
        nb = bias->node();
        parents.push_back(nb);
    }
    auto backward = [=](detail::Node<T>& self) {
        const T* gy = self.grad.data();
        if (nb && nb->requires_grad) {
            nb->ensure_grad();
            for (index_t n = 0; n < N; ++n)
                for (index_t co = 0; co < Cout; ++co) {
                    const T* g = gy + (n * Cout + co) * OH * OW;
                    T acc = 0;
                    for (index_t i = 0; i < OH * OW; ++i) acc += g[i];
                    nb->grad[co] += acc;
                }
        }
        if (nx->requires_grad) {
            nx->ensure_grad();
#pragma omp parallel for collapse(2) schedule(static)
            for (index_t n = 0; n < N; ++n)
                for (index_t ci = 0; ci < Cin; ++ci) {
                    T* gx = nx->grad.data() + (n * Cin + ci) * H * W;
                    for (index_t co = 0; co < Cout; ++co) {
                        const T* g = gy + (n * Cout + co) * OH * OW;
                        const T* ker = nw->value.data() + (ci * Cout + co) * kh * kw;
                        for (index_t ih = 0; ih < H; ++ih)
                            for (index_t iw = 0; iw < W; ++iw) {
                                T acc = 0;
                                for (index_t ki = 0; ki < kh; ++ki)
                                    for (index_t kj = 0; kj < kw; ++kj)
                                        acc += g[(ih * stride + ki) * OW + iw * stride + kj] *
                                               ker[ki * kw + kj];
                                gx[ih * W + iw] += acc;
                            }
                    }
                }
        }
        if (nw->requires_grad) {
            nw->ensure_grad();
#pragma omp parallel for collapse(2) schedule(static)
            for (index_t ci = 0; ci < Cin; ++ci)
                for (index_t co = 0; co < Cout; ++co) {
                    T* gw = nw->grad.data() + (ci * Cout + co) * kh * kw;
                    for (index_t n = 0; n < N; ++n) {
                        const T* src = nx->value.data() + (n * Cin + ci) * H * W;
                        const T* g = gy + (n * Cout + co) * OH * OW;
                        for (index_t ki = 0; ki < kh; ++ki)
                            for (index_t kj = 0; kj < kw; ++kj) {
                                T acc = 0;
                                for (index_t ih = 0; ih < H; ++ih)
                                    for (index_t iw = 0; iw < W; ++iw)
                                        acc += src[ih * W + iw] *
                                               g[(ih * stride + ki) * OW + iw * stride + kj];
                                gw[ki * kw + kj] += acc;
                            }
                    }
                }
        }
    };
    return Tensor<T>::make_result({N, Cout, OH, OW}, std::move(out), std::move(parents),
                                  std::move(backward));
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, index_t stride = 1, index_t pad = 0,
                 index_t dil = 1, index_t groups = 1) {
    return detail::conv2d_impl(x, w, static_cast<const Tensor<T>*>(nullptr), stride, pad, dil,
                               groups);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 index_t stride = 1, index_t pad = 0, index_t dil = 1, index_t groups = 1) {
    return detail::conv2d_impl(x, w, &bias, stride, pad, dil, groups);
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, index_t stride = 2) {
    return detail::conv_transpose2d_impl(x, w, static_cast<const Tensor<T>*>(nullptr), stride);
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           index_t stride = 2) {
    return detail::conv_transpose2d_impl(x, w, &bias, stride);
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
    require(x.ndim() == 4, "avg_pool2x2: input must be 4-d NCHW, got ", shape_str(x.shape()));
    const index_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(H % 2 == 0, "avg_pool2x2: height (", H, ") must be even");
    require(W % 2 == 0, "avg_pool2x2: width (", W, ") must be even");
    const index_t OH = H / 2, OW = W / 2;
    std::vector<T> out(static_cast<size_t>(N * C * OH * OW));
    const T* px = x.data().data();
#pragma omp parallel for collapse(2) schedule(static)
    for (index_t n = 0; n < N; ++n)
        for (index_t c = 0; c < C; ++c) {
            const T* src = px + (n * C + c) * H * W;
            T* dst = out.data() + (n * C + c) * OH * OW;
            for (index_t oh = 0; oh < OH; ++oh)
                for (index_t ow = 0; ow < OW; ++ow)
                    dst[oh * OW + ow] =
                        (src[(2 * oh) * W + 2 * ow] + src[(2 * oh) * W + 2 * ow + 1] +
                         src[(2 * oh + 1) * W + 2 * ow] + src[(2 * oh + 1) * W + 2 * ow + 1]) *
                        T(0.25);
        }
    auto nx = x.node();
    return Tensor<T>::make_result(
        {N, C, OH, OW}, std::move(out), {nx}, [nx, N, C, H, W, OH, OW](detail::Node<T>& self) {
            if (!nx->requires_grad) return;
            nx->ensure_grad();
            const T* gy = self.grad.data();
#pragma omp parallel for collapse(2) schedule(static)
            for (index_t n = 0; n < N; ++n)
                for (index_t c = 0; c < C; ++c) {
                    T* gx = nx->grad.data() + (n * C + c) * H * W;
                    const T* g = gy + (n * C + c) * OH * OW;
                    for (index_t oh = 0; oh < OH; ++oh)
                        for (index_t ow = 0; ow < OW; ++ow) {
                            T v = g[oh * OW + ow] * T(0.25);
                            gx[(2 * oh) * W + 2 * ow] += v;
                            gx[(2 * oh) * W + 2 * ow + 1] += v;
                            gx[(2 * oh + 1) * W + 2 * ow] += v;
                            gx[(2 * oh + 1) * W + 2 * ow + 1] += v;
                        }
                }
        });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    require(x.ndim() == 4, "global_avg_pool: input must be 4-d NCHW, got ",
            shape_str(x.shape()));
    const index_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const T inv = T(1) / static_cast<T>(H * W);
    std::vector<T> out(static_cast<size_t>(N * C));
    const T* px = x.data().data();
    for (index_t nc = 0; nc < N * C; ++nc) {
        const T* src = px + nc * H * W;
        T acc = 0;
        for (index_t i = 0; i < H * W; ++i) acc += src[i];
        out[nc] = acc * inv;
    }
    auto nx = x.node();
    return Tensor<T>::make_result({N, C, 1, 1}, std::move(out), {nx},
                                  [nx, N, C, H, W, inv](detail::Node<T>& self) {
                                      if (!nx->requires_grad) return;
                                      nx->ensure_grad();
                                      for (index_t nc = 0; nc < N * C; ++nc) {
                                          T v = self.grad[nc] * inv;
                                          T* gx = nx->grad.data() + nc * H * W;
                                          for (index_t i = 0; i < H * W; ++i) gx[i] += v;
                                      }
                                  });
}

namespace detail {

struct LerpTap {
    index_t lo, hi;
    double w_hi;  // weight of hi sample; lo gets 1 - w_hi
};

// Half-pixel-center source coordinate, clamped to the valid range.
inline LerpTap bilinear_tap(index_t dst, index_t scale, index_t src_extent) {
    double s = (static_cast<double>(dst) + 0.5) / static_cast<double>(scale) - 0.5;
    if (s < 0) s = 0;
    double max_s = static_cast<double>(src_extent - 1);
    if (s > max_s) s = max_s;
    index_t lo = static_cast<index_t>(s);
    index_t hi = lo + 1 < src_extent ? lo + 1 : src_extent - 1;
    return {lo, hi, s - static_cast<double>(lo)};
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, index_t scale) {
    require(scale == 2 || scale == 4 || scale == 8, "bilinear_upsample: scale (", scale,
            ") must be one of 2, 4, 8");
    require(x.ndim() == 4, "bilinear_upsample: input must be 4-d NCHW, got ",
            shape_str(x.shape()));
    const index_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const index_t OH = H * scale, OW = W * scale;
    std::vector<detail::LerpTap> ty(OH), tx(OW);
    for (index_t i = 0; i < OH; ++i) ty[i] = detail::bilinear_tap(i, scale, H);
    for (index_t i = 0; i < OW; ++i) tx[i] = detail::bilinear_tap(i, scale, W);

    std::vector<T> out(static_cast<size_t>(N * C * OH * OW));
    const T* px = x.data().data();
#pragma omp parallel for schedule(static)
    for (index_t nc = 0; nc < N * C; ++nc) {
        const T* src = px + nc * H * W;
        T* dst = out.data() + nc * OH * OW;
        for (index_t oh = 0; oh < OH; ++oh) {
            const auto& y = ty[oh];
            for (index_t ow = 0; ow < OW; ++ow) {
                const auto& xw = tx[ow];
                T top = src[y.lo * W + xw.lo] * T(1 - xw.w_hi) + src[y.lo * W + xw.hi] * T(xw.w_hi);
                T bot = src[y.hi * W + xw.lo] * T(1 - xw.w_hi) + src[y.hi * W + xw.hi] * T(xw.w_hi);
                dst[oh * OW + ow] = top * T(1 - y.w_hi) + bot * T(y.w_hi);
            }
        }
    }
    auto nx = x.node();
    return Tensor<T>::make_result(
        {N, C, OH, OW}, std::move(out), {nx},
        [nx, N, C, H, W, OH, OW, ty, tx](detail::Node<T>& self) {
            if (!nx->requires_grad) return;
            nx->ensure_grad();
            const T* gy = self.grad.data();
#pragma omp parallel for schedule(static)
            for (index_t nc = 0; nc < N * C; ++nc) {
                T* gx = nx->grad.data() + nc * H * W;
                const T* g = gy + nc * OH * OW;
                for (index_t oh = 0; oh < OH; ++oh) {
                    const auto& y = ty[oh];
                    for (index_t ow = 0; ow < OW; ++ow) {
                        const auto& xw = tx[ow];
                        T gv = g[oh * OW + ow];
                        gx[y.lo * W + xw.lo] += gv * T((1 - y.w_hi) * (1 - xw.w_hi));
                        gx[y.lo * W + xw.hi] += gv * T((1 - y.w_hi) * xw.w_hi);
                        gx[y.hi * W + xw.lo] += gv * T(y.w_hi * (1 - xw.w_hi));
                        gx[y.hi * W + xw.hi] += gv * T(y.w_hi * xw.w_hi);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      std::vector<T>& running_mean, std::vector<T>& running_var, bool training,
                      T eps = T(1e-5), T momentum = T(0.1)) {
    require(x.ndim() == 4, "batchnorm2d: input must be 4-d NCHW, got ", shape_str(x.shape()));
    const index_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(gamma.numel() == C, "batchnorm2d: gamma channels (", gamma.numel(),
            ") must equal input channels (", C, ")");
    require(beta.numel() == C, "batchnorm2d: beta channels (", beta.numel(),
            ") must equal input channels (", C, ")");
    require(static_cast<index_t>(running_mean.size()) == C &&
                static_cast<index_t>(running_var.size()) == C,
            "batchnorm2d: running stats must have ", C, " channels");
    const index_t M = N * H * W;  // samples per channel
    const index_t plane = H * W;

    std::vector<T> mean(C), invstd(C);
    if (training) {
#pragma omp parallel for schedule(static)
        for (index_t c = 0; c < C; ++c) {
            T sum = 0, sq = 0;
            for (index_t n = 0; n < N; ++n) {
                const T* src = x.data().data() + (n * C + c) * plane;
                for (index_t i = 0; i < plane; ++i) {
                    sum += src[i];
                    sq += src[i] * src[i];
                }
            }
            T mu = sum / static_cast<T>(M);
            T var = sq / static_cast<T>(M) - mu * mu;
            if (var < T(0)) var = T(0);
            mean[c] = mu;
            invstd[c] = T(1) / std::sqrt(var + eps);
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
        }
    } else {
        for (index_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            invstd[c] = T(1) / std::sqrt(running_var[c] + eps);
        }
    }

    std::vector<T> out(x.data().size());
    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pb = beta.data().data();
#pragma omp parallel for collapse(2) schedule(static)
    for (index_t n = 0; n < N; ++n)
        for (index_t c = 0; c < C; ++c) {
            const T* src = px + (n * C + c) * plane;
            T* dst = out.data() + (n * C + c) * plane;
            const T mu = mean[c], is = invstd[c], g = pg[c], b = pb[c];
            for (index_t i = 0; i < plane; ++i) dst[i] = (src[i] - mu) * is * g + b;
        }

    auto nx = x.node(), ng = gamma.node(), nb = beta.node();
    auto backward = [nx, ng, nb, mean, invstd, training, N, C, plane, M](detail::Node<T>& self) {
        const T* gy = self.grad.data();
        const T* px = nx->value.data();
        const T* pg = ng->value.data();
        // per-channel reductions
        std::vector<T> sum_gy(C, T(0)), sum_gy_xhat(C, T(0));
#pragma omp parallel for schedule(static)
        for (index_t c = 0; c < C; ++c) {
            T s = 0, sx = 0;
            for (index_t n = 0; n < N; ++n) {
                const T* g = gy + (n * C + c) * plane;
                const T* xv = px + (n * C + c) * plane;
                for (index_t i = 0; i < plane; ++i) {
                    s += g[i];
                    sx += g[i] * (xv[i] - mean[c]) * invstd[c];
                }
            }
            sum_gy[c] = s;
            sum_gy_xhat[c] = sx;
        }
        if (ng->requires_grad) {
            ng->ensure_grad();
            for (index_t c = 0; c < C; ++c) ng->grad[c] += sum_gy_xhat[c];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (index_t c = 0; c < C; ++c) nb->grad[c] += sum_gy[c];
        }
        if (nx->requires_grad) {
            nx->ensure_grad();
            const T invM = T(1) / static_cast<T>(M);
#pragma omp parallel for collapse(2) schedule(static)
            for (index_t n = 0; n < N; ++n)
                for (index_t c = 0; c < C; ++c) {
                    const T* g = gy + (n * C + c) * plane;
                    const T* xv = px + (n * C + c) * plane;
                    T* gx = nx->grad.data() + (n * C + c) * plane;
                    const T coef = pg[c] * invstd[c];
                    if (training) {
                        for (index_t i = 0; i < plane; ++i) {
                            T xhat = (xv[i] - mean[c]) * invstd[c];
                            gx[i] += coef *
                                     (g[i] - sum_gy[c] * invM - xhat * sum_gy_xhat[c] * invM);
                        }
                    } else {
                        for (index_t i = 0; i < plane; ++i) gx[i] += coef * g[i];
                    }
                }
        }
    };
    return Tensor<T>::make_result(x.shape(), std::move(out), {nx, ng, nb}, std::move(backward));
}

// Layer normalization over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    require(x.ndim() >= 1, "layer_norm: input must have at least one axis");
    const index_t D = x.dim(x.ndim() - 1);
    require(gamma.numel() == D && beta.numel() == D, "layer_norm: affine params must have ", D,
            " features, got ", gamma.numel(), "/", beta.numel());
    const index_t rows = x.numel() / D;
    std::vector<T> out(x.data().size());
    std::vector<T> mean(rows), invstd(rows);
    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pb = beta.data().data();
    for (index_t r = 0; r < rows; ++r) {
        const T* src = px + r * D;
        T sum = 0;
        for (index_t i = 0; i < D; ++i) sum += src[i];
        T mu = sum / static_cast<T>(D);
        T var = 0;
        for (index_t i = 0; i < D; ++i) var += (src[i] - mu) * (src[i] - mu);
        var /= static_cast<T>(D);
        T is = T(1) / std::sqrt(var + eps);
        mean[r] = mu;
        invstd[r] = is;
        T* dst = out.data() + r * D;
        for (index_t i = 0; i < D; ++i) dst[i] = (src[i] - mu) * is * pg[i] + pb[i];
    }
    auto nx = x.node(), ng = gamma.node(), nb = beta.node();
    auto backward = [nx, ng, nb, mean, invstd, rows, D](detail::Node<T>& self) {
        const T* gy = self.grad.data();
        const T* px = nx->value.data();
        const T* pg = ng->value.data();
        if (ng->requires_grad) ng->ensure_grad();
        if (nb->requires_grad) nb->ensure_grad();
        if (nx->requires_grad) nx->ensure_grad();
        for (index_t r = 0; r < rows; ++r) {
            const T* g = gy + r * D;
            const T* xv = px + r * D;
            T mu = mean[r], is = invstd[r];
            T mean_gyg = 0, mean_gyg_xhat = 0;
            for (index_t i = 0; i < D; ++i) {
                T xhat = (xv[i] - mu) * is;
                T gg = g[i] * pg[i];
                mean_gyg += gg;
                mean_gyg_xhat += gg * xhat;
                if (ng->requires_grad) ng->grad[i] += g[i] * xhat;
                if (nb->requires_grad) nb->grad[i] += g[i];
            }
            mean_gyg /= static_cast<T>(D);
            mean_gyg_xhat /= static_cast<T>(D);
            if (nx->requires_grad) {
                T* gx = nx->grad.data() + r * D;
                for (index_t i = 0; i < D; ++i) {
                    T xhat = (xv[i] - mu) * is;
                    gx[i] += is * (g[i] * pg[i] - mean_gyg - xhat * mean_gyg_xhat);
                }
            }
        }
    };
    return Tensor<T>::make_result(x.shape(), std::move(out), {nx, ng, nb}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, index_t axis) {
    require(axis >= 0 && axis < static_cast<index_t>(x.ndim()), "softmax: axis ", axis,
            " out of range for ", x.ndim(), "-d tensor");
    const index_t A = x.dim(axis);
    index_t outer = 1, inner = 1;
    for (index_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
    std::vector<T> out(x.data().size());
    const T* px = x.data().data();
    for (index_t o = 0; o < outer; ++o)
        for (index_t in = 0; in < inner; ++in) {
            const T* src = px + o * A * inner + in;
            T* dst = out.data() + o * A * inner + in;
            T mx = src[0];
            for (index_t a = 1; a < A; ++a) mx = std::max(mx, src[a * inner]);
            T sum = 0;
            for (index_t a = 0; a < A; ++a) {
                T e = std::exp(src[a * inner] - mx);
                dst[a * inner] = e;
                sum += e;
            }
            T inv = T(1) / sum;
            for (index_t a = 0; a < A; ++a) dst[a * inner] *= inv;
        }
    auto nx = x.node();
    auto y = out;  // softmax backward needs its own output
    return Tensor<T>::make_result(
        x.shape(), std::move(out), {nx}, [nx, y, outer, inner, A](detail::Node<T>& self) {
            if (!nx->requires_grad) return;
            nx->ensure_grad();
            const T* gy = self.grad.data();
            for (index_t o = 0; o < outer; ++o)
                for (index_t in = 0; in < inner; ++in) {
                    const index_t base = o * A * inner + in;
                    T dot = 0;
                    for (index_t a = 0; a < A; ++a)
                        dot += gy[base + a * inner] * y[base + a * inner];
                    for (index_t a = 0; a < A; ++a)
                        nx->grad[base + a * inner] +=
                            y[base + a * inner] * (gy[base + a * inner] - dot);
                }
        });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    require(lfinet::numel(new_shape) == x.numel(), "reshape: cannot view ",
            shape_str(x.shape()), " as ", shape_str(new_shape));
    std::vector<T> out(x.data().begin(), x.data().end());
    auto nx = x.node();
    return Tensor<T>::make_result(std::move(new_shape), std::move(out), {nx},
                                  [nx](detail::Node<T>& self) {
                                      if (nx->requires_grad) accumulate_grad(*nx, {self.grad});
                                  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<index_t>& perm) {
    require(perm.size() == x.ndim(), "permute: perm rank ", perm.size(), " must match tensor ",
            x.ndim());
    const size_t nd = x.ndim();
    Shape out_shape(nd);
    for (size_t i = 0; i < nd; ++i) out_shape[i] = x.dim(perm[i]);
    std::vector<index_t> in_strides(nd, 1);
    for (size_t i = nd - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * x.dim(i);
    // stride in the input for each output axis
    std::vector<index_t> map_strides(nd);
    for (size_t i = 0; i < nd; ++i) map_strides[i] = in_strides[perm[i]];

    std::vector<T> out(x.data().size());
    const T* px = x.data().data();
    const index_t total = x.numel();
    std::vector<index_t> coord(nd, 0);
    for (index_t o = 0; o < total; ++o) {
        index_t src = 0;
        for (size_t i = 0; i < nd; ++i) src += coord[i] * map_strides[i];
        out[o] = px[src];
        for (size_t i = nd; i-- > 0;) {
            if (++coord[i] < out_shape[i]) break;
            coord[i] = 0;
        }
    }
    auto nx = x.node();
    return Tensor<T>::make_result(
        std::move(out_shape), std::move(out), {nx},
        [nx, map_strides, total, nd, shape = x.shape(), perm](detail::Node<T>& self) {
            if (!nx->requires_grad) return;
            nx->ensure_grad();
            std::vector<index_t> coord(nd, 0);
            for (index_t o = 0; o < total; ++o) {
                index_t src = 0;
                for (size_t i = 0; i < nd; ++i) src += coord[i] * map_strides[i];
                nx->grad[src] += self.grad[o];
                for (size_t i = nd; i-- > 0;) {
                    if (++coord[i] < self.shape[i]) break;
                    coord[i] = 0;
                }
            }
        });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
    require(!xs.empty(), "concat_channels: need at least one input");
    const index_t N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
    index_t C = 0;
    for (const auto& x : xs) {
        require(x.ndim() == 4, "concat_channels: inputs must be 4-d NCHW");
        require(x.dim(0) == N && x.dim(2) == H && x.dim(3) == W,
                "concat_channels: non-channel extents disagree: ", shape_str(x.shape()),
                " vs ", shape_str(xs[0].shape()));
        C += x.dim(1);
    }
    const index_t plane = H * W;
    std::vector<T> out(static_cast<size_t>(N * C * plane));
    std::vector<index_t> offsets;  // channel offset per input
    index_t off = 0;
    for (const auto& x : xs) {
        offsets.push_back(off);
        const index_t ci = x.dim(1);
        const T* px = x.data().data();
        for (index_t n = 0; n < N; ++n)
            std::memcpy(out.data() + (n * C + off) * plane, px + n * ci * plane,
                        sizeof(T) * static_cast<size_t>(ci * plane));
        off += ci;
    }
    std::vector<std::shared_ptr<detail::Node<T>>> parents;
    std::vector<index_t> widths;
    for (const auto& x : xs) {
        parents.push_back(x.node());
        widths.push_back(x.dim(1));
    }
    auto nodes = parents;
    return Tensor<T>::make_result(
        {N, C, H, W}, std::move(out), std::move(parents),
        [nodes, offsets, widths, N, C, plane](detail::Node<T>& self) {
            for (size_t k = 0; k < nodes.size(); ++k) {
                if (!nodes[k]->requires_grad) continue;
                nodes[k]->ensure_grad();
                const index_t ci = widths[k], off = offsets[k];
                for (index_t n = 0; n < N; ++n) {
                    const T* g = self.grad.data() + (n * C + off) * plane;
                    T* gx = nodes[k]->grad.data() + n * ci * plane;
                    for (index_t i = 0; i < ci * plane; ++i) gx[i] += g[i];
                }
            }
        });
}

// Channel ranges [begin, end) must exactly partition the channel axis.
template <typename T>
std::vector<Tensor<T>> slice_channels(const Tensor<T>& x,
                                      const std::vector<std::pair<index_t, index_t>>& ranges) {
    require(x.ndim() == 4, "slice_channels: input must be 4-d NCHW");
    const index_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    index_t expect = 0;
    for (const auto& [b, e] : ranges) {
        require(b == expect, b > expect ? "slice_channels: gap at channel " :
                "slice_channels: overlap at channel ", std::min(b, expect));
        require(e > b && e <= C, "slice_channels: range end ", e, " out of bounds for ", C,
                " channels");
        expect = e;
    }
    require(expect == C, "slice_channels: ranges cover ", expect, " of ", C, " channels");
    const index_t plane = H * W;
    std::vector<Tensor<T>> outs;
    auto nx = x.node();
    for (const auto& [b, e] : ranges) {
        const index_t ci = e - b;
        std::vector<T> out(static_cast<size_t>(N * ci * plane));
        for (index_t n = 0; n < N; ++n)
            std::memcpy(out.data() + n * ci * plane, x.data().data() + (n * C + b) * plane,
                        sizeof(T) * static_cast<size_t>(ci * plane));
        index_t begin = b;
        outs.push_back(Tensor<T>::make_result(
            {N, ci, H, W}, std::move(out), {nx},
            [nx, begin, ci, N, C, plane](detail::Node<T>& self) {
                if (!nx->requires_grad) return;
                nx->ensure_grad();
                for (index_t n = 0; n < N; ++n) {
                    const T* g = self.grad.data() + n * ci * plane;
                    T* gx = nx->grad.data() + (n * C + begin) * plane;
                    for (index_t i = 0; i < ci * plane; ++i) gx[i] += g[i];
                }
            }));
    }
    return outs;
}

// ---------------------------------------------------------------------------
// Matrix products and attention
// ---------------------------------------------------------------------------

// a [m,k] x b [k,n] -> [m,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.ndim() == 2 && b.ndim() == 2, "matmul: expects 2-d operands, got ",
            shape_str(a.shape()), " and ", shape_str(b.shape()));
    const index_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    require(k == k2, "matmul: inner extents disagree (", k, " vs ", k2, ")");
    std::vector<T> out(static_cast<size_t>(m * n));
    gemm(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), out.data(),
         n);
    auto na = a.node(), nb = b.node();
    return Tensor<T>::make_result(
        {m, n}, std::move(out), {na, nb}, [na, nb, m, n, k](detail::Node<T>& self) {
            const T* gy = self.grad.data();
            if (na->requires_grad) {
                na->ensure_grad();
                gemm(false, true, m, k, n, T(1), gy, n, nb->value.data(), n, T(1),
                     na->grad.data(), k);
            }
            if (nb->requires_grad) {
                nb->ensure_grad();
                gemm(true, false, k, n, m, T(1), na->value.data(), k, gy, n, T(1),
                     nb->grad.data(), n);
            }
        });
}

// Batched matmul: a [B,m,k] x b [B,k,n] (or [B,n,k] with trans_b) -> [B,m,n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
    require(a.ndim() == 3 && b.ndim() == 3, "bmm: expects 3-d operands, got ",
            shape_str(a.shape()), " and ", shape_str(b.shape()));
    const index_t B = a.dim(0), m = a.dim(1), k = a.dim(2);
    require(b.dim(0) == B, "bmm: batch extents disagree (", B, " vs ", b.dim(0), ")");
    const index_t n = trans_b ? b.dim(1) : b.dim(2);
    const index_t kb = trans_b ? b.dim(2) : b.dim(1);
    require(k == kb, "bmm: inner extents disagree (", k, " vs ", kb, ")");
    std::vector<T> out(static_cast<size_t>(B * m * n));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
#pragma omp parallel for schedule(static)
    for (index_t i = 0; i < B; ++i)
        gemm(false, trans_b, m, n, k, T(1), pa + i * m * k, k, pb + i * (trans_b ? n * k : k * n),
             trans_b ? k : n, T(0), out.data() + i * m * n, n);
    auto na = a.node(), nb = b.node();
    return Tensor<T>::make_result(
        {B, m, n}, std::move(out), {na, nb}, [na, nb, B, m, n, k, trans_b](detail::Node<T>& self) {
            const T* gy = self.grad.data();
            if (na->requires_grad) {
                na->ensure_grad();
#pragma omp parallel for schedule(static)
                for (index_t i = 0; i < B; ++i) {
                    // dA = dY * B^T  (or dY * B when B was transposed)
                    const T* pb = nb->value.data() + i * (trans_b ? n * k : k * n);
                    gemm(false, !trans_b, m, k, n, T(1), gy + i * m * n, n, pb,
                         trans_b ? k : n, T(1), na->grad.data() + i * m * k, k);
                }
            }
            if (nb->requires_grad) {
                nb->ensure_grad();
#pragma omp parallel for schedule(static)
                for (index_t i = 0; i < B; ++i) {
                    const T* pa = na->value.data() + i * m * k;
                    if (trans_b) {
                        // dB [n,k] = dY^T * A
                        gemm(true, false, n, k, m, T(1), gy + i * m * n, n, pa, k, T(1),
                             nb->grad.data() + i * n * k, k);
                    } else {
                        // dB [k,n] = A^T * dY
                        gemm(true, false, k, n, m, T(1), pa, k, gy + i * m * n, n, T(1),
                             nb->grad.data() + i * k * n, n);
                    }
                }
            }
        });
}

// x [..., in] x w [in, out] + b [out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    require(w.ndim() == 2, "linear: weight must be 2-d, got ", shape_str(w.shape()));
    const index_t in = w.dim(0), out_f = w.dim(1);
    require(x.dim(x.ndim() - 1) == in, "linear: input features (", x.dim(x.ndim() - 1),
            ") must equal weight rows (", in, ")");
    require(b.numel() == out_f, "linear: bias length (", b.numel(), ") must equal out features (",
            out_f, ")");
    const index_t rows = x.numel() / in;
    std::vector<T> out(static_cast<size_t>(rows * out_f));
    gemm(false, false, rows, out_f, in, T(1), x.data().data(), in, w.data().data(), out_f, T(0),
         out.data(), out_f);
    const T* pb = b.data().data();
    for (index_t r = 0; r < rows; ++r)
        for (index_t j = 0; j < out_f; ++j) out[r * out_f + j] += pb[j];
    Shape oshape(x.shape());
    oshape.back() = out_f;
    auto nx = x.node(), nw = w.node(), nb = b.node();
    return Tensor<T>::make_result(
        std::move(oshape), std::move(out), {nx, nw, nb},
        [nx, nw, nb, rows, in, out_f](detail::Node<T>& self) {
            const T* gy = self.grad.data();
            if (nb->requires_grad) {
                nb->ensure_grad();
                for (index_t r = 0; r < rows; ++r)
                    for (index_t j = 0; j < out_f; ++j) nb->grad[j] += gy[r * out_f + j];
            }
            if (nw->requires_grad) {
                nw->ensure_grad();
                gemm(true, false, in, out_f, rows, T(1), nx->value.data(), in, gy, out_f, T(1),
                     nw->grad.data(), out_f);
            }
            if (nx->requires_grad) {
                nx->ensure_grad();
                gemm(false, true, rows, in, out_f, T(1), gy, out_f, nw->value.data(), out_f,
                     T(1), nx->grad.data(), in);
            }
        });
}

// tokens [N,Tk,D] + table [Tk,D] broadcast over the batch.
template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& table) {
    require(x.ndim() == 3 && table.ndim() == 2, "add_rows: expects [N,T,D] and [T,D]");
    const index_t N = x.dim(0), Tk = x.dim(1), D = x.dim(2);
    require(table.dim(0) == Tk && table.dim(1) == D, "add_rows: table shape ",
            shape_str(table.shape()), " must be [", Tk, "x", D, "]");
    std::vector<T> out(x.data().size());
    const T* px = x.data().data();
    const T* pt = table.data().data();
    for (index_t n = 0; n < N; ++n)
        for (index_t i = 0; i < Tk * D; ++i) out[n * Tk * D + i] = px[n * Tk * D + i] + pt[i];
    auto nx = x.node(), nt = table.node();
    return Tensor<T>::make_result({N, Tk, D}, std::move(out), {nx, nt},
                                  [nx, nt, N, Tk, D](detail::Node<T>& self) {
                                      if (nx->requires_grad) accumulate_grad(*nx, {self.grad});
                                      if (nt->requires_grad) {
                                          nt->ensure_grad();
                                          for (index_t n = 0; n < N; ++n)
                                              for (index_t i = 0; i < Tk * D; ++i)
                                                  nt->grad[i] += self.grad[n * Tk * D + i];
                                      }
                                  });
}

// x [N,C,H,W] scaled per channel by s [N,C] (or [N,C,1,1]).
template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& s) {
    require(x.ndim() == 4, "mul_channel: input must be 4-d NCHW");
    const index_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    require(s.numel() == N * C && s.dim(0) == N, "mul_channel: scale shape ",
            shape_str(s.shape()), " must hold ", N, "x", C, " values");
    std::vector<T> out(x.data().size());
    const T* px = x.data().data();
    const T* ps = s.data().data();
    for (index_t nc = 0; nc < N * C; ++nc) {
        const T v = ps[nc];
        const T* src = px + nc * plane;
        T* dst = out.data() + nc * plane;
        for (index_t i = 0; i < plane; ++i) dst[i] = src[i] * v;
    }
    auto nx = x.node(), ns = s.node();
    return Tensor<T>::make_result(
        x.shape(), std::move(out), {nx, ns}, [nx, ns, N, C, plane](detail::Node<T>& self) {
            const T* gy = self.grad.data();
            if (nx->requires_grad) {
                nx->ensure_grad();
                for (index_t nc = 0; nc < N * C; ++nc) {
                    const T v = ns->value[nc];
                    T* gx = nx->grad.data() + nc * plane;
                    const T* g = gy + nc * plane;
                    for (index_t i = 0; i < plane; ++i) gx[i] += g[i] * v;
                }
            }
            if (ns->requires_grad) {
                ns->ensure_grad();
                for (index_t nc = 0; nc < N * C; ++nc) {
                    const T* xv = nx->value.data() + nc * plane;
                    const T* g = gy + nc * plane;
                    T acc = 0;
                    for (index_t i = 0; i < plane; ++i) acc += g[i] * xv[i];
                    ns->grad[nc] += acc;
                }
            }
        });
}

// Multi-head scaled dot-product attention over already-projected q, k, v of
// shape [N, tokens, dim].
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               index_t heads) {
    require(q.ndim() == 3 && k.ndim() == 3 && v.ndim() == 3,
            "attention: q/k/v must be [N, tokens, dim]");
    check_same_shape(q, k, "attention(q,k)");
    check_same_shape(q, v, "attention(q,v)");
    const index_t N = q.dim(0), Tk = q.dim(1), D = q.dim(2);
    require(heads >= 1 && D % heads == 0, "attention: embed dim (", D,
            ") not divisible by heads (", heads, ")");
    const index_t Dh = D / heads;
    auto split = [&](const Tensor<T>& t) {
        return reshape(permute(reshape(t, {N, Tk, heads, Dh}), {0, 2, 1, 3}),
                       {N * heads, Tk, Dh});
    };
    Tensor<T> qh = split(q), kh = split(k), vh = split(v);
    Tensor<T> scores = scale(bmm(qh, kh, /*trans_b=*/true), T(1) / std::sqrt(static_cast<T>(Dh)));
    Tensor<T> attn = softmax(scores, 2);
    Tensor<T> ctx = bmm(attn, vh);
    return reshape(permute(reshape(ctx, {N, heads, Tk, Dh}), {0, 2, 1, 3}), {N, Tk, D});
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    auto nx = x.node();
    return Tensor<T>::make_result({1}, {acc}, {nx}, [nx](detail::Node<T>& self) {
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        for (auto& g : nx->grad) g += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// Fixed-weight scalar probe: sum_i w[i] * x[i]. The weights are constants, so
// this funnels every output coordinate into one differentiable scalar.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, const std::vector<T>& w) {
    require(static_cast<index_t>(w.size()) == x.numel(), "weighted_sum: weight count ",
            w.size(), " must equal tensor size ", x.numel());
    T acc = 0;
    const T* px = x.data().data();
    for (size_t i = 0; i < w.size(); ++i) acc += px[i] * w[i];
    auto nx = x.node();
    return Tensor<T>::make_result({1}, {acc}, {nx}, [nx, w](detail::Node<T>& self) {
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        for (size_t i = 0; i < w.size(); ++i) nx->grad[i] += self.grad[0] * w[i];
    });
}

}  // namespace lfinet
