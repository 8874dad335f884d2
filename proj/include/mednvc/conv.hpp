#pragma once

// 2-D cross-correlation with stride/padding/groups. Grouped convs run as
// per-group im2col + GEMM; the depthwise case (groups == channels) uses
// direct row loops instead.

#include <cstddef>
#include <vector>

#include "mednvc/gemm.hpp"
#include "mednvc/tensor.hpp"

namespace mednvc {

inline int conv_out_size(int in, int pad, int kernel, int stride) {
    return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

struct ConvDims {
    int N, Cin, H, W;
    int Cout, kh, kw;
    int stride, pad, groups;
    int cin_g, cout_g;
    int OH, OW;
};

inline ConvDims check_conv_args(const std::vector<int>& xs, const std::vector<int>& ws,
                                std::size_t bias_len, bool has_bias, int stride, int pad,
                                int groups) {
    if (xs.size() != 4) throw dim_error("conv2d: input must be NCHW, got " + shape_str(xs));
    if (ws.size() != 4) throw dim_error("conv2d: weight must be 4-D, got " + shape_str(ws));
    if (stride < 1) throw dim_error("conv2d: stride must be >= 1, got " + std::to_string(stride));
    if (pad < 0) throw dim_error("conv2d: padding must be >= 0, got " + std::to_string(pad));
    if (groups < 1) throw dim_error("conv2d: groups must be >= 1, got " + std::to_string(groups));
    ConvDims d;
    d.N = xs[0];
    d.Cin = xs[1];
    d.H = xs[2];
    d.W = xs[3];
    d.Cout = ws[0];
    d.kh = ws[2];
    d.kw = ws[3];
    d.stride = stride;
    d.pad = pad;
    d.groups = groups;
    if (d.Cin % groups != 0 || d.Cout % groups != 0) {
        throw dim_error("conv2d: channel axes (in=" + std::to_string(d.Cin) +
                        ", out=" + std::to_string(d.Cout) + ") not divisible by groups " +
                        std::to_string(groups));
    }
    d.cin_g = d.Cin / groups;
    d.cout_g = d.Cout / groups;
    if (ws[1] != d.cin_g) {
        throw dim_error("conv2d: weight in-channel axis " + std::to_string(ws[1]) +
                        " != input channels/groups " + std::to_string(d.cin_g));
    }
    if (has_bias && bias_len != static_cast<std::size_t>(d.Cout)) {
        throw dim_error("conv2d: bias length " + std::to_string(bias_len) +
                        " != out channels " + std::to_string(d.Cout));
    }
    d.OH = conv_out_size(d.H, pad, d.kh, stride);
    d.OW = conv_out_size(d.W, pad, d.kw, stride);
    if (d.OH < 1 || d.OW < 1) {
        throw dim_error("conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
                        " does not fit padded input axes H=" + std::to_string(d.H) +
                        ", W=" + std::to_string(d.W));
    }
    return d;
}

// col is (cin_g*kh*kw) x (OH*OW) for one sample/group slice.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
    const std::size_t OHW = static_cast<std::size_t>(d.OH) * d.OW;
    for (int ci = 0; ci < d.cin_g; ++ci) {
        const T* xc = x + static_cast<std::size_t>(ci) * d.H * d.W;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                T* dst = col + ((static_cast<std::size_t>(ci) * d.kh + ki) * d.kw + kj) * OHW;
                for (int oy = 0; oy < d.OH; ++oy) {
                    const int iy = oy * d.stride - d.pad + ki;
                    T* row = dst + static_cast<std::size_t>(oy) * d.OW;
                    if (iy < 0 || iy >= d.H) {
                        for (int ox = 0; ox < d.OW; ++ox) row[ox] = T(0);
                        continue;
                    }
                    const T* src = xc + static_cast<std::size_t>(iy) * d.W;
                    for (int ox = 0; ox < d.OW; ++ox) {
                        const int ix = ox * d.stride - d.pad + kj;
                        row[ox] = (ix >= 0 && ix < d.W) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_accum(const T* col, const ConvDims& d, T* dx) {
    const std::size_t OHW = static_cast<std::size_t>(d.OH) * d.OW;
    for (int ci = 0; ci < d.cin_g; ++ci) {
        T* xc = dx + static_cast<std::size_t>(ci) * d.H * d.W;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                const T* src = col + ((static_cast<std::size_t>(ci) * d.kh + ki) * d.kw + kj) * OHW;
                for (int oy = 0; oy < d.OH; ++oy) {
                    const int iy = oy * d.stride - d.pad + ki;
                    if (iy < 0 || iy >= d.H) continue;
                    const T* row = src + static_cast<std::size_t>(oy) * d.OW;
                    T* xrow = xc + static_cast<std::size_t>(iy) * d.W;
                    for (int ox = 0; ox < d.OW; ++ox) {
                        const int ix = ox * d.stride - d.pad + kj;
                        if (ix >= 0 && ix < d.W) xrow[ix] += row[ox];
                    }
                }
            }
        }
    }
}

// Per-channel spatial kernel, accumulate-into-rows form.
template <typename T>
void depthwise_forward(const T* x, const T* w, const T* b, const ConvDims& d, T* y) {
    const std::size_t HW = static_cast<std::size_t>(d.H) * d.W;
    const std::size_t OHW = static_cast<std::size_t>(d.OH) * d.OW;
    for (int n = 0; n < d.N; ++n) {
        for (int c = 0; c < d.Cin; ++c) {
            const T* xc = x + (static_cast<std::size_t>(n) * d.Cin + c) * HW;
            const T* wc = w + static_cast<std::size_t>(c) * d.kh * d.kw;
            T* yc = y + (static_cast<std::size_t>(n) * d.Cin + c) * OHW;
            const T bias = b ? b[c] : T(0);
            for (std::size_t i = 0; i < OHW; ++i) yc[i] = bias;
            for (int ki = 0; ki < d.kh; ++ki) {
                for (int kj = 0; kj < d.kw; ++kj) {
                    const T wv = wc[ki * d.kw + kj];
                    // ox range keeping ix = ox*s - pad + kj inside [0, W)
                    int ox0 = 0;
                    while (ox0 * d.stride - d.pad + kj < 0) ++ox0;
                    int ox1 = d.OW;
                    while (ox1 > ox0 && (ox1 - 1) * d.stride - d.pad + kj >= d.W) --ox1;
                    for (int oy = 0; oy < d.OH; ++oy) {
                        const int iy = oy * d.stride - d.pad + ki;
                        if (iy < 0 || iy >= d.H) continue;
                        const T* xrow = xc + static_cast<std::size_t>(iy) * d.W;
                        T* yrow = yc + static_cast<std::size_t>(oy) * d.OW;
                        if (d.stride == 1) {
                            const T* xs = xrow - d.pad + kj;
                            for (int ox = ox0; ox < ox1; ++ox) yrow[ox] += wv * xs[ox];
                        } else {
                            for (int ox = ox0; ox < ox1; ++ox)
                                yrow[ox] += wv * xrow[ox * d.stride - d.pad + kj];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Ptr<T> conv2d(const Ptr<T>& x, const Ptr<T>& w, const Ptr<T>& b, int stride, int padding,
              int groups = 1) {
    const detail::ConvDims d = detail::check_conv_args(x->shape, w->shape, b ? b->numel() : 0,
                                                       b != nullptr, stride, padding, groups);
    const bool depthwise = (groups == d.Cin && d.Cout == d.Cin && d.cin_g == 1);
    const std::size_t OHW = static_cast<std::size_t>(d.OH) * d.OW;
    const std::size_t K = static_cast<std::size_t>(d.cin_g) * d.kh * d.kw;
    std::vector<T> out(static_cast<std::size_t>(d.N) * d.Cout * OHW);

    if (depthwise) {
        detail::depthwise_forward(x->data.data(), w->data.data(), b ? b->data.data() : nullptr, d,
                                  out.data());
    } else {
        std::vector<T> col(K * OHW);
        for (int n = 0; n < d.N; ++n) {
            for (int g = 0; g < d.groups; ++g) {
                const T* xs = x->data.data() +
                              (static_cast<std::size_t>(n) * d.Cin + g * d.cin_g) * d.H * d.W;
                detail::im2col(xs, d, col.data());
                T* ys =
                    out.data() + (static_cast<std::size_t>(n) * d.Cout + g * d.cout_g) * OHW;
                gemm_nn(static_cast<std::size_t>(d.cout_g), OHW, K,
                        w->data.data() + static_cast<std::size_t>(g) * d.cout_g * K, col.data(),
                        ys);
                if (b) {
                    for (int co = 0; co < d.cout_g; ++co) {
                        const T bias = b->data[static_cast<std::size_t>(g) * d.cout_g + co];
                        T* row = ys + static_cast<std::size_t>(co) * OHW;
                        for (std::size_t i = 0; i < OHW; ++i) row[i] += bias;
                    }
                }
            }
        }
    }

    std::vector<Ptr<T>> parents = b ? std::vector<Ptr<T>>{x, w, b} : std::vector<Ptr<T>>{x, w};
    return make_op_result<T>(
        {d.N, d.Cout, d.OH, d.OW}, std::move(out), std::move(parents), "conv2d",
        [x, w, b, d, depthwise, OHW, K](Tensor<T>& node) {
            node.backward_fn = [&node, x, w, b, d, depthwise, OHW, K] {
                if (x->requires_grad) x->ensure_grad();
                if (w->requires_grad) w->ensure_grad();
                if (b && b->requires_grad) b->ensure_grad();

                if (b && b->requires_grad) {
                    for (int n = 0; n < d.N; ++n)
                        for (int c = 0; c < d.Cout; ++c) {
                            const T* g =
                                node.grad.data() + (static_cast<std::size_t>(n) * d.Cout + c) * OHW;
                            T s = T(0);
                            for (std::size_t i = 0; i < OHW; ++i) s += g[i];
                            b->grad[c] += s;
                        }
                }

                if (depthwise) {
                    const std::size_t HW = static_cast<std::size_t>(d.H) * d.W;
                    for (int n = 0; n < d.N; ++n) {
                        for (int c = 0; c < d.Cin; ++c) {
                            const T* gy =
                                node.grad.data() + (static_cast<std::size_t>(n) * d.Cin + c) * OHW;
                            const T* xc =
                                x->data.data() + (static_cast<std::size_t>(n) * d.Cin + c) * HW;
                            T* gx = x->requires_grad
                                        ? x->grad.data() + (static_cast<std::size_t>(n) * d.Cin + c) * HW
                                        : nullptr;
                            const T* wc = w->data.data() + static_cast<std::size_t>(c) * d.kh * d.kw;
                            T* gw = w->requires_grad
                                        ? w->grad.data() + static_cast<std::size_t>(c) * d.kh * d.kw
                                        : nullptr;
                            for (int ki = 0; ki < d.kh; ++ki) {
                                for (int kj = 0; kj < d.kw; ++kj) {
                                    const T wv = wc[ki * d.kw + kj];
                                    T wsum = T(0);
                                    for (int oy = 0; oy < d.OH; ++oy) {
                                        const int iy = oy * d.stride - d.pad + ki;
                                        if (iy < 0 || iy >= d.H) continue;
                                        const T* grow = gy + static_cast<std::size_t>(oy) * d.OW;
                                        const T* xrow = xc + static_cast<std::size_t>(iy) * d.W;
                                        T* gxrow =
                                            gx ? gx + static_cast<std::size_t>(iy) * d.W : nullptr;
                                        for (int ox = 0; ox < d.OW; ++ox) {
                                            const int ix = ox * d.stride - d.pad + kj;
                                            if (ix < 0 || ix >= d.W) continue;
                                            wsum += grow[ox] * xrow[ix];
                                            if (gxrow) gxrow[ix] += grow[ox] * wv;
                                        }
                                    }
                                    if (gw) gw[ki * d.kw + kj] += wsum;
                                }
                            }
                        }
                    }
                    return;
                }

                std::vector<T> col(K * OHW);
                std::vector<T> colT;
                std::vector<T> wT;
                std::vector<T> dcol;
                for (int n = 0; n < d.N; ++n) {
                    for (int g = 0; g < d.groups; ++g) {
                        const T* xs = x->data.data() +
                                      (static_cast<std::size_t>(n) * d.Cin + g * d.cin_g) * d.H * d.W;
                        const T* gy = node.grad.data() +
                                      (static_cast<std::size_t>(n) * d.Cout + g * d.cout_g) * OHW;
                        if (w->requires_grad) {
                            detail::im2col(xs, d, col.data());
                            colT.resize(OHW * K);
                            pack_transpose(K, OHW, col.data(), colT.data());
                            gemm_nn(static_cast<std::size_t>(d.cout_g), K, OHW, gy, colT.data(),
                                    w->grad.data() + static_cast<std::size_t>(g) * d.cout_g * K,
                                    true);
                        }
                        if (x->requires_grad) {
                            wT.resize(K * d.cout_g);
                            pack_transpose(static_cast<std::size_t>(d.cout_g), K,
                                           w->data.data() + static_cast<std::size_t>(g) * d.cout_g * K,
                                           wT.data());
                            dcol.assign(K * OHW, T(0));
                            gemm_nn(K, OHW, static_cast<std::size_t>(d.cout_g), wT.data(), gy,
                                    dcol.data());
                            detail::col2im_accum(
                                dcol.data(), d,
                                x->grad.data() +
                                    (static_cast<std::size_t>(n) * d.Cin + g * d.cin_g) * d.H * d.W);
                        }
                    }
                }
            };
        });
}

}  // namespace mednvc
