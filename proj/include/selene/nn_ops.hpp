#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "selene/parallel.hpp"
#include "selene/tensor.hpp"

namespace selene {

namespace detail {

inline void check_rank(const Tensor& t, int rank, const char* op, const char* what) {
    if (t.rank() != rank)
        throw std::invalid_argument(std::string(op) + ": " + what + " must be rank " + std::to_string(rank) +
                                    ", got " + shape_str(t.shape()));
}

inline int conv_out_extent(int in, int pad, int k, int stride) {
    return (in + 2 * pad - k) / stride + 1;
}

// Direct cross-correlation for one batch image, all output channels.
// Accumulation over (ci, kh, kw) in ascending order; the im2col path below
// reproduces the same order so the two agree bit for bit.
inline void conv2d_direct_one(const double* in, const double* ker, double* out, int cin, int h, int w, int cout,
                              int kh, int kw, int stride, int pad, int ho, int wo) {
    for (int co = 0; co < cout; ++co) {
        const double* kbase = ker + static_cast<std::size_t>(co) * cin * kh * kw;
        for (int y = 0; y < ho; ++y) {
            for (int x = 0; x < wo; ++x) {
                double acc = 0.0;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* iplane = in + static_cast<std::size_t>(ci) * h * w;
                    const double* kplane = kbase + static_cast<std::size_t>(ci) * kh * kw;
                    for (int dy = 0; dy < kh; ++dy) {
                        const int iy = y * stride - pad + dy;
                        if (iy < 0 || iy >= h) continue;
                        for (int dx = 0; dx < kw; ++dx) {
                            const int ix = x * stride - pad + dx;
                            if (ix < 0 || ix >= w) continue;
                            acc += iplane[iy * w + ix] * kplane[dy * kw + dx];
                        }
                    }
                }
                out[(static_cast<std::size_t>(co) * ho + y) * wo + x] = acc;
            }
        }
    }
}

inline void im2col_one(const double* in, double* col, int cin, int h, int w, int kh, int kw, int stride, int pad,
                       int ho, int wo) {
    const int cols = ho * wo;
    std::size_t r = 0;
    for (int ci = 0; ci < cin; ++ci) {
        const double* iplane = in + static_cast<std::size_t>(ci) * h * w;
        for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx, ++r) {
                double* crow = col + r * cols;
                for (int y = 0; y < ho; ++y) {
                    const int iy = y * stride - pad + dy;
                    if (iy < 0 || iy >= h) {
                        std::fill(crow + y * wo, crow + (y + 1) * wo, 0.0);
                        continue;
                    }
                    for (int x = 0; x < wo; ++x) {
                        const int ix = x * stride - pad + dx;
                        crow[y * wo + x] = (ix < 0 || ix >= w) ? 0.0 : iplane[iy * w + ix];
                    }
                }
            }
        }
    }
}

// out (cout x cols) = ker (cout x kdim) * col (kdim x cols), k ascending.
inline void matmul_ikj(const double* ker, const double* col, double* out, int cout, int kdim, int cols) {
    std::fill(out, out + static_cast<std::size_t>(cout) * cols, 0.0);
    for (int i = 0; i < cout; ++i) {
        double* orow = out + static_cast<std::size_t>(i) * cols;
        const double* krow = ker + static_cast<std::size_t>(i) * kdim;
        for (int k = 0; k < kdim; ++k) {
            const double a = krow[k];
            if (a == 0.0) continue;
            const double* crow = col + static_cast<std::size_t>(k) * cols;
            for (int j = 0; j < cols; ++j) orow[j] += a * crow[j];
        }
    }
}

}  // namespace detail

// 2-D cross-correlation. input [B,Cin,H,W], kernel [Cout,Cin,kh,kw].
// Direct loops below a work threshold, im2col + matmul above it; both paths
// produce identical values.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    detail::check_rank(input, 4, "conv2d", "input");
    detail::check_rank(kernel, 4, "conv2d", "kernel");
    const int batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != cin)
        throw std::invalid_argument("conv2d: input channels " + shape_str(input.shape()) +
                                    " do not match kernel " + shape_str(kernel.shape()));
    if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv2d: kernel extents must be odd");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
    const int ho = detail::conv_out_extent(h, padding, kh, stride);
    const int wo = detail::conv_out_extent(w, padding, kw, stride);
    if (ho < 1 || wo < 1)
        throw std::invalid_argument("conv2d: empty output for input " + shape_str(input.shape()));

    Tensor out(Shape{batch, cout, ho, wo});
    const double* in = input.data();
    const double* ker = kernel.data();
    double* o = out.data_mut();
    const std::size_t in_stride = static_cast<std::size_t>(cin) * h * w;
    const std::size_t out_stride = static_cast<std::size_t>(cout) * ho * wo;
    const int kdim = cin * kh * kw;
    const std::size_t work = static_cast<std::size_t>(batch) * out_stride * kdim;
    const bool use_im2col = work >= 16384 && kdim > 1;

    if (use_im2col) {
        parallel_for(batch, [&](std::int64_t b0, std::int64_t b1) {
            std::vector<double> col(static_cast<std::size_t>(kdim) * ho * wo);
            for (std::int64_t b = b0; b < b1; ++b) {
                detail::im2col_one(in + b * in_stride, col.data(), cin, h, w, kh, kw, stride, padding, ho, wo);
                detail::matmul_ikj(ker, col.data(), o + b * out_stride, cout, kdim, ho * wo);
            }
        });
    } else {
        parallel_for(batch, [&](std::int64_t b0, std::int64_t b1) {
            for (std::int64_t b = b0; b < b1; ++b)
                detail::conv2d_direct_one(in + b * in_stride, ker, o + b * out_stride, cin, h, w, cout, kh, kw,
                                          stride, padding, ho, wo);
        });
    }

    if (detail::recording()) {
        auto si = detail::sink_of(input), sk = detail::sink_of(kernel);
        if (si || sk) {
            Tensor iv = input.detach(), kv = kernel.detach();
            detail::attach(out, [si, sk, iv, kv, batch, cin, h, w, cout, kh, kw, stride, padding, ho,
                                 wo](const std::vector<double>& g) {
                const double* in = iv.data();
                const double* ker = kv.data();
                const std::size_t in_stride = static_cast<std::size_t>(cin) * h * w;
                const std::size_t out_stride = static_cast<std::size_t>(cout) * ho * wo;
                if (si) {
                    double* gin = si.prepare();
                    parallel_for(batch, [&](std::int64_t b0, std::int64_t b1) {
                        for (std::int64_t b = b0; b < b1; ++b) {
                            const double* gout = g.data() + b * out_stride;
                            double* gslice = gin + b * in_stride;
                            for (int co = 0; co < cout; ++co) {
                                const double* kbase = ker + static_cast<std::size_t>(co) * cin * kh * kw;
                                for (int y = 0; y < ho; ++y)
                                    for (int x = 0; x < wo; ++x) {
                                        const double gv = gout[(static_cast<std::size_t>(co) * ho + y) * wo + x];
                                        if (gv == 0.0) continue;
                                        for (int ci = 0; ci < cin; ++ci) {
                                            double* iplane = gslice + static_cast<std::size_t>(ci) * h * w;
                                            const double* kplane = kbase + static_cast<std::size_t>(ci) * kh * kw;
                                            for (int dy = 0; dy < kh; ++dy) {
                                                const int iy = y * stride - padding + dy;
                                                if (iy < 0 || iy >= h) continue;
                                                for (int dx = 0; dx < kw; ++dx) {
                                                    const int ix = x * stride - padding + dx;
                                                    if (ix < 0 || ix >= w) continue;
                                                    iplane[iy * w + ix] += gv * kplane[dy * kw + dx];
                                                }
                                            }
                                        }
                                    }
                            }
                        }
                    });
                }
                if (sk) {
                    double* gk = sk.prepare();
                    parallel_for(static_cast<std::int64_t>(cout) * cin, [&](std::int64_t p0, std::int64_t p1) {
                        for (std::int64_t p = p0; p < p1; ++p) {
                            const int co = static_cast<int>(p / cin);
                            const int ci = static_cast<int>(p % cin);
                            double* kslice = gk + (static_cast<std::size_t>(co) * cin + ci) * kh * kw;
                            for (int dy = 0; dy < kh; ++dy)
                                for (int dx = 0; dx < kw; ++dx) {
                                    double acc = 0.0;
                                    for (int b = 0; b < batch; ++b) {
                                        const double* gout = g.data() + b * out_stride +
                                                             static_cast<std::size_t>(co) * ho * wo;
                                        const double* iplane = in + b * in_stride +
                                                               static_cast<std::size_t>(ci) * h * w;
                                        for (int y = 0; y < ho; ++y) {
                                            const int iy = y * stride - padding + dy;
                                            if (iy < 0 || iy >= h) continue;
                                            for (int x = 0; x < wo; ++x) {
                                                const int ix = x * stride - padding + dx;
                                                if (ix < 0 || ix >= w) continue;
                                                acc += gout[y * wo + x] * iplane[iy * w + ix];
                                            }
                                        }
                                    }
                                    kslice[dy * kw + dx] += acc;
                                }
                        }
                    });
                }
            });
        }
    }
    return out;
}

// Per-channel 3x3 (or generally kxk) convolution. kernel [C,1,k,k].
inline Tensor depthwise_conv(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    detail::check_rank(input, 4, "depthwise_conv", "input");
    detail::check_rank(kernel, 4, "depthwise_conv", "kernel");
    const int batch = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(0) != c || kernel.dim(1) != 1)
        throw std::invalid_argument("depthwise_conv: kernel " + shape_str(kernel.shape()) +
                                    " does not match input channels " + shape_str(input.shape()));
    if (stride != 1 && stride != 2) throw std::invalid_argument("depthwise_conv: stride must be 1 or 2");
    const int ho = detail::conv_out_extent(h, padding, kh, stride);
    const int wo = detail::conv_out_extent(w, padding, kw, stride);
    if (ho < 1 || wo < 1) throw std::invalid_argument("depthwise_conv: empty output");

    Tensor out(Shape{batch, c, ho, wo});
    const double* in = input.data();
    const double* ker = kernel.data();
    double* o = out.data_mut();
    parallel_for(static_cast<std::int64_t>(batch) * c, [&](std::int64_t p0, std::int64_t p1) {
        for (std::int64_t p = p0; p < p1; ++p) {
            const double* iplane = in + p * h * w;
            const double* kplane = ker + (p % c) * kh * kw;
            double* oplane = o + p * ho * wo;
            for (int y = 0; y < ho; ++y)
                for (int x = 0; x < wo; ++x) {
                    double acc = 0.0;
                    for (int dy = 0; dy < kh; ++dy) {
                        const int iy = y * stride - padding + dy;
                        if (iy < 0 || iy >= h) continue;
                        for (int dx = 0; dx < kw; ++dx) {
                            const int ix = x * stride - padding + dx;
                            if (ix < 0 || ix >= w) continue;
                            acc += iplane[iy * w + ix] * kplane[dy * kw + dx];
                        }
                    }
                    oplane[y * wo + x] = acc;
                }
        }
    });

    if (detail::recording()) {
        auto si = detail::sink_of(input), sk = detail::sink_of(kernel);
        if (si || sk) {
            Tensor iv = input.detach(), kv = kernel.detach();
            detail::attach(out, [si, sk, iv, kv, batch, c, h, w, kh, kw, stride, padding, ho,
                                 wo](const std::vector<double>& g) {
                const double* in = iv.data();
                const double* ker = kv.data();
                if (si) {
                    double* gin = si.prepare();
                    parallel_for(static_cast<std::int64_t>(batch) * c, [&](std::int64_t p0, std::int64_t p1) {
                        for (std::int64_t p = p0; p < p1; ++p) {
                            const double* gout = g.data() + p * ho * wo;
                            const double* kplane = ker + (p % c) * kh * kw;
                            double* gplane = gin + p * h * w;
                            for (int y = 0; y < ho; ++y)
                                for (int x = 0; x < wo; ++x) {
                                    const double gv = gout[y * wo + x];
                                    if (gv == 0.0) continue;
                                    for (int dy = 0; dy < kh; ++dy) {
                                        const int iy = y * stride - padding + dy;
                                        if (iy < 0 || iy >= h) continue;
                                        for (int dx = 0; dx < kw; ++dx) {
                                            const int ix = x * stride - padding + dx;
                                            if (ix < 0 || ix >= w) continue;
                                            gplane[iy * w + ix] += gv * kplane[dy * kw + dx];
                                        }
                                    }
                                }
                        }
                    });
                }
                if (sk) {
                    double* gk = sk.prepare();
                    parallel_for(c, [&](std::int64_t c0, std::int64_t c1) {
                        for (std::int64_t ci = c0; ci < c1; ++ci) {
                            double* kslice = gk + ci * kh * kw;
                            for (int dy = 0; dy < kh; ++dy)
                                for (int dx = 0; dx < kw; ++dx) {
                                    double acc = 0.0;
                                    for (int b = 0; b < batch; ++b) {
                                        const std::size_t plane = (static_cast<std::size_t>(b) * c + ci);
                                        const double* gout = g.data() + plane * ho * wo;
                                        const double* iplane = in + plane * h * w;
                                        for (int y = 0; y < ho; ++y) {
                                            const int iy = y * stride - padding + dy;
                                            if (iy < 0 || iy >= h) continue;
                                            for (int x = 0; x < wo; ++x) {
                                                const int ix = x * stride - padding + dx;
                                                if (ix < 0 || ix >= w) continue;
                                                acc += gout[y * wo + x] * iplane[iy * w + ix];
                                            }
                                        }
                                    }
                                    kslice[dy * kw + dx] += acc;
                                }
                        }
                    });
                }
            });
        }
    }
    return out;
}

// Depthwise 3x3 (stride s, padding 1) followed by a pointwise 1x1 projection.
inline Tensor separable_conv3x3(const Tensor& input, const Tensor& depthwise, const Tensor& pointwise, int stride) {
    detail::check_rank(depthwise, 4, "separable_conv3x3", "depthwise kernel");
    if (depthwise.dim(2) != 3 || depthwise.dim(3) != 3)
        throw std::invalid_argument("separable_conv3x3: depthwise kernel must be 3x3, got " +
                                    shape_str(depthwise.shape()));
    return conv2d(depthwise_conv(input, depthwise, stride, 1), pointwise, 1, 0);
}

// Doubles H and W with align-corners-false bilinear interpolation.
inline Tensor bilinear_upsample2x(const Tensor& input) {
    detail::check_rank(input, 4, "bilinear_upsample2x", "input");
    const int batch = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h < 1 || w < 1) throw std::invalid_argument("bilinear_upsample2x: empty input");
    const int ho = 2 * h, wo = 2 * w;

    // Per-axis source indices and blend weights, shared by rows/columns.
    auto make_axis = [](int out, int in) {
        std::vector<int> i0(out), i1(out);
        std::vector<double> f(out);
        for (int i = 0; i < out; ++i) {
            const double src = (i + 0.5) * 0.5 - 0.5;
            double fl = std::floor(src);
            double frac = src - fl;
            int lo = static_cast<int>(fl);
            int hi = lo + 1;
            lo = std::clamp(lo, 0, in - 1);
            hi = std::clamp(hi, 0, in - 1);
            i0[i] = lo;
            i1[i] = hi;
            f[i] = frac;
        }
        return std::tuple(i0, i1, f);
    };
    auto [y0, y1, fy] = make_axis(ho, h);
    auto [x0, x1, fx] = make_axis(wo, w);

    Tensor out(Shape{batch, c, ho, wo});
    const double* in = input.data();
    double* o = out.data_mut();
    const std::int64_t planes = static_cast<std::int64_t>(batch) * c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* ip = in + p * h * w;
        double* op = o + p * ho * wo;
        for (int y = 0; y < ho; ++y) {
            const double wy1 = fy[y], wy0 = 1.0 - wy1;
            const double* r0 = ip + y0[y] * w;
            const double* r1 = ip + y1[y] * w;
            for (int x = 0; x < wo; ++x) {
                const double wx1 = fx[x], wx0 = 1.0 - wx1;
                op[y * wo + x] = wy0 * (wx0 * r0[x0[x]] + wx1 * r0[x1[x]]) +
                                 wy1 * (wx0 * r1[x0[x]] + wx1 * r1[x1[x]]);
            }
        }
    }

    if (detail::recording()) {
        auto si = detail::sink_of(input);
        if (si) {
            detail::attach(out, [si, planes, h, w, ho, wo, y0 = y0, y1 = y1, fy = fy, x0 = x0, x1 = x1,
                                 fx = fx](const std::vector<double>& g) {
                double* gin = si.prepare();
                for (std::int64_t p = 0; p < planes; ++p) {
                    const double* gp = g.data() + p * ho * wo;
                    double* ip = gin + p * h * w;
                    for (int y = 0; y < ho; ++y) {
                        const double wy1 = fy[y], wy0 = 1.0 - wy1;
                        for (int x = 0; x < wo; ++x) {
                            const double gv = gp[y * wo + x];
                            const double wx1 = fx[x], wx0 = 1.0 - wx1;
                            ip[y0[y] * w + x0[x]] += gv * wy0 * wx0;
                            ip[y0[y] * w + x1[x]] += gv * wy0 * wx1;
                            ip[y1[y] * w + x0[x]] += gv * wy1 * wx0;
                            ip[y1[y] * w + x1[x]] += gv * wy1 * wx1;
                        }
                    }
                }
            });
        }
    }
    return out;
}

// [B,C,H,W] -> [B,C], mean over each spatial plane.
inline Tensor global_avg_pool(const Tensor& input) {
    detail::check_rank(input, 4, "global_avg_pool", "input");
    const int batch = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int hw = h * w;
    if (hw < 1) throw std::invalid_argument("global_avg_pool: empty plane");
    Tensor out(Shape{batch, c});
    const double* in = input.data();
    double* o = out.data_mut();
    const std::int64_t planes = static_cast<std::int64_t>(batch) * c;
    for (std::int64_t p = 0; p < planes; ++p) {
        double acc = 0.0;
        const double* ip = in + p * hw;
        for (int i = 0; i < hw; ++i) acc += ip[i];
        o[p] = acc / hw;
    }
    if (detail::recording()) {
        auto si = detail::sink_of(input);
        if (si) {
            detail::attach(out, [si, planes, hw](const std::vector<double>& g) {
                double* gin = si.prepare();
                for (std::int64_t p = 0; p < planes; ++p) {
                    const double gv = g[p] / hw;
                    double* ip = gin + p * hw;
                    for (int i = 0; i < hw; ++i) ip[i] += gv;
                }
            });
        }
    }
    return out;
}

// out[b,k] = sum_d input[b,d] * weight[k,d] + bias[k].
inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    detail::check_rank(input, 2, "linear", "input");
    detail::check_rank(weight, 2, "linear", "weight");
    const int batch = input.dim(0), d = input.dim(1), k = weight.dim(0);
    if (weight.dim(1) != d)
        throw std::invalid_argument("linear: input " + shape_str(input.shape()) + " vs weight " +
                                    shape_str(weight.shape()));
    if (bias.rank() != 1 || bias.dim(0) != k)
        throw std::invalid_argument("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                                    shape_str(weight.shape()));
    Tensor out(Shape{batch, k});
    const double* in = input.data();
    const double* wt = weight.data();
    const double* bs = bias.data();
    double* o = out.data_mut();
    for (int b = 0; b < batch; ++b)
        for (int j = 0; j < k; ++j) {
            double acc = bs[j];
            const double* irow = in + static_cast<std::size_t>(b) * d;
            const double* wrow = wt + static_cast<std::size_t>(j) * d;
            for (int i = 0; i < d; ++i) acc += irow[i] * wrow[i];
            o[static_cast<std::size_t>(b) * k + j] = acc;
        }
    if (detail::recording()) {
        auto si = detail::sink_of(input), sw = detail::sink_of(weight), sb = detail::sink_of(bias);
        if (si || sw || sb) {
            Tensor iv = input.detach(), wv = weight.detach();
            detail::attach(out, [si, sw, sb, iv, wv, batch, d, k](const std::vector<double>& g) {
                if (si) {
                    double* gin = si.prepare();
                    for (int b = 0; b < batch; ++b)
                        for (int j = 0; j < k; ++j) {
                            const double gv = g[static_cast<std::size_t>(b) * k + j];
                            const double* wrow = wv.data() + static_cast<std::size_t>(j) * d;
                            double* grow = gin + static_cast<std::size_t>(b) * d;
                            for (int i = 0; i < d; ++i) grow[i] += gv * wrow[i];
                        }
                }
                if (sw) {
                    double* gw = sw.prepare();
                    for (int b = 0; b < batch; ++b)
                        for (int j = 0; j < k; ++j) {
                            const double gv = g[static_cast<std::size_t>(b) * k + j];
                            const double* irow = iv.data() + static_cast<std::size_t>(b) * d;
                            double* wrow = gw + static_cast<std::size_t>(j) * d;
                            for (int i = 0; i < d; ++i) wrow[i] += gv * irow[i];
                        }
                }
                if (sb) {
                    double* gb = sb.prepare();
                    for (int b = 0; b < batch; ++b)
                        for (int j = 0; j < k; ++j) gb[j] += g[static_cast<std::size_t>(b) * k + j];
                }
            });
        }
    }
    return out;
}

// Broadcast-add a per-channel bias over [B,C,H,W].
inline Tensor add_channel_bias(const Tensor& input, const Tensor& bias) {
    detail::check_rank(input, 4, "add_channel_bias", "input");
    const int batch = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    if (bias.rank() != 1 || bias.dim(0) != c)
        throw std::invalid_argument("add_channel_bias: bias " + shape_str(bias.shape()) + " vs input " +
                                    shape_str(input.shape()));
    Tensor out(input.shape());
    const double* in = input.data();
    const double* bs = bias.data();
    double* o = out.data_mut();
    for (int b = 0; b < batch; ++b)
        for (int ci = 0; ci < c; ++ci) {
            const double bv = bs[ci];
            const std::size_t off = (static_cast<std::size_t>(b) * c + ci) * hw;
            for (int i = 0; i < hw; ++i) o[off + i] = in[off + i] + bv;
        }
    if (detail::recording()) {
        auto si = detail::sink_of(input), sb = detail::sink_of(bias);
        if (si || sb) {
            detail::attach(out, [si, sb, batch, c, hw](const std::vector<double>& g) {
                if (si) si.add(g.data(), g.size());
                if (sb) {
                    double* gb = sb.prepare();
                    for (int b = 0; b < batch; ++b)
                        for (int ci = 0; ci < c; ++ci) {
                            const std::size_t off = (static_cast<std::size_t>(b) * c + ci) * hw;
                            double acc = 0.0;
                            for (int i = 0; i < hw; ++i) acc += g[off + i];
                            gb[ci] += acc;
                        }
                }
            });
        }
    }
    return out;
}

// Softmax over the channel dimension of [B,K,H,W] (or over K for [B,K]).
inline Tensor channel_softmax(const Tensor& logits) {
    if (logits.rank() != 4 && logits.rank() != 2)
        throw std::invalid_argument("channel_softmax: expected rank 2 or 4, got " + shape_str(logits.shape()));
    const int batch = logits.dim(0), k = logits.dim(1);
    const int hw = logits.rank() == 4 ? logits.dim(2) * logits.dim(3) : 1;
    Tensor out(logits.shape());
    const double* z = logits.data();
    double* p = out.data_mut();
    for (int b = 0; b < batch; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * k * hw;
        for (int i = 0; i < hw; ++i) {
            double zmax = z[base + i];
            for (int j = 1; j < k; ++j) zmax = std::max(zmax, z[base + static_cast<std::size_t>(j) * hw + i]);
            double denom = 0.0;
            for (int j = 0; j < k; ++j) {
                const double e = std::exp(z[base + static_cast<std::size_t>(j) * hw + i] - zmax);
                p[base + static_cast<std::size_t>(j) * hw + i] = e;
                denom += e;
            }
            for (int j = 0; j < k; ++j) p[base + static_cast<std::size_t>(j) * hw + i] /= denom;
        }
    }
    if (detail::recording()) {
        auto si = detail::sink_of(logits);
        if (si) {
            Tensor pv = out.detach();
            detail::attach(out, [si, pv, batch, k, hw](const std::vector<double>& g) {
                double* gin = si.prepare();
                for (int b = 0; b < batch; ++b) {
                    const std::size_t base = static_cast<std::size_t>(b) * k * hw;
                    for (int i = 0; i < hw; ++i) {
                        double dot = 0.0;
                        for (int j = 0; j < k; ++j) {
                            const std::size_t idx = base + static_cast<std::size_t>(j) * hw + i;
                            dot += g[idx] * pv[idx];
                        }
                        for (int j = 0; j < k; ++j) {
                            const std::size_t idx = base + static_cast<std::size_t>(j) * hw + i;
                            gin[idx] += pv[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        }
    }
    return out;
}

// Group normalization over [B,C,H,W]: per (sample, group) standardization
// followed by a learned per-channel affine map. Batch-independent, so
// training and inference share one code path and per-image evaluation is
// exact.
inline Tensor group_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, int groups,
                         double eps = 1e-5) {
    detail::check_rank(input, 4, "group_norm", "input");
    const int batch = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    if (groups < 1 || c % groups != 0)
        throw std::invalid_argument("group_norm: groups " + std::to_string(groups) + " must divide channels " +
                                    std::to_string(c));
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
        throw std::invalid_argument("group_norm: affine parameters must be [C]");
    const int gch = c / groups;          // channels per group
    const std::size_t m = static_cast<std::size_t>(gch) * hw;  // elements per group

    Tensor out(input.shape());
    std::vector<double> xhat(input.size());
    std::vector<double> inv_sigma(static_cast<std::size_t>(batch) * groups);
    const double* in = input.data();
    const double* gm = gamma.data();
    const double* bt = beta.data();
    double* o = out.data_mut();
    for (int b = 0; b < batch; ++b)
        for (int g = 0; g < groups; ++g) {
            const std::size_t base = (static_cast<std::size_t>(b) * c + static_cast<std::size_t>(g) * gch) * hw;
            double mean = 0.0;
            for (std::size_t i = 0; i < m; ++i) mean += in[base + i];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                const double d = in[base + i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_sigma[static_cast<std::size_t>(b) * groups + g] = is;
            for (std::size_t i = 0; i < m; ++i) {
                const double xh = (in[base + i] - mean) * is;
                xhat[base + i] = xh;
                const int ch = static_cast<int>(g) * gch + static_cast<int>(i / hw);
                o[base + i] = gm[ch] * xh + bt[ch];
            }
        }

    if (detail::recording()) {
        auto si = detail::sink_of(input), sg = detail::sink_of(gamma), sb = detail::sink_of(beta);
        if (si || sg || sb) {
            Tensor gv = gamma.detach();
            detail::attach(out, [si, sg, sb, gv, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), batch,
                                 c, hw, groups, gch, m](const std::vector<double>& g) {
                if (sg) {
                    double* dgm = sg.prepare();
                    for (int b = 0; b < batch; ++b)
                        for (int ch = 0; ch < c; ++ch) {
                            const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * hw;
                            double acc = 0.0;
                            for (int i = 0; i < hw; ++i) acc += g[base + i] * xhat[base + i];
                            dgm[ch] += acc;
                        }
                }
                if (sb) {
                    double* dbt = sb.prepare();
                    for (int b = 0; b < batch; ++b)
                        for (int ch = 0; ch < c; ++ch) {
                            const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * hw;
                            double acc = 0.0;
                            for (int i = 0; i < hw; ++i) acc += g[base + i];
                            dbt[ch] += acc;
                        }
                }
                if (si) {
                    double* din = si.prepare();
                    for (int b = 0; b < batch; ++b)
                        for (int grp = 0; grp < groups; ++grp) {
                            const std::size_t base =
                                (static_cast<std::size_t>(b) * c + static_cast<std::size_t>(grp) * gch) * hw;
                            const double is = inv_sigma[static_cast<std::size_t>(b) * groups + grp];
                            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                            for (std::size_t i = 0; i < m; ++i) {
                                const int ch = grp * gch + static_cast<int>(i / hw);
                                const double dxh = g[base + i] * gv[ch];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat[base + i];
                            }
                            const double inv_m = 1.0 / static_cast<double>(m);
                            for (std::size_t i = 0; i < m; ++i) {
                                const int ch = grp * gch + static_cast<int>(i / hw);
                                const double dxh = g[base + i] * gv[ch];
                                din[base + i] +=
                                    is * (dxh - inv_m * sum_dxhat - xhat[base + i] * inv_m * sum_dxhat_xhat);
                            }
                        }
                }
            });
        }
    }
    return out;
}

// Largest group count <= 4 that divides the channel width.
inline int norm_groups_for(int channels) {
    for (int g = 4; g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

// Per-position argmax over the channel dimension; ties break toward the
// lowest class index. Not differentiable by construction.
inline IntTensor argmax_channel(const Tensor& t) {
    if (t.rank() != 4 && t.rank() != 2)
        throw std::invalid_argument("argmax_channel: expected rank 2 or 4, got " + shape_str(t.shape()));
    const int batch = t.dim(0), k = t.dim(1);
    const int hw = t.rank() == 4 ? t.dim(2) * t.dim(3) : 1;
    Shape oshape = t.rank() == 4 ? Shape{batch, t.dim(2), t.dim(3)} : Shape{batch};
    IntTensor out(oshape);
    const double* v = t.data();
    for (int b = 0; b < batch; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * k * hw;
        for (int i = 0; i < hw; ++i) {
            int best = 0;
            double bv = v[base + i];
            for (int j = 1; j < k; ++j) {
                const double x = v[base + static_cast<std::size_t>(j) * hw + i];
                if (x > bv) {
                    bv = x;
                    best = j;
                }
            }
            out[static_cast<std::size_t>(b) * hw + i] = best;
        }
    }
    return out;
}

}  // namespace selene
