#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "mdsep/tensor.hpp"

namespace mdsep {

// Layer primitives. Activations are [N, C, H, W]. Filters:
//   standard  [K, K, M, N]   (kernel h, kernel w, in channels, out channels)
//   depthwise [K, K, M]
//   pointwise [M, N]
// All spatial convolutions use SAME zero padding of (K-1)/2 and stride 1 or 2;
// output height is ceil(H / stride). Forward functions take their inputs by
// const reference and backward functions take the same inputs again as the
// cached state, so a caller that keeps its activations can backprop any layer.

inline std::size_t conv_out_dim(std::size_t in, std::size_t stride) {
    return (in + stride - 1) / stride;
}

namespace detail {

inline void check_odd_kernel(std::size_t k) {
    if (k % 2 == 0) throw ShapeError("convolution kernel size must be odd");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Standard convolution

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride) {
    if (x.rank() != 4 || k.rank() != 4) throw ShapeError("conv2d: expects 4-d input and filter");
    const std::size_t N = x.dim(0), M = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t K = k.dim(0), Mk = k.dim(2), Co = k.dim(3);
    if (k.dim(1) != K) throw ShapeError("conv2d: non-square kernel");
    detail::check_odd_kernel(K);
    if (Mk != M) throw ShapeError("conv2d: filter in-channels != input channels");
    const std::size_t P = (K - 1) / 2;
    const std::size_t Ho = conv_out_dim(H, stride), Wo = conv_out_dim(W, stride);
    Tensor<T> out({N, Co, Ho, Wo}, T(0));
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Co; ++co) {
            T* outp = out.data() + ((n * Co + co) * Ho) * Wo;
            for (std::size_t m = 0; m < M; ++m) {
                const T* inp = x.data() + ((n * M + m) * H) * W;
                for (std::size_t ky = 0; ky < K; ++ky) {
                    for (std::size_t kx = 0; kx < K; ++kx) {
                        const T w = k.at4(ky, kx, m, co);
                        for (std::size_t oy = 0; oy < Ho; ++oy) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                static_cast<std::ptrdiff_t>(P);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                            const T* row = inp + iy * static_cast<std::ptrdiff_t>(W);
                            T* orow = outp + oy * Wo;
                            for (std::size_t ox = 0; ox < Wo; ++ox) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                    static_cast<std::ptrdiff_t>(P);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                orow[ox] += w * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                     const Tensor<T>& dout, Tensor<T>* dx, Tensor<T>* dk) {
    const std::size_t N = x.dim(0), M = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t K = k.dim(0), Co = k.dim(3);
    const std::size_t P = (K - 1) / 2;
    const std::size_t Ho = dout.dim(2), Wo = dout.dim(3);
    if (dx) *dx = Tensor<T>(x.shape(), T(0));
    if (dk) *dk = Tensor<T>(k.shape(), T(0));
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Co; ++co) {
            const T* dop = dout.data() + ((n * Co + co) * Ho) * Wo;
            for (std::size_t m = 0; m < M; ++m) {
                const T* inp = x.data() + ((n * M + m) * H) * W;
                T* dxp = dx ? dx->data() + ((n * M + m) * H) * W : nullptr;
                for (std::size_t ky = 0; ky < K; ++ky) {
                    for (std::size_t kx = 0; kx < K; ++kx) {
                        const T w = k.at4(ky, kx, m, co);
                        T acc = T(0);
                        for (std::size_t oy = 0; oy < Ho; ++oy) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                static_cast<std::ptrdiff_t>(P);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                            const T* row = inp + iy * static_cast<std::ptrdiff_t>(W);
                            T* dxrow = dxp ? dxp + iy * static_cast<std::ptrdiff_t>(W) : nullptr;
                            const T* dorow = dop + oy * Wo;
                            for (std::size_t ox = 0; ox < Wo; ++ox) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                    static_cast<std::ptrdiff_t>(P);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                acc += row[ix] * dorow[ox];
                                if (dxrow) dxrow[ix] += w * dorow[ox];
                            }
                        }
                        if (dk) dk->at4(ky, kx, m, co) += acc;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Depthwise convolution (one spatial kernel per input channel)

template <typename T>
Tensor<T> depthwise_forward(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride) {
    if (x.rank() != 4 || k.rank() != 3) throw ShapeError("depthwise: bad ranks");
    const std::size_t N = x.dim(0), M = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t K = k.dim(0);
    if (k.dim(1) != K) throw ShapeError("depthwise: non-square kernel");
    detail::check_odd_kernel(K);
    if (k.dim(2) != M) throw ShapeError("depthwise: filter channels != input channels");
    const std::size_t P = (K - 1) / 2;
    const std::size_t Ho = conv_out_dim(H, stride), Wo = conv_out_dim(W, stride);
    Tensor<T> out({N, M, Ho, Wo}, T(0));
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t m = 0; m < M; ++m) {
            const T* inp = x.data() + ((n * M + m) * H) * W;
            T* outp = out.data() + ((n * M + m) * Ho) * Wo;
            for (std::size_t ky = 0; ky < K; ++ky) {
                for (std::size_t kx = 0; kx < K; ++kx) {
                    const T w = k.at3(ky, kx, m);
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                  static_cast<std::ptrdiff_t>(P);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        const T* row = inp + iy * static_cast<std::ptrdiff_t>(W);
                        T* orow = outp + oy * Wo;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(P);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            orow[ox] += w * row[ix];
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
void depthwise_backward(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                        const Tensor<T>& dout, Tensor<T>* dx, Tensor<T>* dk) {
    const std::size_t N = x.dim(0), M = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t K = k.dim(0);
    const std::size_t P = (K - 1) / 2;
    const std::size_t Ho = dout.dim(2), Wo = dout.dim(3);
    if (dx) *dx = Tensor<T>(x.shape(), T(0));
    if (dk) *dk = Tensor<T>(k.shape(), T(0));
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t m = 0; m < M; ++m) {
            const T* inp = x.data() + ((n * M + m) * H) * W;
            T* dxp = dx ? dx->data() + ((n * M + m) * H) * W : nullptr;
            const T* dop = dout.data() + ((n * M + m) * Ho) * Wo;
            for (std::size_t ky = 0; ky < K; ++ky) {
                for (std::size_t kx = 0; kx < K; ++kx) {
                    const T w = k.at3(ky, kx, m);
                    T acc = T(0);
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                  static_cast<std::ptrdiff_t>(P);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        const T* row = inp + iy * static_cast<std::ptrdiff_t>(W);
                        T* dxrow = dxp ? dxp + iy * static_cast<std::ptrdiff_t>(W) : nullptr;
                        const T* dorow = dop + oy * Wo;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(P);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            acc += row[ix] * dorow[ox];
                            if (dxrow) dxrow[ix] += w * dorow[ox];
                        }
                    }
                    if (dk) dk->at3(ky, kx, m) += acc;
                }
            }
        }
    }
}

// Depthwise forward reading slice d of a [K, K, M, T] stack of all domains'
// filters in place. Arithmetic order matches depthwise_forward on an extracted
// slice, so the two paths are bit-identical.
template <typename T>
Tensor<T> depthwise_forward_stack(const Tensor<T>& x, const Tensor<T>& stack, std::size_t d,
                                  std::size_t stride) {
    if (stack.rank() != 4) throw ShapeError("depthwise stack must be rank 4");
    if (d >= stack.dim(3)) throw ShapeError("depthwise stack: domain slot out of range");
    const std::size_t N = x.dim(0), M = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t K = stack.dim(0);
    if (stack.dim(2) != M) throw ShapeError("depthwise stack: channel mismatch");
    const std::size_t P = (K - 1) / 2;
    const std::size_t Ho = conv_out_dim(H, stride), Wo = conv_out_dim(W, stride);
    Tensor<T> out({N, M, Ho, Wo}, T(0));
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t m = 0; m < M; ++m) {
            const T* inp = x.data() + ((n * M + m) * H) * W;
            T* outp = out.data() + ((n * M + m) * Ho) * Wo;
            for (std::size_t ky = 0; ky < K; ++ky) {
                for (std::size_t kx = 0; kx < K; ++kx) {
                    const T w = stack.at4(ky, kx, m, d);
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                  static_cast<std::ptrdiff_t>(P);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        const T* row = inp + iy * static_cast<std::ptrdiff_t>(W);
                        T* orow = outp + oy * Wo;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(P);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            orow[ox] += w * row[ix];
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> dw_stack_slice(const Tensor<T>& stack, std::size_t d) {
    const std::size_t K = stack.dim(0), M = stack.dim(2), Tn = stack.dim(3);
    if (d >= Tn) throw ShapeError("dw_stack_slice: slot out of range");
    Tensor<T> out({K, K, M});
    for (std::size_t ky = 0; ky < K; ++ky)
        for (std::size_t kx = 0; kx < K; ++kx)
            for (std::size_t m = 0; m < M; ++m) out.at3(ky, kx, m) = stack.at4(ky, kx, m, d);
    return out;
}

template <typename T>
void dw_stack_set_slice(Tensor<T>& stack, std::size_t d, const Tensor<T>& filt) {
    const std::size_t K = stack.dim(0), M = stack.dim(2);
    if (filt.dim(0) != K || filt.dim(2) != M) throw ShapeError("dw_stack_set_slice: shape mismatch");
    for (std::size_t ky = 0; ky < K; ++ky)
        for (std::size_t kx = 0; kx < K; ++kx)
            for (std::size_t m = 0; m < M; ++m) stack.at4(ky, kx, m, d) = filt.at3(ky, kx, m);
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution. stride > 1 makes it a strided projection.

template <typename T>
Tensor<T> pointwise_forward(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride = 1) {
    if (x.rank() != 4 || k.rank() != 2) throw ShapeError("pointwise: bad ranks");
    const std::size_t N = x.dim(0), M = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (k.dim(0) != M) throw ShapeError("pointwise: filter rows != input channels");
    const std::size_t Co = k.dim(1);
    const std::size_t Ho = conv_out_dim(H, stride), Wo = conv_out_dim(W, stride);
    Tensor<T> out({N, Co, Ho, Wo}, T(0));
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Co; ++co) {
            T* outp = out.data() + ((n * Co + co) * Ho) * Wo;
            for (std::size_t m = 0; m < M; ++m) {
                const T w = k.at2(m, co);
                const T* inp = x.data() + ((n * M + m) * H) * W;
                if (stride == 1) {
                    const std::size_t hw = H * W;
                    for (std::size_t i = 0; i < hw; ++i) outp[i] += w * inp[i];
                } else {
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const T* row = inp + (oy * stride) * W;
                        T* orow = outp + oy * Wo;
                        for (std::size_t ox = 0; ox < Wo; ++ox) orow[ox] += w * row[ox * stride];
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
void pointwise_backward(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                        const Tensor<T>& dout, Tensor<T>* dx, Tensor<T>* dk) {
    const std::size_t N = x.dim(0), M = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = k.dim(1);
    const std::size_t Ho = dout.dim(2), Wo = dout.dim(3);
    if (dx) *dx = Tensor<T>(x.shape(), T(0));
    if (dk) *dk = Tensor<T>(k.shape(), T(0));
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Co; ++co) {
            const T* dop = dout.data() + ((n * Co + co) * Ho) * Wo;
            for (std::size_t m = 0; m < M; ++m) {
                const T w = k.at2(m, co);
                const T* inp = x.data() + ((n * M + m) * H) * W;
                T* dxp = dx ? dx->data() + ((n * M + m) * H) * W : nullptr;
                T acc = T(0);
                if (stride == 1) {
                    const std::size_t hw = H * W;
                    for (std::size_t i = 0; i < hw; ++i) {
                        acc += inp[i] * dop[i];
                        if (dxp) dxp[i] += w * dop[i];
                    }
                } else {
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const T* row = inp + (oy * stride) * W;
                        T* dxrow = dxp ? dxp + (oy * stride) * W : nullptr;
                        const T* dorow = dop + oy * Wo;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            acc += row[ox * stride] * dorow[ox];
                            if (dxrow) dxrow[ox * stride] += w * dorow[ox];
                        }
                    }
                }
                if (dk) dk->at2(m, co) += acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BnParams {
    Tensor<T> scale;         // gamma [C]
    Tensor<T> shift;         // beta  [C]
    Tensor<T> running_mean;  // [C]
    Tensor<T> running_var;   // [C]
    T epsilon = T(1e-5);
    T momentum = T(0.1);

    BnParams() = default;
    explicit BnParams(std::size_t c)
        : scale({c}, T(1)), shift({c}, T(0)), running_mean({c}, T(0)), running_var({c}, T(1)) {}
};

template <typename T>
struct BnCache {
    Tensor<T> input;
    Tensor<T> mean;     // batch mean [C]
    Tensor<T> inv_std;  // 1/sqrt(var + eps) [C]
    bool valid = false;
};

// Train mode: normalizes by batch statistics, applies scale/shift, and updates
// running stats in place: r <- (1 - momentum) * r + momentum * batch_stat
// (biased variance). Eval mode uses running stats and leaves params untouched.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, BnParams<T>& p, bool train,
                            BnCache<T>* cache = nullptr) {
    if (x.rank() != 4) throw ShapeError("batchnorm: expects [N,C,H,W]");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (p.scale.dim(0) != C) throw ShapeError("batchnorm: channel mismatch");
    Tensor<T> out(x.shape());
    const std::size_t hw = H * W;
    const std::size_t count = N * hw;
    if (train) {
        if (count < 2) throw NumericError("batchnorm: degenerate batch (N*H*W < 2)");
        Tensor<T> mean({C}, T(0)), inv_std({C});
        for (std::size_t c = 0; c < C; ++c) {
            double sum = 0.0, sq = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* inp = x.data() + ((n * C + c) * hw);
                for (std::size_t i = 0; i < hw; ++i) {
                    sum += inp[i];
                    sq += static_cast<double>(inp[i]) * inp[i];
                }
            }
            const double mu = sum / count;
            const double var = std::max(0.0, sq / count - mu * mu);
            mean[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(p.epsilon)));
            p.running_mean[c] =
                (T(1) - p.momentum) * p.running_mean[c] + p.momentum * static_cast<T>(mu);
            p.running_var[c] =
                (T(1) - p.momentum) * p.running_var[c] + p.momentum * static_cast<T>(var);
            const T g = p.scale[c] * inv_std[c];
            const T b = p.shift[c] - g * mean[c];
            for (std::size_t n = 0; n < N; ++n) {
                const T* inp = x.data() + ((n * C + c) * hw);
                T* outp = out.data() + ((n * C + c) * hw);
                for (std::size_t i = 0; i < hw; ++i) outp[i] = g * inp[i] + b;
            }
        }
        if (cache) {
            cache->input = x;
            cache->mean = std::move(mean);
            cache->inv_std = std::move(inv_std);
            cache->valid = true;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            const T inv = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(p.running_var[c]) + p.epsilon));
            const T g = p.scale[c] * inv;
            const T b = p.shift[c] - g * p.running_mean[c];
            for (std::size_t n = 0; n < N; ++n) {
                const T* inp = x.data() + ((n * C + c) * hw);
                T* outp = out.data() + ((n * C + c) * hw);
                for (std::size_t i = 0; i < hw; ++i) outp[i] = g * inp[i] + b;
            }
        }
    }
    return out;
}

template <typename T>
void batchnorm_backward(const BnParams<T>& p, const BnCache<T>& cache, const Tensor<T>& dout,
                        Tensor<T>* dx, Tensor<T>* dscale, Tensor<T>* dshift) {
    if (!cache.valid) throw StateError("batchnorm backward without cached forward");
    const Tensor<T>& x = cache.input;
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t hw = H * W;
    const std::size_t count = N * hw;
    if (dx) *dx = Tensor<T>(x.shape());
    if (dscale) *dscale = Tensor<T>({C}, T(0));
    if (dshift) *dshift = Tensor<T>({C}, T(0));
    for (std::size_t c = 0; c < C; ++c) {
        const T mu = cache.mean[c];
        const T istd = cache.inv_std[c];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            const T* inp = x.data() + ((n * C + c) * hw);
            const T* dop = dout.data() + ((n * C + c) * hw);
            for (std::size_t i = 0; i < hw; ++i) {
                const T xhat = (inp[i] - mu) * istd;
                sum_dy += dop[i];
                sum_dy_xhat += static_cast<double>(dop[i]) * xhat;
            }
        }
        if (dscale) (*dscale)[c] = static_cast<T>(sum_dy_xhat);
        if (dshift) (*dshift)[c] = static_cast<T>(sum_dy);
        if (dx) {
            const T g = p.scale[c];
            const T a = static_cast<T>(sum_dy / count);
            const T b = static_cast<T>(sum_dy_xhat / count);
            for (std::size_t n = 0; n < N; ++n) {
                const T* inp = x.data() + ((n * C + c) * hw);
                const T* dop = dout.data() + ((n * C + c) * hw);
                T* dxp = dx->data() + ((n * C + c) * hw);
                for (std::size_t i = 0; i < hw; ++i) {
                    const T xhat = (inp[i] - mu) * istd;
                    dxp[i] = g * istd * (dop[i] - a - xhat * b);
                }
            }
        }
    }
}

// Input gradient through eval-mode (frozen statistics) batch norm.
template <typename T>
Tensor<T> batchnorm_backward_eval(const BnParams<T>& p, const Tensor<T>& dout) {
    const std::size_t N = dout.dim(0), C = dout.dim(1), hw = dout.dim(2) * dout.dim(3);
    Tensor<T> dx(dout.shape());
    for (std::size_t c = 0; c < C; ++c) {
        const T inv =
            static_cast<T>(1.0 / std::sqrt(static_cast<double>(p.running_var[c]) + p.epsilon));
        const T g = p.scale[c] * inv;
        for (std::size_t n = 0; n < N; ++n) {
            const T* dop = dout.data() + ((n * C + c) * hw);
            T* dxp = dx.data() + ((n * C + c) * hw);
            for (std::size_t i = 0; i < hw; ++i) dxp[i] = g * dop[i];
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// ReLU

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return out;
}

// Mask comes from the forward output (out > 0 iff input > 0).
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& fwd_out, const Tensor<T>& dout) {
    if (!fwd_out.same_shape(dout)) throw ShapeError("relu_backward: shape mismatch");
    Tensor<T> dx(dout.shape());
    for (std::size_t i = 0; i < dout.size(); ++i) dx[i] = fwd_out[i] > T(0) ? dout[i] : T(0);
    return dx;
}

// ---------------------------------------------------------------------------
// Global average pooling: [N,C,H,W] -> [N,C]

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: expects [N,C,H,W]");
    const std::size_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out({N, C});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* inp = x.data() + ((n * C + c) * hw);
            double sum = 0.0;
            for (std::size_t i = 0; i < hw; ++i) sum += inp[i];
            out.at2(n, c) = static_cast<T>(sum / hw);
        }
    }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const std::vector<std::size_t>& in_shape,
                                   const Tensor<T>& dout) {
    const std::size_t N = in_shape[0], C = in_shape[1], hw = in_shape[2] * in_shape[3];
    Tensor<T> dx(in_shape);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T g = dout.at2(n, c) / static_cast<T>(hw);
            T* dxp = dx.data() + ((n * C + c) * hw);
            for (std::size_t i = 0; i < hw; ++i) dxp[i] = g;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Linear: [N,Din] x [Din,Dout] + [Dout]

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) throw ShapeError("linear: bad ranks");
    const std::size_t N = x.dim(0), Din = x.dim(1), Dout = w.dim(1);
    if (w.dim(0) != Din || b.dim(0) != Dout) throw ShapeError("linear: shape mismatch");
    Tensor<T> out({N, Dout});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t o = 0; o < Dout; ++o) out.at2(n, o) = b[o];
        for (std::size_t d = 0; d < Din; ++d) {
            const T xv = x.at2(n, d);
            const T* wrow = w.data() + d * Dout;
            T* orow = out.data() + n * Dout;
            for (std::size_t o = 0; o < Dout; ++o) orow[o] += xv * wrow[o];
        }
    }
    return out;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dout, Tensor<T>* dx,
                     Tensor<T>* dw, Tensor<T>* db) {
    const std::size_t N = x.dim(0), Din = x.dim(1), Dout = w.dim(1);
    if (dx) *dx = Tensor<T>({N, Din}, T(0));
    if (dw) *dw = Tensor<T>({Din, Dout}, T(0));
    if (db) *db = Tensor<T>({Dout}, T(0));
    for (std::size_t n = 0; n < N; ++n) {
        const T* dorow = dout.data() + n * Dout;
        if (db)
            for (std::size_t o = 0; o < Dout; ++o) (*db)[o] += dorow[o];
        for (std::size_t d = 0; d < Din; ++d) {
            const T* wrow = w.data() + d * Dout;
            const T xv = x.at2(n, d);
            T acc = T(0);
            T* dwrow = dw ? dw->data() + d * Dout : nullptr;
            for (std::size_t o = 0; o < Dout; ++o) {
                acc += wrow[o] * dorow[o];
                if (dwrow) dwrow[o] += xv * dorow[o];
            }
            if (dx) dx->at2(n, d) = acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
    const std::size_t N = logits.dim(0), L = logits.dim(1);
    Tensor<T> probs(logits.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const T* row = logits.data() + n * L;
        T* prow = probs.data() + n * L;
        T mx = row[0];
        for (std::size_t l = 1; l < L; ++l) mx = std::max(mx, row[l]);
        double sum = 0.0;
        for (std::size_t l = 0; l < L; ++l) {
            const double e = std::exp(static_cast<double>(row[l] - mx));
            prow[l] = static_cast<T>(e);
            sum += e;
        }
        for (std::size_t l = 0; l < L; ++l) prow[l] = static_cast<T>(prow[l] / sum);
    }
    return probs;
}

template <typename T>
struct XentResult {
    T loss = T(0);
    Tensor<T> probs;
};

template <typename T>
XentResult<T> softmax_xent(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("softmax_xent: expects [N,L] logits");
    const std::size_t N = logits.dim(0), L = logits.dim(1);
    if (labels.size() != N) throw ShapeError("softmax_xent: label count != batch size");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= L)
            throw DataError("softmax_xent: label out of range");
    XentResult<T> r;
    r.probs = Tensor<T>(logits.shape());
    double loss = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        const T* row = logits.data() + n * L;
        T* prow = r.probs.data() + n * L;
        T mx = row[0];
        for (std::size_t l = 1; l < L; ++l) mx = std::max(mx, row[l]);
        double sum = 0.0;
        for (std::size_t l = 0; l < L; ++l) sum += std::exp(static_cast<double>(row[l] - mx));
        const double logsum = std::log(sum) + static_cast<double>(mx);
        for (std::size_t l = 0; l < L; ++l)
            prow[l] = static_cast<T>(std::exp(static_cast<double>(row[l]) - logsum));
        loss -= static_cast<double>(row[labels[n]]) - logsum;
    }
    r.loss = static_cast<T>(loss / N);
    return r;
}

// Gradient of the mean cross-entropy loss with respect to the logits.
template <typename T>
Tensor<T> softmax_xent_backward(const Tensor<T>& probs, const std::vector<int>& labels) {
    const std::size_t N = probs.dim(0), L = probs.dim(1);
    if (labels.size() != N) throw ShapeError("softmax_xent_backward: label count != batch size");
    Tensor<T> dlogits(probs.shape());
    const T inv_n = T(1) / static_cast<T>(N);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t l = 0; l < L; ++l) {
            T v = probs.at2(n, l);
            if (static_cast<std::size_t>(labels[n]) == l) v -= T(1);
            dlogits.at2(n, l) = v * inv_n;
        }
    }
    return dlogits;
}

// Elementwise helpers shared by the residual blocks.
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("add_inplace: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
void axpy_inplace(Tensor<T>& a, T s, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("axpy_inplace: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
}

}  // namespace mdsep
