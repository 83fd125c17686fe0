#pragma once

// Brute-force reference kernels. Every routine here is a literal nested-loop
// evaluation of the defining convolution sums, written for clarity and kept
// deliberately separate from the optimized kernels so the two paths share no
// arithmetic. Tests adjudicate the optimized implementations against these.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>

#include "volt3d/tensor.hpp"

namespace volt3d::oracle {

// Counts one multiply-accumulate per kernel multiply, including multiplies
// against implicit zero padding (the closed-form cost model counts full
// kernel applications at every output position).
struct MacCounter {
    std::uint64_t count = 0;
    void add(std::uint64_t n) { count += n; }
    void reset() { count = 0; }
};

inline void mac(MacCounter* c) {
    if (c != nullptr) ++c->count;
}

// Oracles are for tiny problems only; trip early if someone routes a real
// workload through them.
constexpr std::size_t kMaxOracleExtent = 16;
constexpr std::size_t kMaxOracleChannels = 32;

template <typename T>
inline void check_oracle_size(const Tensor<T>& x) {
    if (x.rank() != 5) throw std::invalid_argument("oracle: expected (N,C,D,H,W) input");
    if (x.extent(1) > kMaxOracleChannels) throw std::invalid_argument("oracle: too many channels");
    for (std::size_t a = 2; a < 5; ++a) {
        if (x.extent(a) > kMaxOracleExtent) throw std::invalid_argument("oracle: extent too large");
    }
}

inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    const std::ptrdiff_t num = static_cast<std::ptrdiff_t>(in + 2 * pad) - static_cast<std::ptrdiff_t>(k);
    if (num < 0) throw std::invalid_argument("oracle: kernel exceeds padded input");
    return static_cast<std::size_t>(num) / stride + 1;
}

namespace detail {

template <typename T>
inline T tap(const Tensor<T>& x, std::size_t n, std::size_t c, std::ptrdiff_t z, std::ptrdiff_t y,
             std::ptrdiff_t xx) {
    if (z < 0 || y < 0 || xx < 0) return T(0);
    if (static_cast<std::size_t>(z) >= x.extent(2) || static_cast<std::size_t>(y) >= x.extent(3) ||
        static_cast<std::size_t>(xx) >= x.extent(4)) {
        return T(0);
    }
    return x(n, c, static_cast<std::size_t>(z), static_cast<std::size_t>(y),
             static_cast<std::size_t>(xx));
}

// Core loop shared by the symmetric-padding and the forced-same variants of
// the standard convolution sum: G[n] = sum_{i,j,k,m} K[i,j,k,m,n] F[...,m].
template <typename T>
Tensor<T> conv3d_loops(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                       std::ptrdiff_t off_d, std::ptrdiff_t off_h, std::ptrdiff_t off_w,
                       std::size_t od, std::size_t oh, std::size_t ow, MacCounter* macs) {
    const std::size_t n_batch = x.extent(0), ci = x.extent(1);
    const std::size_t co = w.extent(0), kd = w.extent(2), kh = w.extent(3), kw = w.extent(4);
    Tensor<T> out({n_batch, co, od, oh, ow});
    for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t g = 0; g < co; ++g)
            for (std::size_t z = 0; z < od; ++z)
                for (std::size_t y = 0; y < oh; ++y)
                    for (std::size_t v = 0; v < ow; ++v) {
                        T acc = 0;
                        for (std::size_t m = 0; m < ci; ++m)
                            for (std::size_t i = 0; i < kd; ++i)
                                for (std::size_t j = 0; j < kh; ++j)
                                    for (std::size_t k = 0; k < kw; ++k) {
                                        acc += w(g, m, i, j, k) *
                                               tap(x, n, m,
                                                   static_cast<std::ptrdiff_t>(z * stride) + off_d + static_cast<std::ptrdiff_t>(i),
                                                   static_cast<std::ptrdiff_t>(y * stride) + off_h + static_cast<std::ptrdiff_t>(j),
                                                   static_cast<std::ptrdiff_t>(v * stride) + off_w + static_cast<std::ptrdiff_t>(k));
                                        mac(macs);
                                    }
                        out(n, g, z, y, v) = acc;
                    }
    return out;
}

template <typename T>
Tensor<T> depthwise_loops(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                          std::size_t stride, std::ptrdiff_t off_d, std::ptrdiff_t off_h,
                          std::ptrdiff_t off_w, std::size_t od, std::size_t oh, std::size_t ow,
                          MacCounter* macs) {
    const std::size_t n_batch = x.extent(0), c = x.extent(1);
    const std::size_t kd = w.extent(1), kh = w.extent(2), kw = w.extent(3);
    Tensor<T> out({n_batch, c, od, oh, ow});
    for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t m = 0; m < c; ++m)
            for (std::size_t z = 0; z < od; ++z)
                for (std::size_t y = 0; y < oh; ++y)
                    for (std::size_t v = 0; v < ow; ++v) {
                        T acc = 0;
                        for (std::size_t i = 0; i < kd; ++i)
                            for (std::size_t j = 0; j < kh; ++j)
                                for (std::size_t k = 0; k < kw; ++k) {
                                    acc += w(m, i, j, k) *
                                           tap(x, n, m,
                                               static_cast<std::ptrdiff_t>(z * stride) + off_d + static_cast<std::ptrdiff_t>(i),
                                               static_cast<std::ptrdiff_t>(y * stride) + off_h + static_cast<std::ptrdiff_t>(j),
                                               static_cast<std::ptrdiff_t>(v * stride) + off_w + static_cast<std::ptrdiff_t>(k));
                                    mac(macs);
                                }
                        out(n, m, z, y, v) = acc + bias(m);
                    }
    return out;
}

}  // namespace detail

// ---- standard 3D convolution ----

template <typename T>
Tensor<T> naive_conv3d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad,
                       MacCounter* macs = nullptr) {
    check_oracle_size(x);
    if (w.rank() != 5 || w.extent(1) != x.extent(1)) {
        throw std::invalid_argument("naive_conv3d: kernel/input channel mismatch");
    }
    const std::size_t od = conv_extent(x.extent(2), w.extent(2), stride, pad);
    const std::size_t oh = conv_extent(x.extent(3), w.extent(3), stride, pad);
    const std::size_t ow = conv_extent(x.extent(4), w.extent(4), stride, pad);
    const std::ptrdiff_t off = -static_cast<std::ptrdiff_t>(pad);
    return detail::conv3d_loops(x, w, stride, off, off, off, od, oh, ow, macs);
}

// Output extent pinned to the input extent (the cost formulas assume this),
// stride 1, kernel anchored at floor((k-1)/2) so even k works too.
template <typename T>
Tensor<T> naive_conv3d_same(const Tensor<T>& x, const Tensor<T>& w, MacCounter* macs = nullptr) {
    check_oracle_size(x);
    const auto off = [](std::size_t k) { return -static_cast<std::ptrdiff_t>((k - 1) / 2); };
    return detail::conv3d_loops(x, w, 1, off(w.extent(2)), off(w.extent(3)), off(w.extent(4)),
                                x.extent(2), x.extent(3), x.extent(4), macs);
}

// ---- 3D depthwise convolution ----

template <typename T>
Tensor<T> naive_depthwise(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                          std::size_t stride, std::size_t pad, MacCounter* macs = nullptr) {
    check_oracle_size(x);
    if (w.rank() != 4 || w.extent(0) != x.extent(1)) {
        throw std::invalid_argument("naive_depthwise: one filter per input channel required");
    }
    const std::size_t od = conv_extent(x.extent(2), w.extent(1), stride, pad);
    const std::size_t oh = conv_extent(x.extent(3), w.extent(2), stride, pad);
    const std::size_t ow = conv_extent(x.extent(4), w.extent(3), stride, pad);
    const std::ptrdiff_t off = -static_cast<std::ptrdiff_t>(pad);
    return detail::depthwise_loops(x, w, bias, stride, off, off, off, od, oh, ow, macs);
}

template <typename T>
Tensor<T> naive_depthwise_same(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                               MacCounter* macs = nullptr) {
    check_oracle_size(x);
    const auto off = [](std::size_t k) { return -static_cast<std::ptrdiff_t>((k - 1) / 2); };
    return detail::depthwise_loops(x, w, bias, 1, off(w.extent(1)), off(w.extent(2)),
                                   off(w.extent(3)), x.extent(2), x.extent(3), x.extent(4), macs);
}

// ---- pointwise (1x1x1) convolution ----

template <typename T>
Tensor<T> naive_pointwise(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                          MacCounter* macs = nullptr) {
    check_oracle_size(x);
    if (w.rank() != 2 || w.extent(1) != x.extent(1)) {
        throw std::invalid_argument("naive_pointwise: weight columns must match input channels");
    }
    const std::size_t n_batch = x.extent(0), ci = x.extent(1), co = w.extent(0);
    const std::size_t d = x.extent(2), h = x.extent(3), wd = x.extent(4);
    Tensor<T> out({n_batch, co, d, h, wd});
    for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t g = 0; g < co; ++g)
            for (std::size_t z = 0; z < d; ++z)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t v = 0; v < wd; ++v) {
                        T acc = 0;
                        for (std::size_t m = 0; m < ci; ++m) {
                            acc += w(g, m) * x(n, m, z, y, v);
                            mac(macs);
                        }
                        out(n, g, z, y, v) = acc + bias(g);
                    }
    return out;
}

// ---- pseudo-3D steps ----
// Horizontal: 1 x k x k filter over (H,W) with full channel mixing.
// Vertical:   k x 1 x 1 filter over D, mapping c_F -> c_G.

template <typename T>
Tensor<T> naive_pseudo_horizontal_same(const Tensor<T>& x, const Tensor<T>& w,
                                       MacCounter* macs = nullptr) {
    check_oracle_size(x);
    if (w.rank() != 5 || w.extent(2) != 1) {
        throw std::invalid_argument("naive_pseudo_horizontal: kernel must be (c,c,1,k,k)");
    }
    return naive_conv3d_same(x, w, macs);
}

template <typename T>
Tensor<T> naive_pseudo_vertical_same(const Tensor<T>& x, const Tensor<T>& w,
                                     MacCounter* macs = nullptr) {
    check_oracle_size(x);
    if (w.rank() != 5 || w.extent(3) != 1 || w.extent(4) != 1) {
        throw std::invalid_argument("naive_pseudo_vertical: kernel must be (cG,cF,k,1,1)");
    }
    return naive_conv3d_same(x, w, macs);
}

// Both steps chained, no batchnorm or activation in between.
template <typename T>
Tensor<T> naive_pseudo(const Tensor<T>& x, const Tensor<T>& horizontal, const Tensor<T>& vertical,
                       MacCounter* macs = nullptr) {
    return naive_pseudo_vertical_same(naive_pseudo_horizontal_same(x, horizontal, macs), vertical,
                                      macs);
}

// ---- transposed 3D convolution ----
// Gather form of the adjoint: out[zo] collects x[(zo-a)/s] for every kernel
// offset a that lands on an input voxel. Only realized multiplies count.

template <typename T>
Tensor<T> naive_convtranspose(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                              MacCounter* macs = nullptr) {
    check_oracle_size(x);
    if (w.rank() != 5 || w.extent(0) != x.extent(1)) {
        throw std::invalid_argument("naive_convtranspose: kernel must be (cF,cG,k,k,k)");
    }
    const std::size_t n_batch = x.extent(0), cf = x.extent(1), cg = w.extent(1);
    const std::size_t kd = w.extent(2), kh = w.extent(3), kw = w.extent(4);
    const std::size_t od = (x.extent(2) - 1) * stride + kd;
    const std::size_t oh = (x.extent(3) - 1) * stride + kh;
    const std::size_t ow = (x.extent(4) - 1) * stride + kw;
    Tensor<T> out({n_batch, cg, od, oh, ow});
    for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t g = 0; g < cg; ++g)
            for (std::size_t zo = 0; zo < od; ++zo)
                for (std::size_t yo = 0; yo < oh; ++yo)
                    for (std::size_t xo = 0; xo < ow; ++xo) {
                        T acc = 0;
                        for (std::size_t f = 0; f < cf; ++f)
                            for (std::size_t a = 0; a < kd; ++a)
                                for (std::size_t b = 0; b < kh; ++b)
                                    for (std::size_t c = 0; c < kw; ++c) {
                                        if (zo < a || yo < b || xo < c) continue;
                                        if ((zo - a) % stride || (yo - b) % stride ||
                                            (xo - c) % stride) {
                                            continue;
                                        }
                                        const std::size_t zi = (zo - a) / stride;
                                        const std::size_t yi = (yo - b) / stride;
                                        const std::size_t xi = (xo - c) / stride;
                                        if (zi >= x.extent(2) || yi >= x.extent(3) ||
                                            xi >= x.extent(4)) {
                                            continue;
                                        }
                                        acc += x(n, f, zi, yi, xi) * w(f, g, a, b, c);
                                        mac(macs);
                                    }
                        out(n, g, zo, yo, xo) = acc;
                    }
    return out;
}

// ---- finite differences ----

// Central-difference gradient of a scalar function with respect to every
// entry of `params`, perturbing in place and restoring afterwards.
template <typename F>
Tensor<double> finite_diff_grad(F&& f, Tensor<double>& params, double h = 1e-5) {
    Tensor<double> grad(params.shape());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params.data()[i];
        params.data()[i] = saved + h;
        const double f_plus = f(params);
        params.data()[i] = saved - h;
        const double f_minus = f(params);
        params.data()[i] = saved;
        if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
            throw std::runtime_error("finite_diff_grad: non-finite function value");
        }
        grad.data()[i] = (f_plus - f_minus) / (2.0 * h);
    }
    return grad;
}

}  // namespace volt3d::oracle
