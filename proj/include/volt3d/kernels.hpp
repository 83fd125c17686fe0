#pragma once

// Optimized forward/backward kernels for the three convolution flavors plus
// the supporting layers (transposed conv, batchnorm, ReLU, max-pool, fully
// connected) and the two losses. Parallel work is always split over disjoint
// output elements with a fixed inner accumulation order, so results are
// bitwise identical for any thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "volt3d/tensor.hpp"
#include "volt3d/thread_pool.hpp"

namespace volt3d {

// Symmetric zero padding and a common stride for all three spatial axes.
// Output extent per axis: floor((in + 2*padding - k) / stride) + 1.
struct ConvGeometry {
    std::size_t stride = 1;
    std::size_t padding = 0;

    static ConvGeometry same(std::size_t k) { return {1, k / 2}; }
};

// Per-axis geometry; the pseudo-3D steps pad only the axes their filter spans.
struct AxisGeometry {
    std::size_t stride = 1;
    std::size_t pad = 0;
};

struct Geometry3 {
    AxisGeometry d, h, w;

    static Geometry3 uniform(const ConvGeometry& g) {
        return {{g.stride, g.padding}, {g.stride, g.padding}, {g.stride, g.padding}};
    }
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t k, const AxisGeometry& g,
                                      const char* what) {
    const std::ptrdiff_t num =
        static_cast<std::ptrdiff_t>(in + 2 * g.pad) - static_cast<std::ptrdiff_t>(k);
    if (num < 0 || g.stride == 0) {
        throw std::invalid_argument(std::string(what) + ": non-positive output extent (in=" +
                                    std::to_string(in) + ", k=" + std::to_string(k) +
                                    ", pad=" + std::to_string(g.pad) + ")");
    }
    return static_cast<std::size_t>(num) / g.stride + 1;
}

// ---------------------------------------------------------------------------
// Weight containers
// ---------------------------------------------------------------------------

// Full-rank 3D kernel, weights (c_G, c_F, k, k, k). Bias-free.
template <typename T>
struct StdKernel {
    Tensor<T> weights;

    static StdKernel he_init(std::size_t c_out, std::size_t c_in, std::size_t k, Seed seed) {
        const double fan_in = static_cast<double>(c_in * k * k * k);
        return {Tensor<T>::randn({c_out, c_in, k, k, k}, seed, std::sqrt(2.0 / fan_in))};
    }

    std::size_t c_out() const { return weights.extent(0); }
    std::size_t c_in() const { return weights.extent(1); }
    std::size_t k() const { return weights.extent(2); }
};

// One k^3 filter per channel plus a per-channel bias; channel count preserved.
template <typename T>
struct DepthwiseKernel {
    Tensor<T> weights;  // (c, k, k, k)
    Tensor<T> bias;     // (c)

    static DepthwiseKernel he_init(std::size_t c, std::size_t k, Seed seed) {
        const double fan_in = static_cast<double>(k * k * k);
        return {Tensor<T>::randn({c, k, k, k}, seed, std::sqrt(2.0 / fan_in)), Tensor<T>({c})};
    }

    std::size_t channels() const { return weights.extent(0); }
    std::size_t k() const { return weights.extent(1); }
};

// 1x1x1 channel-mixing convolution, weights (c_G, c_F) plus bias (c_G).
template <typename T>
struct PointwiseKernel {
    Tensor<T> weights;
    Tensor<T> bias;

    static PointwiseKernel he_init(std::size_t c_out, std::size_t c_in, Seed seed) {
        return {Tensor<T>::randn({c_out, c_in}, seed, std::sqrt(2.0 / static_cast<double>(c_in))),
                Tensor<T>({c_out})};
    }

    std::size_t c_out() const { return weights.extent(0); }
    std::size_t c_in() const { return weights.extent(1); }
};

// Horizontal (c_F, c_F, 1, k, k) over (H,W) and vertical (c_G, c_F, k, 1, 1)
// over D. Full channel mixing in both steps; bias-free.
template <typename T>
struct PseudoKernelPair {
    Tensor<T> horizontal;
    Tensor<T> vertical;

    static PseudoKernelPair he_init(std::size_t c_out, std::size_t c_in, std::size_t k, Seed seed) {
        const double fan_h = static_cast<double>(c_in * k * k);
        const double fan_v = static_cast<double>(c_in * k);
        return {Tensor<T>::randn({c_in, c_in, 1, k, k}, seed, std::sqrt(2.0 / fan_h)),
                Tensor<T>::randn({c_out, c_in, k, 1, 1}, subseed(seed, 1), std::sqrt(2.0 / fan_v))};
    }

    std::size_t c_out() const { return vertical.extent(0); }
    std::size_t c_in() const { return horizontal.extent(1); }
    std::size_t k() const { return horizontal.extent(4); }
};

// ---------------------------------------------------------------------------
// General strided convolution core (shared by standard conv, the two pseudo
// steps and the final 1x1x1 projection)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_conv_input(const Tensor<T>& x, const Tensor<T>& w, const char* what) {
    if (x.rank() != 5) throw std::invalid_argument(std::string(what) + ": input must be (N,C,D,H,W)");
    if (w.rank() != 5) throw std::invalid_argument(std::string(what) + ": kernel must be rank 5");
    if (x.extent(1) != w.extent(1)) {
        throw std::invalid_argument(std::string(what) + ": channel mismatch, input has " +
                                    std::to_string(x.extent(1)) + ", kernel expects " +
                                    std::to_string(w.extent(1)));
    }
}

template <typename T>
Tensor<T> conv3d_core(const Tensor<T>& x, const Tensor<T>& w, const Geometry3& g,
                      const char* what) {
    check_conv_input(x, w, what);
    const std::size_t nb = x.extent(0), ci = x.extent(1);
    const std::size_t di = x.extent(2), hi = x.extent(3), wi = x.extent(4);
    const std::size_t co = w.extent(0);
    const std::size_t kd = w.extent(2), kh = w.extent(3), kw = w.extent(4);
    const std::size_t od = conv_output_extent(di, kd, g.d, what);
    const std::size_t oh = conv_output_extent(hi, kh, g.h, what);
    const std::size_t ow = conv_output_extent(wi, kw, g.w, what);

    Tensor<T> out({nb, co, od, oh, ow});
    const T* xp = x.data();
    const T* wp = w.data();
    T* op = out.data();
    const std::size_t x_cs = di * hi * wi;          // channel stride in x
    const std::size_t o_cs = od * oh * ow;          // channel stride in out
    const std::size_t w_cs = kd * kh * kw;          // per (co,ci) filter size

    parallel_for(nb * co, [&](std::size_t begin, std::size_t end) {
        for (std::size_t idx = begin; idx < end; ++idx) {
            const std::size_t n = idx / co;
            const std::size_t g_out = idx % co;
            const T* xn = xp + n * ci * x_cs;
            const T* wg = wp + g_out * ci * w_cs;
            T* on = op + (n * co + g_out) * o_cs;
            for (std::size_t zo = 0; zo < od; ++zo) {
                const std::ptrdiff_t z0 = static_cast<std::ptrdiff_t>(zo * g.d.stride) -
                                          static_cast<std::ptrdiff_t>(g.d.pad);
                const std::size_t i_lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -z0));
                const std::size_t i_hi = static_cast<std::size_t>(
                    std::min<std::ptrdiff_t>(kd, static_cast<std::ptrdiff_t>(di) - z0));
                for (std::size_t yo = 0; yo < oh; ++yo) {
                    const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(yo * g.h.stride) -
                                              static_cast<std::ptrdiff_t>(g.h.pad);
                    const std::size_t j_lo =
                        static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -y0));
                    const std::size_t j_hi = static_cast<std::size_t>(
                        std::min<std::ptrdiff_t>(kh, static_cast<std::ptrdiff_t>(hi) - y0));
                    for (std::size_t xo = 0; xo < ow; ++xo) {
                        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(xo * g.w.stride) -
                                                  static_cast<std::ptrdiff_t>(g.w.pad);
                        const std::size_t k_lo =
                            static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -x0));
                        const std::size_t k_hi = static_cast<std::size_t>(
                            std::min<std::ptrdiff_t>(kw, static_cast<std::ptrdiff_t>(wi) - x0));
                        T acc = 0;
                        for (std::size_t m = 0; m < ci; ++m) {
                            const T* xc = xn + m * x_cs;
                            const T* wc = wg + m * w_cs;
                            for (std::size_t i = i_lo; i < i_hi; ++i) {
                                const std::size_t zi = static_cast<std::size_t>(z0) + i;
                                for (std::size_t j = j_lo; j < j_hi; ++j) {
                                    const std::size_t yi = static_cast<std::size_t>(y0) + j;
                                    const T* xrow = xc + (zi * hi + yi) * wi + static_cast<std::size_t>(x0);
                                    const T* wrow = wc + (i * kh + j) * kw;
                                    for (std::size_t k = k_lo; k < k_hi; ++k) {
                                        acc += xrow[k] * wrow[k];
                                    }
                                }
                            }
                        }
                        on[(zo * oh + yo) * ow + xo] = acc;
                    }
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> conv3d_core_grad_input(const Tensor<T>& dy, const Shape& x_shape, const Tensor<T>& w,
                                 const Geometry3& g) {
    const std::size_t nb = x_shape[0], ci = x_shape[1];
    const std::size_t di = x_shape[2], hi = x_shape[3], wi = x_shape[4];
    const std::size_t co = w.extent(0);
    const std::size_t kd = w.extent(2), kh = w.extent(3), kw = w.extent(4);
    const std::size_t od = dy.extent(2), oh = dy.extent(3), ow = dy.extent(4);

    Tensor<T> dx(x_shape);
    const T* dyp = dy.data();
    const T* wp = w.data();
    T* dxp = dx.data();
    const std::size_t y_cs = od * oh * ow;
    const std::size_t w_cs = kd * kh * kw;

    // For input position zi, valid taps satisfy zo*stride = zi + pad - i.
    auto taps = [](std::size_t pos, std::size_t k, std::size_t out_extent, const AxisGeometry& ax,
                   std::vector<std::pair<std::size_t, std::size_t>>& io) {
        io.clear();
        for (std::size_t i = 0; i < k; ++i) {
            const std::ptrdiff_t num = static_cast<std::ptrdiff_t>(pos + ax.pad) -
                                       static_cast<std::ptrdiff_t>(i);
            if (num < 0 || static_cast<std::size_t>(num) % ax.stride != 0) continue;
            const std::size_t o = static_cast<std::size_t>(num) / ax.stride;
            if (o < out_extent) io.emplace_back(i, o);
        }
    };

    parallel_for(nb * ci, [&](std::size_t begin, std::size_t end) {
        std::vector<std::pair<std::size_t, std::size_t>> td, th, tw;
        for (std::size_t idx = begin; idx < end; ++idx) {
            const std::size_t n = idx / ci;
            const std::size_t m = idx % ci;
            T* dxc = dxp + (n * ci + m) * di * hi * wi;
            const T* dyn = dyp + n * co * y_cs;
            for (std::size_t zi = 0; zi < di; ++zi) {
                taps(zi, kd, od, g.d, td);
                for (std::size_t yi = 0; yi < hi; ++yi) {
                    taps(yi, kh, oh, g.h, th);
                    for (std::size_t xi = 0; xi < wi; ++xi) {
                        taps(xi, kw, ow, g.w, tw);
                        T acc = 0;
                        for (std::size_t go = 0; go < co; ++go) {
                            const T* wg = wp + (go * ci + m) * w_cs;
                            const T* dyg = dyn + go * y_cs;
                            for (const auto& [i, zo] : td)
                                for (const auto& [j, yo] : th)
                                    for (const auto& [k, xo] : tw) {
                                        acc += dyg[(zo * oh + yo) * ow + xo] *
                                               wg[(i * kh + j) * kw + k];
                                    }
                        }
                        dxc[(zi * hi + yi) * wi + xi] = acc;
                    }
                }
            }
        }
    });
    return dx;
}

template <typename T>
Tensor<T> conv3d_core_grad_weights(const Tensor<T>& dy, const Tensor<T>& x, const Shape& w_shape,
                                   const Geometry3& g) {
    const std::size_t nb = x.extent(0), ci = x.extent(1);
    const std::size_t di = x.extent(2), hi = x.extent(3), wi = x.extent(4);
    const std::size_t co = w_shape[0];
    const std::size_t kd = w_shape[2], kh = w_shape[3], kw = w_shape[4];
    const std::size_t od = dy.extent(2), oh = dy.extent(3), ow = dy.extent(4);

    Tensor<T> dw(w_shape);
    const T* dyp = dy.data();
    const T* xp = x.data();
    T* dwp = dw.data();
    const std::size_t x_cs = di * hi * wi;
    const std::size_t y_cs = od * oh * ow;
    const std::size_t w_cs = kd * kh * kw;

    parallel_for(co, [&](std::size_t begin, std::size_t end) {
        for (std::size_t gout = begin; gout < end; ++gout) {
            T* dwg = dwp + gout * ci * w_cs;
            for (std::size_t n = 0; n < nb; ++n) {
                const T* dyg = dyp + (n * co + gout) * y_cs;
                const T* xn = xp + n * ci * x_cs;
                for (std::size_t zo = 0; zo < od; ++zo) {
                    const std::ptrdiff_t z0 = static_cast<std::ptrdiff_t>(zo * g.d.stride) -
                                              static_cast<std::ptrdiff_t>(g.d.pad);
                    for (std::size_t yo = 0; yo < oh; ++yo) {
                        const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(yo * g.h.stride) -
                                                  static_cast<std::ptrdiff_t>(g.h.pad);
                        for (std::size_t xo = 0; xo < ow; ++xo) {
                            const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(xo * g.w.stride) -
                                                      static_cast<std::ptrdiff_t>(g.w.pad);
                            const T gval = dyg[(zo * oh + yo) * ow + xo];
                            if (gval == T(0)) continue;
                            for (std::size_t m = 0; m < ci; ++m) {
                                const T* xc = xn + m * x_cs;
                                T* dwc = dwg + m * w_cs;
                                for (std::size_t i = 0; i < kd; ++i) {
                                    const std::ptrdiff_t zi = z0 + static_cast<std::ptrdiff_t>(i);
                                    if (zi < 0 || zi >= static_cast<std::ptrdiff_t>(di)) continue;
                                    for (std::size_t j = 0; j < kh; ++j) {
                                        const std::ptrdiff_t yi = y0 + static_cast<std::ptrdiff_t>(j);
                                        if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(hi)) continue;
                                        for (std::size_t k = 0; k < kw; ++k) {
                                            const std::ptrdiff_t xi = x0 + static_cast<std::ptrdiff_t>(k);
                                            if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(wi)) continue;
                                            dwc[(i * kh + j) * kw + k] +=
                                                gval * xc[(static_cast<std::size_t>(zi) * hi +
                                                           static_cast<std::size_t>(yi)) * wi +
                                                          static_cast<std::size_t>(xi)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    return dw;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Standard 3D convolution
// ---------------------------------------------------------------------------

template <typename T>
struct ConvGrads {
    Tensor<T> input;
    Tensor<T> weights;
};

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const StdKernel<T>& kernel, const ConvGeometry& geom) {
    return detail::conv3d_core(x, kernel.weights, Geometry3::uniform(geom), "conv3d");
}

template <typename T>
ConvGrads<T> conv3d_backward(const Tensor<T>& dy, const Tensor<T>& x, const StdKernel<T>& kernel,
                             const ConvGeometry& geom) {
    const Geometry3 g3 = Geometry3::uniform(geom);
    return {detail::conv3d_core_grad_input(dy, x.shape(), kernel.weights, g3),
            detail::conv3d_core_grad_weights(dy, x, kernel.weights.shape(), g3)};
}

// ---------------------------------------------------------------------------
// 3D depthwise convolution
// ---------------------------------------------------------------------------

template <typename T>
struct DepthwiseGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;
};

template <typename T>
Tensor<T> depthwise3d_forward(const Tensor<T>& x, const DepthwiseKernel<T>& kernel,
                              const ConvGeometry& geom) {
    if (x.rank() != 5) throw std::invalid_argument("depthwise3d: input must be (N,C,D,H,W)");
    if (x.extent(1) != kernel.channels()) {
        throw std::invalid_argument("depthwise3d: channel mismatch, input has " +
                                    std::to_string(x.extent(1)) + ", kernel has " +
                                    std::to_string(kernel.channels()));
    }
    const std::size_t nb = x.extent(0), c = x.extent(1);
    const std::size_t di = x.extent(2), hi = x.extent(3), wi = x.extent(4);
    const std::size_t k = kernel.k();
    const AxisGeometry ax{geom.stride, geom.padding};
    const std::size_t od = conv_output_extent(di, k, ax, "depthwise3d");
    const std::size_t oh = conv_output_extent(hi, k, ax, "depthwise3d");
    const std::size_t ow = conv_output_extent(wi, k, ax, "depthwise3d");

    Tensor<T> out({nb, c, od, oh, ow});
    const T* xp = x.data();
    const T* wp = kernel.weights.data();
    const T* bp = kernel.bias.data();
    T* op = out.data();
    const std::size_t x_cs = di * hi * wi;
    const std::size_t o_cs = od * oh * ow;

    parallel_for(nb * c, [&](std::size_t begin, std::size_t end) {
        for (std::size_t idx = begin; idx < end; ++idx) {
            const std::size_t n = idx / c;
            const std::size_t m = idx % c;
            const T* xc = xp + (n * c + m) * x_cs;
            const T* wc = wp + m * k * k * k;
            const T bias = bp[m];
            T* oc = op + (n * c + m) * o_cs;
            for (std::size_t zo = 0; zo < od; ++zo) {
                const std::ptrdiff_t z0 = static_cast<std::ptrdiff_t>(zo * geom.stride) -
                                          static_cast<std::ptrdiff_t>(geom.padding);
                for (std::size_t yo = 0; yo < oh; ++yo) {
                    const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(yo * geom.stride) -
                                              static_cast<std::ptrdiff_t>(geom.padding);
                    for (std::size_t xo = 0; xo < ow; ++xo) {
                        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(xo * geom.stride) -
                                                  static_cast<std::ptrdiff_t>(geom.padding);
                        T acc = bias;
                        for (std::size_t i = 0; i < k; ++i) {
                            const std::ptrdiff_t zi = z0 + static_cast<std::ptrdiff_t>(i);
                            if (zi < 0 || zi >= static_cast<std::ptrdiff_t>(di)) continue;
                            for (std::size_t j = 0; j < k; ++j) {
                                const std::ptrdiff_t yi = y0 + static_cast<std::ptrdiff_t>(j);
                                if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(hi)) continue;
                                const T* xrow = xc + (static_cast<std::size_t>(zi) * hi +
                                                      static_cast<std::size_t>(yi)) * wi;
                                const T* wrow = wc + (i * k + j) * k;
                                for (std::size_t kk = 0; kk < k; ++kk) {
                                    const std::ptrdiff_t xi = x0 + static_cast<std::ptrdiff_t>(kk);
                                    if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(wi)) continue;
                                    acc += xrow[static_cast<std::size_t>(xi)] * wrow[kk];
                                }
                            }
                        }
                        oc[(zo * oh + yo) * ow + xo] = acc;
                    }
                }
            }
        }
    });
    return out;
}

template <typename T>
DepthwiseGrads<T> depthwise3d_backward(const Tensor<T>& dy, const Tensor<T>& x,
                                       const DepthwiseKernel<T>& kernel, const ConvGeometry& geom) {
    const std::size_t nb = x.extent(0), c = x.extent(1);
    const std::size_t di = x.extent(2), hi = x.extent(3), wi = x.extent(4);
    const std::size_t k = kernel.k();
    const std::size_t od = dy.extent(2), oh = dy.extent(3), ow = dy.extent(4);

    DepthwiseGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(kernel.weights.shape()),
                            Tensor<T>(kernel.bias.shape())};
    const T* dyp = dy.data();
    const T* xp = x.data();
    const T* wp = kernel.weights.data();
    T* dxp = grads.input.data();
    T* dwp = grads.weights.data();
    T* dbp = grads.bias.data();
    const std::size_t x_cs = di * hi * wi;
    const std::size_t y_cs = od * oh * ow;

    // Each channel is owned by one worker: its dx slice, filter grad and bias
    // grad are all accumulated there in a fixed order.
    parallel_for(c, [&](std::size_t begin, std::size_t end) {
        for (std::size_t m = begin; m < end; ++m) {
            T* dwc = dwp + m * k * k * k;
            T bias_acc = 0;
            for (std::size_t n = 0; n < nb; ++n) {
                const T* dyc = dyp + (n * c + m) * y_cs;
                const T* xc = xp + (n * c + m) * x_cs;
                T* dxc = dxp + (n * c + m) * x_cs;
                for (std::size_t zo = 0; zo < od; ++zo) {
                    const std::ptrdiff_t z0 = static_cast<std::ptrdiff_t>(zo * geom.stride) -
                                              static_cast<std::ptrdiff_t>(geom.padding);
                    for (std::size_t yo = 0; yo < oh; ++yo) {
                        const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(yo * geom.stride) -
                                                  static_cast<std::ptrdiff_t>(geom.padding);
                        for (std::size_t xo = 0; xo < ow; ++xo) {
                            const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(xo * geom.stride) -
                                                      static_cast<std::ptrdiff_t>(geom.padding);
                            const T gval = dyc[(zo * oh + yo) * ow + xo];
                            bias_acc += gval;
                            if (gval == T(0)) continue;
                            for (std::size_t i = 0; i < k; ++i) {
                                const std::ptrdiff_t zi = z0 + static_cast<std::ptrdiff_t>(i);
                                if (zi < 0 || zi >= static_cast<std::ptrdiff_t>(di)) continue;
                                for (std::size_t j = 0; j < k; ++j) {
                                    const std::ptrdiff_t yi = y0 + static_cast<std::ptrdiff_t>(j);
                                    if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(hi)) continue;
                                    for (std::size_t kk = 0; kk < k; ++kk) {
                                        const std::ptrdiff_t xi = x0 + static_cast<std::ptrdiff_t>(kk);
                                        if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(wi)) continue;
                                        const std::size_t xoff =
                                            (static_cast<std::size_t>(zi) * hi +
                                             static_cast<std::size_t>(yi)) * wi +
                                            static_cast<std::size_t>(xi);
                                        dxc[xoff] += gval * wp[m * k * k * k + (i * k + j) * k + kk];
                                        dwc[(i * k + j) * k + kk] += gval * xc[xoff];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dbp[m] = bias_acc;
        }
    });
    return grads;
}

// ---------------------------------------------------------------------------
// Pointwise convolution (per-voxel channel mixing)
// ---------------------------------------------------------------------------

template <typename T>
struct PointwiseGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;
};

template <typename T>
Tensor<T> pointwise_forward(const Tensor<T>& x, const PointwiseKernel<T>& kernel) {
    if (x.rank() != 5) throw std::invalid_argument("pointwise: input must be (N,C,D,H,W)");
    if (x.extent(1) != kernel.c_in()) {
        throw std::invalid_argument("pointwise: channel mismatch, input has " +
                                    std::to_string(x.extent(1)) + ", kernel expects " +
                                    std::to_string(kernel.c_in()));
    }
    const std::size_t nb = x.extent(0), ci = x.extent(1), co = kernel.c_out();
    const std::size_t vol = x.extent(2) * x.extent(3) * x.extent(4);
    Tensor<T> out({nb, co, x.extent(2), x.extent(3), x.extent(4)});
    const T* xp = x.data();
    const T* wp = kernel.weights.data();
    const T* bp = kernel.bias.data();
    T* op = out.data();

    parallel_for(nb * co, [&](std::size_t begin, std::size_t end) {
        for (std::size_t idx = begin; idx < end; ++idx) {
            const std::size_t n = idx / co;
            const std::size_t g = idx % co;
            T* orow = op + (n * co + g) * vol;
            const T bias = bp[g];
            for (std::size_t v = 0; v < vol; ++v) orow[v] = bias;
            const T* xn = xp + n * ci * vol;
            const T* wrow = wp + g * ci;
            for (std::size_t m = 0; m < ci; ++m) {
                const T wv = wrow[m];
                const T* xrow = xn + m * vol;
                for (std::size_t v = 0; v < vol; ++v) orow[v] += wv * xrow[v];
            }
        }
    });
    return out;
}

template <typename T>
PointwiseGrads<T> pointwise_backward(const Tensor<T>& dy, const Tensor<T>& x,
                                     const PointwiseKernel<T>& kernel) {
    const std::size_t nb = x.extent(0), ci = x.extent(1), co = kernel.c_out();
    const std::size_t vol = x.extent(2) * x.extent(3) * x.extent(4);
    PointwiseGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(kernel.weights.shape()),
                            Tensor<T>(kernel.bias.shape())};
    const T* dyp = dy.data();
    const T* xp = x.data();
    const T* wp = kernel.weights.data();

    T* dxp = grads.input.data();
    parallel_for(nb * ci, [&](std::size_t begin, std::size_t end) {
        for (std::size_t idx = begin; idx < end; ++idx) {
            const std::size_t n = idx / ci;
            const std::size_t m = idx % ci;
            T* dxrow = dxp + (n * ci + m) * vol;
            for (std::size_t g = 0; g < co; ++g) {
                const T wv = wp[g * ci + m];
                const T* dyrow = dyp + (n * co + g) * vol;
                for (std::size_t v = 0; v < vol; ++v) dxrow[v] += wv * dyrow[v];
            }
        }
    });

    T* dwp = grads.weights.data();
    T* dbp = grads.bias.data();
    parallel_for(co, [&](std::size_t begin, std::size_t end) {
        for (std::size_t g = begin; g < end; ++g) {
            T bias_acc = 0;
            for (std::size_t n = 0; n < nb; ++n) {
                const T* dyrow = dyp + (n * co + g) * vol;
                for (std::size_t v = 0; v < vol; ++v) bias_acc += dyrow[v];
                for (std::size_t m = 0; m < ci; ++m) {
                    const T* xrow = xp + (n * ci + m) * vol;
                    T acc = 0;
                    for (std::size_t v = 0; v < vol; ++v) acc += dyrow[v] * xrow[v];
                    dwp[g * ci + m] += acc;
                }
            }
            dbp[g] = bias_acc;
        }
    });
    return grads;
}

// ---------------------------------------------------------------------------
// Transposed 3D convolution, weights (c_F, c_G, k, k, k), no bias.
// Output extent: (in - 1) * stride + k. Exact adjoint of the zero-padding-free
// strided convolution.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> convtranspose3d_forward(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride) {
    if (x.rank() != 5 || w.rank() != 5) {
        throw std::invalid_argument("convtranspose3d: input (N,C,D,H,W), kernel (cF,cG,k,k,k)");
    }
    if (x.extent(1) != w.extent(0)) {
        throw std::invalid_argument("convtranspose3d: channel mismatch, input has " +
                                    std::to_string(x.extent(1)) + ", kernel expects " +
                                    std::to_string(w.extent(0)));
    }
    if (stride < 1) throw std::invalid_argument("convtranspose3d: stride must be >= 1");
    const std::size_t nb = x.extent(0), cf = x.extent(1), cg = w.extent(1);
    const std::size_t di = x.extent(2), hi = x.extent(3), wi = x.extent(4);
    const std::size_t kd = w.extent(2), kh = w.extent(3), kw = w.extent(4);
    const std::size_t od = (di - 1) * stride + kd;
    const std::size_t oh = (hi - 1) * stride + kh;
    const std::size_t ow = (wi - 1) * stride + kw;

    Tensor<T> out({nb, cg, od, oh, ow});
    const T* xp = x.data();
    const T* wp = w.data();
    T* op = out.data();
    const std::size_t x_cs = di * hi * wi;
    const std::size_t o_cs = od * oh * ow;
    const std::size_t krn = kd * kh * kw;
    const std::size_t blk = cg * krn;

    // Scatter over input voxels; per-sample outputs are disjoint, so split
    // over the batch only.
    parallel_for(nb, [&](std::size_t begin, std::size_t end) {
        std::vector<T> scratch(blk);
        for (std::size_t n = begin; n < end; ++n) {
            const T* xn = xp + n * cf * x_cs;
            T* on = op + n * cg * o_cs;
            for (std::size_t zi = 0; zi < di; ++zi)
                for (std::size_t yi = 0; yi < hi; ++yi)
                    for (std::size_t xi = 0; xi < wi; ++xi) {
                        std::fill(scratch.begin(), scratch.end(), T(0));
                        const std::size_t voff = (zi * hi + yi) * wi + xi;
                        for (std::size_t f = 0; f < cf; ++f) {
                            const T xv = xn[f * x_cs + voff];
                            if (xv == T(0)) continue;
                            const T* wrow = wp + f * blk;
                            for (std::size_t t = 0; t < blk; ++t) scratch[t] += xv * wrow[t];
                        }
                        for (std::size_t g = 0; g < cg; ++g) {
                            const T* s = scratch.data() + g * krn;
                            T* og = on + g * o_cs;
                            for (std::size_t a = 0; a < kd; ++a) {
                                const std::size_t zo = zi * stride + a;
                                for (std::size_t b = 0; b < kh; ++b) {
                                    const std::size_t yo = yi * stride + b;
                                    T* orow = og + (zo * oh + yo) * ow + xi * stride;
                                    const T* srow = s + (a * kh + b) * kw;
                                    for (std::size_t c = 0; c < kw; ++c) orow[c] += srow[c];
                                }
                            }
                        }
                    }
        }
    });
    return out;
}

template <typename T>
ConvGrads<T> convtranspose3d_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& w,
                                      std::size_t stride) {
    const std::size_t nb = x.extent(0), cf = x.extent(1), cg = w.extent(1);
    const std::size_t di = x.extent(2), hi = x.extent(3), wi = x.extent(4);
    const std::size_t kd = w.extent(2), kh = w.extent(3), kw = w.extent(4);
    const std::size_t od = dy.extent(2), oh = dy.extent(3), ow = dy.extent(4);

    ConvGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(w.shape())};
    const T* dyp = dy.data();
    const T* xp = x.data();
    const T* wp = w.data();
    const std::size_t x_cs = di * hi * wi;
    const std::size_t y_cs = od * oh * ow;
    const std::size_t krn = kd * kh * kw;
    const std::size_t blk = cg * krn;

    // d input: gather the (cG, k^3) block under each input voxel once, then
    // dot it with each filter row.
    T* dxp = grads.input.data();
    parallel_for(nb, [&](std::size_t begin, std::size_t end) {
        std::vector<T> block(blk);
        for (std::size_t n = begin; n < end; ++n) {
            const T* dyn = dyp + n * cg * y_cs;
            T* dxn = dxp + n * cf * x_cs;
            for (std::size_t zi = 0; zi < di; ++zi)
                for (std::size_t yi = 0; yi < hi; ++yi)
                    for (std::size_t xi = 0; xi < wi; ++xi) {
                        for (std::size_t g = 0; g < cg; ++g) {
                            const T* dyg = dyn + g * y_cs;
                            T* brow = block.data() + g * krn;
                            for (std::size_t a = 0; a < kd; ++a) {
                                const std::size_t zo = zi * stride + a;
                                for (std::size_t b = 0; b < kh; ++b) {
                                    const std::size_t yo = yi * stride + b;
                                    const T* dyrow = dyg + (zo * oh + yo) * ow + xi * stride;
                                    for (std::size_t c = 0; c < kw; ++c) {
                                        brow[(a * kh + b) * kw + c] = dyrow[c];
                                    }
                                }
                            }
                        }
                        const std::size_t voff = (zi * hi + yi) * wi + xi;
                        for (std::size_t f = 0; f < cf; ++f) {
                            const T* wrow = wp + f * blk;
                            T acc = 0;
                            for (std::size_t t = 0; t < blk; ++t) acc += wrow[t] * block[t];
                            dxn[f * x_cs + voff] = acc;
                        }
                    }
        }
    });

    // d weights: each input channel's filter rows are owned by one worker.
    T* dwp = grads.weights.data();
    parallel_for(cf, [&](std::size_t begin, std::size_t end) {
        for (std::size_t f = begin; f < end; ++f) {
            T* dwrow = dwp + f * blk;
            for (std::size_t n = 0; n < nb; ++n) {
                const T* xn = xp + (n * cf + f) * x_cs;
                const T* dyn = dyp + n * cg * y_cs;
                for (std::size_t zi = 0; zi < di; ++zi)
                    for (std::size_t yi = 0; yi < hi; ++yi)
                        for (std::size_t xi = 0; xi < wi; ++xi) {
                            const T xv = xn[(zi * hi + yi) * wi + xi];
                            if (xv == T(0)) continue;
                            for (std::size_t g = 0; g < cg; ++g) {
                                const T* dyg = dyn + g * y_cs;
                                T* dwk = dwrow + g * krn;
                                for (std::size_t a = 0; a < kd; ++a) {
                                    const std::size_t zo = zi * stride + a;
                                    for (std::size_t b = 0; b < kh; ++b) {
                                        const std::size_t yo = yi * stride + b;
                                        const T* dyrow = dyg + (zo * oh + yo) * ow + xi * stride;
                                        for (std::size_t c = 0; c < kw; ++c) {
                                            dwk[(a * kh + b) * kw + c] += xv * dyrow[c];
                                        }
                                    }
                                }
                            }
                        }
            }
        }
    });
    return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class BnMode { training, inference };

template <typename T>
struct BatchNormState {
    Tensor<T> gamma;
    Tensor<T> beta;
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T eps = static_cast<T>(1e-5);
    T momentum = static_cast<T>(0.1);
    BnMode mode = BnMode::training;

    explicit BatchNormState(std::size_t channels)
        : gamma(Tensor<T>::full({channels}, T(1))),
          beta(Tensor<T>({channels})),
          running_mean(Tensor<T>({channels})),
          running_var(Tensor<T>::full({channels}, T(1))) {}

    std::size_t channels() const { return gamma.extent(0); }
};

template <typename T>
struct BnCache {
    Tensor<T> xhat;
    std::vector<T> inv_std;
    BnMode mode = BnMode::training;
};

template <typename T>
struct BnGrads {
    Tensor<T> input;
    Tensor<T> gamma;
    Tensor<T> beta;
};

// Training mode normalizes each channel over (N,D,H,W) with biased batch
// variance, applies the affine transform, and folds the batch statistics into
// the running estimates by `momentum`. A single-element channel has zero
// variance; the eps guard keeps the output finite (documented behavior).
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, BatchNormState<T>& state,
                            BnCache<T>* cache = nullptr) {
    if (x.rank() != 5) throw std::invalid_argument("batchnorm: input must be (N,C,D,H,W)");
    const std::size_t nb = x.extent(0), c = x.extent(1);
    if (c != state.channels()) {
        throw std::invalid_argument("batchnorm: channel mismatch, input has " +
                                    std::to_string(c) + ", state has " +
                                    std::to_string(state.channels()));
    }
    const std::size_t vol = x.extent(2) * x.extent(3) * x.extent(4);
    const std::size_t m = nb * vol;
    if (m == 0) throw std::invalid_argument("batchnorm: empty input");

    Tensor<T> out(x.shape());
    if (cache != nullptr) {
        cache->xhat = Tensor<T>(x.shape());
        cache->inv_std.assign(c, T(0));
        cache->mode = state.mode;
    }
    const T* xp = x.data();
    T* op = out.data();
    T* xhp = cache != nullptr ? cache->xhat.data() : nullptr;

    parallel_for(c, [&](std::size_t begin, std::size_t end) {
        for (std::size_t ch = begin; ch < end; ++ch) {
            T mean, inv;
            if (state.mode == BnMode::training) {
                T sum = 0;
                for (std::size_t n = 0; n < nb; ++n) {
                    const T* row = xp + (n * c + ch) * vol;
                    for (std::size_t v = 0; v < vol; ++v) sum += row[v];
                }
                mean = sum / static_cast<T>(m);
                T var_sum = 0;
                for (std::size_t n = 0; n < nb; ++n) {
                    const T* row = xp + (n * c + ch) * vol;
                    for (std::size_t v = 0; v < vol; ++v) {
                        const T d = row[v] - mean;
                        var_sum += d * d;
                    }
                }
                const T var = var_sum / static_cast<T>(m);
                inv = T(1) / std::sqrt(var + state.eps);
                state.running_mean.data()[ch] =
                    (T(1) - state.momentum) * state.running_mean.data()[ch] + state.momentum * mean;
                state.running_var.data()[ch] =
                    (T(1) - state.momentum) * state.running_var.data()[ch] + state.momentum * var;
            } else {
                mean = state.running_mean.data()[ch];
                inv = T(1) / std::sqrt(state.running_var.data()[ch] + state.eps);
            }
            const T g = state.gamma.data()[ch];
            const T b = state.beta.data()[ch];
            for (std::size_t n = 0; n < nb; ++n) {
                const T* row = xp + (n * c + ch) * vol;
                T* orow = op + (n * c + ch) * vol;
                T* hrow = xhp != nullptr ? xhp + (n * c + ch) * vol : nullptr;
                for (std::size_t v = 0; v < vol; ++v) {
                    const T xh = (row[v] - mean) * inv;
                    if (hrow != nullptr) hrow[v] = xh;
                    orow[v] = g * xh + b;
                }
            }
            if (cache != nullptr) cache->inv_std[ch] = inv;
        }
    });
    return out;
}

template <typename T>
BnGrads<T> batchnorm_backward(const Tensor<T>& dy, const BatchNormState<T>& state,
                              const BnCache<T>& cache) {
    const std::size_t nb = dy.extent(0), c = dy.extent(1);
    const std::size_t vol = dy.extent(2) * dy.extent(3) * dy.extent(4);
    const std::size_t m = nb * vol;
    BnGrads<T> grads{Tensor<T>(dy.shape()), Tensor<T>({c}), Tensor<T>({c})};
    const T* dyp = dy.data();
    const T* xhp = cache.xhat.data();
    T* dxp = grads.input.data();
    T* dgp = grads.gamma.data();
    T* dbp = grads.beta.data();

    parallel_for(c, [&](std::size_t begin, std::size_t end) {
        for (std::size_t ch = begin; ch < end; ++ch) {
            T sum_dy = 0, sum_dy_xh = 0;
            for (std::size_t n = 0; n < nb; ++n) {
                const T* dyr = dyp + (n * c + ch) * vol;
                const T* xhr = xhp + (n * c + ch) * vol;
                for (std::size_t v = 0; v < vol; ++v) {
                    sum_dy += dyr[v];
                    sum_dy_xh += dyr[v] * xhr[v];
                }
            }
            dgp[ch] = sum_dy_xh;
            dbp[ch] = sum_dy;
            const T g = state.gamma.data()[ch];
            const T inv = cache.inv_std[ch];
            if (cache.mode == BnMode::training) {
                const T mean_dy = sum_dy / static_cast<T>(m);
                const T mean_dy_xh = sum_dy_xh / static_cast<T>(m);
                for (std::size_t n = 0; n < nb; ++n) {
                    const T* dyr = dyp + (n * c + ch) * vol;
                    const T* xhr = xhp + (n * c + ch) * vol;
                    T* dxr = dxp + (n * c + ch) * vol;
                    for (std::size_t v = 0; v < vol; ++v) {
                        dxr[v] = g * inv * (dyr[v] - mean_dy - xhr[v] * mean_dy_xh);
                    }
                }
            } else {
                for (std::size_t n = 0; n < nb; ++n) {
                    const T* dyr = dyp + (n * c + ch) * vol;
                    T* dxr = dxp + (n * c + ch) * vol;
                    for (std::size_t v = 0; v < vol; ++v) dxr[v] = g * inv * dyr[v];
                }
            }
        }
    });
    return grads;
}

// ---------------------------------------------------------------------------
// ReLU / max-pool / fully connected
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* xp = x.data();
    T* op = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) op[i] = xp[i] > T(0) ? xp[i] : T(0);
    return out;
}

// Mask from the forward output: y > 0 exactly where x > 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& dy, const Tensor<T>& y) {
    Tensor<T> dx(dy.shape());
    const T* dyp = dy.data();
    const T* yp = y.data();
    T* dxp = dx.data();
    for (std::size_t i = 0; i < dy.size(); ++i) dxp[i] = yp[i] > T(0) ? dyp[i] : T(0);
    return dx;
}

struct MaxPoolCache {
    std::vector<std::size_t> argmax;  // flat input offset per output element
    Shape input_shape;
};

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x, std::size_t window, std::size_t stride,
                    MaxPoolCache* cache = nullptr) {
    if (x.rank() != 5) throw std::invalid_argument("maxpool3d: input must be (N,C,D,H,W)");
    if (window < 1 || stride < 1) throw std::invalid_argument("maxpool3d: window/stride >= 1");
    const std::size_t nb = x.extent(0), c = x.extent(1);
    const std::size_t di = x.extent(2), hi = x.extent(3), wi = x.extent(4);
    if (di < window || hi < window || wi < window) {
        throw std::invalid_argument("maxpool3d: window exceeds input extent");
    }
    const std::size_t od = (di - window) / stride + 1;
    const std::size_t oh = (hi - window) / stride + 1;
    const std::size_t ow = (wi - window) / stride + 1;
    Tensor<T> out({nb, c, od, oh, ow});
    if (cache != nullptr) {
        cache->argmax.assign(out.size(), 0);
        cache->input_shape = x.shape();
    }
    const T* xp = x.data();
    T* op = out.data();

    parallel_for(nb * c, [&](std::size_t begin, std::size_t end) {
        for (std::size_t idx = begin; idx < end; ++idx) {
            const std::size_t base = idx * di * hi * wi;
            const std::size_t obase = idx * od * oh * ow;
            for (std::size_t zo = 0; zo < od; ++zo)
                for (std::size_t yo = 0; yo < oh; ++yo)
                    for (std::size_t xo = 0; xo < ow; ++xo) {
                        T best = -std::numeric_limits<T>::infinity();
                        std::size_t best_off = 0;
                        for (std::size_t a = 0; a < window; ++a)
                            for (std::size_t b = 0; b < window; ++b)
                                for (std::size_t cc = 0; cc < window; ++cc) {
                                    const std::size_t off =
                                        base + ((zo * stride + a) * hi + yo * stride + b) * wi +
                                        xo * stride + cc;
                                    if (xp[off] > best) {  // first max wins ties
                                        best = xp[off];
                                        best_off = off;
                                    }
                                }
                        const std::size_t oidx = obase + (zo * oh + yo) * ow + xo;
                        op[oidx] = best;
                        if (cache != nullptr) cache->argmax[oidx] = best_off;
                    }
        }
    });
    return out;
}

template <typename T>
Tensor<T> maxpool3d_backward(const Tensor<T>& dy, const MaxPoolCache& cache) {
    Tensor<T> dx(cache.input_shape);
    const T* dyp = dy.data();
    T* dxp = dx.data();
    for (std::size_t i = 0; i < dy.size(); ++i) dxp[cache.argmax[i]] += dyp[i];
    return dx;
}

template <typename T>
struct DenseGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;
};

// x (N, in) with weights (out, in): y = x W^T + b.
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
        throw std::invalid_argument("fully_connected: x (N,in), w (out,in), b (out)");
    }
    if (x.extent(1) != w.extent(1) || w.extent(0) != b.extent(0)) {
        throw std::invalid_argument("fully_connected: dimension mismatch");
    }
    const std::size_t nb = x.extent(0), in = x.extent(1), out_c = w.extent(0);
    Tensor<T> out({nb, out_c});
    const T* xp = x.data();
    const T* wp = w.data();
    const T* bp = b.data();
    T* op = out.data();
    parallel_for(nb, [&](std::size_t begin, std::size_t end) {
        for (std::size_t n = begin; n < end; ++n) {
            const T* xrow = xp + n * in;
            T* orow = op + n * out_c;
            for (std::size_t o = 0; o < out_c; ++o) {
                const T* wrow = wp + o * in;
                T acc = bp[o];
                for (std::size_t i = 0; i < in; ++i) acc += xrow[i] * wrow[i];
                orow[o] = acc;
            }
        }
    });
    return out;
}

template <typename T>
DenseGrads<T> fully_connected_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& w) {
    const std::size_t nb = x.extent(0), in = x.extent(1), out_c = w.extent(0);
    DenseGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({out_c})};
    const T* dyp = dy.data();
    const T* xp = x.data();
    const T* wp = w.data();
    T* dxp = grads.input.data();
    parallel_for(nb, [&](std::size_t begin, std::size_t end) {
        for (std::size_t n = begin; n < end; ++n) {
            const T* dyrow = dyp + n * out_c;
            T* dxrow = dxp + n * in;
            for (std::size_t o = 0; o < out_c; ++o) {
                const T g = dyrow[o];
                if (g == T(0)) continue;
                const T* wrow = wp + o * in;
                for (std::size_t i = 0; i < in; ++i) dxrow[i] += g * wrow[i];
            }
        }
    });
    T* dwp = grads.weights.data();
    T* dbp = grads.bias.data();
    parallel_for(out_c, [&](std::size_t begin, std::size_t end) {
        for (std::size_t o = begin; o < end; ++o) {
            T bias_acc = 0;
            T* dwrow = dwp + o * in;
            for (std::size_t n = 0; n < nb; ++n) {
                const T g = dyp[n * out_c + o];
                bias_acc += g;
                if (g == T(0)) continue;
                const T* xrow = xp + n * in;
                for (std::size_t i = 0; i < in; ++i) dwrow[i] += g * xrow[i];
            }
            dbp[o] = bias_acc;
        }
    });
    return grads;
}

// ---------------------------------------------------------------------------
// Losses (mean-reduced, with analytic gradients)
// ---------------------------------------------------------------------------

template <typename T>
struct LossResult {
    double loss = 0;
    Tensor<T> grad;
};

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(static_cast<double>(t.data()[i]))) {
            throw std::invalid_argument(std::string(what) + ": non-finite logits rejected");
        }
    }
}

template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be (N,K)");
    const std::size_t nb = logits.extent(0), k = logits.extent(1);
    if (labels.size() != nb) throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    require_finite(logits, "softmax_cross_entropy");

    LossResult<T> result{0.0, Tensor<T>(logits.shape())};
    const T* zp = logits.data();
    T* gp = result.grad.data();
    double loss = 0;
    for (std::size_t n = 0; n < nb; ++n) {
        const int label = labels[n];
        if (label < 0 || static_cast<std::size_t>(label) >= k) {
            throw std::invalid_argument("softmax_cross_entropy: label out of range");
        }
        const T* zrow = zp + n * k;
        double zmax = zrow[0];
        for (std::size_t j = 1; j < k; ++j) zmax = std::max<double>(zmax, zrow[j]);
        double sum = 0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(zrow[j]) - zmax);
        const double lse = zmax + std::log(sum);
        loss += lse - static_cast<double>(zrow[label]);
        T* grow = gp + n * k;
        for (std::size_t j = 0; j < k; ++j) {
            const double p = std::exp(static_cast<double>(zrow[j]) - lse);
            grow[j] = static_cast<T>(p / static_cast<double>(nb));
        }
        grow[label] -= static_cast<T>(1.0 / static_cast<double>(nb));
    }
    result.loss = loss / static_cast<double>(nb);
    return result;
}

// Voxel-wise binary cross entropy on logits against a {0,1} occupancy target,
// mean-reduced over every voxel.
template <typename T>
LossResult<T> voxel_bce(const Tensor<T>& logits, const Tensor<T>& target) {
    if (!logits.same_shape(target)) {
        throw std::invalid_argument("voxel_bce: prediction/target shape mismatch");
    }
    require_finite(logits, "voxel_bce");
    const std::size_t m = logits.size();
    if (m == 0) throw std::invalid_argument("voxel_bce: empty input");

    LossResult<T> result{0.0, Tensor<T>(logits.shape())};
    const T* zp = logits.data();
    const T* yp = target.data();
    T* gp = result.grad.data();
    double loss = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const double z = zp[i];
        const double y = yp[i];
        if (y < 0.0 || y > 1.0) throw std::invalid_argument("voxel_bce: target outside [0,1]");
        loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
        const double sig = 1.0 / (1.0 + std::exp(-z));
        gp[i] = static_cast<T>((sig - y) / static_cast<double>(m));
    }
    result.loss = loss / static_cast<double>(m);
    return result;
}

// ---------------------------------------------------------------------------
// Composite blocks
// ---------------------------------------------------------------------------

// Test hook: the factorization oracle compares the bare depthwise+pointwise
// chain against a rank-1 standard kernel, so batchnorm and ReLU can be
// switched off.
struct CompositeOptions {
    bool with_bn = true;
    bool with_relu = true;
};

// depthwise -> BN -> ReLU -> pointwise -> BN -> ReLU
template <typename T>
Tensor<T> dwsep_block_forward(const Tensor<T>& x, const DepthwiseKernel<T>& dw,
                              BatchNormState<T>& bn1, const PointwiseKernel<T>& pw,
                              BatchNormState<T>& bn2, const ConvGeometry& geom,
                              const CompositeOptions& opts = {}) {
    Tensor<T> h = depthwise3d_forward(x, dw, geom);
    if (opts.with_bn) h = batchnorm_forward(h, bn1);
    if (opts.with_relu) h = relu(h);
    h = pointwise_forward(h, pw);
    if (opts.with_bn) h = batchnorm_forward(h, bn2);
    if (opts.with_relu) h = relu(h);
    return h;
}

// horizontal (1,k,k) -> BN -> ReLU -> vertical (k,1,1) -> BN -> ReLU.
// The horizontal step pads/strides (H,W) only; the vertical step, D only.
template <typename T>
Tensor<T> pseudo3d_forward(const Tensor<T>& x, const PseudoKernelPair<T>& pair,
                           BatchNormState<T>& bn1, BatchNormState<T>& bn2,
                           const ConvGeometry& geom, const CompositeOptions& opts = {}) {
    const Geometry3 gh{{1, 0}, {geom.stride, geom.padding}, {geom.stride, geom.padding}};
    const Geometry3 gv{{geom.stride, geom.padding}, {1, 0}, {1, 0}};
    Tensor<T> h = detail::conv3d_core(x, pair.horizontal, gh, "pseudo3d horizontal");
    if (opts.with_bn) h = batchnorm_forward(h, bn1);
    if (opts.with_relu) h = relu(h);
    h = detail::conv3d_core(h, pair.vertical, gv, "pseudo3d vertical");
    if (opts.with_bn) h = batchnorm_forward(h, bn2);
    if (opts.with_relu) h = relu(h);
    return h;
}

// General-geometry convolution entry points used by the network runtime for
// the pseudo-3D steps and the final 1x1x1 projection.
template <typename T>
Tensor<T> conv3d_general_forward(const Tensor<T>& x, const Tensor<T>& w, const Geometry3& g) {
    return detail::conv3d_core(x, w, g, "conv3d");
}

template <typename T>
ConvGrads<T> conv3d_general_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& w,
                                     const Geometry3& g) {
    return {detail::conv3d_core_grad_input(dy, x.shape(), w, g),
            detail::conv3d_core_grad_weights(dy, x, w.shape(), g)};
}

}  // namespace volt3d
