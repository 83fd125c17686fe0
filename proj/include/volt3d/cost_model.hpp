#pragma once

// Closed-form multiply-accumulate and parameter counts for the three
// convolution flavors, with exact rational reduction ratios. All arithmetic
// is overflow-checked 64-bit; a count that does not fit is an error, never a
// silent wrap.

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>

namespace volt3d {

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
    std::uint64_t r;
    if (__builtin_mul_overflow(a, b, &r)) {
        throw std::overflow_error("cost_model: 64-bit multiply overflow");
    }
    return r;
}

inline std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
    std::uint64_t r;
    if (__builtin_add_overflow(a, b, &r)) {
        throw std::overflow_error("cost_model: 64-bit add overflow");
    }
    return r;
}

// ---------------------------------------------------------------------------
// MAC counts per layer application over an l x w x h output grid. These match
// the instrumented reference kernels tap for tap (padding taps included).
// ---------------------------------------------------------------------------

inline std::uint64_t macs_standard(std::uint64_t k, std::uint64_t cf, std::uint64_t cg,
                                   std::uint64_t l, std::uint64_t w, std::uint64_t h) {
    return checked_mul(checked_mul(checked_mul(k, checked_mul(k, k)), checked_mul(cf, cg)),
                       checked_mul(l, checked_mul(w, h)));
}

inline std::uint64_t macs_depthwise_step(std::uint64_t k, std::uint64_t cf, std::uint64_t l,
                                         std::uint64_t w, std::uint64_t h) {
    return checked_mul(checked_mul(checked_mul(k, checked_mul(k, k)), cf),
                       checked_mul(l, checked_mul(w, h)));
}

inline std::uint64_t macs_pointwise_step(std::uint64_t cf, std::uint64_t cg, std::uint64_t l,
                                         std::uint64_t w, std::uint64_t h) {
    return checked_mul(checked_mul(cf, cg), checked_mul(l, checked_mul(w, h)));
}

inline std::uint64_t macs_dwsep(std::uint64_t k, std::uint64_t cf, std::uint64_t cg,
                                std::uint64_t l, std::uint64_t w, std::uint64_t h) {
    return checked_add(macs_depthwise_step(k, cf, l, w, h), macs_pointwise_step(cf, cg, l, w, h));
}

inline std::uint64_t macs_pseudo_horizontal(std::uint64_t k, std::uint64_t cf, std::uint64_t l,
                                            std::uint64_t w, std::uint64_t h) {
    return checked_mul(checked_mul(checked_mul(k, k), checked_mul(cf, cf)),
                       checked_mul(l, checked_mul(w, h)));
}

inline std::uint64_t macs_pseudo_vertical(std::uint64_t k, std::uint64_t cf, std::uint64_t cg,
                                          std::uint64_t l, std::uint64_t w, std::uint64_t h) {
    return checked_mul(checked_mul(k, checked_mul(cf, cg)), checked_mul(l, checked_mul(w, h)));
}

inline std::uint64_t macs_pseudo(std::uint64_t k, std::uint64_t cf, std::uint64_t cg,
                                 std::uint64_t l, std::uint64_t w, std::uint64_t h) {
    return checked_add(macs_pseudo_horizontal(k, cf, l, w, h),
                       macs_pseudo_vertical(k, cf, cg, l, w, h));
}

// ---------------------------------------------------------------------------
// Exact cost ratios
// ---------------------------------------------------------------------------

struct Rational {
    std::uint64_t num = 0;
    std::uint64_t den = 1;

    static Rational reduced(std::uint64_t num, std::uint64_t den) {
        if (den == 0) throw std::invalid_argument("Rational: zero denominator");
        const std::uint64_t g = std::gcd(num, den);
        return {num / g, den / g};
    }

    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
    bool operator==(const Rational&) const = default;
};

// separable / standard = 1/c_G + 1/k^3, as one reduced fraction.
inline Rational ratio_dwsep_over_standard(std::uint64_t k, std::uint64_t cg) {
    const std::uint64_t k3 = checked_mul(k, checked_mul(k, k));
    return Rational::reduced(checked_add(k3, cg), checked_mul(k3, cg));
}

// separable / pseudo = (k^3 + c_G) / (k^2 c_F + k c_G). The common shorthand
// k/c_F is an approximation only; this is the exact value.
inline Rational ratio_dwsep_over_pseudo(std::uint64_t k, std::uint64_t cf, std::uint64_t cg) {
    const std::uint64_t k3 = checked_mul(k, checked_mul(k, k));
    return Rational::reduced(checked_add(k3, cg),
                             checked_add(checked_mul(checked_mul(k, k), cf), checked_mul(k, cg)));
}

// ---------------------------------------------------------------------------
// Learnable parameter counts per unit. Conventions (mirrored by the network
// builders):
//   - convolutions followed by batchnorm carry no bias; batchnorm contributes
//     its affine pair (2 per channel)
//   - the separable block keeps a bias on both the depthwise and pointwise
//     steps in addition to the two batchnorm pairs
//   - pseudo-3D steps are bias-free, one batchnorm pair after each step
//   - the final 1x1x1 projection is bare weights (no bias, no batchnorm)
// ---------------------------------------------------------------------------

inline std::uint64_t params_conv_bn(std::uint64_t k, std::uint64_t ci, std::uint64_t co) {
    return checked_add(checked_mul(checked_mul(k, checked_mul(k, k)), checked_mul(ci, co)),
                       checked_mul(2, co));
}

inline std::uint64_t params_dwsep_block(std::uint64_t k, std::uint64_t ci, std::uint64_t co) {
    const std::uint64_t dw = checked_add(checked_mul(checked_mul(k, checked_mul(k, k)), ci),
                                         checked_mul(3, ci));  // weights + bias + batchnorm
    const std::uint64_t pw = checked_add(checked_mul(ci, co), checked_mul(3, co));
    return checked_add(dw, pw);
}

inline std::uint64_t params_pseudo_block(std::uint64_t k, std::uint64_t ci, std::uint64_t co) {
    const std::uint64_t horiz = checked_add(checked_mul(checked_mul(k, k), checked_mul(ci, ci)),
                                            checked_mul(2, ci));
    const std::uint64_t vert = checked_add(checked_mul(k, checked_mul(ci, co)),
                                           checked_mul(2, co));
    return checked_add(horiz, vert);
}

inline std::uint64_t params_convtranspose_bn(std::uint64_t k, std::uint64_t ci, std::uint64_t co) {
    return params_conv_bn(k, ci, co);
}

inline std::uint64_t params_conv1x1(std::uint64_t ci, std::uint64_t co) {
    return checked_mul(ci, co);
}

inline std::uint64_t params_dense(std::uint64_t in, std::uint64_t out) {
    return checked_add(checked_mul(in, out), out);
}

// 100 * (1 - variant/baseline), the "reduction" figure quoted alongside the
// tables.
inline double percent_reduction(std::uint64_t baseline, std::uint64_t variant) {
    if (baseline == 0) throw std::invalid_argument("percent_reduction: zero baseline");
    return 100.0 * (1.0 - static_cast<double>(variant) / static_cast<double>(baseline));
}

// 4646656 -> "4,646,656"
inline std::string group_digits(std::uint64_t v) {
    std::string digits = std::to_string(v);
    std::string out;
    const std::size_t n = digits.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (i != 0 && (n - i) % 3 == 0) out.push_back(',');
        out.push_back(digits[i]);
    }
    return out;
}

}  // namespace volt3d
