// Cross-checks of the optimized kernels against the naive reference
// implementations, plus the behavioral contracts the references do not cover
// (batchnorm statistics, pooling tie-breaks, loss edge cases, error paths).
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "volt3d/kernels.hpp"
#include "volt3d/oracle.hpp"
#include "volt3d/thread_pool.hpp"

using volt3d::ConvGeometry;
using volt3d::Seed;
using volt3d::Tensor;
namespace oracle = volt3d::oracle;

namespace {

Tensor<double> rand5(std::size_t n, std::size_t c, std::size_t ext, std::uint64_t seed) {
    return Tensor<double>::randn({n, c, ext, ext, ext}, Seed{seed});
}

}  // namespace

TEST_CASE("standard conv matches the reference across geometries") {
    struct Case {
        std::size_t ci, co, k, ext, stride, pad;
    };
    const Case cases[] = {
        {1, 1, 3, 5, 1, 1}, {2, 3, 3, 6, 1, 0}, {3, 2, 3, 7, 2, 1},
        {2, 2, 2, 4, 2, 0}, {1, 2, 5, 8, 1, 2},
    };
    std::uint64_t seed = 10;
    for (const auto& c : cases) {
        auto x = rand5(2, c.ci, c.ext, seed++);
        volt3d::StdKernel<double> kern{Tensor<double>::randn({c.co, c.ci, c.k, c.k, c.k}, Seed{seed++})};
        auto fast = volt3d::conv3d_forward(x, kern, ConvGeometry{c.stride, c.pad});
        auto ref = oracle::naive_conv3d(x, kern.weights, c.stride, c.pad);
        REQUIRE(fast.shape() == ref.shape());
        REQUIRE(volt3d::max_abs_diff(fast, ref) < 1e-12);
    }
}

TEST_CASE("depthwise conv matches the reference and keeps its bias") {
    auto x = rand5(2, 3, 5, 20);
    auto kern = volt3d::DepthwiseKernel<double>::he_init(3, 3, Seed{21});
    kern.bias = Tensor<double>({3}, {0.1, -0.2, 0.3});
    auto fast = volt3d::depthwise3d_forward(x, kern, ConvGeometry::same(3));
    auto ref = oracle::naive_depthwise_same(x, kern.weights, kern.bias);
    REQUIRE(volt3d::max_abs_diff(fast, ref) < 1e-12);

    auto strided = volt3d::depthwise3d_forward(x, kern, ConvGeometry{2, 0});
    auto ref2 = oracle::naive_depthwise(x, kern.weights, kern.bias, 2, 0);
    REQUIRE(volt3d::max_abs_diff(strided, ref2) < 1e-12);
}

TEST_CASE("pointwise conv matches the reference") {
    auto x = rand5(3, 4, 4, 30);
    auto kern = volt3d::PointwiseKernel<double>::he_init(6, 4, Seed{31});
    kern.bias = Tensor<double>::randn({6}, Seed{32});
    auto fast = volt3d::pointwise_forward(x, kern);
    auto ref = oracle::naive_pointwise(x, kern.weights, kern.bias);
    REQUIRE(volt3d::max_abs_diff(fast, ref) < 1e-12);
}

TEST_CASE("transposed conv matches the reference for overlapping and tiling strides") {
    for (std::size_t stride : {1, 2}) {
        for (std::size_t k : {2, 3}) {
            auto x = rand5(2, 3, 4, 40 + stride * 10 + k);
            auto w = Tensor<double>::randn({3, 2, k, k, k}, Seed{41 + stride * 10 + k});
            auto fast = volt3d::convtranspose3d_forward(x, w, stride);
            auto ref = oracle::naive_convtranspose(x, w, stride);
            REQUIRE(fast.shape() == ref.shape());
            REQUIRE(volt3d::max_abs_diff(fast, ref) < 1e-12);
        }
    }
}

TEST_CASE("transposed conv output extent follows (in-1)*s + k") {
    auto x = rand5(1, 1, 4, 50);
    auto w = Tensor<double>::randn({1, 1, 2, 2, 2}, Seed{51});
    auto y = volt3d::convtranspose3d_forward(x, w, 2);
    REQUIRE(y.shape() == volt3d::Shape{1, 1, 8, 8, 8});
}

TEST_CASE("depthwise then pointwise equals a standard conv with factored kernel") {
    // Rank-1 construction: w[g,m,:,:,:] = u[g,m] * v[m,:,:,:]. The separable
    // block with bias zero and no batchnorm/ReLU must match the full conv.
    const std::size_t ci = 3, co = 4, k = 3;
    auto v = Tensor<double>::randn({ci, k, k, k}, Seed{60});
    auto u = Tensor<double>::randn({co, ci}, Seed{61});
    Tensor<double> w({co, ci, k, k, k});
    for (std::size_t g = 0; g < co; ++g)
        for (std::size_t m = 0; m < ci; ++m)
            for (std::size_t t = 0; t < k * k * k; ++t) {
                w.at_flat(((g * ci + m) * k * k * k) + t) = u(g, m) * v.at_flat(m * k * k * k + t);
            }

    auto x = rand5(2, ci, 5, 62);
    volt3d::DepthwiseKernel<double> dw{v, Tensor<double>({ci})};
    volt3d::PointwiseKernel<double> pw{u, Tensor<double>({co})};
    volt3d::BatchNormState<double> bn1(ci), bn2(co);
    auto sep = volt3d::dwsep_block_forward(x, dw, bn1, pw, bn2, ConvGeometry::same(k),
                                           {/*with_bn=*/false, /*with_relu=*/false});
    auto full = volt3d::conv3d_forward(x, volt3d::StdKernel<double>{w}, ConvGeometry::same(k));
    REQUIRE(volt3d::max_abs_diff(sep, full) < 1e-10);
}

TEST_CASE("bare pseudo-3D block matches the chained reference") {
    const std::size_t ci = 2, co = 3, k = 3;
    auto pair = volt3d::PseudoKernelPair<double>::he_init(co, ci, k, Seed{70});
    auto x = rand5(2, ci, 4, 71);
    volt3d::BatchNormState<double> bn1(ci), bn2(co);
    auto fast = volt3d::pseudo3d_forward(x, pair, bn1, bn2, ConvGeometry::same(k),
                                         {false, false});
    auto ref = oracle::naive_pseudo(x, pair.horizontal, pair.vertical);
    REQUIRE(volt3d::max_abs_diff(fast, ref) < 1e-12);
}

TEST_CASE("composite blocks apply batchnorm and ReLU when enabled") {
    auto x = rand5(4, 2, 4, 80);
    auto dw = volt3d::DepthwiseKernel<double>::he_init(2, 3, Seed{81});
    auto pw = volt3d::PointwiseKernel<double>::he_init(3, 2, Seed{82});
    volt3d::BatchNormState<double> bn1(2), bn2(3);
    auto y = volt3d::dwsep_block_forward(x, dw, bn1, pw, bn2, ConvGeometry::same(3));
    // ReLU output is non-negative, and training batchnorm must have consumed
    // a batch (running mean moved off its initial zero).
    for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(y.at_flat(i) >= 0.0);
    double moved = 0;
    for (std::size_t c = 0; c < 2; ++c) moved += std::abs(bn1.running_mean(c));
    REQUIRE(moved > 0.0);
}

TEST_CASE("conv layers reject mismatched channels and empty outputs") {
    auto x = rand5(1, 3, 4, 90);
    volt3d::StdKernel<double> kern{Tensor<double>::randn({2, 4, 3, 3, 3}, Seed{91})};
    REQUIRE_THROWS_AS(volt3d::conv3d_forward(x, kern, ConvGeometry{1, 1}), std::invalid_argument);

    volt3d::StdKernel<double> big{Tensor<double>::randn({2, 3, 7, 7, 7}, Seed{92})};
    REQUIRE_THROWS_AS(volt3d::conv3d_forward(x, big, ConvGeometry{1, 0}), std::invalid_argument);

    auto dwk = volt3d::DepthwiseKernel<double>::he_init(2, 3, Seed{93});
    REQUIRE_THROWS_AS(volt3d::depthwise3d_forward(x, dwk, ConvGeometry::same(3)),
                      std::invalid_argument);

    auto pwk = volt3d::PointwiseKernel<double>::he_init(2, 4, Seed{94});
    REQUIRE_THROWS_AS(volt3d::pointwise_forward(x, pwk), std::invalid_argument);

    auto wct = Tensor<double>::randn({4, 2, 2, 2, 2}, Seed{95});
    REQUIRE_THROWS_AS(volt3d::convtranspose3d_forward(x, wct, 2), std::invalid_argument);
}

TEST_CASE("training batchnorm standardizes each channel") {
    auto x = rand5(4, 3, 4, 100);
    // Shift one channel hard so the standardization has work to do.
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 64; ++i) x.at_flat(n * 3 * 64 + 64 + i) += 5.0;

    volt3d::BatchNormState<double> bn(3);
    auto y = volt3d::batchnorm_forward(x, bn);
    const std::size_t m = 4 * 64;
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 64; ++i) mean += y.at_flat((n * 3 + c) * 64 + i);
        mean /= static_cast<double>(m);
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 64; ++i) {
                const double d = y.at_flat((n * 3 + c) * 64 + i) - mean;
                var += d * d;
            }
        var /= static_cast<double>(m);
        REQUIRE(std::abs(mean) < 1e-10);
        // Normalized by sqrt(var + eps), so the output variance sits just
        // below one.
        REQUIRE(var == Catch::Approx(1.0).margin(1e-3));
    }
}

TEST_CASE("batchnorm running statistics blend with the configured momentum") {
    auto x = rand5(2, 1, 3, 110);
    double mean = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mean += x.at_flat(i);
    mean /= static_cast<double>(x.size());
    double var = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x.at_flat(i) - mean;
        var += d * d;
    }
    var /= static_cast<double>(x.size());

    volt3d::BatchNormState<double> bn(1);
    volt3d::batchnorm_forward(x, bn);
    REQUIRE(bn.running_mean(0) == Catch::Approx(0.1 * mean).margin(1e-12));
    REQUIRE(bn.running_var(0) == Catch::Approx(0.9 * 1.0 + 0.1 * var).margin(1e-12));
}

TEST_CASE("inference batchnorm uses running statistics and the affine pair") {
    volt3d::BatchNormState<double> bn(1);
    bn.running_mean(0) = 2.0;
    bn.running_var(0) = 4.0;
    bn.gamma(0) = 3.0;
    bn.beta(0) = -1.0;
    bn.mode = volt3d::BnMode::inference;
    Tensor<double> x({1, 1, 1, 1, 2}, {2.0, 4.0});
    auto y = volt3d::batchnorm_forward(x, bn);
    const double inv = 1.0 / std::sqrt(4.0 + 1e-5);
    REQUIRE(y.at_flat(0) == Catch::Approx(-1.0).margin(1e-12));
    REQUIRE(y.at_flat(1) == Catch::Approx(3.0 * 2.0 * inv - 1.0).margin(1e-9));
}

TEST_CASE("batchnorm stays finite on a single-voxel batch") {
    Tensor<double> x({1, 2, 1, 1, 1}, {5.0, -3.0});
    volt3d::BatchNormState<double> bn(2);
    auto y = volt3d::batchnorm_forward(x, bn);
    for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(std::isfinite(y.at_flat(i)));
    // Zero variance: the output is beta exactly.
    REQUIRE(y.at_flat(0) == 0.0);
}

TEST_CASE("relu clamps negatives and routes gradients through survivors") {
    Tensor<double> x({4}, {-2.0, 0.0, 3.0, -0.5});
    auto y = volt3d::relu(x);
    REQUIRE(y.at_flat(0) == 0.0);
    REQUIRE(y.at_flat(2) == 3.0);
    Tensor<double> dy({4}, {1.0, 1.0, 1.0, 1.0});
    auto dx = volt3d::relu_backward(dy, y);
    REQUIRE(dx.at_flat(0) == 0.0);
    REQUIRE(dx.at_flat(1) == 0.0);  // exact zero does not pass gradient
    REQUIRE(dx.at_flat(2) == 1.0);
}

TEST_CASE("maxpool picks window maxima and backward routes to the argmax") {
    Tensor<double> x({1, 1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    volt3d::MaxPoolCache cache;
    auto y = volt3d::maxpool3d(x, 2, 2, &cache);
    REQUIRE(y.shape() == volt3d::Shape{1, 1, 1, 1, 1});
    REQUIRE(y.at_flat(0) == 8.0);
    Tensor<double> dy({1, 1, 1, 1, 1}, {2.5});
    auto dx = volt3d::maxpool3d_backward(dy, cache);
    REQUIRE(dx.at_flat(7) == 2.5);
    for (std::size_t i = 0; i < 7; ++i) REQUIRE(dx.at_flat(i) == 0.0);
}

TEST_CASE("maxpool breaks ties toward the first element in scan order") {
    auto x = Tensor<double>::full({1, 1, 2, 2, 2}, 1.0);
    volt3d::MaxPoolCache cache;
    volt3d::maxpool3d(x, 2, 2, &cache);
    REQUIRE(cache.argmax[0] == 0);
    REQUIRE_THROWS_AS(volt3d::maxpool3d(x, 3, 1), std::invalid_argument);
}

TEST_CASE("fully connected layer matches an explicit matrix product") {
    auto x = Tensor<double>::randn({3, 5}, Seed{120});
    auto w = Tensor<double>::randn({4, 5}, Seed{121});
    auto b = Tensor<double>::randn({4}, Seed{122});
    auto y = volt3d::fully_connected(x, w, b);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t o = 0; o < 4; ++o) {
            double acc = b(o);
            for (std::size_t i = 0; i < 5; ++i) acc += x(n, i) * w(o, i);
            REQUIRE(y(n, o) == Catch::Approx(acc).margin(1e-12));
        }
    REQUIRE_THROWS_AS(volt3d::fully_connected(x, Tensor<double>::randn({4, 6}, Seed{123}), b),
                      std::invalid_argument);
}

TEST_CASE("softmax cross entropy on uniform logits is log K with zero-sum grad") {
    auto z = Tensor<double>::full({2, 5}, 0.3);
    auto res = volt3d::softmax_cross_entropy(z, {1, 4});
    REQUIRE(res.loss == Catch::Approx(std::log(5.0)).margin(1e-12));
    for (std::size_t n = 0; n < 2; ++n) {
        double row = 0;
        for (std::size_t j = 0; j < 5; ++j) row += res.grad(n, j);
        REQUIRE(row == Catch::Approx(0.0).margin(1e-12));
    }
    // Correct-class gradient is (p - 1)/N.
    REQUIRE(res.grad(0, 1) == Catch::Approx((0.2 - 1.0) / 2.0).margin(1e-12));
}

TEST_CASE("softmax cross entropy rejects bad labels and non-finite logits") {
    auto z = Tensor<double>::full({2, 3}, 0.0);
    REQUIRE_THROWS_AS(volt3d::softmax_cross_entropy(z, {0}), std::invalid_argument);
    REQUIRE_THROWS_AS(volt3d::softmax_cross_entropy(z, {0, 3}), std::invalid_argument);
    z.at_flat(0) = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(volt3d::softmax_cross_entropy(z, {0, 1}), std::invalid_argument);
}

TEST_CASE("softmax cross entropy is shift invariant and survives huge logits") {
    Tensor<double> z({1, 3}, {1000.0, 1001.0, 999.0});
    auto res = volt3d::softmax_cross_entropy(z, {1});
    Tensor<double> zs({1, 3}, {0.0, 1.0, -1.0});
    auto ref = volt3d::softmax_cross_entropy(zs, {1});
    REQUIRE(res.loss == Catch::Approx(ref.loss).margin(1e-9));
    REQUIRE(std::isfinite(res.loss));
}

TEST_CASE("voxel BCE at zero logits is log 2 with gradient sigma minus target") {
    auto z = Tensor<double>({1, 1, 1, 1, 4});
    Tensor<double> y({1, 1, 1, 1, 4}, {0, 1, 0, 1});
    auto res = volt3d::voxel_bce(z, y);
    REQUIRE(res.loss == Catch::Approx(std::log(2.0)).margin(1e-12));
    REQUIRE(res.grad.at_flat(0) == Catch::Approx(0.5 / 4.0).margin(1e-12));
    REQUIRE(res.grad.at_flat(1) == Catch::Approx(-0.5 / 4.0).margin(1e-12));
}

TEST_CASE("voxel BCE stays finite for extreme logits and rejects bad input") {
    Tensor<double> z({1, 1, 1, 1, 2}, {500.0, -500.0});
    Tensor<double> y({1, 1, 1, 1, 2}, {1.0, 0.0});
    auto res = volt3d::voxel_bce(z, y);
    REQUIRE(std::isfinite(res.loss));
    REQUIRE(res.loss < 1e-9);  // confident and correct

    Tensor<double> bad_target({1, 1, 1, 1, 2}, {0.0, 2.0});
    REQUIRE_THROWS_AS(volt3d::voxel_bce(z, bad_target), std::invalid_argument);
    REQUIRE_THROWS_AS(volt3d::voxel_bce(z, Tensor<double>({1, 1, 1, 1, 3})),
                      std::invalid_argument);
    z.at_flat(0) = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS_AS(volt3d::voxel_bce(z, y), std::invalid_argument);
}

TEST_CASE("kernel outputs are bitwise stable across worker counts") {
    auto x = rand5(2, 3, 6, 130);
    volt3d::StdKernel<double> kern{Tensor<double>::randn({4, 3, 3, 3, 3}, Seed{131})};
    auto wct = Tensor<double>::randn({3, 2, 2, 2, 2}, Seed{132});

    volt3d::set_num_threads(1);
    auto c1 = volt3d::conv3d_forward(x, kern, ConvGeometry::same(3));
    auto t1 = volt3d::convtranspose3d_forward(x, wct, 2);
    auto g1 = volt3d::conv3d_backward(c1, x, kern, ConvGeometry::same(3));

    volt3d::set_num_threads(5);
    auto c5 = volt3d::conv3d_forward(x, kern, ConvGeometry::same(3));
    auto t5 = volt3d::convtranspose3d_forward(x, wct, 2);
    auto g5 = volt3d::conv3d_backward(c1, x, kern, ConvGeometry::same(3));
    volt3d::set_num_threads(1);

    REQUIRE(volt3d::max_abs_diff(c1, c5) == 0.0);
    REQUIRE(volt3d::max_abs_diff(t1, t5) == 0.0);
    REQUIRE(volt3d::max_abs_diff(g1.weights, g5.weights) == 0.0);
    REQUIRE(volt3d::max_abs_diff(g1.input, g5.input) == 0.0);
}
