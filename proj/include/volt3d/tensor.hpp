#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "volt3d/rng.hpp"

namespace volt3d {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major N-dimensional array with value semantics. Feature matrices
// use the (N, C, D, H, W) layout so per-channel loops touch contiguous memory.
// No implicit broadcasting: tensor-tensor arithmetic requires equal shapes.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor holds float or double");

public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        data_.assign(shape_numel(shape_), T(0));
        compute_strides();
    }

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
        if (shape_numel(shape_) != data_.size()) {
            throw std::invalid_argument("Tensor: " + shape_str(shape_) + " does not hold " +
                                        std::to_string(data_.size()) + " values");
        }
        compute_strides();
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    // Deterministic pseudo-normal fill. The buffer is always filled
    // sequentially from a fresh xoshiro256** stream, so the result depends on
    // (shape, seed, stddev) only -- never on thread count.
    static Tensor randn(Shape shape, Seed seed, double stddev = 1.0) {
        Tensor t(std::move(shape));
        Rng rng(seed);
        for (auto& v : t.data_) v = static_cast<T>(stddev * rng.normal());
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_[axis]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    template <typename... Ix>
    T& operator()(Ix... ix) {
        return data_[offset_of(ix...)];
    }
    template <typename... Ix>
    const T& operator()(Ix... ix) const {
        return data_[offset_of(ix...)];
    }

    T& at_flat(std::size_t i) { return data_.at(i); }
    const T& at_flat(std::size_t i) const { return data_.at(i); }

    // Same buffer reinterpreted under a new shape of equal element count.
    Tensor reshaped(Shape new_shape) const {
        if (shape_numel(new_shape) != data_.size()) {
            throw std::invalid_argument("reshape: " + shape_str(shape_) + " -> " +
                                        shape_str(new_shape) + " changes element count");
        }
        Tensor t;
        t.shape_ = std::move(new_shape);
        t.data_ = data_;
        t.compute_strides();
        return t;
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "operator+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    const std::vector<T>& raw() const { return data_; }

private:
    template <typename... Ix>
    std::size_t offset_of(Ix... ix) const {
        assert(sizeof...(ix) == shape_.size());
        const std::size_t idx[] = {static_cast<std::size_t>(ix)...};
        std::size_t off = 0;
        for (std::size_t a = 0; a < sizeof...(ix); ++a) {
            assert(idx[a] < shape_[a]);
            off += idx[a] * strides_[a];
        }
        return off;
    }

    void require_same_shape(const Tensor& other, const char* op) const {
        if (!same_shape(other)) {
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(shape_) +
                                        " vs " + shape_str(other.shape_));
        }
    }

    void compute_strides() {
        strides_.assign(shape_.size(), 1);
        for (std::size_t a = shape_.size(); a-- > 1;) {
            strides_[a - 1] = strides_[a] * shape_[a];
        }
    }

    Shape shape_;
    Shape strides_;
    std::vector<T> data_;
};

template <typename T>
Tensor<T> ew_add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("ew_add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
    return out;
}

template <typename T>
Tensor<T> ew_mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("ew_mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * s;
    return out;
}

// Row-major (m,k) x (k,n) product, accumulated row by row so the inner loop
// runs over contiguous memory.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw std::invalid_argument("matmul: operands must be rank 2");
    }
    if (a.extent(1) != b.extent(0)) {
        throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor<T> out({m, n});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        T* orow = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = pa[i * k + p];
            const T* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    return out;
}

template <typename T>
Tensor<T> identity_matrix(std::size_t n) {
    Tensor<T> out({n, n});
    for (std::size_t i = 0; i < n; ++i) out(i, i) = T(1);
    return out;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("max_abs_diff: shape mismatch");
    }
    T worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T d = std::abs(a.data()[i] - b.data()[i]);
        if (d > worst) worst = d;
    }
    return worst;
}

}  // namespace volt3d
