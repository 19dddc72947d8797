#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "mdsep/errors.hpp"

namespace mdsep {

// Dense row-major N-d array. The sole carrier of activations, filters and
// gradients across the project. Storage is never aliased between tensors.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
        : shape_(std::move(shape)) {
        std::size_t n = 1;
        for (std::size_t d : shape_) {
            if (d == 0) throw ShapeError("zero dimension in tensor shape");
            n *= d;
        }
        if (shape_.empty()) throw ShapeError("rank-0 tensor not supported");
        data_.assign(n, fill);
    }

    Tensor(std::initializer_list<std::size_t> shape, T fill = T(0))
        : Tensor(std::vector<std::size_t>(shape), fill) {}

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // Flat index helpers for the ranks the network actually uses.
    T& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    T& at3(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& at3(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    T& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    const T& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

  private:
    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

template <typename T>
Tensor<T> alloc(const std::vector<std::size_t>& shape, T fill) {
    return Tensor<T>(shape, fill);
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(static_cast<double>(t[i]))) return false;
    return true;
}

// FNV-1a over dtype code, rank, dims, then the raw bit patterns of the data.
// Order-sensitive; used as the freeze-contract witness during training.
template <typename T>
std::uint64_t checksum(const Tensor<T>& t) {
    constexpr std::uint64_t kOffset = 1469598103934665603ull;
    constexpr std::uint64_t kPrime = 1099511628211ull;
    auto mix = [](std::uint64_t h, const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= kPrime;
        }
        return h;
    };
    std::uint64_t h = kOffset;
    std::uint8_t dtype = sizeof(T) == 4 ? 0 : 1;
    h = mix(h, &dtype, 1);
    std::uint64_t rank = t.rank();
    h = mix(h, &rank, sizeof(rank));
    for (std::size_t i = 0; i < t.rank(); ++i) {
        std::uint64_t d = t.dim(i);
        h = mix(h, &d, sizeof(d));
    }
    h = mix(h, t.data(), t.size() * sizeof(T));
    return h;
}

}  // namespace mdsep
