#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "palgan/errors.hpp"

namespace palgan {

using Shape = std::vector<int>;

/// Packet-aligned buffer. Vectorised reductions peel by address, so a fixed
/// alignment keeps repeated evaluations bit-identical.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major tensor. Rank-4 tensors are NCHW.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        for (int d : shape_)
            if (d < 0) throw ValidationError("negative tensor dimension in " + shape_string(shape_));
    }
    Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}
    Tensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_size(shape_))
            throw ValidationError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                                  shape_string(shape_));
    }

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    AlignedVector<T>& storage() noexcept { return data_; }
    const AlignedVector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(int n, int c, int h, int w) noexcept { return data_[offset(n, c, h, w)]; }
    const T& at(int n, int c, int h, int w) const noexcept { return data_[offset(n, c, h, w)]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

    /// Same data, new shape of identical element count.
    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != size())
            throw ValidationError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        return Tensor(std::move(shape), data_);
    }

    template <class U>
    Tensor<U> cast() const {
        AlignedVector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }

    Tensor& operator+=(const Tensor& o) {
        if (!same_shape(o)) throw ValidationError("shape mismatch " + shape_string(shape_) + " vs " + shape_string(o.shape_));
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

private:
    std::size_t offset(int n, int c, int h, int w) const noexcept {
        return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    Shape shape_;
    AlignedVector<T> data_;
};

}  // namespace palgan
