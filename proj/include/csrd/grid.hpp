#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "csrd/errors.hpp"

namespace csrd {

/// Integer 3-vector in (x, y, z) order.
using Vec3i = std::array<int, 3>;
using Vec3d = std::array<double, 3>;

inline std::size_t voxel_count(const Vec3i& s) {
    return static_cast<std::size_t>(s[0]) * static_cast<std::size_t>(s[1]) *
           static_cast<std::size_t>(s[2]);
}

inline std::string to_string(const Vec3i& v) {
    return "(" + std::to_string(v[0]) + "," + std::to_string(v[1]) + "," +
           std::to_string(v[2]) + ")";
}

/// Dense 3D scalar grid stored x-fastest: index = x + nx * (y + ny * z).
template <typename T>
class Grid {
public:
    using value_type = T;

    Grid() = default;
    explicit Grid(const Vec3i& shape, T fill = T{}) : shape_(shape) {
        if (shape[0] < 1 || shape[1] < 1 || shape[2] < 1)
            throw DimensionError("grid extents must be >= 1, got " + to_string(shape));
        data_.assign(voxel_count(shape), fill);
    }
    Grid(const Vec3i& shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (shape[0] < 1 || shape[1] < 1 || shape[2] < 1)
            throw DimensionError("grid extents must be >= 1, got " + to_string(shape));
        if (data_.size() != voxel_count(shape))
            throw DimensionError("grid payload size does not match shape " + to_string(shape));
    }

    const Vec3i& shape() const noexcept { return shape_; }
    int nx() const noexcept { return shape_[0]; }
    int ny() const noexcept { return shape_[1]; }
    int nz() const noexcept { return shape_[2]; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t index(int x, int y, int z) const noexcept {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(shape_[0]) *
                   (static_cast<std::size_t>(y) + static_cast<std::size_t>(shape_[1]) * z);
    }
    T& operator()(int x, int y, int z) noexcept { return data_[index(x, y, z)]; }
    const T& operator()(int x, int y, int z) const noexcept { return data_[index(x, y, z)]; }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> values() & noexcept { return data_; }
    std::span<const T> values() const& noexcept { return data_; }
    std::span<const T> values() && = delete; // would dangle
    std::vector<T>& storage() & noexcept { return data_; }
    const std::vector<T>& storage() const& noexcept { return data_; }
    std::vector<T> storage() && noexcept { return std::move(data_); }

    template <typename U>
    Grid<U> cast() const {
        return Grid<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    friend bool operator==(const Grid& a, const Grid& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Vec3i shape_{0, 0, 0};
    std::vector<T> data_;
};

using GridF = Grid<float>;
using GridD = Grid<double>;

template <typename A, typename B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": shape mismatch " + to_string(a.shape()) +
                             " vs " + to_string(b.shape()));
}

} // namespace csrd
