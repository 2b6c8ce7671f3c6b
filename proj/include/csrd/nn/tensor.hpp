#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "csrd/errors.hpp"
#include "csrd/grid.hpp"

namespace csrd::nn {

/// Batch of channel-stacked volumes, layout (n, c, z, y, x), x fastest.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    Tensor(int n, int c, const Vec3i& spatial, T fill = T{})
        : n_(n), c_(c), spatial_(spatial), data_(static_cast<std::size_t>(n) * c * voxel_count(spatial), fill) {}

    int n() const noexcept { return n_; }
    int c() const noexcept { return c_; }
    const Vec3i& spatial() const noexcept { return spatial_; }
    std::size_t voxels() const noexcept { return voxel_count(spatial_); }
    std::size_t size() const noexcept { return data_.size(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    T* sample(int i) noexcept { return data_.data() + static_cast<std::size_t>(i) * c_ * voxels(); }
    const T* sample(int i) const noexcept {
        return data_.data() + static_cast<std::size_t>(i) * c_ * voxels();
    }
    T* channel(int i, int ch) noexcept { return sample(i) + static_cast<std::size_t>(ch) * voxels(); }
    const T* channel(int i, int ch) const noexcept {
        return sample(i) + static_cast<std::size_t>(ch) * voxels();
    }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    bool same_shape(const Tensor& o) const noexcept {
        return n_ == o.n_ && c_ == o.c_ && spatial_ == o.spatial_;
    }
    std::string shape_string() const {
        return "[" + std::to_string(n_) + "," + std::to_string(c_) + "," + to_string(spatial_) + "]";
    }

private:
    int n_ = 0;
    int c_ = 0;
    Vec3i spatial_{0, 0, 0};
    std::vector<T> data_;
};

/// Learnable parameter with its accumulated gradient.
template <typename T>
struct Param {
    std::string name;
    std::vector<T> value;
    std::vector<T> grad;

    Param() = default;
    Param(std::string n, std::size_t count) : name(std::move(n)), value(count, T{}), grad(count, T{}) {}
    std::size_t size() const noexcept { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T{}); }
};

/// Channel concatenation along c; inputs must share n and spatial shape.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.n() != b.n() || a.spatial() != b.spatial())
        throw ShapeError("concat: " + a.shape_string() + " vs " + b.shape_string());
    Tensor<T> out(a.n(), a.c() + b.c(), a.spatial());
    const std::size_t sa = static_cast<std::size_t>(a.c()) * a.voxels();
    const std::size_t sb = static_cast<std::size_t>(b.c()) * b.voxels();
    for (int i = 0; i < a.n(); ++i) {
        std::copy(a.sample(i), a.sample(i) + sa, out.sample(i));
        std::copy(b.sample(i), b.sample(i) + sb, out.sample(i) + sa);
    }
    return out;
}

/// Inverse of concat_channels for gradients.
template <typename T>
void split_channels(const Tensor<T>& g, int ca, Tensor<T>& ga, Tensor<T>& gb) {
    const int cb = g.c() - ca;
    ga = Tensor<T>(g.n(), ca, g.spatial());
    gb = Tensor<T>(g.n(), cb, g.spatial());
    const std::size_t sa = static_cast<std::size_t>(ca) * g.voxels();
    const std::size_t sb = static_cast<std::size_t>(cb) * g.voxels();
    for (int i = 0; i < g.n(); ++i) {
        std::copy(g.sample(i), g.sample(i) + sa, ga.sample(i));
        std::copy(g.sample(i) + sa, g.sample(i) + sa + sb, gb.sample(i));
    }
}

} // namespace csrd::nn
