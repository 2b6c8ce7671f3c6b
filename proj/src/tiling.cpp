#include "csrd/tiling.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace csrd {

bool PatchRegion::in_bounds() const noexcept {
    for (int a = 0; a < 3; ++a)
        if (origin[a] < 0 || size[a] < 1 || origin[a] + size[a] > parent[a]) return false;
    return true;
}

void PatchRegion::require_in_bounds() const {
    if (!in_bounds())
        throw DimensionError("region origin " + to_string(origin) + " size " + to_string(size) +
                             " exceeds parent " + to_string(parent));
}

GridF PatchRegion::coord_channel(int axis) const {
    GridF g(size);
    for (int z = 0; z < size[2]; ++z)
        for (int y = 0; y < size[1]; ++y)
            for (int x = 0; x < size[0]; ++x) {
                const Vec3i local{x, y, z};
                g(x, y, z) = static_cast<float>(coordinate(origin[axis] + local[axis], parent[axis]));
            }
    return g;
}

TilingPlan tile(const Vec3i& shape, const Vec3i& patch_size, const Vec3i& stride, Blend blend) {
    std::array<std::vector<int>, 3> positions;
    for (int a = 0; a < 3; ++a) {
        if (patch_size[a] < 1 || patch_size[a] > shape[a])
            throw TilingError("patch " + to_string(patch_size) + " does not fit volume " +
                              to_string(shape));
        if (stride[a] < 1 || stride[a] > patch_size[a])
            throw TilingError("stride " + to_string(stride) + " must lie in [1, patch]");
        const int span = shape[a] - patch_size[a];
        const int count = (span + stride[a] - 1) / stride[a] + 1;
        for (int k = 0; k < count; ++k) positions[a].push_back(std::min(k * stride[a], span));
    }
    TilingPlan plan;
    plan.shape = shape;
    plan.blend = blend;
    plan.regions.reserve(positions[0].size() * positions[1].size() * positions[2].size());
    for (int oz : positions[2])
        for (int oy : positions[1])
            for (int ox : positions[0]) plan.regions.push_back({{ox, oy, oz}, patch_size, shape});
    return plan;
}

TilingPlan whole_volume_plan(const Vec3i& shape) {
    return tile(shape, shape, shape, Blend::uniform_average);
}

namespace {

double cosine_factor(int i, int n) {
    if (n == 1) return 1.0;
    const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (i + 0.5) / n);
    return std::max(w, 0.05);
}

} // namespace

double raw_blend_weight(Blend blend, const Vec3i& local, const Vec3i& size) {
    if (blend == Blend::uniform_average) return 1.0;
    return cosine_factor(local[0], size[0]) * cosine_factor(local[1], size[1]) *
           cosine_factor(local[2], size[2]);
}

namespace {

template <typename Fn>
void for_each_region_voxel(const TilingPlan& plan, Fn&& fn) {
    for (std::size_t r = 0; r < plan.regions.size(); ++r) {
        const auto& reg = plan.regions[r];
        for (int z = 0; z < reg.size[2]; ++z)
            for (int y = 0; y < reg.size[1]; ++y)
                for (int x = 0; x < reg.size[0]; ++x)
                    fn(r, Vec3i{x, y, z},
                       Vec3i{reg.origin[0] + x, reg.origin[1] + y, reg.origin[2] + z});
    }
}

} // namespace

GridD weight_normalizer(const TilingPlan& plan) {
    GridD norm(plan.shape, 0.0);
    for_each_region_voxel(plan, [&](std::size_t r, const Vec3i& l, const Vec3i& g) {
        norm(g[0], g[1], g[2]) += raw_blend_weight(plan.blend, l, plan.regions[r].size);
    });
    return norm;
}

GridD normalized_weight_sum(const TilingPlan& plan) {
    const GridD norm = weight_normalizer(plan);
    GridD sum(plan.shape, 0.0);
    for_each_region_voxel(plan, [&](std::size_t r, const Vec3i& l, const Vec3i& g) {
        sum(g[0], g[1], g[2]) +=
            raw_blend_weight(plan.blend, l, plan.regions[r].size) / norm(g[0], g[1], g[2]);
    });
    return sum;
}

Grid<int> coverage_count(const TilingPlan& plan) {
    Grid<int> count(plan.shape, 0);
    for_each_region_voxel(plan, [&](std::size_t, const Vec3i&, const Vec3i& g) {
        ++count(g[0], g[1], g[2]);
    });
    return count;
}

template <typename T>
Grid<T> stitch(const std::vector<std::pair<PatchRegion, Grid<T>>>& patches, const TilingPlan& plan,
               const Vec3i& shape) {
    if (plan.shape != shape)
        throw DimensionError("stitch: plan shape " + to_string(plan.shape) + " vs target " +
                             to_string(shape));
    if (patches.size() != plan.regions.size())
        throw CompletenessError("stitch: " + std::to_string(patches.size()) + " patches for " +
                                std::to_string(plan.regions.size()) + " regions");
    for (std::size_t i = 0; i < patches.size(); ++i) {
        if (!(patches[i].first == plan.regions[i]))
            throw CompletenessError("stitch: patch " + std::to_string(i) +
                                    " does not match plan region at " +
                                    to_string(plan.regions[i].origin));
        if (patches[i].second.shape() != plan.regions[i].size)
            throw DimensionError("stitch: patch " + std::to_string(i) + " has shape " +
                                 to_string(patches[i].second.shape()));
    }

    const GridD norm = weight_normalizer(plan);
    for (double w : norm.values())
        if (w <= 0.0) throw CompletenessError("stitch: plan leaves voxels uncovered");

    GridD acc(shape, 0.0);
    Grid<T> last(shape);
    Grid<int> count(shape, 0);
    for_each_region_voxel(plan, [&](std::size_t r, const Vec3i& l, const Vec3i& g) {
        const double w = raw_blend_weight(plan.blend, l, plan.regions[r].size);
        const T v = patches[r].second(l[0], l[1], l[2]);
        acc(g[0], g[1], g[2]) += w * static_cast<double>(v);
        last(g[0], g[1], g[2]) = v;
        ++count(g[0], g[1], g[2]);
    });
    Grid<T> out(shape);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = count[i] == 1 ? last[i] : static_cast<T>(acc[i] / norm[i]);
    return out;
}

template GridF stitch(const std::vector<std::pair<PatchRegion, GridF>>&, const TilingPlan&,
                      const Vec3i&);
template GridD stitch(const std::vector<std::pair<PatchRegion, GridD>>&, const TilingPlan&,
                      const Vec3i&);

} // namespace csrd
