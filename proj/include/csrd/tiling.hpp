#pragma once

#include <utility>
#include <vector>

#include "csrd/grid.hpp"
#include "csrd/volume.hpp"

namespace csrd {

/// A sub-volume of a parent grid. Coordinate channels are derived on demand
/// from the parent extent, so a plan with every valid origin stays cheap.
struct PatchRegion {
    Vec3i origin{0, 0, 0};
    Vec3i size{1, 1, 1};
    Vec3i parent{1, 1, 1};

    bool in_bounds() const noexcept;
    void require_in_bounds() const;

    /// Global normalized position along `axis` for parent index k: k/(L-1), or 0 when L == 1.
    static double coordinate(int k, int extent) noexcept {
        return extent > 1 ? static_cast<double>(k) / static_cast<double>(extent - 1) : 0.0;
    }
    /// Channel `axis` (0=x, 1=y, 2=z) of the coordinate condition, shaped like the patch.
    GridF coord_channel(int axis) const;

    friend bool operator==(const PatchRegion&, const PatchRegion&) = default;
};

enum class Blend { uniform_average, cosine_window };

struct TilingPlan {
    Vec3i shape{1, 1, 1};
    std::vector<PatchRegion> regions;
    Blend blend = Blend::cosine_window;
};

TilingPlan tile(const Vec3i& shape, const Vec3i& patch_size, const Vec3i& stride,
                Blend blend = Blend::cosine_window);

/// One region spanning the whole grid.
TilingPlan whole_volume_plan(const Vec3i& shape);

/// Unnormalized blend weight of a voxel at local index `local` inside a patch.
double raw_blend_weight(Blend blend, const Vec3i& local, const Vec3i& size);

/// Per-voxel sum of raw weights of every covering region; zero marks an
/// uncovered voxel.
GridD weight_normalizer(const TilingPlan& plan);

/// Per-voxel sum of normalized blend weights (1 wherever covered).
GridD normalized_weight_sum(const TilingPlan& plan);

/// Number of regions covering each voxel.
Grid<int> coverage_count(const TilingPlan& plan);

template <typename T>
Grid<T> extract_patch(const Grid<T>& src, const PatchRegion& region) {
    if (region.parent != src.shape())
        throw DimensionError("extract_patch: region parent " + to_string(region.parent) +
                             " does not match grid " + to_string(src.shape()));
    region.require_in_bounds();
    Grid<T> out(region.size);
    for (int z = 0; z < region.size[2]; ++z)
        for (int y = 0; y < region.size[1]; ++y) {
            const T* row = &src(region.origin[0], region.origin[1] + y, region.origin[2] + z);
            std::copy(row, row + region.size[0], &out(0, y, z));
        }
    return out;
}

inline GridF extract_patch(const Volume3D& vol, const PatchRegion& region) {
    return extract_patch(vol.data, region);
}

/// Blend-weighted assembly of per-region grids into a grid of `shape`.
/// patches[i] must belong to plan.regions[i].
template <typename T>
Grid<T> stitch(const std::vector<std::pair<PatchRegion, Grid<T>>>& patches, const TilingPlan& plan,
               const Vec3i& shape);

extern template GridF stitch(const std::vector<std::pair<PatchRegion, GridF>>&, const TilingPlan&,
                             const Vec3i&);
extern template GridD stitch(const std::vector<std::pair<PatchRegion, GridD>>&, const TilingPlan&,
                             const Vec3i&);

} // namespace csrd
