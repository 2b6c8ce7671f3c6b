#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "csrd/volume.hpp"

namespace csrd {

struct ThinningSpec {
    double factor = 4.0; ///< dose-reduction factor, > 1
    std::uint64_t seed = 0;

    double keep_probability() const { return 1.0 / factor; }
    void validate() const;
};

/// Binomial(n, 1/factor) per voxel: event-level thinning of the counts.
Volume3D poisson_thin(const Volume3D& counts, const ThinningSpec& spec);

namespace detail {
/// Thinning with an explicit keep probability in (0, 1]; p == 1 keeps every event.
Volume3D thin_with_probability(const Volume3D& counts, double keep, std::uint64_t seed);
} // namespace detail

/// Counts -> normalized intensities: value * dose_factor / scale. Thinned
/// volumes pass their factor so both doses share one intensity scale.
Volume3D normalize_counts(const Volume3D& counts, double scale, double dose_factor = 1.0);

/// Linear-interpolated percentile q in [0, 100] of the voxel values.
double percentile(const GridF& g, double q);

struct Ellipsoid {
    Vec3d center{0, 0, 0}; ///< voxel coordinates
    Vec3d radii{1, 1, 1};  ///< voxels
    double uptake = 10.0;  ///< mean counts per voxel
    double mr_intensity = 0.5;

    bool contains(double x, double y, double z) const noexcept;
    bool inside(const Vec3i& shape) const noexcept;
};

struct PhantomSpec {
    Vec3i shape{48, 48, 48};
    int n_ellipsoids = 6;
    double uptake_min = 5.0;
    double uptake_max = 50.0;
    double background_uptake = 2.0;
    double mr_background = 0.1;
    /// Per-ellipsoid MR intensity; drawn from [0.2, 1] when empty.
    std::vector<double> mr_contrast;
    /// Explicit geometry; random placement when empty.
    std::vector<Ellipsoid> ellipsoids;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Phantom {
    Volume3D pet_counts;  ///< Poisson(uptake) draw, counts domain
    Volume3D mr;          ///< contrast map + 1% Gaussian noise, normalized domain
    GridF uptake;         ///< noiseless mean counts map
    Grid<int> labels;     ///< 0 background, k > 0 ellipsoid k-1 (last painted wins)
    std::vector<Ellipsoid> ellipsoids;
};

Phantom generate_phantom(const PhantomSpec& spec);

/// Dataset layout written by `simulate`.
struct SimulateConfig {
    int n_train = 20;
    int n_test = 4;
    std::vector<double> train_factors{4, 6, 8};
    std::vector<double> test_factors{4, 6, 8, 10};
    PhantomSpec phantom;
    std::uint64_t seed = 1234;
    double scale_percentile = 99.5;
};

nlohmann::json to_json(const SimulateConfig& c);
SimulateConfig simulate_config_from_json(const nlohmann::json& j);

/// Writes phantom_####_{nor,mr,low{F}x}.rv3d and manifest.json; returns the manifest.
nlohmann::json simulate_dataset(const std::filesystem::path& out_dir, const SimulateConfig& cfg);

std::string factor_tag(double factor);

} // namespace csrd
