#pragma once

#include <memory>
#include <string>

#include "csrd/grid.hpp"

namespace csrd {

enum class Domain { counts, normalized };

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

/// A scanned or simulated volume: x_Low, x_Nor or the anatomical prior.
struct Volume3D {
    GridF data;
    Vec3d spacing{1.0, 1.0, 1.0};
    Domain domain = Domain::normalized;
    std::string name;

    Volume3D() = default;
    Volume3D(GridF d, Vec3d sp, Domain dom, std::string n = {})
        : data(std::move(d)), spacing(sp), domain(dom), name(std::move(n)) {}

    const Vec3i& shape() const noexcept { return data.shape(); }

    /// Throws DimensionError / DomainError when an invariant is broken.
    void validate() const;
};

/// r = x_Low - x_Nor. Stored in double so that subtracting it back from the
/// float low-dose volume reproduces the normal-dose floats exactly.
struct ResidualVolume {
    GridD data;
    std::shared_ptr<const Volume3D> paired_low;

    const Vec3i& shape() const noexcept { return data.shape(); }
};

ResidualVolume compute_residual(std::shared_ptr<const Volume3D> low, const Volume3D& nor);
inline ResidualVolume compute_residual(const Volume3D& low, const Volume3D& nor) {
    return compute_residual(std::make_shared<const Volume3D>(low), nor);
}

/// x_Low - r; the denoised estimate when r is a sampled residual.
Volume3D apply_residual(const Volume3D& low, const ResidualVolume& r);

} // namespace csrd
