#include "csrd/volume.hpp"

#include <cmath>

namespace csrd {

std::string to_string(Domain d) {
    return d == Domain::counts ? "counts" : "normalized";
}

Domain domain_from_string(const std::string& s) {
    if (s == "counts") return Domain::counts;
    if (s == "normalized") return Domain::normalized;
    throw DomainError("unknown intensity domain '" + s + "'");
}

void Volume3D::validate() const {
    const auto& s = data.shape();
    if (s[0] < 1 || s[1] < 1 || s[2] < 1)
        throw DimensionError("volume '" + name + "' has empty extent " + csrd::to_string(s));
    for (double sp : spacing)
        if (!(sp > 0.0)) throw DomainError("volume '" + name + "' has non-positive spacing");
    for (float v : data.values()) {
        if (!std::isfinite(v)) throw DomainError("volume '" + name + "' contains non-finite values");
        if (domain == Domain::counts && v < 0.0f)
            throw DomainError("counts volume '" + name + "' contains negative values");
    }
}

ResidualVolume compute_residual(std::shared_ptr<const Volume3D> low, const Volume3D& nor) {
    require_same_shape(low->data, nor.data, "compute_residual");
    if (low->spacing != nor.spacing) throw DimensionError("compute_residual: spacing mismatch");
    if (low->domain != Domain::normalized || nor.domain != Domain::normalized)
        throw DomainError("residuals are defined on normalized intensities");

    GridD r(low->shape());
    for (std::size_t i = 0; i < r.size(); ++i)
        r[i] = static_cast<double>(low->data[i]) - static_cast<double>(nor.data[i]);
    return ResidualVolume{std::move(r), std::move(low)};
}

Volume3D apply_residual(const Volume3D& low, const ResidualVolume& r) {
    require_same_shape(low.data, r.data, "apply_residual");
    Volume3D out = low;
    for (std::size_t i = 0; i < r.data.size(); ++i)
        out.data[i] = static_cast<float>(static_cast<double>(low.data[i]) - r.data[i]);
    return out;
}

} // namespace csrd
