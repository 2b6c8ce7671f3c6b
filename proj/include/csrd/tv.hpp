#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "csrd/volume.hpp"

namespace csrd {

enum class TVScheme { dual_projection };

std::string to_string(TVScheme s);

/// Isotropic 3D total-variation denoising, min_u 0.5*||u - f||^2 + weight * TV(u).
struct TVConfig {
    double weight = 0.05;
    int n_iters = 2000;
    double tol = 1e-4; ///< on ||p_new - p|| / ||p_new|| over the dual field
    TVScheme scheme = TVScheme::dual_projection;

    void validate() const;
};

nlohmann::json to_json(const TVConfig& c);
TVConfig tv_config_from_json(const nlohmann::json& j);

struct TVResult {
    Volume3D out;
    std::vector<double> objective; ///< primal objective after each iteration
    int iterations = 0;
    bool converged = false;
};

/// Primal objective of u against data f, forward differences with
/// replicated (Neumann) boundaries.
double tv_objective(const GridD& u, const GridF& f, double weight);

TVResult tv_denoise_detailed(const Volume3D& vol, const TVConfig& cfg);
Volume3D tv_denoise(const Volume3D& vol, const TVConfig& cfg);

struct TVTuning {
    double best_weight = 0.0;
    double best_psnr = 0.0;
    std::vector<std::pair<double, double>> table; ///< (weight, PSNR) for every candidate
};

inline const std::vector<double> kTVWeightGrid{0.01, 0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3};

/// Picks the weight whose output has the highest PSNR against the reference.
TVTuning tune_tv_weight(const Volume3D& noisy, const Volume3D& reference, const std::vector<double>& weights,
                        TVConfig base = {});

} // namespace csrd
