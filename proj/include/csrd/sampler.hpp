#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "csrd/diffusion.hpp"
#include "csrd/random.hpp"
#include "csrd/scorenet.hpp"
#include "csrd/tiling.hpp"
#include "csrd/volume.hpp"

namespace csrd {

enum class SamplerMode { deterministic, stochastic };

std::string to_string(SamplerMode m);
SamplerMode sampler_mode_from_string(const std::string& s);

struct SamplerConfig {
    int n_steps = 100;
    double s_churn = 0.0;
    double s_noise = 1.003;
    /// Churn window in sigma; unset means the middle 80% of the step grid.
    std::optional<double> s_t_min;
    std::optional<double> s_t_max;
    SamplerMode mode = SamplerMode::deterministic;
    std::uint64_t seed = 0;
    /// Patches integrated together in one model batch (memory bound only).
    int patch_batch = 8;

    /// Stochastic preset: s_churn 40, s_noise 1.003.
    static SamplerConfig stochastic(int n_steps, std::uint64_t seed);
    /// 2 (n_steps - 1) + 1 denoiser evaluations.
    int nfe() const noexcept { return 2 * (n_steps - 1) + 1; }
    /// Largest step count whose NFE does not exceed the budget.
    static int steps_for_nfe(int nfe);
    void validate() const;
};

nlohmann::json to_json(const SamplerConfig& c);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

/// Evaluates D(r; sigma) for a flat batch of residual values sharing one sigma.
using BatchDenoiseFn = std::function<void(std::span<const double> noisy, double sigma, std::span<double> out)>;

struct ChurnParams {
    double gamma = 0.0; ///< 0 disables churn for this step
    double s_noise = 1.0;
};

/// One corrected step of the reverse ODE from t_cur to t_next, in place.
/// With churn, `eps` holds one standard-normal draw per value. Returns the
/// number of denoiser evaluations (1 or 2).
int heun_step(std::vector<double>& r, double t_cur, double t_next, const BatchDenoiseFn& denoise,
              const ChurnParams& churn = {}, std::span<const double> eps = {});

/// Per-step churn amounts for a sigma grid under cfg.
std::vector<ChurnParams> churn_schedule(const std::vector<double>& sigmas, const SamplerConfig& cfg);

struct Trajectory {
    std::vector<double> values;
    int nfe = 0;
};

/// Full integration from r ~ N(0, t_0^2) to t = 0 for `count` independent values.
/// Initial noise comes from stream.child(0); churn noise for step i from stream.child(1 + i).
Trajectory integrate(std::size_t count, const BatchDenoiseFn& denoise, const SamplerConfig& cfg,
                     const NoiseSchedule& sched, const SeedStream& stream);

struct DenoiseResult {
    ResidualVolume residual;
    Volume3D denoised;
    int nfe_used = 0;
    /// Mean |jump| across internal patch faces minus the mean |jump| between
    /// interior neighbours; 0 without internal faces.
    double per_patch_seams = 0.0;
    nlohmann::json seeds;
};

/// Samples r given the low-dose (and MR) conditioning. With no plan the model
/// runs on the whole volume; otherwise every patch follows its own trajectory
/// and the final residuals are stitched. `residual_scale` maps model-space
/// residuals back to intensities.
DenoiseResult sample_residual(ScoreModel& model, const Volume3D& low, const Volume3D* mr,
                              const std::optional<TilingPlan>& plan, const SamplerConfig& cfg,
                              double residual_scale = 1.0);

struct Ensemble {
    std::vector<DenoiseResult> members;
    GridF stddev; ///< voxelwise population std of the denoised volumes
};

/// Independent realizations with member seeds derived from cfg.seed.
Ensemble sample_ensemble(ScoreModel& model, const Volume3D& low, const Volume3D* mr,
                         const std::optional<TilingPlan>& plan, const SamplerConfig& cfg, int n_realizations,
                         double residual_scale = 1.0);

/// Voxelwise std across volumes of equal shape.
GridF voxelwise_std(std::span<const Volume3D> volumes);

} // namespace csrd
