#pragma once

#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "csrd/grid.hpp"
#include "csrd/nn/tensor.hpp"
#include "csrd/random.hpp"
#include "csrd/tiling.hpp"

namespace csrd {

/// sigma(t) = t with a Karras rho-spaced step grid and log-normal training
/// sigmas. Defaults are the EDM framework constants.
struct NoiseSchedule {
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double rho = 7.0;
    double sigma_data = 0.5;
    double p_mean = -1.2;
    double p_std = 1.2;

    void validate() const;
    friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;
};

nlohmann::json to_json(const NoiseSchedule& s);
NoiseSchedule schedule_from_json(const nlohmann::json& j);

double sigma_of_t(double t, const NoiseSchedule& sched);
/// d sigma / dt; identically 1 for sigma(t) = t.
double sigma_dot(double t, const NoiseSchedule& sched);

/// n_steps rho-spaced sigmas from sigma_max down to sigma_min, then a terminal 0.
std::vector<double> discretize_sigmas(int n_steps, const NoiseSchedule& sched);

/// ln sigma ~ Normal(p_mean, p_std^2).
double sample_training_sigma(Rng& rng, const NoiseSchedule& sched);

struct Preconditioning {
    double c_skip;
    double c_out;
    double c_in;
    double c_noise;
};

Preconditioning preconditioning(double sigma, const NoiseSchedule& sched);

/// lambda(sigma) = (sigma^2 + sigma_d^2) / (sigma * sigma_d)^2.
double loss_weight(double sigma, const NoiseSchedule& sched);

/// D = c_skip * noisy + c_out * raw, elementwise.
template <typename T>
Grid<T> precondition(const Grid<T>& raw, const Grid<T>& noisy, double sigma, const NoiseSchedule& sched);

/// (D(r; sigma) - r) / sigma^2.
template <typename T>
Grid<T> score_from_denoiser(const Grid<T>& denoised, const Grid<T>& noisy_r, double sigma);

// --------------------------------------------------------------------------
// Training objective

/// Anything that maps (noisy residual, conditioning, sigma) to a denoised
/// residual. The score network, analytic oracles and toy models used in tests
/// all implement this.
template <typename T>
class Denoiser {
public:
    virtual ~Denoiser() = default;

    /// noisy: (n, 1, s), cond: (n, k, s), one sigma per sample. When keep is
    /// true the call must retain what backward() needs.
    virtual nn::Tensor<T> denoise(const nn::Tensor<T>& noisy, const nn::Tensor<T>& cond,
                                  std::span<const double> sigma, bool keep) = 0;

    /// Accumulates parameter gradients given dLoss/dD.
    virtual void backward(const nn::Tensor<T>& grad_denoised);

    virtual std::vector<nn::Param<T>*> parameters() { return {}; }
};

struct LossRecord {
    double sigma = 0.0;
    double per_patch_loss = 0.0; ///< lambda(sigma) * mean squared error
    double weight = 1.0;         ///< lambda(sigma)
    std::optional<PatchRegion> region;
};

struct BatchLoss {
    std::vector<LossRecord> terms;
    double mean = 0.0;
};

/// Weighted denoising score-matching loss for a batch of patches.
/// `noise` holds the already-scaled draws n ~ N(0, sigma^2 I). When
/// `with_grad` is set, gradients of the batch mean flow into the model.
template <typename T>
BatchLoss dsm_loss_batch(Denoiser<T>& model, const nn::Tensor<T>& y, const nn::Tensor<T>& cond,
                         std::span<const double> sigma, const nn::Tensor<T>& noise,
                         const NoiseSchedule& sched, bool with_grad,
                         std::span<const PatchRegion> regions = {});

/// Single-patch form.
template <typename T>
LossRecord dsm_loss(Denoiser<T>& model, const nn::Tensor<T>& y, const nn::Tensor<T>& cond, double sigma,
                    const nn::Tensor<T>& noise, const NoiseSchedule& sched,
                    std::optional<PatchRegion> region = std::nullopt);

/// Co-registered training volume on the model's intensity scale.
struct VolumeTriple {
    GridF residual; ///< standardized residual r
    GridF low;      ///< normalized low-dose
    std::optional<GridF> mr;
};

/// Conditioning channels for one region: low, [mr], x, y, z coordinates.
template <typename T>
void fill_condition(const VolumeTriple& vol, const PatchRegion& region, bool use_mr, T* dst);
int condition_channels(bool use_mr);

/// One random draw of the patch-wise objective: region, sigma and noise key.
struct PatchDraw {
    std::size_t region_index = 0;
    double sigma = 0.0;
    SeedStream noise;
};

/// Draw order: region uniform over plan.regions, then sigma, from stream.child(p).
PatchDraw draw_patch(const TilingPlan& plan, const SeedStream& stream, std::uint64_t p,
                     const NoiseSchedule& sched);

/// Standard-normal noise scaled by sigma, generated in voxel order.
template <typename T>
void fill_noise(const SeedStream& key, double sigma, T* dst, std::size_t n);

struct PatchwiseLoss {
    double total = 0.0; ///< sum over the sampled regions
    std::vector<LossRecord> terms;
};

/// Sum of dsm losses over n_patches regions drawn uniformly from the plan.
/// A stride-1 plan makes the draw uniform over every valid origin.
template <typename T>
PatchwiseLoss patchwise_loss(Denoiser<T>& model, const VolumeTriple& vol, const TilingPlan& plan,
                             int n_patches, const SeedStream& stream, const NoiseSchedule& sched,
                             bool use_mr);

/// Loss on explicitly chosen (region, sigma, noise) draws; patchwise_loss
/// forwards here after drawing.
template <typename T>
PatchwiseLoss patchwise_loss_at(Denoiser<T>& model, const VolumeTriple& vol, const TilingPlan& plan,
                                std::span<const PatchDraw> draws, const NoiseSchedule& sched,
                                bool use_mr);

} // namespace csrd
