#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "csrd/diffusion.hpp"
#include "csrd/scorenet.hpp"

namespace csrd {

struct TrainConfig {
    double lr = 0.002;
    int batch_size = 4;
    int total_iters = 5000;
    Vec3i patch_size{16, 16, 16};
    double ema_decay = 0.999;
    std::uint64_t seed = 0;
    bool use_mr = true;
    std::filesystem::path dataset_manifest;
    int checkpoint_every = 1000;
    ScoreModelConfig model;
    NoiseSchedule schedule;

    void validate() const;
};

/// "phantom": 48^3 desk-scale run. "paper": 64^3 patches, 64 channels, batch 16, 65k iterations.
TrainConfig train_preset(const std::string& name);

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep the values of `base`; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& base = {});

// --------------------------------------------------------------------------
// Dataset

/// One (normal-dose, low-dose at a factor, MR) triple on the model scale.
struct TrainingPair {
    std::string case_id;
    double factor = 0.0;
    VolumeTriple vol;
};

/// A training sample: which pair, which region, which sigma, which noise.
struct TrainingDraw {
    std::size_t volume = 0; ///< index into the case list
    std::size_t pair = 0;   ///< index into pairs()
    PatchRegion region;
    double sigma = 0.0;
    SeedStream noise;
};

/// Training split of a simulated dataset with residuals precomputed and
/// scaled so that their standard deviation equals sigma_data.
class TrainingSet {
public:
    static TrainingSet load(const std::filesystem::path& manifest, bool use_mr, const NoiseSchedule& sched);
    /// In-memory construction (tests). Pairs are grouped into volumes by case_id.
    static TrainingSet from_pairs(std::vector<TrainingPair> pairs, double residual_scale);

    const std::vector<TrainingPair>& pairs() const noexcept { return pairs_; }
    std::size_t volume_count() const noexcept { return by_volume_.size(); }
    /// Model-scale residual times this is the residual on the normalized scale.
    double residual_scale() const noexcept { return residual_scale_; }
    const std::string& manifest_hash() const noexcept { return manifest_hash_; }

    /// Volume uniform over cases, then factor uniform within the case, then
    /// origin uniform over every valid position, then sigma.
    TrainingDraw draw(const SeedStream& s, const Vec3i& patch, const NoiseSchedule& sched) const;

private:
    std::vector<TrainingPair> pairs_;
    std::vector<std::vector<std::size_t>> by_volume_;
    double residual_scale_ = 1.0;
    std::string manifest_hash_;
};

struct TrainingBatch {
    nn::Tensor<float> y, cond, noise;
    std::vector<double> sigma;
    std::vector<PatchRegion> regions;
    std::vector<std::string> ids; ///< "case@factor" per sample
};

/// Batch for iteration `iter`: sample b uses SeedStream(seed).child(iter).child(b).
TrainingBatch make_batch(const TrainingSet& data, const TrainConfig& cfg, long long iter);

// --------------------------------------------------------------------------
// Optimisation

/// Zeroes gradients, evaluates the loss with gradients and applies one
/// optimizer step. A non-finite loss raises NumericError naming sigma, region
/// and sample id. Returns the batch mean loss.
double train_step(Denoiser<float>& model, nn::Adam<float>& opt, const TrainingBatch& batch,
                  const NoiseSchedule& sched);

struct Checkpoint {
    TrainConfig config;
    long long step = 0;
    double residual_scale = 1.0;
    std::string dataset_hash;
    ScoreModel model; ///< live weights with the EMA shadow enabled
    std::vector<std::vector<float>> adam_m, adam_v;
    long long adam_steps = 0;
};

/// Writes `<stem>.bin` (parameters, EMA, optimizer moments) and `<stem>.json`.
void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& ck);
/// Accepts either file of the pair; the blob hash recorded in the JSON is verified.
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TelemetryRecord {
    long long iter = 0;
    double loss = 0.0;
    double sigma_mean = 0.0;
    double lr = 0.0;
    double wallclock = 0.0; ///< seconds since the run (or resume) started
};
nlohmann::json to_json(const TelemetryRecord& r);

struct TrainResult {
    std::vector<double> losses; ///< one per iteration run in this call
    std::vector<std::filesystem::path> checkpoints;
    std::filesystem::path final_checkpoint;
};

/// Runs iterations [start, total_iters) where start is 0 or the resumed step.
/// Checkpoints land in out_dir/checkpoints, telemetry in out_dir/telemetry.jsonl.
/// Resuming refuses a checkpoint whose config (other than total_iters and
/// checkpoint_every) or dataset hash differs.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = std::nullopt,
                  const std::function<void(const TelemetryRecord&)>& on_iter = {});

} // namespace csrd
