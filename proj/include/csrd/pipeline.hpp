#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "csrd/metrics.hpp"
#include "csrd/sampler.hpp"
#include "csrd/tv.hpp"
#include "csrd/volume.hpp"

namespace csrd {

inline constexpr const char* kToolVersion = "0.4.0";

/// Parsed dataset manifest as written by simulate_dataset.
struct DatasetCase {
    std::string id;
    std::string split;
    double scale = 1.0;
    std::filesystem::path nor, mr;
    std::map<double, std::filesystem::path> low; ///< by dose factor
};

struct DatasetIndex {
    std::filesystem::path manifest;
    std::string hash;
    std::vector<DatasetCase> cases;
    std::vector<double> train_factors, test_factors;

    static DatasetIndex load(const std::filesystem::path& manifest);
    std::vector<const DatasetCase*> split(const std::string& name) const;
};

/// Normalized volumes of one case at one factor.
Volume3D load_reference(const DatasetCase& c);
Volume3D load_low(const DatasetCase& c, double factor);
Volume3D load_mr(const DatasetCase& c);

enum class DenoiseMethod { csrd, tv };
std::string to_string(DenoiseMethod m);
DenoiseMethod denoise_method_from_string(const std::string& s);

struct DenoiseConfig {
    DenoiseMethod method = DenoiseMethod::csrd;
    std::filesystem::path checkpoint;
    std::string split = "test";
    int nfe = 100;
    SamplerConfig sampler; ///< n_steps is derived from nfe
    bool whole_volume = true;
    Vec3i patch_size{16, 16, 16};
    Vec3i patch_stride{16, 16, 16};
    Blend blend = Blend::cosine_window;
    int ensemble = 1;
    TVConfig tv;
    /// Per-factor TV weights; factors missing here are tuned on the first
    /// training case over kTVWeightGrid.
    std::map<double, double> tv_weights;
    /// Label used in reports; defaults to "csrd-mr", "csrd-nomr" or "tv".
    std::string label;

    void validate() const;
};

nlohmann::json to_json(const DenoiseConfig& c);
DenoiseConfig denoise_config_from_json(const nlohmann::json& j, const DenoiseConfig& base = {});

struct DenoisedVolume {
    std::string case_id;
    double factor = 0.0;
    std::filesystem::path file;
    std::string hash;
    int nfe_used = 0;
};

struct DenoiseRun {
    std::string label;
    std::vector<DenoisedVolume> outputs;
    std::map<double, double> tv_weights; ///< resolved weights (TV only)
    nlohmann::json manifest;             ///< also written to out_dir/denoise_manifest.json
};

/// Denoises every low-dose volume of the configured split into out_dir.
/// Outputs are normalized-domain RV3D files named <case>_low<F>x_<label>.rv3d.
DenoiseRun denoise_dataset(const DatasetIndex& data, const DenoiseConfig& cfg, const std::filesystem::path& out_dir,
                           std::uint64_t seed);

/// TV weight maximizing PSNR on the first training case thinned to `factor`.
TVTuning tune_tv_on_training_case(const DatasetIndex& data, double factor, const TVConfig& base,
                                  std::uint64_t seed);

struct EvaluateConfig {
    SsimConfig ssim;
    HaralickConfig haralick;
    bool include_low = true; ///< adds a "low" row per case and factor
    std::string split = "test";

    void validate() const;
};

nlohmann::json to_json(const EvaluateConfig& c);
EvaluateConfig evaluate_config_from_json(const nlohmann::json& j, const EvaluateConfig& base = {});

/// Scores every denoised output listed in the given denoise manifests against
/// the normalized normal-dose reference.
std::vector<EvalRow> evaluate_dataset(const DatasetIndex& data, const std::vector<std::filesystem::path>& denoise_dirs,
                                      const EvaluateConfig& cfg);

/// Mean of a metric over rows matching method and (optionally) factor.
double mean_metric(const std::vector<EvalRow>& rows, const std::string& method, const std::string& metric,
                   std::optional<double> factor = std::nullopt);

} // namespace csrd
