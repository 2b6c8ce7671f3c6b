#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "csrd/dosesim.hpp"
#include "csrd/pipeline.hpp"
#include "csrd/train.hpp"

namespace csrd::cli {

struct GlobalConfig {
    std::uint64_t seed = 0;
    std::string precision = "fp32";
    int device_count = 1; ///< recorded only; execution is single-device
    std::string output_dir;
};

/// One JSON document per run. Precedence, highest first: command-line flags,
/// the config file, CSRD_OUTPUT_DIR (output directory only), built-in defaults.
struct RunConfig {
    GlobalConfig global;
    SimulateConfig simulate;
    std::string train_preset = "phantom";
    TrainConfig train = ::csrd::train_preset("phantom");
    DenoiseConfig denoise;
    EvaluateConfig evaluate;
};

/// Parses a run document. Unknown keys anywhere are rejected and every
/// violation is reported at once. A section seed left unset inherits global.seed.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

RunConfig load_run_config(const std::optional<std::filesystem::path>& path);

/// Output directory: explicit flag, then global.output_dir, then
/// $CSRD_OUTPUT_DIR/<command>, then ./csrd_runs/<command>.
std::filesystem::path resolve_output_dir(const std::optional<std::string>& flag, const RunConfig& cfg,
                                         const std::string& command);

/// Writes resolved_config.json and run_info.json (tool version, command,
/// input and output hashes) into dir.
void write_run_record(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg,
                      const nlohmann::json& inputs, const nlohmann::json& outputs);

} // namespace csrd::cli
