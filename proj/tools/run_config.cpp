#include "run_config.hpp"

#include <cstdlib>
#include <fstream>

#include "csrd/json_util.hpp"
#include "csrd/volume_io.hpp"

namespace csrd::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json merged(json base, const json& patch) {
    base.merge_patch(patch);
    return base;
}

template <typename Fn>
void section(const json& j, const char* key, ConfigIssues& issues, Fn&& fn) {
    if (!j.contains(key)) return;
    try {
        fn(j.at(key));
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        const std::string prefix = e.kind() + ": ";
        if (msg.rfind(prefix, 0) == 0) msg.erase(0, prefix.size());
        issues.add(msg);
    } catch (const Error& e) {
        issues.add(std::string(key) + ": " + e.what());
    } catch (const json::exception& e) {
        issues.add(std::string(key) + ": " + e.what());
    }
}

} // namespace

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    ConfigIssues issues;
    reject_unknown_keys(j, {"global", "simulate", "train", "denoise", "evaluate"}, "config", issues);
    section(j, "global", issues, [&](const json& g) {
        ConfigIssues gi;
        reject_unknown_keys(g, {"seed", "precision", "device_count", "output_dir"}, "global", gi);
        read_field(g, "seed", c.global.seed, "global", gi);
        read_field(g, "precision", c.global.precision, "global", gi);
        read_field(g, "device_count", c.global.device_count, "global", gi);
        read_field(g, "output_dir", c.global.output_dir, "global", gi);
        if (c.global.precision != "fp32")
            gi.add("global.precision '" + c.global.precision + "' is not supported (only fp32)");
        if (c.global.device_count < 1) gi.add("global.device_count must be >= 1");
        gi.throw_if_any("invalid global config");
    });
    issues.throw_if_any("invalid run config");

    const bool global_seed = j.contains("global") && j["global"].contains("seed");
    c.simulate.seed = global_seed ? c.global.seed : c.simulate.seed;
    c.train.seed = global_seed ? c.global.seed : c.train.seed;

    section(j, "simulate", issues, [&](const json& s) {
        c.simulate = simulate_config_from_json(merged(to_json(c.simulate), s));
    });
    section(j, "train", issues, [&](const json& t) {
        json body = t;
        if (body.contains("preset")) {
            c.train_preset = body["preset"].get<std::string>();
            body.erase("preset");
            TrainConfig preset = train_preset(c.train_preset);
            preset.seed = c.train.seed;
            c.train = preset;
        }
        c.train = train_config_from_json(body, c.train);
    });
    section(j, "denoise", issues, [&](const json& d) { c.denoise = denoise_config_from_json(d, c.denoise); });
    section(j, "evaluate", issues, [&](const json& e) { c.evaluate = evaluate_config_from_json(e, c.evaluate); });
    issues.throw_if_any("invalid run config");
    return c;
}

json to_json(const RunConfig& c) {
    json train = to_json(c.train);
    train["preset"] = c.train_preset;
    return {{"global",
             {{"seed", c.global.seed},
              {"precision", c.global.precision},
              {"device_count", c.global.device_count},
              {"output_dir", c.global.output_dir}}},
            {"simulate", to_json(c.simulate)},
            {"train", train},
            {"denoise", to_json(c.denoise)},
            {"evaluate", to_json(c.evaluate)}};
}

RunConfig load_run_config(const std::optional<fs::path>& path) {
    if (!path) return RunConfig{};
    std::ifstream is(*path);
    if (!is) throw ConfigError("cannot read config '" + path->string() + "'");
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path->string() + "' is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

fs::path resolve_output_dir(const std::optional<std::string>& flag, const RunConfig& cfg, const std::string& command) {
    if (flag && !flag->empty()) return *flag;
    if (!cfg.global.output_dir.empty()) return cfg.global.output_dir;
    if (const char* env = std::getenv("CSRD_OUTPUT_DIR"); env && *env) return fs::path(env) / command;
    return fs::path("csrd_runs") / command;
}

void write_run_record(const fs::path& dir, const std::string& command, const RunConfig& cfg, const json& inputs,
                      const json& outputs) {
    fs::create_directories(dir);
    {
        std::ofstream os(dir / "resolved_config.json");
        if (!os) throw IoError("cannot write resolved_config.json in '" + dir.string() + "'");
        os << to_json(cfg).dump(2) << "\n";
    }
    const json info = {{"tool", "csrd"},
                       {"version", kToolVersion},
                       {"command", command},
                       {"resolved_config_hash", hex64(hash_file(dir / "resolved_config.json"))},
                       {"inputs", inputs},
                       {"outputs", outputs}};
    std::ofstream os(dir / "run_info.json");
    if (!os) throw IoError("cannot write run_info.json in '" + dir.string() + "'");
    os << info.dump(2) << "\n";
}

} // namespace csrd::cli
