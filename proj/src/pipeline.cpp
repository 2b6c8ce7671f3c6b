#include "csrd/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "csrd/dosesim.hpp"
#include "csrd/json_util.hpp"
#include "csrd/train.hpp"
#include "csrd/volume_io.hpp"

namespace csrd {

namespace fs = std::filesystem;
using nlohmann::json;

// --------------------------------------------------------------------------
// Dataset index

DatasetIndex DatasetIndex::load(const fs::path& manifest) {
    if (!fs::exists(manifest)) throw ManifestError("dataset manifest '" + manifest.string() + "' not found");
    json m;
    try {
        std::ifstream is(manifest);
        m = json::parse(is);
    } catch (const json::exception& e) {
        throw ManifestError("cannot parse '" + manifest.string() + "': " + e.what());
    }
    DatasetIndex d;
    d.manifest = manifest;
    d.hash = hex64(hash_file(manifest));
    const fs::path dir = manifest.parent_path();
    try {
        d.train_factors = m.at("train_factors").get<std::vector<double>>();
        d.test_factors = m.at("test_factors").get<std::vector<double>>();
        for (const auto& cs : m.at("cases")) {
            DatasetCase c;
            c.id = cs.at("id").get<std::string>();
            c.split = cs.at("split").get<std::string>();
            c.scale = cs.at("scale").get<double>();
            c.nor = dir / cs.at("nor").get<std::string>();
            c.mr = dir / cs.at("mr").get<std::string>();
            for (const auto& [tag, e] : cs.at("low").items())
                c.low[e.at("factor").get<double>()] = dir / e.at("file").get<std::string>();
            d.cases.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw ManifestError("malformed dataset manifest '" + manifest.string() + "': " + e.what());
    }
    return d;
}

std::vector<const DatasetCase*> DatasetIndex::split(const std::string& name) const {
    std::vector<const DatasetCase*> out;
    for (const auto& c : cases)
        if (c.split == name) out.push_back(&c);
    return out;
}

namespace {

Volume3D read_checked(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw ManifestError(what + ": missing file '" + p.string() + "'");
    return read_rv3d(p);
}

} // namespace

Volume3D load_reference(const DatasetCase& c) {
    Volume3D v = normalize_counts(read_checked(c.nor, c.id + " nor"), c.scale);
    v.name = c.id + "_nor";
    return v;
}

Volume3D load_low(const DatasetCase& c, double factor) {
    const auto it = c.low.find(factor);
    if (it == c.low.end()) throw ManifestError(c.id + " has no low-dose volume at " + factor_tag(factor));
    Volume3D v = normalize_counts(read_checked(it->second, c.id + " low" + factor_tag(factor)), c.scale, factor);
    v.name = c.id + "_low" + factor_tag(factor);
    return v;
}

Volume3D load_mr(const DatasetCase& c) { return read_checked(c.mr, c.id + " mr"); }

// --------------------------------------------------------------------------
// Denoise config

std::string to_string(DenoiseMethod m) { return m == DenoiseMethod::csrd ? "csrd" : "tv"; }

DenoiseMethod denoise_method_from_string(const std::string& s) {
    if (s == "csrd") return DenoiseMethod::csrd;
    if (s == "tv") return DenoiseMethod::tv;
    throw ConfigError("unknown denoise method '" + s + "' (expected csrd or tv)");
}

namespace {

std::string blend_name(Blend b) { return b == Blend::cosine_window ? "cosine-window" : "uniform-average"; }

Blend blend_from_string(const std::string& s) {
    if (s == "cosine-window") return Blend::cosine_window;
    if (s == "uniform-average") return Blend::uniform_average;
    throw ConfigError("unknown blend '" + s + "' (expected cosine-window or uniform-average)");
}

} // namespace

void DenoiseConfig::validate() const {
    ConfigIssues issues;
    if (nfe < 3) issues.add("denoise.nfe must be >= 3");
    if (ensemble < 1) issues.add("denoise.ensemble must be >= 1");
    for (int a = 0; a < 3; ++a) {
        if (patch_size[a] < 1) issues.add("denoise.patch_size must be positive");
        if (patch_stride[a] < 1) issues.add("denoise.patch_stride must be positive");
    }
    for (const auto& [f, w] : tv_weights)
        if (!(f > 1.0) || !(w >= 0.0)) issues.add("denoise.tv_weights needs factors > 1 and weights >= 0");
    if (split != "train" && split != "test") issues.add("denoise.split must be train or test");
    try {
        SamplerConfig s = sampler;
        s.n_steps = SamplerConfig::steps_for_nfe(nfe);
        s.validate();
        tv.validate();
    } catch (const ConfigError& e) {
        issues.add(e.what());
    }
    issues.throw_if_any("invalid denoise config");
}

json to_json(const DenoiseConfig& c) {
    json sampler = to_json(c.sampler);
    sampler.erase("n_steps");
    sampler.erase("seed");
    json weights = json::object();
    for (const auto& [f, w] : c.tv_weights) weights[factor_tag(f)] = w;
    return {{"method", to_string(c.method)},
            {"checkpoint", c.checkpoint.string()},
            {"split", c.split},
            {"nfe", c.nfe},
            {"sampler", sampler},
            {"whole_volume", c.whole_volume},
            {"patch_size", vec_json(c.patch_size)},
            {"patch_stride", vec_json(c.patch_stride)},
            {"blend", blend_name(c.blend)},
            {"ensemble", c.ensemble},
            {"tv", to_json(c.tv)},
            {"tv_weights", weights},
            {"label", c.label}};
}

DenoiseConfig denoise_config_from_json(const json& j, const DenoiseConfig& base) {
    DenoiseConfig c = base;
    ConfigIssues issues;
    reject_unknown_keys(j, {"method", "checkpoint", "split", "nfe", "sampler", "whole_volume", "patch_size",
                            "patch_stride", "blend", "ensemble", "tv", "tv_weights", "label"},
                        "denoise", issues);
    issues.throw_if_any("invalid denoise config");
    std::string method = to_string(c.method), checkpoint = c.checkpoint.string(), blend = blend_name(c.blend);
    read_field(j, "method", method, "denoise", issues);
    read_field(j, "checkpoint", checkpoint, "denoise", issues);
    read_field(j, "split", c.split, "denoise", issues);
    read_field(j, "nfe", c.nfe, "denoise", issues);
    read_field(j, "whole_volume", c.whole_volume, "denoise", issues);
    read_field(j, "patch_size", c.patch_size, "denoise", issues);
    read_field(j, "patch_stride", c.patch_stride, "denoise", issues);
    read_field(j, "blend", blend, "denoise", issues);
    read_field(j, "ensemble", c.ensemble, "denoise", issues);
    read_field(j, "label", c.label, "denoise", issues);
    issues.throw_if_any("invalid denoise config");
    c.method = denoise_method_from_string(method);
    c.checkpoint = checkpoint;
    c.blend = blend_from_string(blend);
    if (j.contains("sampler")) {
        if (!j["sampler"].is_object()) throw ConfigError("denoise.sampler must be a JSON object");
        for (const char* k : {"n_steps", "seed"})
            if (j["sampler"].contains(k))
                throw ConfigError(std::string("denoise.sampler.") + k +
                                  " is derived (from nfe and the run seed) and cannot be set");
        json s = to_json(c.sampler);
        for (const auto& [k, v] : j["sampler"].items()) s[k] = v;
        c.sampler = sampler_config_from_json(s);
    }
    if (j.contains("tv")) {
        json t = to_json(c.tv);
        for (const auto& [k, v] : j["tv"].items()) t[k] = v;
        c.tv = tv_config_from_json(t);
    }
    if (j.contains("tv_weights")) {
        c.tv_weights.clear();
        for (const auto& [tag, w] : j["tv_weights"].items()) {
            std::string t = tag;
            if (!t.empty() && t.back() == 'x') t.pop_back();
            try {
                c.tv_weights[std::stod(t)] = w.get<double>();
            } catch (const std::exception&) {
                throw ConfigError("denoise.tv_weights keys look like \"4x\" and values are numbers");
            }
        }
    }
    c.validate();
    return c;
}

// --------------------------------------------------------------------------
// Denoising

TVTuning tune_tv_on_training_case(const DatasetIndex& data, double factor, const TVConfig& base,
                                  std::uint64_t seed) {
    const auto train = data.split("train");
    if (train.empty()) throw ManifestError("TV tuning needs a training case");
    const DatasetCase& c = *train.front();
    const Volume3D counts = read_checked(c.nor, c.id + " nor");
    const Volume3D reference = normalize_counts(counts, c.scale);
    const ThinningSpec spec{factor, SeedStream(seed).child(static_cast<std::uint64_t>(std::llround(factor * 1000))).key()};
    const Volume3D noisy = normalize_counts(poisson_thin(counts, spec), c.scale, factor);
    return tune_tv_weight(noisy, reference, kTVWeightGrid, base);
}

DenoiseRun denoise_dataset(const DatasetIndex& data, const DenoiseConfig& cfg, const fs::path& out_dir,
                           std::uint64_t seed) {
    cfg.validate();
    fs::create_directories(out_dir);
    const auto cases = data.split(cfg.split);
    if (cases.empty()) throw ManifestError("dataset has no '" + cfg.split + "' cases");

    DenoiseRun run;
    json extra = json::object();
    std::optional<ScoreModel> model;
    double residual_scale = 1.0;
    bool use_mr = false;
    SamplerConfig sampler = cfg.sampler;
    sampler.n_steps = SamplerConfig::steps_for_nfe(cfg.nfe);
    if (cfg.method == DenoiseMethod::csrd) {
        if (cfg.checkpoint.empty()) throw ConfigError("denoise.checkpoint is required for csrd");
        Checkpoint ck = load_checkpoint(cfg.checkpoint);
        if (ck.dataset_hash != data.hash)
            extra["dataset_hash_warning"] = "checkpoint trained on dataset " + ck.dataset_hash;
        model = ck.model.with_ema_weights();
        residual_scale = ck.residual_scale;
        use_mr = ck.config.use_mr;
        run.label = cfg.label.empty() ? (use_mr ? "csrd-mr" : "csrd-nomr") : cfg.label;
        extra["checkpoint"] = fs::absolute(cfg.checkpoint).lexically_normal().string();
        extra["checkpoint_step"] = ck.step;
        extra["sampler"] = to_json(sampler);
        extra["nfe_per_volume"] = sampler.nfe();
    } else {
        run.label = cfg.label.empty() ? "tv" : cfg.label;
        std::set<double> factors;
        for (const auto* c : cases)
            for (const auto& [f, _] : c->low) factors.insert(f);
        json tuning = json::object();
        for (double f : factors) {
            const auto it = cfg.tv_weights.find(f);
            if (it != cfg.tv_weights.end()) {
                run.tv_weights[f] = it->second;
                continue;
            }
            const TVTuning t = tune_tv_on_training_case(data, f, cfg.tv, seed);
            run.tv_weights[f] = t.best_weight;
            json table = json::array();
            for (const auto& [w, p] : t.table) table.push_back({{"weight", w}, {"psnr_db", p}});
            tuning[factor_tag(f)] = table;
        }
        json weights = json::object();
        for (const auto& [f, w] : run.tv_weights) weights[factor_tag(f)] = w;
        extra["tv_weights"] = weights;
        extra["tv_tuning"] = tuning;
        extra["tv"] = to_json(cfg.tv);
    }

    const SeedStream root(seed);
    json outputs = json::array();
    std::uint64_t k = 0;
    for (const DatasetCase* c : cases) {
        const std::optional<Volume3D> mr = use_mr ? std::optional<Volume3D>(load_mr(*c)) : std::nullopt;
        for (const auto& [factor, _] : c->low) {
            const Volume3D low = load_low(*c, factor);
            const std::string stem = c->id + "_low" + factor_tag(factor) + "_" + run.label;
            DenoisedVolume out;
            out.case_id = c->id;
            out.factor = factor;
            out.file = out_dir / (stem + ".rv3d");
            json entry = {{"case", c->id}, {"factor", factor}, {"file", out.file.filename().string()}};
            if (cfg.method == DenoiseMethod::tv) {
                TVConfig tv = cfg.tv;
                tv.weight = run.tv_weights.at(factor);
                Volume3D d = tv_denoise(low, tv);
                d.name = stem;
                write_rv3d(out.file, d);
            } else {
                SamplerConfig sc = sampler;
                sc.seed = root.child(k).key();
                std::optional<TilingPlan> plan;
                if (!cfg.whole_volume) plan = tile(low.shape(), cfg.patch_size, cfg.patch_stride, cfg.blend);
                const Volume3D* mrp = mr ? &*mr : nullptr;
                if (cfg.ensemble > 1) {
                    const Ensemble e = sample_ensemble(*model, low, mrp, plan, sc, cfg.ensemble, residual_scale);
                    Volume3D d = e.members.front().denoised;
                    d.name = stem;
                    write_rv3d(out.file, d);
                    json members = json::array();
                    for (std::size_t m = 0; m < e.members.size(); ++m) {
                        Volume3D dm = e.members[m].denoised;
                        dm.name = stem + "_m" + std::to_string(m);
                        const fs::path pm = out_dir / (dm.name + ".rv3d");
                        write_rv3d(pm, dm);
                        members.push_back(pm.filename().string());
                    }
                    const fs::path ps = out_dir / (stem + "_std.rv3d");
                    write_rv3d(ps, Volume3D(e.stddev, low.spacing, Domain::normalized, stem + "_std"));
                    entry["members"] = members;
                    entry["std"] = ps.filename().string();
                    out.nfe_used = e.members.front().nfe_used;
                } else {
                    const DenoiseResult r = sample_residual(*model, low, mrp, plan, sc, residual_scale);
                    Volume3D d = r.denoised;
                    d.name = stem;
                    write_rv3d(out.file, d);
                    out.nfe_used = r.nfe_used;
                    entry["seam_diagnostic"] = r.per_patch_seams;
                    entry["seeds"] = r.seeds;
                }
                entry["nfe_used"] = out.nfe_used;
            }
            ++k;
            out.hash = hex64(hash_file(out.file));
            entry["hash"] = out.hash;
            outputs.push_back(entry);
            run.outputs.push_back(out);
        }
    }
    run.manifest = {{"format", "csrd-denoise/1"},
                    {"label", run.label},
                    {"method", to_string(cfg.method)},
                    {"dataset_manifest", fs::absolute(data.manifest).lexically_normal().string()},
                    {"dataset_hash", data.hash},
                    {"seed", seed},
                    {"config", to_json(cfg)},
                    {"details", extra},
                    {"outputs", outputs}};
    std::ofstream os(out_dir / "denoise_manifest.json");
    if (!os) throw IoError("cannot write denoise manifest in '" + out_dir.string() + "'");
    os << run.manifest.dump(2) << "\n";
    return run;
}

// --------------------------------------------------------------------------
// Evaluation

void EvaluateConfig::validate() const {
    haralick.validate();
    if (ssim.window < 1 || ssim.window % 2 == 0) throw ConfigError("evaluate.ssim_window must be odd and positive");
    if (split != "train" && split != "test") throw ConfigError("evaluate.split must be train or test");
}

json to_json(const EvaluateConfig& c) {
    return {{"ssim_window", c.ssim.window},
            {"ssim_sigma", c.ssim.sigma},
            {"haralick_levels", c.haralick.n_gray_levels},
            {"haralick_epsilon", c.haralick.epsilon},
            {"include_low", c.include_low},
            {"split", c.split}};
}

EvaluateConfig evaluate_config_from_json(const json& j, const EvaluateConfig& base) {
    EvaluateConfig c = base;
    ConfigIssues issues;
    reject_unknown_keys(j, {"ssim_window", "ssim_sigma", "haralick_levels", "haralick_epsilon", "include_low", "split"},
                        "evaluate", issues);
    read_field(j, "ssim_window", c.ssim.window, "evaluate", issues);
    read_field(j, "ssim_sigma", c.ssim.sigma, "evaluate", issues);
    read_field(j, "haralick_levels", c.haralick.n_gray_levels, "evaluate", issues);
    read_field(j, "haralick_epsilon", c.haralick.epsilon, "evaluate", issues);
    read_field(j, "include_low", c.include_low, "evaluate", issues);
    read_field(j, "split", c.split, "evaluate", issues);
    issues.throw_if_any("invalid evaluate config");
    c.validate();
    return c;
}

std::vector<EvalRow> evaluate_dataset(const DatasetIndex& data, const std::vector<fs::path>& denoise_dirs,
                                      const EvaluateConfig& cfg) {
    cfg.validate();
    EvalConfig ec;
    ec.ssim = cfg.ssim;
    ec.haralick = cfg.haralick;

    struct Source {
        std::string label;
        fs::path dir;
        std::map<std::pair<std::string, double>, fs::path> files;
    };
    std::vector<Source> sources;
    for (const auto& dir : denoise_dirs) {
        std::ifstream is(dir / "denoise_manifest.json");
        if (!is) throw ManifestError("no denoise_manifest.json in '" + dir.string() + "'");
        const json m = json::parse(is);
        if (m.at("dataset_hash").get<std::string>() != data.hash)
            throw ManifestError("'" + dir.string() + "' was produced from a different dataset");
        Source s{m.at("label").get<std::string>(), dir, {}};
        for (const auto& o : m.at("outputs"))
            s.files[{o.at("case").get<std::string>(), o.at("factor").get<double>()}] =
                dir / o.at("file").get<std::string>();
        sources.push_back(std::move(s));
    }

    std::vector<EvalRow> rows;
    for (const DatasetCase* c : data.split(cfg.split)) {
        const Volume3D ref = load_reference(*c);
        for (const auto& [factor, _] : c->low) {
            if (cfg.include_low) rows.push_back({c->id, factor, "low", evaluate_pair(ref, load_low(*c, factor), ec)});
            for (const auto& s : sources) {
                const auto it = s.files.find({c->id, factor});
                if (it == s.files.end())
                    throw ManifestError("'" + s.dir.string() + "' has no output for " + c->id + " at " +
                                        factor_tag(factor));
                rows.push_back({c->id, factor, s.label, evaluate_pair(ref, read_checked(it->second, s.label), ec)});
            }
        }
    }
    return rows;
}

double mean_metric(const std::vector<EvalRow>& rows, const std::string& method, const std::string& metric,
                   std::optional<double> factor) {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        if (r.method != method || (factor && r.dose_factor != *factor)) continue;
        const auto& rep = r.report;
        double v = 0.0;
        if (metric == "mae") v = rep.mae;
        else if (metric == "psnr_db") v = rep.psnr_db;
        else if (metric == "ssim") v = rep.ssim;
        else if (metric == "h_dist") v = rep.h_dist;
        else if (metric == "p_dist") v = rep.p_dist;
        else throw ConfigError("unknown metric '" + metric + "'");
        sum += v;
        ++n;
    }
    if (n == 0) throw ConfigError("no rows for method '" + method + "'");
    return sum / n;
}

} // namespace csrd
