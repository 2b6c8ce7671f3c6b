#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "csrd/dosesim.hpp"
#include "csrd/metrics.hpp"
#include "csrd/pipeline.hpp"
#include "csrd/tiling.hpp"
#include "csrd/train.hpp"
#include "csrd/volume_io.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace csrd;
using csrd::cli::RunConfig;

namespace {

struct CommonOpts {
    std::optional<std::string> config;
    std::optional<std::string> output;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, CommonOpts& o) {
    sub->add_option("-c,--config", o.config, "Run config JSON")->check(CLI::ExistingFile);
    sub->add_option("-o,--output", o.output, "Output directory");
    sub->add_option("--seed", o.seed, "Seed (overrides every section seed)");
}

RunConfig resolve(const CommonOpts& o) {
    RunConfig cfg = cli::load_run_config(o.config ? std::optional<fs::path>(*o.config) : std::nullopt);
    if (o.seed) {
        cfg.global.seed = *o.seed;
        cfg.simulate.seed = *o.seed;
        cfg.train.seed = *o.seed;
    }
    return cfg;
}

void say(const std::string& msg) { std::fprintf(stderr, "%s\n", msg.c_str()); }

// --------------------------------------------------------------------------

struct SimulateOpts {
    CommonOpts common;
    std::optional<int> n_train, n_test;
};

int run_simulate(const SimulateOpts& o) {
    RunConfig cfg = resolve(o.common);
    if (o.n_train) cfg.simulate.n_train = *o.n_train;
    if (o.n_test) cfg.simulate.n_test = *o.n_test;
    const fs::path out = cli::resolve_output_dir(o.common.output, cfg, "simulate");
    say("simulating " + std::to_string(cfg.simulate.n_train + cfg.simulate.n_test) + " phantoms into " + out.string());
    simulate_dataset(out, cfg.simulate);
    const fs::path manifest = out / "manifest.json";
    cli::write_run_record(out, "simulate", cfg, json::object(),
                          {{"manifest", manifest.filename().string()}, {"manifest_hash", hex64(hash_file(manifest))}});
    std::printf("%s\n", manifest.string().c_str());
    return 0;
}

// --------------------------------------------------------------------------

struct TrainOpts {
    CommonOpts common;
    std::optional<std::string> dataset, preset, resume;
    std::optional<long long> iters;
    std::optional<bool> use_mr;
    bool quiet = false;
};

int run_train(const TrainOpts& o) {
    RunConfig cfg = resolve(o.common);
    if (o.preset) {
        TrainConfig p = train_preset(*o.preset);
        p.seed = cfg.train.seed;
        p.dataset_manifest = cfg.train.dataset_manifest;
        p.use_mr = cfg.train.use_mr;
        p.model.use_mr = cfg.train.use_mr;
        cfg.train = p;
        cfg.train_preset = *o.preset;
    }
    if (o.dataset) cfg.train.dataset_manifest = *o.dataset;
    if (o.iters) cfg.train.total_iters = *o.iters;
    if (o.use_mr) {
        cfg.train.use_mr = *o.use_mr;
        cfg.train.model.use_mr = *o.use_mr;
    }
    cfg.train.validate();
    const fs::path out = cli::resolve_output_dir(o.common.output, cfg, "train");
    const bool quiet = o.quiet;
    const TrainResult r = train(cfg.train, out, o.resume ? std::optional<fs::path>(*o.resume) : std::nullopt,
                                [quiet](const TelemetryRecord& t) {
                                    if (quiet || t.iter % 100 != 0) return;
                                    std::fprintf(stderr, "iter %lld  loss %.5f  sigma %.3f  %.0fs\n", t.iter, t.loss,
                                                 t.sigma_mean, t.wallclock);
                                });
    json ckpts = json::array();
    for (const auto& p : r.checkpoints) {
        fs::path bin = p;
        bin.replace_extension(".bin");
        ckpts.push_back({{"file", fs::relative(p, out).string()}, {"blob_hash", hex64(hash_file(bin))}});
    }
    cli::write_run_record(
        out, "train", cfg,
        {{"dataset_manifest", cfg.train.dataset_manifest.string()},
         {"dataset_hash", hex64(hash_file(cfg.train.dataset_manifest))},
         {"resume", o.resume ? *o.resume : ""}},
        {{"checkpoints", ckpts}, {"final_checkpoint", fs::relative(r.final_checkpoint, out).string()}});
    std::printf("%s\n", r.final_checkpoint.string().c_str());
    return 0;
}

// --------------------------------------------------------------------------

struct DenoiseOpts {
    CommonOpts common;
    std::optional<std::string> dataset, checkpoint, method, label, split, mode;
    std::optional<int> nfe, ensemble;
    std::optional<double> tv_weight;
    std::optional<bool> whole;
    // single-volume mode
    std::optional<std::string> input, mr_input, output_file;
    std::optional<double> scale, factor;
};

DenoiseConfig denoise_overrides(const DenoiseOpts& o, DenoiseConfig d) {
    if (o.method) d.method = denoise_method_from_string(*o.method);
    if (o.checkpoint) d.checkpoint = *o.checkpoint;
    if (o.label) d.label = *o.label;
    if (o.split) d.split = *o.split;
    if (o.nfe) d.nfe = *o.nfe;
    if (o.ensemble) d.ensemble = *o.ensemble;
    if (o.whole) d.whole_volume = *o.whole;
    if (o.mode) {
        d.sampler.mode = sampler_mode_from_string(*o.mode);
        if (d.sampler.mode == SamplerMode::stochastic && d.sampler.s_churn == 0.0)
            d.sampler.s_churn = SamplerConfig::stochastic(d.sampler.n_steps, 0).s_churn;
    }
    if (o.tv_weight) d.tv.weight = *o.tv_weight;
    d.validate();
    return d;
}

Volume3D read_input(const fs::path& p, std::optional<double> scale, double factor) {
    Volume3D v = read_rv3d(p);
    if (v.domain == Domain::counts) {
        if (!scale) throw ConfigError("'" + p.string() + "' holds counts; pass --scale to normalize it");
        return normalize_counts(v, *scale, factor);
    }
    return v;
}

int run_denoise_single(const DenoiseOpts& o, const RunConfig& cfg) {
    const DenoiseConfig d = denoise_overrides(o, cfg.denoise);
    if (!o.output_file) throw ConfigError("single-volume mode needs --output-file");
    const Volume3D low = read_input(*o.input, o.scale, o.factor.value_or(1.0));
    Volume3D out;
    json details;
    if (d.method == DenoiseMethod::tv) {
        if (!o.tv_weight && d.tv_weights.empty())
            say("no --tv-weight given; using weight " + std::to_string(d.tv.weight));
        TVConfig tv = d.tv;
        if (!o.tv_weight && o.factor && d.tv_weights.count(*o.factor)) tv.weight = d.tv_weights.at(*o.factor);
        const TVResult r = tv_denoise_detailed(low, tv);
        out = r.out;
        details = {{"tv", to_json(tv)}, {"iterations", r.iterations}, {"converged", r.converged}};
    } else {
        if (d.checkpoint.empty()) throw ConfigError("csrd denoising needs --checkpoint");
        Checkpoint ck = load_checkpoint(d.checkpoint);
        ScoreModel model = ck.model.with_ema_weights();
        std::optional<Volume3D> mr;
        if (ck.config.use_mr) {
            if (!o.mr_input) throw ConfigError("checkpoint was trained with MR conditioning; pass --mr");
            mr = read_rv3d(*o.mr_input);
        }
        SamplerConfig sc = d.sampler;
        sc.n_steps = SamplerConfig::steps_for_nfe(d.nfe);
        sc.seed = SeedStream(cfg.global.seed).child(0).key();
        std::optional<TilingPlan> plan;
        if (!d.whole_volume) plan = tile(low.shape(), d.patch_size, d.patch_stride, d.blend);
        const DenoiseResult r = sample_residual(model, low, mr ? &*mr : nullptr, plan, sc, ck.residual_scale);
        out = r.denoised;
        details = {{"checkpoint", d.checkpoint.string()}, {"nfe_used", r.nfe_used}, {"seeds", r.seeds}};
    }
    out.name = fs::path(*o.output_file).stem().string();
    const fs::path of = *o.output_file;
    if (of.has_parent_path()) fs::create_directories(of.parent_path());
    write_rv3d(of, out);
    const fs::path record_dir = o.common.output ? fs::path(*o.common.output) : of.parent_path();
    RunConfig resolved = cfg;
    resolved.denoise = d;
    cli::write_run_record(record_dir.empty() ? fs::path(".") : record_dir, "denoise", resolved,
                          {{"input", *o.input}, {"input_hash", hex64(hash_file(*o.input))}},
                          {{"file", of.string()}, {"hash", hex64(hash_file(of))}, {"details", details}});
    std::printf("%s\n", of.string().c_str());
    return 0;
}

int run_denoise(const DenoiseOpts& o) {
    RunConfig cfg = resolve(o.common);
    if (o.input) return run_denoise_single(o, cfg);
    if (!o.dataset) throw ConfigError("denoise needs --manifest (or --input for a single volume)");
    cfg.denoise = denoise_overrides(o, cfg.denoise);
    const fs::path out = cli::resolve_output_dir(o.common.output, cfg, "denoise");
    const DatasetIndex data = DatasetIndex::load(*o.dataset);
    const DenoiseRun run = denoise_dataset(data, cfg.denoise, out, cfg.global.seed);
    json outs = json::array();
    for (const auto& v : run.outputs) outs.push_back({{"file", v.file.filename().string()}, {"hash", v.hash}});
    cli::write_run_record(out, "denoise", cfg, {{"dataset_manifest", *o.dataset}, {"dataset_hash", data.hash}},
                          {{"label", run.label}, {"volumes", outs}});
    std::printf("%s\n", out.string().c_str());
    return 0;
}

// --------------------------------------------------------------------------

struct EvaluateOpts {
    CommonOpts common;
    std::optional<std::string> dataset;
    std::vector<std::string> runs;
    std::optional<std::string> reference, test, mask, out;
    std::optional<double> scale, factor;
};

Mask read_mask(const fs::path& p, const Vec3i& shape) {
    const Volume3D m = read_rv3d(p);
    if (m.shape() != shape)
        throw DimensionError("mask '" + p.string() + "' has shape " + to_string(m.shape()) + ", expected " +
                             to_string(shape));
    Mask out(shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.data[i] != 0.0f ? 1 : 0;
    return out;
}

int run_evaluate(const EvaluateOpts& o) {
    RunConfig cfg = resolve(o.common);
    cfg.evaluate.validate();
    fs::path out = cli::resolve_output_dir(o.common.output, cfg, "evaluate");
    fs::path report_stem = out / "report";
    if (o.out) {
        report_stem = fs::path(*o.out).replace_extension();
        if (!o.common.output) out = report_stem.has_parent_path() ? report_stem.parent_path() : fs::path(".");
    }
    std::vector<EvalRow> rows;
    json inputs;
    if (o.reference || o.test) {
        if (!o.reference || !o.test) throw ConfigError("pair mode needs both --ref and --test");
        const Volume3D ref = read_input(*o.reference, o.scale, 1.0);
        const Volume3D test = read_input(*o.test, o.scale, o.factor.value_or(1.0));
        EvalConfig ec;
        ec.ssim = cfg.evaluate.ssim;
        ec.haralick = cfg.evaluate.haralick;
        std::optional<Mask> mask;
        if (o.mask) {
            mask = read_mask(*o.mask, ref.shape());
            ec.mask = &*mask;
            ec.mask_name = fs::path(*o.mask).filename().string();
        }
        EvalRow row{fs::path(*o.test).stem().string(), o.factor.value_or(1.0), "pair", evaluate_pair(ref, test, ec)};
        row.report.reference_name = fs::path(*o.reference).filename().string();
        row.report.test_name = fs::path(*o.test).filename().string();
        rows.push_back(row);
        inputs = {{"reference", *o.reference},
                  {"reference_hash", hex64(hash_file(*o.reference))},
                  {"test", *o.test},
                  {"test_hash", hex64(hash_file(*o.test))}};
    } else {
        if (!o.dataset) throw ConfigError("evaluate needs --manifest with --runs, or --ref and --test");
        if (o.mask) throw ConfigError("--mask applies to --ref/--test pair mode only");
        const DatasetIndex data = DatasetIndex::load(*o.dataset);
        std::vector<fs::path> dirs(o.runs.begin(), o.runs.end());
        rows = evaluate_dataset(data, dirs, cfg.evaluate);
        inputs = {{"dataset_manifest", *o.dataset}, {"dataset_hash", data.hash}, {"runs", o.runs}};
    }
    fs::create_directories(out);
    if (report_stem.has_parent_path()) fs::create_directories(report_stem.parent_path());
    const fs::path json_path = fs::path(report_stem).concat(".json");
    const fs::path csv_path = fs::path(report_stem).concat(".csv");
    write_report(json_path, csv_path, rows);
    cli::write_run_record(out, "evaluate", cfg, inputs,
                          {{"report_json", json_path.filename().string()},
                           {"report_json_hash", hex64(hash_file(json_path))},
                           {"report_csv", csv_path.filename().string()},
                           {"report_csv_hash", hex64(hash_file(csv_path))}});
    std::printf("%s\n", kReportCsvHeader);
    for (const auto& r : rows) std::printf("%s\n", csv_line(r).c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conditional score-based residual diffusion for low-dose PET"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string("csrd ") + kToolVersion);

    SimulateOpts sim;
    auto* s = app.add_subcommand("simulate", "Generate a phantom dataset with thinned low-dose copies");
    add_common(s, sim.common);
    s->add_option("--n-train", sim.n_train, "Training phantoms")->check(CLI::PositiveNumber);
    s->add_option("--n-test", sim.n_test, "Test phantoms")->check(CLI::NonNegativeNumber);

    TrainOpts tr;
    auto* t = app.add_subcommand("train", "Train the score network on a dataset");
    add_common(t, tr.common);
    t->add_option("--manifest,--dataset", tr.dataset, "Dataset manifest.json")->check(CLI::ExistingFile);
    t->add_option("--preset", tr.preset, "phantom or paper")->check(CLI::IsMember({"phantom", "paper"}));
    t->add_option("--iters", tr.iters, "Total iterations")->check(CLI::PositiveNumber);
    t->add_option("--resume", tr.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
    t->add_flag("--mr,!--no-mr", tr.use_mr, "Condition on the MR volume");
    t->add_flag("-q,--quiet", tr.quiet, "No progress output");

    DenoiseOpts dn;
    auto* d = app.add_subcommand("denoise", "Denoise a dataset split or a single volume");
    add_common(d, dn.common);
    d->add_option("--manifest,--dataset", dn.dataset, "Dataset manifest.json")->check(CLI::ExistingFile);
    d->add_option("--checkpoint", dn.checkpoint, "Trained checkpoint (.json or .bin)");
    d->add_option("--method", dn.method, "csrd or tv")->check(CLI::IsMember({"csrd", "tv"}));
    d->add_option("--label", dn.label, "Method label used in file names and reports");
    d->add_option("--split", dn.split, "Dataset split to denoise");
    d->add_option("--nfe", dn.nfe, "Denoiser evaluation budget per volume")->check(CLI::PositiveNumber);
    d->add_option("--ensemble", dn.ensemble, "Realizations per volume")->check(CLI::PositiveNumber);
    d->add_option("--tv-weight", dn.tv_weight, "Fixed TV weight")->check(CLI::PositiveNumber);
    d->add_option("--mode", dn.mode, "Sampler mode")->check(CLI::IsMember({"deterministic", "stochastic"}));
    d->add_flag("--whole,!--patch", dn.whole, "Sample the whole volume at once (default) or per patch");
    d->add_option("--input", dn.input, "Single low-dose RV3D volume")->check(CLI::ExistingFile);
    d->add_option("--mr", dn.mr_input, "MR volume for --input")->check(CLI::ExistingFile);
    d->add_option("--output-file", dn.output_file, "Output RV3D for --input");
    d->add_option("--scale", dn.scale, "Normalization scale for counts input")->check(CLI::PositiveNumber);
    d->add_option("--factor", dn.factor, "Dose reduction factor of --input")->check(CLI::PositiveNumber);

    EvaluateOpts ev;
    auto* e = app.add_subcommand("evaluate", "Score denoised volumes against the normal-dose reference");
    add_common(e, ev.common);
    e->add_option("--manifest,--dataset", ev.dataset, "Dataset manifest.json")->check(CLI::ExistingFile);
    e->add_option("--runs", ev.runs, "Denoise output directories")->check(CLI::ExistingDirectory);
    e->add_option("--ref", ev.reference, "Reference RV3D (pair mode)")->check(CLI::ExistingFile);
    e->add_option("--test", ev.test, "Test RV3D (pair mode)")->check(CLI::ExistingFile);
    e->add_option("--mask", ev.mask, "Mask RV3D restricting MAE and PSNR (pair mode)")->check(CLI::ExistingFile);
    e->add_option("--out", ev.out, "Report path; .json and .csv are written side by side");
    e->add_option("--scale", ev.scale, "Normalization scale for counts inputs")->check(CLI::PositiveNumber);
    e->add_option("--factor", ev.factor, "Dose factor of --test")->check(CLI::PositiveNumber);

    auto* v = app.add_subcommand("version", "Print the tool version");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*v) {
            std::printf("csrd %s\n", kToolVersion);
            return 0;
        }
        if (*s) return run_simulate(sim);
        if (*t) return run_train(tr);
        if (*d) return run_denoise(dn);
        if (*e) return run_evaluate(ev);
    } catch (const Error& err) {
        std::cerr << json{{"error", err.kind()}, {"message", err.what()}}.dump() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << json{{"error", "internal error"}, {"message", err.what()}}.dump() << "\n";
        return 3;
    }
    return 1;
}
