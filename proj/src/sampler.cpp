#include "csrd/sampler.hpp"

#include <cmath>
#include <limits>

#include "csrd/json_util.hpp"

namespace csrd {

using nlohmann::json;

std::string to_string(SamplerMode m) { return m == SamplerMode::deterministic ? "deterministic" : "stochastic"; }

SamplerMode sampler_mode_from_string(const std::string& s) {
    if (s == "deterministic") return SamplerMode::deterministic;
    if (s == "stochastic") return SamplerMode::stochastic;
    throw ConfigError("unknown sampler mode '" + s + "' (expected deterministic or stochastic)");
}

SamplerConfig SamplerConfig::stochastic(int n_steps, std::uint64_t seed) {
    SamplerConfig c;
    c.n_steps = n_steps;
    c.s_churn = 40.0;
    c.s_noise = 1.003;
    c.mode = SamplerMode::stochastic;
    c.seed = seed;
    return c;
}

int SamplerConfig::steps_for_nfe(int nfe) {
    if (nfe < 3) throw ConfigError("an NFE budget below 3 cannot hold two steps");
    return (nfe + 1) / 2;
}

void SamplerConfig::validate() const {
    ConfigIssues issues;
    if (n_steps < 2) issues.add("sampler.n_steps must be >= 2");
    if (!(s_churn >= 0.0)) issues.add("sampler.s_churn must be >= 0");
    if (!(s_noise > 0.0)) issues.add("sampler.s_noise must be > 0");
    if ((mode == SamplerMode::deterministic) != (s_churn == 0.0))
        issues.add("sampler.mode deterministic requires s_churn = 0 and stochastic requires s_churn > 0");
    if (s_t_min && s_t_max && *s_t_min > *s_t_max) issues.add("sampler.s_t_min must not exceed s_t_max");
    if (s_t_min.has_value() != s_t_max.has_value()) issues.add("sampler.s_t_min and s_t_max are set together");
    if (patch_batch < 1) issues.add("sampler.patch_batch must be >= 1");
    issues.throw_if_any("invalid sampler config");
}

json to_json(const SamplerConfig& c) {
    json j{{"n_steps", c.n_steps}, {"s_churn", c.s_churn}, {"s_noise", c.s_noise},
           {"mode", to_string(c.mode)}, {"seed", c.seed}, {"patch_batch", c.patch_batch}};
    j["s_t_min"] = c.s_t_min ? json(*c.s_t_min) : json(nullptr);
    j["s_t_max"] = c.s_t_max ? json(*c.s_t_max) : json(nullptr);
    return j;
}

SamplerConfig sampler_config_from_json(const json& j) {
    SamplerConfig c;
    ConfigIssues issues;
    reject_unknown_keys(j, {"n_steps", "s_churn", "s_noise", "s_t_min", "s_t_max", "mode", "seed", "patch_batch"},
                        "sampler", issues);
    read_field(j, "n_steps", c.n_steps, "sampler", issues);
    read_field(j, "s_churn", c.s_churn, "sampler", issues);
    read_field(j, "s_noise", c.s_noise, "sampler", issues);
    read_field(j, "seed", c.seed, "sampler", issues);
    read_field(j, "patch_batch", c.patch_batch, "sampler", issues);
    for (const char* key : {"s_t_min", "s_t_max"}) {
        if (!j.contains(key) || j[key].is_null()) continue;
        double v = 0.0;
        read_field(j, key, v, "sampler", issues);
        (std::string(key) == "s_t_min" ? c.s_t_min : c.s_t_max) = v;
    }
    if (j.contains("mode")) {
        std::string m;
        read_field(j, "mode", m, "sampler", issues);
        try {
            c.mode = sampler_mode_from_string(m);
        } catch (const ConfigError& e) {
            issues.add(e.what());
        }
    }
    issues.throw_if_any("invalid sampler config");
    c.validate();
    return c;
}

namespace {

void checked_denoise(const BatchDenoiseFn& denoise, std::span<const double> x, double sigma, std::span<double> out,
                     const char* stage) {
    denoise(x, sigma, out);
    for (double v : out)
        if (!std::isfinite(v))
            throw NumericError(std::string("non-finite denoiser output in ") + stage + " at sigma " +
                               std::to_string(sigma));
}

} // namespace

int heun_step(std::vector<double>& r, double t_cur, double t_next, const BatchDenoiseFn& denoise,
              const ChurnParams& churn, std::span<const double> eps) {
    if (!(t_cur > t_next) || t_next < 0.0)
        throw DomainError("heun_step requires t_cur > t_next >= 0, got " + std::to_string(t_cur) + " -> " +
                          std::to_string(t_next));
    const std::size_t n = r.size();
    const double t_hat = t_cur * (1.0 + churn.gamma);
    if (churn.gamma > 0.0) {
        if (eps.size() != n) throw ConfigError("heun_step: churn needs one noise draw per value");
        const double amp = std::sqrt(t_hat * t_hat - t_cur * t_cur) * churn.s_noise;
        for (std::size_t i = 0; i < n; ++i) r[i] += amp * eps[i];
    }
    std::vector<double> d(n), slope(n), r_next(n);
    checked_denoise(denoise, r, t_hat, d, "euler step");
    const double h = t_next - t_hat;
    for (std::size_t i = 0; i < n; ++i) {
        slope[i] = (r[i] - d[i]) / t_hat;
        r_next[i] = r[i] + h * slope[i];
    }
    if (t_next == 0.0) {
        r = std::move(r_next);
        return 1;
    }
    checked_denoise(denoise, r_next, t_next, d, "correction");
    for (std::size_t i = 0; i < n; ++i) {
        const double slope2 = (r_next[i] - d[i]) / t_next;
        r[i] = r[i] + h * 0.5 * (slope[i] + slope2);
    }
    return 2;
}

std::vector<ChurnParams> churn_schedule(const std::vector<double>& sigmas, const SamplerConfig& cfg) {
    const int n = static_cast<int>(sigmas.size()) - 1;
    std::vector<ChurnParams> out(static_cast<std::size_t>(n));
    if (cfg.mode == SamplerMode::deterministic) return out;
    double lo = 0.0, hi = 0.0;
    if (cfg.s_t_min) {
        lo = *cfg.s_t_min;
        hi = *cfg.s_t_max;
    } else {
        hi = sigmas[static_cast<std::size_t>(std::lround(0.1 * (n - 1)))];
        lo = sigmas[static_cast<std::size_t>(std::lround(0.9 * (n - 1)))];
    }
    const double gamma = std::min(cfg.s_churn / n, std::sqrt(2.0) - 1.0);
    for (int i = 0; i < n; ++i)
        if (sigmas[i] >= lo && sigmas[i] <= hi) out[i] = {gamma, cfg.s_noise};
    return out;
}

namespace {

/// Integrates several independent segments, each with its own seed stream, as
/// one batch so the denoiser sees them together.
Trajectory integrate_segments(std::span<const SeedStream> streams, std::size_t seg_len, const BatchDenoiseFn& denoise,
                              const SamplerConfig& cfg, const NoiseSchedule& sched) {
    cfg.validate();
    const auto sigmas = discretize_sigmas(cfg.n_steps, sched);
    const auto churn = churn_schedule(sigmas, cfg);
    Trajectory tr;
    tr.values.resize(streams.size() * seg_len);
    for (std::size_t s = 0; s < streams.size(); ++s) {
        Rng rng = streams[s].child(0).engine();
        std::normal_distribution<double> nd;
        for (std::size_t i = 0; i < seg_len; ++i) tr.values[s * seg_len + i] = sigmas[0] * nd(rng);
    }
    for (int i = 0; i < cfg.n_steps; ++i) {
        const ChurnParams& c = churn[static_cast<std::size_t>(i)];
        std::vector<double> eps;
        if (c.gamma > 0.0) {
            eps.resize(tr.values.size());
            for (std::size_t s = 0; s < streams.size(); ++s) {
                Rng rng = streams[s].child(1 + static_cast<std::uint64_t>(i)).engine();
                std::normal_distribution<double> nd;
                for (std::size_t k = 0; k < seg_len; ++k) eps[s * seg_len + k] = nd(rng);
            }
        }
        try {
            tr.nfe += heun_step(tr.values, sigmas[i], sigmas[i + 1], denoise, c, eps);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (step " + std::to_string(i) + " of " +
                               std::to_string(cfg.n_steps) + ")");
        }
    }
    return tr;
}

} // namespace

Trajectory integrate(std::size_t count, const BatchDenoiseFn& denoise, const SamplerConfig& cfg,
                     const NoiseSchedule& sched, const SeedStream& stream) {
    const SeedStream streams[1] = {stream};
    return integrate_segments(streams, count, denoise, cfg, sched);
}

namespace {

double seam_diagnostic(const GridD& r, const TilingPlan& plan) {
    const Vec3i& s = r.shape();
    std::array<std::vector<bool>, 3> starts;
    for (int a = 0; a < 3; ++a) {
        starts[a].assign(static_cast<std::size_t>(s[a]), false);
        for (const auto& reg : plan.regions)
            if (reg.origin[a] > 0) starts[a][static_cast<std::size_t>(reg.origin[a])] = true;
    }
    double seam = 0.0, inner = 0.0;
    std::size_t n_seam = 0, n_inner = 0;
    for (int z = 0; z < s[2]; ++z)
        for (int y = 0; y < s[1]; ++y)
            for (int x = 0; x < s[0]; ++x) {
                const Vec3i p{x, y, z};
                for (int a = 0; a < 3; ++a) {
                    if (p[a] == 0) continue;
                    Vec3i q = p;
                    --q[a];
                    const double jump = std::abs(r(p[0], p[1], p[2]) - r(q[0], q[1], q[2]));
                    if (starts[a][static_cast<std::size_t>(p[a])]) {
                        seam += jump;
                        ++n_seam;
                    } else {
                        inner += jump;
                        ++n_inner;
                    }
                }
            }
    if (n_seam == 0 || n_inner == 0) return 0.0;
    return seam / n_seam - inner / n_inner;
}

} // namespace

DenoiseResult sample_residual(ScoreModel& model, const Volume3D& low, const Volume3D* mr,
                              const std::optional<TilingPlan>& plan, const SamplerConfig& cfg,
                              double residual_scale) {
    cfg.validate();
    low.validate();
    if (low.domain != Domain::normalized) throw DomainError("sampling requires a normalized low-dose volume");
    const bool use_mr = model.config().use_mr;
    if (use_mr != (mr != nullptr))
        throw ConfigError(use_mr ? "model was trained with an MR prior; supply one"
                                 : "model was trained without an MR prior; do not supply one");
    if (mr && (mr->shape() != low.shape() || mr->spacing != low.spacing))
        throw ConfigError("MR prior " + to_string(mr->shape()) + " is not co-registered with low-dose " +
                          to_string(low.shape()));

    const TilingPlan tp = plan ? *plan : whole_volume_plan(low.shape());
    if (tp.shape != low.shape()) throw ConfigError("tiling plan shape does not match the volume");
    const int mult = model.config().spatial_multiple();
    for (const auto& reg : tp.regions)
        for (int a = 0; a < 3; ++a)
            if (reg.size[a] % mult != 0)
                throw ConfigError("region extent " + to_string(reg.size) + " is not a multiple of " +
                                  std::to_string(mult) + " required by the model depth");

    VolumeTriple vt;
    vt.low = low.data;
    if (mr) vt.mr = mr->data;
    const int k = condition_channels(use_mr);
    const SeedStream run(cfg.seed);

    std::vector<std::pair<PatchRegion, GridD>> patches;
    int nfe = 0;
    json patch_keys = json::array();
    std::size_t first = 0;
    while (first < tp.regions.size()) {
        const std::size_t last = std::min(tp.regions.size(), first + static_cast<std::size_t>(cfg.patch_batch));
        const Vec3i size = tp.regions[first].size;
        std::size_t group_end = first;
        while (group_end < last && tp.regions[group_end].size == size) ++group_end;
        const int B = static_cast<int>(group_end - first);
        const std::size_t V = voxel_count(size);

        nn::Tensor<float> cond(B, k, size);
        std::vector<SeedStream> streams;
        for (int b = 0; b < B; ++b) {
            fill_condition(vt, tp.regions[first + b], use_mr, cond.sample(b));
            streams.push_back(run.child(first + b));
            patch_keys.push_back(streams.back().key());
        }
        nn::Tensor<float> noisy(B, 1, size);
        BatchDenoiseFn fn = [&](std::span<const double> x, double sigma, std::span<double> out) {
            for (std::size_t i = 0; i < x.size(); ++i) noisy[i] = static_cast<float>(x[i]);
            const std::vector<double> sig(static_cast<std::size_t>(B), sigma);
            const auto d = model.denoise(noisy, cond, sig, false);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i];
        };
        const Trajectory tr = integrate_segments(streams, V, fn, cfg, model.schedule());
        nfe = tr.nfe;
        for (int b = 0; b < B; ++b) {
            GridD g(size);
            for (std::size_t i = 0; i < V; ++i) g[i] = tr.values[b * V + i] * residual_scale;
            patches.emplace_back(tp.regions[first + b], std::move(g));
        }
        first = group_end;
    }

    const GridD stitched = stitch(patches, tp, low.shape());
    DenoiseResult res;
    res.denoised = low;
    res.denoised.name = low.name.empty() ? "denoised" : low.name + "_denoised";
    GridD snapped(low.shape());
    for (std::size_t i = 0; i < stitched.size(); ++i) {
        const double lo = low.data[i];
        const float d = static_cast<float>(lo - stitched[i]);
        res.denoised.data[i] = d;
        snapped[i] = lo - static_cast<double>(d);
    }
    res.residual = ResidualVolume{std::move(snapped), std::make_shared<const Volume3D>(low)};
    res.nfe_used = nfe;
    res.per_patch_seams = seam_diagnostic(stitched, tp);
    res.seeds = {{"run_seed", cfg.seed}, {"patch_keys", patch_keys}};
    return res;
}

GridF voxelwise_std(std::span<const Volume3D> volumes) {
    if (volumes.empty()) throw ConfigError("voxelwise_std needs at least one volume");
    const Vec3i shape = volumes.front().shape();
    for (const auto& v : volumes) require_same_shape(v.data, volumes.front().data, "voxelwise_std");
    GridF out(shape);
    const double n = static_cast<double>(volumes.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double mean = 0.0;
        for (const auto& v : volumes) mean += v.data[i];
        mean /= n;
        double var = 0.0;
        for (const auto& v : volumes) var += (v.data[i] - mean) * (v.data[i] - mean);
        out[i] = static_cast<float>(std::sqrt(var / n));
    }
    return out;
}

Ensemble sample_ensemble(ScoreModel& model, const Volume3D& low, const Volume3D* mr,
                         const std::optional<TilingPlan>& plan, const SamplerConfig& cfg, int n_realizations,
                         double residual_scale) {
    if (n_realizations < 2) throw ConfigError("an ensemble needs at least 2 realizations");
    Ensemble e;
    std::vector<Volume3D> denoised;
    const SeedStream run(cfg.seed);
    for (int m = 0; m < n_realizations; ++m) {
        SamplerConfig member = cfg;
        member.seed = run.child(static_cast<std::uint64_t>(m)).key();
        e.members.push_back(sample_residual(model, low, mr, plan, member, residual_scale));
        denoised.push_back(e.members.back().denoised);
    }
    e.stddev = voxelwise_std(denoised);
    return e;
}

} // namespace csrd
