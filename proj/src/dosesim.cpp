#include "csrd/dosesim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "csrd/json_util.hpp"
#include "csrd/random.hpp"
#include "csrd/volume_io.hpp"

namespace csrd {

using nlohmann::json;
namespace fs = std::filesystem;

void ThinningSpec::validate() const {
    if (!(factor > 1.0) || !std::isfinite(factor))
        throw DomainError("thinning factor must be > 1, got " + std::to_string(factor));
}

namespace detail {

Volume3D thin_with_probability(const Volume3D& counts, double keep, std::uint64_t seed) {
    if (!(keep > 0.0 && keep <= 1.0)) throw DomainError("keep probability must lie in (0, 1]");
    if (counts.domain != Domain::counts) throw DomainError("thinning requires a counts volume");
    for (float v : counts.data.values())
        if (!(v >= 0.0f) || v != std::floor(v))
            throw DomainError("thinning requires non-negative integer counts in '" + counts.name + "'");

    Volume3D out = counts;
    if (keep == 1.0) return out;
    Rng rng = SeedStream(seed).engine();
    for (auto& v : out.data.values()) {
        std::binomial_distribution<long long> draw(static_cast<long long>(v), keep);
        v = static_cast<float>(draw(rng));
    }
    return out;
}

} // namespace detail

Volume3D poisson_thin(const Volume3D& counts, const ThinningSpec& spec) {
    spec.validate();
    auto out = detail::thin_with_probability(counts, spec.keep_probability(), spec.seed);
    out.name = counts.name + "_thin" + factor_tag(spec.factor);
    return out;
}

Volume3D normalize_counts(const Volume3D& counts, double scale, double dose_factor) {
    if (!(scale > 0.0) || !std::isfinite(scale))
        throw DomainError("normalization scale must be > 0, got " + std::to_string(scale));
    Volume3D out = counts;
    out.domain = Domain::normalized;
    const double k = dose_factor / scale;
    for (auto& v : out.data.values()) v = static_cast<float>(static_cast<double>(v) * k);
    return out;
}

double percentile(const GridF& g, double q) {
    if (g.empty()) throw DimensionError("percentile of an empty grid");
    std::vector<float> v(g.storage());
    std::sort(v.begin(), v.end());
    const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return static_cast<double>(v[lo]) * (1.0 - frac) + static_cast<double>(v[hi]) * frac;
}

bool Ellipsoid::contains(double x, double y, double z) const noexcept {
    const double dx = (x - center[0]) / radii[0];
    const double dy = (y - center[1]) / radii[1];
    const double dz = (z - center[2]) / radii[2];
    return dx * dx + dy * dy + dz * dz <= 1.0;
}

bool Ellipsoid::inside(const Vec3i& shape) const noexcept {
    for (int a = 0; a < 3; ++a) {
        if (!(radii[a] > 0.0)) return false;
        if (center[a] - radii[a] < 0.0 || center[a] + radii[a] > shape[a] - 1.0) return false;
    }
    return true;
}

void PhantomSpec::validate() const {
    if (shape[0] < 1 || shape[1] < 1 || shape[2] < 1)
        throw SpecError("phantom shape must be positive, got " + to_string(shape));
    if (n_ellipsoids < 1) throw SpecError("phantom needs at least one ellipsoid");
    if (uptake_min < 0.0 || uptake_max < uptake_min)
        throw SpecError("uptake range must satisfy 0 <= min <= max");
    if (background_uptake < 0.0) throw SpecError("background uptake must be >= 0");
    if (!ellipsoids.empty()) {
        if (static_cast<int>(ellipsoids.size()) != n_ellipsoids)
            throw SpecError("explicit ellipsoid list does not match n_ellipsoids");
        for (std::size_t i = 0; i < ellipsoids.size(); ++i) {
            if (!ellipsoids[i].inside(shape))
                throw SpecError("ellipsoid " + std::to_string(i) + " lies outside the volume");
            if (ellipsoids[i].uptake < 0.0)
                throw SpecError("ellipsoid " + std::to_string(i) + " has negative uptake");
        }
    }
    if (!mr_contrast.empty() && static_cast<int>(mr_contrast.size()) != n_ellipsoids)
        throw SpecError("mr_contrast must list one intensity per ellipsoid");
}

Phantom generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const SeedStream root(spec.seed);
    Phantom ph;
    ph.ellipsoids = spec.ellipsoids;

    if (ph.ellipsoids.empty()) {
        Rng rng = root.child(0).engine();
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (int k = 0; k < spec.n_ellipsoids; ++k) {
            Ellipsoid e;
            for (int a = 0; a < 3; ++a) {
                const double extent = spec.shape[a] - 1.0;
                const double rmax = std::max(0.5, 0.3 * extent);
                const double rmin = std::max(0.5, 0.08 * extent);
                e.radii[a] = std::min(rmin + unit(rng) * (rmax - rmin), 0.5 * extent);
                e.center[a] = e.radii[a] + unit(rng) * (extent - 2.0 * e.radii[a]);
            }
            e.uptake = spec.uptake_min + unit(rng) * (spec.uptake_max - spec.uptake_min);
            e.mr_intensity = 0.2 + 0.8 * unit(rng);
            if (!e.inside(spec.shape))
                throw SpecError("volume " + to_string(spec.shape) + " too small for ellipsoids");
            ph.ellipsoids.push_back(e);
        }
    }
    if (!spec.mr_contrast.empty())
        for (std::size_t k = 0; k < ph.ellipsoids.size(); ++k)
            ph.ellipsoids[k].mr_intensity = spec.mr_contrast[k];

    ph.labels = Grid<int>(spec.shape, 0);
    ph.uptake = GridF(spec.shape, static_cast<float>(spec.background_uptake));
    GridF contrast(spec.shape, static_cast<float>(spec.mr_background));
    for (int z = 0; z < spec.shape[2]; ++z)
        for (int y = 0; y < spec.shape[1]; ++y)
            for (int x = 0; x < spec.shape[0]; ++x)
                for (std::size_t k = 0; k < ph.ellipsoids.size(); ++k)
                    if (ph.ellipsoids[k].contains(x, y, z)) {
                        ph.labels(x, y, z) = static_cast<int>(k) + 1;
                        ph.uptake(x, y, z) = static_cast<float>(ph.ellipsoids[k].uptake);
                        contrast(x, y, z) = static_cast<float>(ph.ellipsoids[k].mr_intensity);
                    }

    GridF counts(spec.shape);
    {
        Rng rng = root.child(1).engine();
        for (std::size_t i = 0; i < counts.size(); ++i) {
            std::poisson_distribution<long long> draw(static_cast<double>(ph.uptake[i]));
            counts[i] = ph.uptake[i] > 0.0f ? static_cast<float>(draw(rng)) : 0.0f;
        }
    }
    {
        Rng rng = root.child(2).engine();
        const float peak = *std::max_element(contrast.storage().begin(), contrast.storage().end());
        std::normal_distribution<double> noise(0.0, 0.01 * peak);
        for (auto& v : contrast.values()) v = static_cast<float>(v + noise(rng));
    }
    const Vec3d spacing{1.0, 1.0, 1.0};
    ph.pet_counts = Volume3D(std::move(counts), spacing, Domain::counts, "pet");
    ph.mr = Volume3D(std::move(contrast), spacing, Domain::normalized, "mr");
    return ph;
}

std::string factor_tag(double factor) {
    char buf[32];
    if (factor == std::floor(factor))
        std::snprintf(buf, sizeof buf, "%dx", static_cast<int>(factor));
    else
        std::snprintf(buf, sizeof buf, "%gx", factor);
    return buf;
}

json to_json(const SimulateConfig& c) {
    return {{"n_train", c.n_train},
            {"n_test", c.n_test},
            {"train_factors", c.train_factors},
            {"test_factors", c.test_factors},
            {"seed", c.seed},
            {"scale_percentile", c.scale_percentile},
            {"phantom",
             {{"shape", vec_json(c.phantom.shape)},
              {"n_ellipsoids", c.phantom.n_ellipsoids},
              {"uptake_range", {c.phantom.uptake_min, c.phantom.uptake_max}},
              {"background_uptake", c.phantom.background_uptake},
              {"mr_background", c.phantom.mr_background}}}};
}

SimulateConfig simulate_config_from_json(const json& j) {
    SimulateConfig c;
    ConfigIssues issues;
    reject_unknown_keys(j, {"n_train", "n_test", "train_factors", "test_factors", "seed",
                            "scale_percentile", "phantom"},
                        "simulate", issues);
    read_field(j, "n_train", c.n_train, "simulate", issues);
    read_field(j, "n_test", c.n_test, "simulate", issues);
    read_field(j, "train_factors", c.train_factors, "simulate", issues);
    read_field(j, "test_factors", c.test_factors, "simulate", issues);
    read_field(j, "seed", c.seed, "simulate", issues);
    read_field(j, "scale_percentile", c.scale_percentile, "simulate", issues);
    if (j.is_object() && j.contains("phantom")) {
        const auto& p = j.at("phantom");
        reject_unknown_keys(p, {"shape", "n_ellipsoids", "uptake_range", "background_uptake",
                                "mr_background"},
                            "simulate.phantom", issues);
        read_field(p, "shape", c.phantom.shape, "simulate.phantom", issues);
        read_field(p, "n_ellipsoids", c.phantom.n_ellipsoids, "simulate.phantom", issues);
        std::array<double, 2> range{c.phantom.uptake_min, c.phantom.uptake_max};
        read_field(p, "uptake_range", range, "simulate.phantom", issues);
        c.phantom.uptake_min = range[0];
        c.phantom.uptake_max = range[1];
        read_field(p, "background_uptake", c.phantom.background_uptake, "simulate.phantom", issues);
        read_field(p, "mr_background", c.phantom.mr_background, "simulate.phantom", issues);
    }
    if (c.n_train < 1) issues.add("simulate.n_train must be >= 1");
    if (c.n_test < 0) issues.add("simulate.n_test must be >= 0");
    for (double f : c.train_factors)
        if (!(f > 1.0)) issues.add("simulate.train_factors entries must be > 1");
    for (double f : c.test_factors)
        if (!(f > 1.0)) issues.add("simulate.test_factors entries must be > 1");
    if (!(c.scale_percentile > 0.0 && c.scale_percentile <= 100.0))
        issues.add("simulate.scale_percentile must lie in (0, 100]");
    issues.throw_if_any("invalid simulate config");
    return c;
}

json simulate_dataset(const fs::path& out_dir, const SimulateConfig& cfg) {
    fs::create_directories(out_dir);
    const SeedStream root(cfg.seed);
    json cases = json::array();

    double res_sum = 0.0, res_sq = 0.0;
    std::size_t res_n = 0;

    const int total = cfg.n_train + cfg.n_test;
    for (int i = 0; i < total; ++i) {
        const bool train = i < cfg.n_train;
        const SeedStream cs = root.child(static_cast<std::uint64_t>(i));
        PhantomSpec spec = cfg.phantom;
        spec.seed = cs.child(0).key();
        const Phantom ph = generate_phantom(spec);

        char stem[32];
        std::snprintf(stem, sizeof stem, "phantom_%04d", i);
        const std::string s(stem);

        Volume3D nor = ph.pet_counts;
        nor.name = s + "_nor";
        Volume3D mr = ph.mr;
        mr.name = s + "_mr";
        write_rv3d(out_dir / (s + "_nor.rv3d"), nor);
        write_rv3d(out_dir / (s + "_mr.rv3d"), mr);

        const double scale = percentile(nor.data, cfg.scale_percentile);
        if (!(scale > 0.0)) throw SpecError("phantom " + s + " has a zero normalization scale");
        const Volume3D nor_n = normalize_counts(nor, scale);

        json low = json::object();
        json seeds = json::object();
        const auto& factors = train ? cfg.train_factors : cfg.test_factors;
        for (std::size_t f = 0; f < factors.size(); ++f) {
            const ThinningSpec ts{factors[f], cs.child(1 + f).key()};
            Volume3D thin = poisson_thin(nor, ts);
            thin.name = s + "_low" + factor_tag(factors[f]);
            const std::string file = thin.name + ".rv3d";
            write_rv3d(out_dir / file, thin);
            low[factor_tag(factors[f])] = {{"factor", factors[f]}, {"file", file}};
            seeds[factor_tag(factors[f])] = ts.seed;

            if (train) {
                const Volume3D low_n = normalize_counts(thin, scale, factors[f]);
                for (std::size_t v = 0; v < low_n.data.size(); ++v) {
                    const double r = static_cast<double>(low_n.data[v]) - nor_n.data[v];
                    res_sum += r;
                    res_sq += r * r;
                    ++res_n;
                }
            }
        }
        cases.push_back({{"id", s},
                         {"split", train ? "train" : "test"},
                         {"nor", s + "_nor.rv3d"},
                         {"mr", s + "_mr.rv3d"},
                         {"low", low},
                         {"scale", scale},
                         {"phantom_seed", spec.seed},
                         {"thinning_seeds", seeds}});
    }
    const double mean = res_sum / static_cast<double>(res_n);
    const double std = std::sqrt(std::max(res_sq / static_cast<double>(res_n) - mean * mean, 0.0));

    json manifest = {{"format", "csrd-dataset/1"},
                     {"shape", vec_json(cfg.phantom.shape)},
                     {"train_factors", cfg.train_factors},
                     {"test_factors", cfg.test_factors},
                     {"scale_percentile", cfg.scale_percentile},
                     {"residual_std", std},
                     {"seed", cfg.seed},
                     {"config", to_json(cfg)},
                     {"cases", cases}};
    std::ofstream os(out_dir / "manifest.json");
    if (!os) throw IoError("cannot write manifest in '" + out_dir.string() + "'");
    os << manifest.dump(2) << "\n";
    return manifest;
}

} // namespace csrd
