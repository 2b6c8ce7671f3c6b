#include <doctest.h>

#include <cmath>

#include "csrd/sampler.hpp"
#include "oracles.hpp"

using namespace csrd;

namespace {

SamplerConfig deterministic(int n_steps, std::uint64_t seed = 0) {
    SamplerConfig c;
    c.n_steps = n_steps;
    c.seed = seed;
    return c;
}

ScoreModelConfig small_model(bool use_mr) {
    ScoreModelConfig cfg;
    cfg.base_channels = 2;
    cfg.depth = 2;
    cfg.channel_mult = {1, 2};
    cfg.use_mr = use_mr;
    cfg.patch_size = {4, 4, 4};
    cfg.time_embed_dim = 4;
    cfg.norm_groups = 1;
    cfg.init_seed = 3;
    return cfg;
}

Volume3D noise_volume(const Vec3i& shape, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<float> u(0.f, 1.f);
    GridF g(shape);
    for (auto& v : g.values()) v = u(rng);
    return Volume3D(std::move(g), {1, 1, 1}, Domain::normalized, "vol");
}

} // namespace

TEST_CASE("config: NFE accounting, validation and JSON round trip") {
    CHECK(deterministic(100).nfe() == 199);
    CHECK(SamplerConfig::steps_for_nfe(100) == 50);
    CHECK(deterministic(SamplerConfig::steps_for_nfe(100)).nfe() <= 100);
    CHECK(SamplerConfig::steps_for_nfe(199) == 100);

    auto c = SamplerConfig::stochastic(20, 9);
    c.s_t_min = 0.05;
    c.s_t_max = 50.0;
    const auto back = sampler_config_from_json(to_json(c));
    CHECK(back.n_steps == 20);
    CHECK(back.s_churn == 40.0);
    CHECK(*back.s_t_min == 0.05);
    CHECK(back.mode == SamplerMode::stochastic);

    SamplerConfig bad;
    bad.s_churn = 1.0; // deterministic mode with churn
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = deterministic(1);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    auto j = to_json(c);
    j["extra"] = 1;
    CHECK_THROWS_AS(sampler_config_from_json(j), ConfigError);
}

TEST_CASE("heun_step: identity denoiser is a fixed point") {
    BatchDenoiseFn identity = [](std::span<const double> x, double, std::span<double> out) {
        std::copy(x.begin(), x.end(), out.begin());
    };
    std::vector<double> r{0.3, -1.0, 7.0};
    const auto r0 = r;
    CHECK(heun_step(r, 10.0, 5.0, identity) == 2);
    CHECK(r == r0);
    CHECK(heun_step(r, 0.002, 0.0, identity) == 1);
    CHECK(r == r0);
    CHECK_THROWS_AS(heun_step(r, 1.0, 2.0, identity), DomainError);
}

TEST_CASE("heun_step: one step on the Gaussian flow") {
    const oracle::Gaussian g{0.0, 1.0};
    // Hand-expanded trapezoid predictor/corrector for r' = r t / (1 + t^2).
    for (double x0 : {-3.0, 0.5, 12.0}) {
        std::vector<double> r{x0};
        heun_step(r, 10.0, 5.0, g.fn());
        const double k1 = x0 * 10.0 / 101.0;
        const double pred = x0 - 5.0 * k1;
        const double k2 = pred * 5.0 / 26.0;
        CHECK(r[0] == doctest::Approx(x0 - 2.5 * (k1 + k2)).epsilon(1e-14));
        // A single coarse step already lands within half a percent of the flow.
        const double exact = g.flow(x0, 10.0, 5.0);
        CHECK(std::abs(r[0] - exact) / std::abs(exact) < 5e-3);
    }
    // Halving a small step shrinks the local error about eight-fold.
    std::vector<double> a{2.0}, b{2.0};
    heun_step(a, 2.0, 1.8, g.fn());
    heun_step(b, 2.0, 1.9, g.fn());
    const double ea = std::abs(a[0] - g.flow(2.0, 2.0, 1.8));
    const double eb = std::abs(b[0] - g.flow(2.0, 2.0, 1.9));
    CHECK(ea / eb > 7.0);
    CHECK(ea / eb < 9.0);
}

TEST_CASE("heun_step: non-finite denoiser output is a numeric error") {
    BatchDenoiseFn broken = [](std::span<const double>, double, std::span<double> out) {
        std::fill(out.begin(), out.end(), std::nan(""));
    };
    std::vector<double> r{1.0};
    CHECK_THROWS_AS(heun_step(r, 1.0, 0.5, broken), NumericError);
    const SeedStream s(1);
    CHECK_THROWS_AS(integrate(3, broken, deterministic(4), NoiseSchedule{}, s), NumericError);
}

TEST_CASE("integrate: deterministic global error is second order") {
    const oracle::Gaussian g{0.3, 1.0};
    const NoiseSchedule sched;
    std::vector<double> errors;
    for (int n : {10, 20, 40, 80}) {
        const auto sig = discretize_sigmas(n, sched);
        std::vector<double> r{sig[0] * 0.7};
        for (int i = 0; i < n; ++i) heun_step(r, sig[i], sig[i + 1], g.fn());
        errors.push_back(std::abs(r[0] - g.flow(sig[0] * 0.7, sig[0], 0.0)));
    }
    for (std::size_t i = 1; i < errors.size(); ++i) {
        const double ratio = errors[i - 1] / errors[i];
        CHECK(ratio >= 3.0);
        CHECK(ratio <= 5.0);
    }
}

TEST_CASE("integrate: Gaussian oracle recovers the target distribution") {
    const oracle::Gaussian g{0.3, 1.0};
    const auto tr = integrate(10000, g.fn(), deterministic(100, 42), NoiseSchedule{}, SeedStream(42));
    CHECK(tr.nfe == 199);
    CHECK(std::abs(oracle::mean(tr.values) - 0.3) < 3.0 / 100.0);
    CHECK(std::abs(oracle::stddev(tr.values) - 1.0) < 0.05);
    CHECK(oracle::ks_p_value(tr.values, 0.3, 1.0) > 0.01);

    const auto st = integrate(10000, g.fn(), SamplerConfig::stochastic(100, 7), NoiseSchedule{}, SeedStream(7));
    CHECK(st.nfe == 199);
    CHECK(std::abs(oracle::mean(st.values) - 0.3) < 3.0 / 100.0);
    CHECK(std::abs(oracle::stddev(st.values) - 1.0) < 0.05);
}

TEST_CASE("integrate: seeds control the draws") {
    const oracle::Gaussian g{0.0, 2.0};
    const auto a = integrate(50, g.fn(), SamplerConfig::stochastic(8, 1), NoiseSchedule{}, SeedStream(5));
    const auto b = integrate(50, g.fn(), SamplerConfig::stochastic(8, 1), NoiseSchedule{}, SeedStream(5));
    const auto c = integrate(50, g.fn(), SamplerConfig::stochastic(8, 1), NoiseSchedule{}, SeedStream(6));
    CHECK(a.values == b.values);
    CHECK(a.values != c.values);
}

TEST_CASE("churn schedule covers the middle of the grid") {
    const auto sig = discretize_sigmas(50, NoiseSchedule{});
    const auto ch = churn_schedule(sig, SamplerConfig::stochastic(50, 0));
    int active = 0;
    for (const auto& c : ch) active += c.gamma > 0.0;
    CHECK(active >= 38);
    CHECK(active <= 42);
    CHECK(ch.front().gamma == 0.0);
    CHECK(ch.back().gamma == 0.0);
    CHECK(ch[25].gamma == doctest::Approx(std::min(40.0 / 50, std::sqrt(2.0) - 1)));
    for (const auto& c : churn_schedule(sig, deterministic(50))) CHECK(c.gamma == 0.0);
}

TEST_CASE("ensemble spread with the Gaussian oracle matches the target std") {
    const oracle::Gaussian g{0.0, 1.0};
    const int members = 32;
    const std::size_t voxels = 400;
    std::vector<std::vector<double>> runs;
    for (int m = 0; m < members; ++m)
        runs.push_back(integrate(voxels, g.fn(), SamplerConfig::stochastic(30, 0), NoiseSchedule{},
                                 SeedStream(100).child(m))
                           .values);
    double avg_std = 0.0;
    for (std::size_t v = 0; v < voxels; ++v) {
        std::vector<double> column;
        for (const auto& r : runs) column.push_back(r[v]);
        avg_std += oracle::stddev(column);
    }
    avg_std /= voxels;
    CHECK(std::abs(avg_std - 1.0) < 0.1);
}

TEST_CASE("sample_residual: invariants, determinism and whole vs single patch") {
    ScoreModel model(small_model(true), NoiseSchedule{});
    Rng rng(4);
    model.randomize_head(rng);
    const auto low = noise_volume({8, 8, 4}, 1);
    const auto mr = noise_volume({8, 8, 4}, 2);
    const auto cfg = deterministic(5, 11);

    const auto whole = sample_residual(model, low, &mr, std::nullopt, cfg, 0.5);
    CHECK(whole.nfe_used == cfg.nfe());
    CHECK(apply_residual(low, whole.residual).data == whole.denoised.data);
    CHECK(whole.per_patch_seams == 0.0);

    const auto again = sample_residual(model, low, &mr, std::nullopt, cfg, 0.5);
    CHECK(again.denoised.data == whole.denoised.data);
    CHECK(again.residual.data == whole.residual.data);

    const auto single = sample_residual(model, low, &mr, tile(low.shape(), low.shape(), low.shape()), cfg, 0.5);
    CHECK(single.denoised.data == whole.denoised.data);

    const auto patched = sample_residual(model, low, &mr, tile(low.shape(), {4, 4, 4}, {4, 4, 4}), cfg, 0.5);
    CHECK(patched.nfe_used == cfg.nfe());
    CHECK(apply_residual(low, patched.residual).data == patched.denoised.data);
    CHECK(patched.seeds["patch_keys"].size() == 4);

    auto batched = cfg;
    batched.patch_batch = 1;
    const auto one_by_one = sample_residual(model, low, &mr, tile(low.shape(), {4, 4, 4}, {4, 4, 4}), batched, 0.5);
    CHECK(one_by_one.nfe_used == cfg.nfe());

    CHECK_THROWS_AS(sample_residual(model, low, nullptr, std::nullopt, cfg), ConfigError);
    const auto odd = noise_volume({6, 8, 4}, 3);
    CHECK_THROWS_AS(sample_residual(model, odd, &odd, std::nullopt, cfg), ConfigError);
    CHECK_THROWS_AS(sample_residual(model, low, &odd, std::nullopt, cfg), ConfigError);

    ScoreModel plain(small_model(false), NoiseSchedule{});
    CHECK_THROWS_AS(sample_residual(plain, low, &mr, std::nullopt, cfg), ConfigError);
}

TEST_CASE("sample_ensemble: member count, std volume, identical-seed spread") {
    ScoreModel model(small_model(false), NoiseSchedule{});
    Rng rng(5);
    model.randomize_head(rng);
    const auto low = noise_volume({4, 4, 4}, 1);
    const auto ens = sample_ensemble(model, low, nullptr, std::nullopt, deterministic(4, 3), 3);
    CHECK(ens.members.size() == 3);
    CHECK(ens.stddev.shape() == low.shape());
    double spread = 0.0;
    for (float v : ens.stddev.values()) spread += v;
    CHECK(spread > 0.0);

    const auto a = sample_residual(model, low, nullptr, std::nullopt, deterministic(4, 3));
    const std::vector<Volume3D> same{a.denoised, a.denoised};
    const GridF zero_spread = voxelwise_std(same);
    for (float v : zero_spread.values()) CHECK(v == 0.0f);

    CHECK_THROWS_AS(sample_ensemble(model, low, nullptr, std::nullopt, deterministic(4, 3), 1), ConfigError);
}
