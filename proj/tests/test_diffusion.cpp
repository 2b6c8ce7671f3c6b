#include <doctest.h>

#include <cmath>
#include <limits>

#include "csrd/diffusion.hpp"
#include "csrd/scorenet.hpp"
#include "oracles.hpp"

using namespace csrd;

namespace {

template <typename T>
class IdentityDenoiser final : public Denoiser<T> {
public:
    nn::Tensor<T> denoise(const nn::Tensor<T>& noisy, const nn::Tensor<T>&, std::span<const double>, bool) override {
        return noisy;
    }
};

/// Returns a stored target regardless of input: the "cheating" denoiser.
class FixedDenoiser final : public Denoiser<double> {
public:
    explicit FixedDenoiser(nn::Tensor<double> out) : out_(std::move(out)) {}
    nn::Tensor<double> denoise(const nn::Tensor<double>&, const nn::Tensor<double>&, std::span<const double>,
                               bool) override {
        return out_;
    }

private:
    nn::Tensor<double> out_;
};

/// D = c everywhere, one trainable scalar.
class ConstantDenoiser final : public Denoiser<double> {
public:
    ConstantDenoiser() : c_("c", 1) {}
    nn::Tensor<double> denoise(const nn::Tensor<double>& noisy, const nn::Tensor<double>&, std::span<const double>,
                               bool) override {
        return nn::Tensor<double>(noisy.n(), 1, noisy.spatial(), c_.value[0]);
    }
    void backward(const nn::Tensor<double>& g) override {
        for (double v : g.storage()) c_.grad[0] += v;
    }
    std::vector<nn::Param<double>*> parameters() override { return {&c_}; }
    nn::Param<double> c_;
};

/// Emits NaN everywhere.
class ExplodingDenoiser final : public Denoiser<float> {
public:
    nn::Tensor<float> denoise(const nn::Tensor<float>& noisy, const nn::Tensor<float>&, std::span<const double>,
                              bool) override {
        return nn::Tensor<float>(noisy.n(), 1, noisy.spatial(), std::numeric_limits<float>::quiet_NaN());
    }
};

nn::Tensor<double> gaussian_tensor(int n, int c, const Vec3i& s, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    nn::Tensor<double> t(n, c, s);
    for (auto& v : t.storage()) v = g(rng);
    return t;
}

std::vector<double> log_spaced(double lo, double hi, int n) {
    std::vector<double> out;
    for (int i = 0; i < n; ++i) out.push_back(std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / (n - 1)));
    return out;
}

} // namespace

TEST_CASE("sigma(t) = t and its derivative") {
    const NoiseSchedule s;
    CHECK(sigma_of_t(0.0, s) == 0.0);
    CHECK(sigma_of_t(80.0, s) == 80.0);
    const double h = 1e-6;
    const double fd = (0.5 * std::pow(sigma_of_t(2 + h, s), 2) - 0.5 * std::pow(sigma_of_t(2 - h, s), 2)) / (2 * h);
    CHECK(sigma_dot(2.0, s) * sigma_of_t(2.0, s) == doctest::Approx(fd).epsilon(1e-8));
    CHECK_THROWS_AS(sigma_of_t(-1.0, s), DomainError);
}

TEST_CASE("discretize_sigmas: end points, terminal zero, strict decrease") {
    const NoiseSchedule s;
    for (int n : {2, 3, 10, 100, 257}) {
        const auto t = discretize_sigmas(n, s);
        REQUIRE(t.size() == static_cast<std::size_t>(n) + 1);
        CHECK(t.front() == 80.0);
        CHECK(t[n - 1] == 0.002);
        CHECK(t.back() == 0.0);
        for (std::size_t i = 1; i < t.size(); ++i) CHECK(t[i] < t[i - 1]);
    }
    CHECK_THROWS_AS(discretize_sigmas(1, s), ConfigError);
}

TEST_CASE("sample_training_sigma: log-normal moments") {
    const NoiseSchedule s;
    Rng rng(1);
    std::vector<double> logs;
    for (int i = 0; i < 100000; ++i) {
        const double sig = sample_training_sigma(rng, s);
        REQUIRE(sig > 0.0);
        logs.push_back(std::log(sig));
    }
    CHECK(std::abs(oracle::mean(logs) - s.p_mean) / std::abs(s.p_mean) < 0.01);
    CHECK(std::abs(oracle::stddev(logs) - s.p_std) / s.p_std < 0.02);
    Rng a(9), b(9);
    CHECK(sample_training_sigma(a, s) == sample_training_sigma(b, s));
}

TEST_CASE("preconditioning coefficients and weight identity") {
    const NoiseSchedule s;
    const auto at_data = preconditioning(s.sigma_data, s);
    CHECK(at_data.c_skip == doctest::Approx(0.5));
    CHECK(at_data.c_out == doctest::Approx(s.sigma_data / std::sqrt(2.0)));
    CHECK(at_data.c_in == doctest::Approx(1.0 / (s.sigma_data * std::sqrt(2.0))));
    const auto tiny = preconditioning(1e-9, s);
    CHECK(tiny.c_skip == doctest::Approx(1.0));
    CHECK(tiny.c_out < 1e-8);
    for (double sig : log_spaced(0.002, 80.0, 100)) {
        const auto p = preconditioning(sig, s);
        CHECK(p.c_in * p.c_in * (sig * sig + s.sigma_data * s.sigma_data) == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(loss_weight(sig, s) * p.c_out * p.c_out == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(p.c_noise == doctest::Approx(std::log(sig) / 4));
    }
    CHECK_THROWS_AS(preconditioning(0.0, s), DomainError);
    CHECK_THROWS_AS(loss_weight(-1.0, s), DomainError);

    GridD raw({2, 1, 1}), noisy({2, 1, 1});
    raw[0] = 1.0;
    noisy[0] = 2.0;
    const auto d = precondition(raw, noisy, 1.0, s);
    const auto p = preconditioning(1.0, s);
    CHECK(d[0] == doctest::Approx(p.c_skip * 2.0 + p.c_out * 1.0));
    CHECK(d[1] == 0.0);
}

TEST_CASE("schedule JSON round trip is bit-exact and strict") {
    NoiseSchedule s;
    s.sigma_min = 0.1 + 0.2; // not representable in short decimal
    s.p_mean = -1.0 / 3.0;
    CHECK(schedule_from_json(nlohmann::json::parse(to_json(s).dump())) == s);
    auto j = to_json(s);
    j["beta"] = 1;
    CHECK_THROWS_AS(schedule_from_json(j), ConfigError);
    j = to_json(s);
    j["sigma_max"] = 0.0;
    CHECK_THROWS_AS(schedule_from_json(j), ConfigError);
}

TEST_CASE("score_from_denoiser: fixed point, scalar case and Gaussian oracle") {
    GridD x({3, 1, 1}, 0.7);
    for (double v : score_from_denoiser(x, x, 2.0).storage()) CHECK(v == 0.0);
    GridD zero({1, 1, 1}, 0.0), one({1, 1, 1}, 1.0);
    CHECK(score_from_denoiser(zero, one, 1.0)[0] == -1.0);
    CHECK_THROWS_AS(score_from_denoiser(zero, one, 0.0), DomainError);

    const oracle::Gaussian g{0.3, 1.0};
    Rng rng(2);
    std::normal_distribution<double> nd;
    for (double sig : log_spaced(0.002, 80.0, 100)) {
        GridD r({16, 1, 1}), d({16, 1, 1});
        for (std::size_t i = 0; i < r.size(); ++i) {
            r[i] = g.mu + std::sqrt(1.0 + sig * sig) * nd(rng);
            d[i] = g.denoise(r[i], sig);
        }
        const auto score = score_from_denoiser(d, r, sig);
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i) {
            const double e = g.score(r[i], sig);
            num += (score[i] - e) * (score[i] - e);
            den += e * e;
        }
        CHECK(std::sqrt(num / den) <= 1e-10);
    }
}

TEST_CASE("dsm_loss: cheating denoiser, identity denoiser moment, NaN context") {
    const NoiseSchedule s;
    Rng rng(4);
    const auto y = gaussian_tensor(1, 1, {4, 4, 4}, rng);
    const nn::Tensor<double> cond(1, 4, {4, 4, 4});
    FixedDenoiser cheat(y);
    const auto noise = gaussian_tensor(1, 1, {4, 4, 4}, rng, 0.7);
    const auto rec = dsm_loss<double>(cheat, y, cond, 0.7, noise, s);
    CHECK(rec.per_patch_loss == 0.0);
    CHECK(rec.weight == doctest::Approx(loss_weight(0.7, s)));

    IdentityDenoiser<double> id;
    double acc = 0.0;
    const double sigma = 1.3;
    for (int i = 0; i < 10000; ++i) {
        const auto n = gaussian_tensor(1, 1, {2, 2, 2}, rng, sigma);
        const nn::Tensor<double> yy(1, 1, {2, 2, 2}, 0.5);
        acc += dsm_loss<double>(id, yy, nn::Tensor<double>(1, 4, {2, 2, 2}), sigma, n, s).per_patch_loss /
               loss_weight(sigma, s);
    }
    CHECK(std::abs(acc / 10000 - sigma * sigma) / (sigma * sigma) < 0.02);

    ExplodingDenoiser boom;
    const PatchRegion where{{8, 0, 0}, {2, 2, 2}, {10, 2, 2}};
    try {
        dsm_loss<float>(boom, nn::Tensor<float>(1, 1, {2, 2, 2}), nn::Tensor<float>(1, 4, {2, 2, 2}), 0.5,
                        nn::Tensor<float>(1, 1, {2, 2, 2}), s, where);
        FAIL("expected a numeric error");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("0.5") != std::string::npos);
        CHECK(msg.find("(8,0,0)") != std::string::npos);
    }
    CHECK_THROWS_AS(dsm_loss<double>(id, y, cond, 0.0, noise, s), DomainError);
}

TEST_CASE("dsm_loss: constant model converges to the single data point") {
    const NoiseSchedule s;
    ConstantDenoiser model;
    model.c_.value[0] = -2.0;
    const nn::Tensor<double> y(1, 1, {2, 2, 2}, 0.37);
    const nn::Tensor<double> cond(1, 4, {2, 2, 2});
    Rng rng(8);
    nn::Adam<double> opt(model.parameters(), {.lr = 0.05});
    for (int it = 0; it < 3000; ++it) {
        model.c_.zero_grad();
        const double sig = sample_training_sigma(rng, s);
        const auto n = gaussian_tensor(1, 1, {2, 2, 2}, rng, sig);
        const double sig_arr[1] = {sig};
        dsm_loss_batch<double>(model, y, cond, sig_arr, n, s, true);
        opt.step();
    }
    CHECK(std::abs(model.c_.value[0] - 0.37) < 1e-3);
}

TEST_CASE("dsm_loss_batch gradients match finite differences on a tiny score model") {
    // 10 random configurations: weights, sigmas, data and noise all redrawn.
    for (std::uint64_t cfg_seed = 0; cfg_seed < 10; ++cfg_seed) {
        ScoreModelConfig mc;
        mc.base_channels = 1;
        mc.depth = 2;
        mc.channel_mult = {1, 2};
        mc.use_mr = cfg_seed % 2 == 0;
        mc.patch_size = {4, 4, 4};
        mc.time_embed_dim = 4;
        mc.norm_groups = 1;
        mc.init_seed = cfg_seed;
        BasicScoreModel<double> model(mc, NoiseSchedule{});
        REQUIRE(model.parameter_count() <= 1000);
        Rng rng(cfg_seed + 50);
        model.randomize_head(rng);
        for (auto* p : model.parameters())
            if (p->name.find("mod") != std::string::npos)
                for (auto& v : p->value) v = 0.2 * std::normal_distribution<double>()(rng);

        const int k = condition_channels(mc.use_mr);
        const auto y = gaussian_tensor(2, 1, {4, 4, 4}, rng, 0.5);
        const auto cond = gaussian_tensor(2, k, {4, 4, 4}, rng);
        std::vector<double> sig{sample_training_sigma(rng, model.schedule()), sample_training_sigma(rng, model.schedule())};
        nn::Tensor<double> noise = gaussian_tensor(2, 1, {4, 4, 4}, rng);
        for (int i = 0; i < 2; ++i)
            for (std::size_t v = 0; v < 64; ++v) noise.sample(i)[v] *= sig[i];

        model.zero_grad();
        dsm_loss_batch<double>(model, y, cond, sig, noise, model.schedule(), true);
        auto loss = [&] { return dsm_loss_batch<double>(model, y, cond, sig, noise, model.schedule(), false).mean; };

        double worst = 0.0;
        for (auto* p : model.parameters()) {
            const std::size_t stride = std::max<std::size_t>(1, p->size() / 6);
            for (std::size_t i = 0; i < p->size(); i += stride) {
                const double keep = p->value[i], h = 1e-5;
                p->value[i] = keep + h;
                const double up = loss();
                p->value[i] = keep - h;
                const double down = loss();
                p->value[i] = keep;
                const double fd = (up - down) / (2 * h);
                const double scale = std::max(std::abs(fd) + std::abs(p->grad[i]), 1e-3);
                worst = std::max(worst, std::abs(fd - p->grad[i]) / scale);
            }
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("patchwise_loss: whole-volume region reduces to dsm_loss") {
    Rng rng(6);
    VolumeTriple vt;
    vt.residual = GridF({4, 4, 4});
    vt.low = GridF({4, 4, 4});
    for (auto& v : vt.residual.values()) v = std::normal_distribution<float>()(rng);
    for (auto& v : vt.low.values()) v = std::normal_distribution<float>()(rng);
    IdentityDenoiser<float> id;
    const NoiseSchedule s;
    const auto plan = whole_volume_plan({4, 4, 4});
    const SeedStream stream(3);
    const auto pw = patchwise_loss<float>(id, vt, plan, 1, stream, s, false);

    const auto draw = draw_patch(plan, stream, 0, s);
    nn::Tensor<float> y(1, 1, {4, 4, 4}), cond(1, 4, {4, 4, 4}), noise(1, 1, {4, 4, 4});
    std::copy(vt.residual.storage().begin(), vt.residual.storage().end(), y.data());
    fill_condition(vt, plan.regions[0], false, cond.data());
    fill_noise(draw.noise, draw.sigma, noise.data(), 64);
    CHECK(pw.total == dsm_loss<float>(id, y, cond, draw.sigma, noise, s).per_patch_loss);
    CHECK_THROWS_AS(patchwise_loss<float>(id, vt, tile({8, 8, 8}, {8, 8, 8}, {8, 8, 8}), 1, stream, s, false),
                    TilingError);
    CHECK_THROWS_AS(patchwise_loss<float>(id, vt, plan, 1, stream, s, true), ConfigError);
}

TEST_CASE("patchwise_loss: random regions average to the exhaustive tiling mean") {
    // Frozen denoiser whose error depends on position, so regions matter.
    class Shrink final : public Denoiser<double> {
    public:
        nn::Tensor<double> denoise(const nn::Tensor<double>& noisy, const nn::Tensor<double>& cond,
                                   std::span<const double>, bool) override {
            nn::Tensor<double> out = noisy;
            for (int i = 0; i < noisy.n(); ++i)
                for (std::size_t v = 0; v < noisy.voxels(); ++v)
                    out.sample(i)[v] = 0.5 * noisy.sample(i)[v] + cond.channel(i, 0)[v];
            return out;
        }
    } model;
    Rng rng(1);
    VolumeTriple vt;
    vt.residual = GridF({8, 6, 6});
    vt.low = GridF({8, 6, 6});
    for (auto& v : vt.residual.values()) v = std::normal_distribution<float>(0.f, 0.5f)(rng);
    for (auto& v : vt.low.values()) v = std::normal_distribution<float>()(rng);

    NoiseSchedule s;
    s.p_std = 1e-9; // sigma pinned at exp(p_mean): isolates the region average
    const auto plan = tile({8, 6, 6}, {4, 4, 4}, {1, 1, 1});

    // Exhaustive mean over regions of the expected per-region loss, with the
    // noise expectation taken by many draws per region.
    double exhaustive = 0.0;
    for (std::size_t r = 0; r < plan.regions.size(); ++r) {
        std::vector<PatchDraw> draws;
        for (int k = 0; k < 200; ++k) draws.push_back({r, std::exp(s.p_mean), SeedStream(1000 + r).child(k)});
        exhaustive += patchwise_loss_at<double>(model, vt, plan, draws, s, false).total / 200.0;
    }
    exhaustive /= static_cast<double>(plan.regions.size());

    const int n = 10000;
    const auto sampled = patchwise_loss<double>(model, vt, plan, n, SeedStream(77), s, false);
    CHECK(std::abs(sampled.total / n - exhaustive) / exhaustive < 0.05);
}
