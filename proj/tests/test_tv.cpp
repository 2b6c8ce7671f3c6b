#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "csrd/random.hpp"
#include "csrd/tv.hpp"

using namespace csrd;

namespace {

Volume3D vol(const GridF& g) { return Volume3D(g, {1, 1, 1}, Domain::normalized, "f"); }

/// Dense 1D ROF oracle: projected gradient on the box-constrained dual
/// min_p ||f - w D^T p||^2, |p_k| <= 1, with D the (n-1) x n forward difference.
std::vector<double> rof_1d_oracle(const std::vector<double>& f, double w) {
    const int n = static_cast<int>(f.size());
    std::vector<double> p(n - 1, 0.0), u(f);
    for (int it = 0; it < 200000; ++it) {
        for (int i = 0; i < n; ++i) {
            const double left = i > 0 ? p[i - 1] : 0.0, right = i < n - 1 ? p[i] : 0.0;
            u[i] = f[i] - w * (left - right); // f - w D^T p
        }
        for (int k = 0; k < n - 1; ++k) p[k] = std::clamp(p[k] + (u[k + 1] - u[k]) / (4.0 * w), -1.0, 1.0);
    }
    return u;
}

Volume3D noisy_blocks(const Vec3i& shape, std::uint64_t seed) {
    GridF g(shape);
    Rng rng(seed);
    std::normal_distribution<double> nd(0.0, 0.1);
    for (int z = 0; z < shape[2]; ++z)
        for (int y = 0; y < shape[1]; ++y)
            for (int x = 0; x < shape[0]; ++x)
                g(x, y, z) = static_cast<float>((x < shape[0] / 2 ? 0.3 : 1.0) + (y < 3 ? 0.5 : 0.0) + nd(rng));
    return vol(g);
}

} // namespace

TEST_CASE("tv: zero weight and constant volumes are fixed points") {
    const auto f = noisy_blocks({8, 8, 4}, 1);
    CHECK(tv_denoise(f, {0.0, 10, 1e-6}).data == f.data);
    const auto c = vol(GridF({6, 5, 4}, 0.42f));
    for (double w : {0.01, 0.3, 5.0}) CHECK(tv_denoise(c, {w, 50, 1e-9}).data == c.data);
}

TEST_CASE("tv: 1D step matches the two-constant closed form and the dense QP oracle") {
    const double a = 0.2, b = 1.0, w = 0.4;
    for (const Vec3i shape : {Vec3i{16, 1, 1}, Vec3i{16, 2, 3}}) {
        GridF g(shape);
        for (int z = 0; z < shape[2]; ++z)
            for (int y = 0; y < shape[1]; ++y)
                for (int x = 0; x < 16; ++x) g(x, y, z) = static_cast<float>(x < 8 ? a : b);
        const auto r = tv_denoise_detailed(vol(g), {w, 20000, 1e-12});
        CHECK(r.converged);
        const double fa = static_cast<float>(a), fb = static_cast<float>(b);
        for (int x = 0; x < 16; ++x)
            CHECK(std::abs(r.out.data(x, shape[1] - 1, shape[2] - 1) - (x < 8 ? fa + w / 8 : fb - w / 8)) < 1e-4);
    }

    // A non-piecewise-constant signal against the dense oracle.
    std::vector<double> f(16);
    GridF g({16, 1, 1});
    for (int i = 0; i < 16; ++i) {
        g[i] = static_cast<float>(std::sin(0.7 * i) + (i > 9 ? 0.8 : 0.0));
        f[i] = g[i];
    }
    const auto ref = rof_1d_oracle(f, 0.15);
    const auto r = tv_denoise(vol(g), {0.15, 50000, 1e-12});
    for (int i = 0; i < 16; ++i) CHECK(std::abs(r.data[i] - ref[i]) < 1e-4);
}

TEST_CASE("tv: objective is non-increasing, mean preserved, maximum principle") {
    const auto f = noisy_blocks({16, 12, 10}, 7);
    for (double w : {0.02, 0.1, 0.3}) {
        const auto r = tv_denoise_detailed(f, {w, 5000, 1e-5});
        INFO("weight " << w);
        CHECK(r.converged);
        for (std::size_t k = 1; k < r.objective.size(); ++k)
            CHECK(r.objective[k] <= r.objective[k - 1] * (1 + 1e-14));
        double mf = 0.0, mu = 0.0;
        for (std::size_t i = 0; i < f.data.size(); ++i) {
            mf += f.data[i];
            mu += r.out.data[i];
        }
        CHECK(std::abs(mf - mu) / static_cast<double>(f.data.size()) < 1e-8);
        const auto [lo, hi] = std::minmax_element(f.data.storage().begin(), f.data.storage().end());
        for (float v : r.out.data.values()) {
            CHECK(v >= *lo - 1e-8);
            CHECK(v <= *hi + 1e-8);
        }
        GridD u(f.shape());
        for (std::size_t i = 0; i < u.size(); ++i) u[i] = r.out.data[i];
        CHECK(r.objective.back() == doctest::Approx(tv_objective(u, f.data, w)).epsilon(1e-6));
        CHECK(tv_objective(u, f.data, w) < tv_objective(GridD(f.shape(), 0.0) , f.data, w));
    }
}

TEST_CASE("tv: weight tuning picks the PSNR maximizer; config validation") {
    auto clean = noisy_blocks({16, 16, 8}, 3);
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) clean.data(x, y, z) = (x < 8 ? 0.3f : 1.0f) + (y < 3 ? 0.5f : 0.0f);
    const auto noisy = noisy_blocks({16, 16, 8}, 3);
    const auto t = tune_tv_weight(noisy, clean, kTVWeightGrid, {0.0, 300, 1e-6});
    CHECK(t.table.size() == kTVWeightGrid.size());
    for (const auto& [w, p] : t.table) CHECK(p <= t.best_psnr);
    CHECK(t.best_weight > 0.0);

    CHECK_THROWS_AS(tv_denoise(noisy, {-1.0, 10, 0}), ConfigError);
    CHECK_THROWS_AS(tv_denoise(noisy, {0.1, 0, 0}), ConfigError);
    auto counts = noisy;
    counts.domain = Domain::counts;
    CHECK_THROWS_AS(tv_denoise(counts, {0.1, 10, 0}), DomainError);
    auto j = to_json(TVConfig{});
    CHECK(tv_config_from_json(j).weight == TVConfig{}.weight);
    j["extra"] = 1;
    CHECK_THROWS_AS(tv_config_from_json(j), ConfigError);
}
