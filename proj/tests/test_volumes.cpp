#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "csrd/random.hpp"
#include "csrd/tiling.hpp"
#include "csrd/volume.hpp"
#include "csrd/volume_io.hpp"

using namespace csrd;

namespace {

Volume3D random_volume(const Vec3i& shape, std::uint64_t seed, float lo = -1.f, float hi = 1.f) {
    Rng rng(seed);
    std::uniform_real_distribution<float> u(lo, hi);
    GridF g(shape);
    for (auto& v : g.values()) v = u(rng);
    return Volume3D(std::move(g), {1.0, 1.0, 1.0}, Domain::normalized, "rand");
}

Volume3D ramp_volume(const Vec3i& shape) {
    GridF g(shape);
    for (int z = 0; z < shape[2]; ++z)
        for (int y = 0; y < shape[1]; ++y)
            for (int x = 0; x < shape[0]; ++x) g(x, y, z) = static_cast<float>(x + 100 * y + 10000 * z);
    return Volume3D(std::move(g), {1.0, 1.0, 1.0}, Domain::normalized, "ramp");
}

} // namespace

TEST_CASE("compute_residual: identity, constant shift and scalar-loop oracle") {
    const auto nor = random_volume({8, 8, 8}, 1);
    CHECK(compute_residual(nor, nor).data == GridD({8, 8, 8}, 0.0));

    Volume3D shifted = nor;
    for (auto& v : shifted.data.values()) v += 0.5f;
    const auto r_shift = compute_residual(shifted, nor);
    for (double v : r_shift.data.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-6));

    const auto low = random_volume({8, 8, 8}, 2);
    const auto r = compute_residual(low, nor);
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                CHECK(r.data(x, y, z) == static_cast<double>(low.data(x, y, z)) - nor.data(x, y, z));
}

TEST_CASE("compute_residual errors") {
    const auto a = random_volume({4, 4, 4}, 1);
    CHECK_THROWS_AS(compute_residual(a, random_volume({4, 4, 5}, 2)), DimensionError);
    Volume3D sp = a;
    sp.spacing = {2.0, 1.0, 1.0};
    CHECK_THROWS_AS(compute_residual(a, sp), DimensionError);
    Volume3D counts = a;
    for (auto& v : counts.data.values()) v = std::abs(v);
    counts.domain = Domain::counts;
    CHECK_THROWS_AS(compute_residual(counts, a), DomainError);
}

TEST_CASE("apply_residual inverts compute_residual bitwise") {
    const auto low = random_volume({8, 8, 8}, 3);
    ResidualVolume zero{GridD({8, 8, 8}, 0.0), nullptr};
    CHECK(apply_residual(low, zero).data == low.data);

    ResidualVolume self{low.data.cast<double>(), nullptr};
    CHECK(apply_residual(low, self).data == GridF({8, 8, 8}, 0.0f));

    // Property: random magnitudes spanning six decades, signed, with exact zeros.
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        std::uniform_real_distribution<double> e(-3, 3);
        std::uniform_real_distribution<double> s(-1, 1);
        GridF a({5, 6, 7}), b({5, 6, 7});
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] = static_cast<float>(s(rng) * std::pow(10.0, e(rng)));
            b[i] = static_cast<float>(s(rng) * std::pow(10.0, e(rng)));
            if (i % 17 == 0) b[i] = 0.0f;
            if (i % 19 == 0) a[i] = 0.0f;
        }
        const Volume3D lo(a, {1, 1, 1}, Domain::normalized), no(b, {1, 1, 1}, Domain::normalized);
        CHECK(apply_residual(lo, compute_residual(lo, no)).data == no.data);
    }
    CHECK_THROWS_AS(apply_residual(low, ResidualVolume{GridD({8, 8, 7}), nullptr}), DimensionError);
}

TEST_CASE("tile: whole-volume patch and 160^3 / 64^3 / 48 plan") {
    const auto one = tile({64, 64, 64}, {64, 64, 64}, {64, 64, 64});
    REQUIRE(one.regions.size() == 1);
    CHECK(one.regions[0].origin == Vec3i{0, 0, 0});

    const auto plan = tile({160, 160, 160}, {64, 64, 64}, {48, 48, 48});
    CHECK(plan.regions.size() == 27);
    std::set<int> xs;
    for (const auto& r : plan.regions) xs.insert(r.origin[0]);
    CHECK(xs == std::set<int>{0, 48, 96});
    const auto cover = coverage_count(plan);
    for (int v : cover.values()) REQUIRE(v >= 1);
}

TEST_CASE("tile: count formula and clamping against brute force") {
    for (int extent : {5, 16, 33, 48})
        for (int patch : {1, 4, 16})
            for (int stride : {1, 3, 4}) {
                if (patch > extent || stride > patch) continue;
                const auto plan = tile({extent, 3, 3}, {patch, 3, 3}, {stride, 3, 3});
                const int expect = static_cast<int>(std::ceil(double(extent - patch) / stride)) + 1;
                CHECK(static_cast<int>(plan.regions.size()) == expect);
                CHECK(plan.regions.back().origin[0] + patch == extent);
                const auto cover = coverage_count(plan);
                for (int v : cover.values()) CHECK(v >= 1);
            }
    CHECK_THROWS_AS(tile({8, 8, 8}, {9, 8, 8}, {1, 1, 1}), TilingError);
    CHECK_THROWS_AS(tile({8, 8, 8}, {4, 4, 4}, {5, 1, 1}), TilingError);
}

TEST_CASE("blend weights sum to one on covered voxels") {
    for (Blend b : {Blend::uniform_average, Blend::cosine_window}) {
        const auto plan = tile({20, 17, 9}, {8, 8, 4}, {5, 3, 3}, b);
        const auto sums = normalized_weight_sum(plan);
        for (double w : sums.values()) CHECK(w == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("coordinate channels are global, affine and span [0, 1]") {
    PatchRegion r{{2, 0, 5}, {3, 4, 2}, {10, 4, 7}};
    const auto cx = r.coord_channel(0), cy = r.coord_channel(1), cz = r.coord_channel(2);
    CHECK(cx(0, 0, 0) == doctest::Approx(2.0 / 9));
    CHECK(cx(2, 1, 1) == doctest::Approx(4.0 / 9));
    CHECK(cy(0, 3, 0) == doctest::Approx(1.0));
    CHECK(cz(0, 0, 1) == doctest::Approx(1.0));
    PatchRegion flat{{0, 0, 0}, {3, 1, 1}, {3, 1, 1}};
    CHECK(flat.coord_channel(1)(1, 0, 0) == 0.0f);

    const auto whole = whole_volume_plan({7, 5, 3}).regions[0];
    for (int a = 0; a < 3; ++a) {
        const auto g = whole.coord_channel(a);
        CHECK(*std::min_element(g.storage().begin(), g.storage().end()) == 0.0f);
        CHECK(*std::max_element(g.storage().begin(), g.storage().end()) == 1.0f);
    }
}

TEST_CASE("extract_patch: whole, ramp indices, bounds") {
    const auto ramp = ramp_volume({4, 4, 4});
    const auto all = whole_volume_plan(ramp.shape()).regions[0];
    CHECK(extract_patch(ramp, all) == ramp.data);

    const PatchRegion r{{1, 1, 1}, {2, 2, 2}, {4, 4, 4}};
    const auto p = extract_patch(ramp, r);
    for (int z = 0; z < 2; ++z)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x)
                CHECK(p(x, y, z) == static_cast<float>((x + 1) + 100 * (y + 1) + 10000 * (z + 1)));

    CHECK_THROWS_AS(extract_patch(ramp, PatchRegion{{3, 0, 0}, {2, 2, 2}, {4, 4, 4}}), DimensionError);
}

TEST_CASE("stitch: exact tiling, all-zero, completeness, extract-stitch identity") {
    const auto vol = random_volume({12, 8, 8}, 9);
    const auto exact = tile(vol.shape(), {4, 4, 4}, {4, 4, 4});
    std::vector<std::pair<PatchRegion, GridF>> patches;
    for (const auto& r : exact.regions) patches.emplace_back(r, extract_patch(vol, r));
    CHECK(stitch(patches, exact, vol.shape()) == vol.data);

    std::vector<std::pair<PatchRegion, GridF>> zeros;
    for (const auto& r : exact.regions) zeros.emplace_back(r, GridF(r.size, 0.0f));
    CHECK(stitch(zeros, exact, vol.shape()) == GridF(vol.shape(), 0.0f));

    patches.pop_back();
    CHECK_THROWS_AS(stitch(patches, exact, vol.shape()), CompletenessError);

    const auto single = whole_volume_plan(vol.shape());
    std::vector<std::pair<PatchRegion, GridF>> one{{single.regions[0], vol.data}};
    CHECK(stitch(one, single, vol.shape()) == vol.data);

    // Property: arbitrary overlapping plans reproduce the source.
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        Rng rng(seed);
        std::uniform_int_distribution<int> ext(3, 14);
        const Vec3i shape{ext(rng), ext(rng), ext(rng)};
        Vec3i patch, stride;
        for (int a = 0; a < 3; ++a) {
            patch[a] = std::uniform_int_distribution<int>(1, shape[a])(rng);
            stride[a] = std::uniform_int_distribution<int>(1, patch[a])(rng);
        }
        const auto v = random_volume(shape, seed + 100);
        const auto plan = tile(shape, patch, stride, seed % 2 ? Blend::cosine_window : Blend::uniform_average);
        std::vector<std::pair<PatchRegion, GridD>> ps;
        for (const auto& r : plan.regions) ps.emplace_back(r, extract_patch(v.data.cast<double>(), r));
        const auto back = stitch(ps, plan, shape);
        for (std::size_t i = 0; i < back.size(); ++i) CHECK(std::abs(back[i] - v.data[i]) < 1e-6);
    }
}

TEST_CASE("RV3D write/read round trip and header validation") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "csrd_test_rv3d";
    fs::create_directories(dir);
    auto v = random_volume({5, 4, 3}, 4);
    v.spacing = {1.21875, 1.21875, 1.5};
    v.name = "probe";
    write_rv3d(dir / "probe.rv3d", v);
    const auto back = read_rv3d(dir / "probe.rv3d");
    CHECK(back.data == v.data);
    CHECK(back.spacing == v.spacing);
    CHECK(back.domain == Domain::normalized);
    CHECK(fs::file_size(dir / "probe.rv3d") == 5 * 4 * 3 * 4);

    Volume3D neg = v;
    neg.domain = Domain::counts;
    write_rv3d(dir / "neg.rv3d", neg);
    CHECK_THROWS_AS(read_rv3d(dir / "neg.rv3d"), DomainError);
    CHECK_THROWS_AS(read_rv3d(dir / "missing.rv3d"), IoError);
    fs::remove_all(dir);
}
