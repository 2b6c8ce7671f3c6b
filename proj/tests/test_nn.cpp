#include <doctest.h>

#include <cmath>
#include <functional>

#include "csrd/nn/layers.hpp"
#include "csrd/scorenet.hpp"

using namespace csrd;
using namespace csrd::nn;

namespace {

using TensorD = Tensor<double>;

TensorD random_tensor(int n, int c, const Vec3i& s, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    TensorD t(n, c, s);
    for (auto& v : t.storage()) v = g(rng);
    return t;
}

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-3, std::abs(a) + std::abs(b)); }

/// Central-difference check of d<w, f(v)>/dv against an analytic gradient.
void check_gradient(std::vector<double>& v, const std::function<double()>& loss,
                    const std::vector<double>& analytic, double tol = 1e-5, std::size_t max_probes = 60) {
    REQUIRE(v.size() == analytic.size());
    const std::size_t step = std::max<std::size_t>(1, v.size() / max_probes);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < v.size(); i += step) {
        const double keep = v[i];
        v[i] = keep + h;
        const double up = loss();
        v[i] = keep - h;
        const double down = loss();
        v[i] = keep;
        const double fd = (up - down) / (2 * h);
        if (rel_err(fd, analytic[i]) > tol) MESSAGE("probe " << i << " fd " << fd << " analytic " << analytic[i]);
        worst = std::max(worst, rel_err(fd, analytic[i]));
    }
    CHECK(worst < tol);
}

} // namespace

TEST_CASE("Conv3d gradients (k=3 zeros, k=3 periodic, k=1)") {
    for (int k : {3, 1})
        for (Padding pad : {Padding::zeros, Padding::periodic}) {
            Conv3d<double> conv("c", 2, 3, k);
            Rng rng(7);
            conv.init_lecun(rng);
            for (auto& b : conv.params()[1]->value) b = 0.1;
            conv.padding = pad;
            auto x = random_tensor(2, 2, {4, 3, 5}, 1);
            const auto w = random_vec(2 * 3 * 60, 2);
            auto loss = [&] { return dot(conv.forward(x, false).storage(), w); };

            for (auto* p : conv.params()) p->zero_grad();
            conv.forward(x, true);
            TensorD dy(2, 3, {4, 3, 5});
            dy.storage() = w;
            const auto dx = conv.backward(dy);
            check_gradient(x.storage(), loss, dx.storage());
            for (auto* p : conv.params()) check_gradient(p->value, loss, p->grad);
        }
}

TEST_CASE("Conv3d periodic padding commutes with rolls") {
    Conv3d<double> conv("c", 1, 1, 3);
    Rng rng(3);
    conv.init_lecun(rng);
    conv.padding = Padding::periodic;
    const auto x = random_tensor(1, 1, {6, 5, 4}, 9);
    const Vec3i shift{2, -1, 3};
    const auto a = conv.forward(roll(x, shift), false);
    const auto b = roll(conv.forward(x, false), shift);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("GroupNorm gradient and statistics") {
    GroupNorm<double> gn(4, 2);
    auto x = random_tensor(2, 4, {3, 3, 2}, 4);
    const auto y = gn.forward(x, false);
    const std::size_t per_group = 2 * 18;
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < per_group; ++i) {
        mean += y[i];
        sq += y[i] * y[i];
    }
    CHECK(mean / per_group == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(sq / per_group == doctest::Approx(1.0).epsilon(1e-3));

    const auto w = random_vec(x.size(), 5);
    auto loss = [&] { return dot(gn.forward(x, false).storage(), w); };
    gn.forward(x, true);
    TensorD dy(2, 4, {3, 3, 2});
    dy.storage() = w;
    check_gradient(x.storage(), loss, gn.backward(dy).storage());
}

TEST_CASE("Linear, Modulation, SiLU gradients") {
    Linear<double> lin("l", 5, 3);
    Rng rng(11);
    lin.init_lecun(rng);
    auto xin = random_vec(2 * 5, 12);
    const auto w = random_vec(2 * 3, 13);
    auto lloss = [&] { return dot(lin.forward(xin, 2, false), w); };
    for (auto* p : lin.params()) p->zero_grad();
    lin.forward(xin, 2, true);
    const auto dx = lin.backward(w, 2);
    check_gradient(xin, lloss, dx);
    for (auto* p : lin.params()) check_gradient(p->value, lloss, p->grad);

    Modulation<double> mod;
    auto x = random_tensor(2, 3, {2, 2, 2}, 14);
    auto m = random_vec(2 * 6, 15);
    const auto wm = random_vec(x.size(), 16);
    auto mloss = [&] { return dot(mod.forward(x, m, false).storage(), wm); };
    mod.forward(x, m, true);
    TensorD dy(2, 3, {2, 2, 2});
    dy.storage() = wm;
    std::vector<double> dmod;
    const auto mdx = mod.backward(dy, dmod);
    check_gradient(x.storage(), mloss, mdx.storage());
    check_gradient(m, mloss, dmod);

    SiLU<double> act;
    auto xs = random_tensor(1, 2, {3, 2, 2}, 17);
    const auto ws = random_vec(xs.size(), 18);
    auto sloss = [&] { return dot(act.forward(xs, false).storage(), ws); };
    act.forward(xs, true);
    TensorD ds(1, 2, {3, 2, 2});
    ds.storage() = ws;
    check_gradient(xs.storage(), sloss, act.backward(ds).storage());
    CHECK(silu(0.0) == 0.0);
    CHECK(silu(2.0) == doctest::Approx(2.0 / (1.0 + std::exp(-2.0))));
}

TEST_CASE("pool and upsample are adjoint-consistent") {
    const auto x = random_tensor(1, 2, {4, 4, 2}, 21);
    const auto y = random_tensor(1, 2, {2, 2, 1}, 22);
    // <pool x, y> == <x, pool^T y>
    CHECK(dot(avg_pool2(x).storage(), y.storage()) ==
          doctest::Approx(dot(x.storage(), avg_pool2_backward(y).storage())).epsilon(1e-12));
    CHECK(dot(upsample2(y).storage(), x.storage()) ==
          doctest::Approx(dot(y.storage(), upsample2_backward(x).storage())).epsilon(1e-12));
    CHECK_THROWS_AS(avg_pool2(random_tensor(1, 1, {3, 2, 2}, 1)), ShapeError);
}

TEST_CASE("Adam first step moves each weight by lr against its gradient sign") {
    Param<double> p("p", 3);
    p.value = {1.0, -2.0, 0.5};
    p.grad = {0.3, -4.0, 1e-3};
    Adam<double> opt({&p}, {.lr = 0.01});
    opt.step();
    CHECK(p.value[0] == doctest::Approx(0.99).epsilon(1e-6));
    CHECK(p.value[1] == doctest::Approx(-1.99).epsilon(1e-6));
    CHECK(p.value[2] == doctest::Approx(0.49).epsilon(1e-4));
    CHECK(opt.steps() == 1);
}

namespace {

ScoreModelConfig tiny_config() {
    ScoreModelConfig cfg;
    cfg.base_channels = 1;
    cfg.depth = 2;
    cfg.channel_mult = {1, 2};
    cfg.use_mr = true;
    cfg.patch_size = {4, 4, 4};
    cfg.time_embed_dim = 4;
    cfg.norm_groups = 1;
    cfg.init_seed = 5;
    return cfg;
}

} // namespace

TEST_CASE("ScoreModel end-to-end gradient check (double, tiny)") {
    BasicScoreModel<double> model(tiny_config(), NoiseSchedule{});
    CHECK(model.parameter_count() <= 1000);
    Rng rng(8);
    model.randomize_head(rng);
    // Give every FiLM projection a non-zero weight so its path is exercised.
    for (auto* p : model.parameters())
        if (p->name.find("mod") != std::string::npos)
            for (auto& v : p->value) v = 0.1 * std::normal_distribution<double>()(rng);

    auto noisy = random_tensor(2, 1, {4, 4, 4}, 30);
    auto cond = random_tensor(2, 5, {4, 4, 4}, 31);
    const std::vector<double> sigma{0.3, 2.0};
    const auto w = random_vec(noisy.size(), 32);
    auto loss = [&] { return dot(model.denoise(noisy, cond, sigma, false).storage(), w); };

    model.zero_grad();
    model.denoise(noisy, cond, sigma, true);
    TensorD g(2, 1, {4, 4, 4});
    g.storage() = w;
    model.backward(g);
    for (auto* p : model.parameters()) check_gradient(p->value, loss, p->grad, 1e-4, 12);
}

TEST_CASE("ScoreModel config validation and JSON round trip") {
    auto cfg = tiny_config();
    CHECK(model_config_from_json(to_json(cfg)) == cfg);
    cfg.channel_mult = {1};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    auto j = to_json(tiny_config());
    j["bogus"] = 1;
    CHECK_THROWS_AS(model_config_from_json(j), ConfigError);

    BasicScoreModel<double> model(tiny_config(), NoiseSchedule{});
    CHECK_THROWS_AS(model.denoise(random_tensor(1, 1, {5, 4, 4}, 1), random_tensor(1, 5, {5, 4, 4}, 2),
                                  std::vector<double>{1.0}, false),
                    ShapeError);
}

TEST_CASE("zero-initialised head gives the skip-only denoiser") {
    BasicScoreModel<double> model(tiny_config(), NoiseSchedule{});
    const auto noisy = random_tensor(1, 1, {4, 4, 4}, 40);
    const auto cond = random_tensor(1, 5, {4, 4, 4}, 41);
    const double sigma = 1.5;
    const auto d = model.denoise(noisy, cond, std::vector<double>{sigma}, false);
    const auto pre = preconditioning(sigma, NoiseSchedule{});
    for (std::size_t i = 0; i < d.size(); ++i) CHECK(d[i] == doctest::Approx(pre.c_skip * noisy[i]));
}

TEST_CASE("shift probe: periodic padding is equivariant when coordinates move with content") {
    BasicScoreModel<double> model(tiny_config(), NoiseSchedule{});
    Rng rng(2);
    model.randomize_head(rng);
    const auto noisy = random_tensor(1, 1, {8, 8, 8}, 50);
    const auto cond = random_tensor(1, 5, {8, 8, 8}, 51);
    // Shifts by the pooling multiple keep the pooled grid aligned.
    CHECK(shift_equivariance_probe(model, noisy, cond, 1.0, {2, 0, 2}, CoordinateMode::shift_with_content) < 1e-10);
    // Holding coordinate channels fixed breaks the symmetry.
    CHECK(shift_equivariance_probe(model, noisy, cond, 1.0, {2, 0, 2}, CoordinateMode::hold_in_place) > 1e-6);
}

TEST_CASE("Conv3d results do not depend on buffer addresses") {
    // Copies of the same input and layer placed at different heap offsets
    // must agree bitwise, forward and backward, for single and multi-channel outputs.
    for (int cout : {1, 3}) {
        Rng rng(4);
        Conv3d<float> proto("c", 5, cout, 3);
        proto.init_lecun(rng);
        Tensor<float> x(2, 5, {6, 5, 4});
        std::normal_distribution<float> g(0.f, 1.f);
        for (auto& v : x.storage()) v = g(rng);
        Tensor<float> dy(2, cout, {6, 5, 4});
        for (auto& v : dy.storage()) v = g(rng);

        std::vector<float> ref_y, ref_dx, ref_dw, ref_db;
        for (int shift = 0; shift < 12; ++shift) {
            std::vector<std::vector<float>> pad;
            for (int p = 0; p < shift; ++p) pad.emplace_back(static_cast<std::size_t>(p + 1) * 3);
            Conv3d<float> layer = proto;
            Tensor<float> xs = x, dys = dy;
            const auto y = layer.forward(xs, true);
            const auto dx = layer.backward(dys);
            const auto ps = layer.params();
            if (shift == 0) {
                ref_y = y.storage();
                ref_dx = dx.storage();
                ref_dw = ps[0]->grad;
                ref_db = ps[1]->grad;
                continue;
            }
            CHECK(y.storage() == ref_y);
            CHECK(dx.storage() == ref_dx);
            CHECK(ps[0]->grad == ref_dw);
            CHECK(ps[1]->grad == ref_db);
        }
    }
}

TEST_CASE("Conv3d inference path matches the cached training path") {
    // Large inputs are convolved a few planes at a time when no backward pass
    // follows; both paths must agree up to float rounding.
    for (int cout : {1, 4}) {
        for (Padding pad : {Padding::zeros, Padding::periodic}) {
            Rng rng(9);
            Conv3d<float> layer("c", 3, cout, 3);
            layer.init_lecun(rng);
            layer.padding = pad;
            Tensor<float> x(2, 3, {40, 30, 23});
            std::normal_distribution<float> g(0.f, 1.f);
            for (auto& v : x.storage()) v = g(rng);
            const auto cached = layer.forward(x, true);
            const auto slabbed = layer.forward(x, false);
            double worst = 0.0;
            for (std::size_t i = 0; i < cached.storage().size(); ++i)
                worst = std::max(worst, std::abs(double(cached.storage()[i]) - slabbed.storage()[i]));
            CHECK(worst < 1e-5);
        }
    }
}
