#include "csrd/scorenet.hpp"

#include <algorithm>
#include <cmath>

#include "csrd/json_util.hpp"

namespace csrd {

using nlohmann::json;

int ScoreModelConfig::level_channels(int level) const {
    const int mult = level < static_cast<int>(channel_mult.size()) ? channel_mult[level] : channel_mult.back();
    return base_channels * mult;
}

void ScoreModelConfig::validate() const {
    ConfigIssues issues;
    if (base_channels < 1) issues.add("model.base_channels must be >= 1");
    if (depth < 1 || depth > 6) issues.add("model.depth must lie in [1, 6]");
    if (static_cast<int>(channel_mult.size()) != depth)
        issues.add("model.channel_mult needs one entry per level (" + std::to_string(depth) + "), got " +
                   std::to_string(channel_mult.size()));
    for (int m : channel_mult)
        if (m < 1) issues.add("model.channel_mult entries must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2) issues.add("model.time_embed_dim must be even and >= 2");
    if (norm_groups < 1) issues.add("model.norm_groups must be >= 1");
    if (issues.empty()) {
        for (int l = 0; l < depth; ++l)
            if (level_channels(l) % std::min(norm_groups, level_channels(l)) != 0)
                issues.add("model.norm_groups must divide the channels of level " + std::to_string(l));
        for (int a = 0; a < 3; ++a)
            if (patch_size[a] < 1 || patch_size[a] % spatial_multiple() != 0)
                issues.add("model.patch_size " + to_string(patch_size) + " must be divisible by 2^depth = " +
                           std::to_string(spatial_multiple()));
    }
    issues.throw_if_any("invalid model config");
}

json to_json(const ScoreModelConfig& c) {
    return {{"base_channels", c.base_channels}, {"depth", c.depth},
            {"channel_mult", c.channel_mult},   {"use_mr", c.use_mr},
            {"in_channels", c.in_channels()},   {"patch_size", vec_json(c.patch_size)},
            {"time_embed_dim", c.time_embed_dim}, {"norm_groups", c.norm_groups},
            {"init_seed", c.init_seed}};
}

ScoreModelConfig model_config_from_json(const json& j) {
    ScoreModelConfig c;
    ConfigIssues issues;
    reject_unknown_keys(j, {"base_channels", "depth", "channel_mult", "use_mr", "in_channels", "patch_size",
                            "time_embed_dim", "norm_groups", "init_seed"},
                        "model", issues);
    read_field(j, "base_channels", c.base_channels, "model", issues);
    read_field(j, "depth", c.depth, "model", issues);
    read_field(j, "channel_mult", c.channel_mult, "model", issues);
    read_field(j, "use_mr", c.use_mr, "model", issues);
    read_field(j, "patch_size", c.patch_size, "model", issues);
    read_field(j, "time_embed_dim", c.time_embed_dim, "model", issues);
    read_field(j, "norm_groups", c.norm_groups, "model", issues);
    read_field(j, "init_seed", c.init_seed, "model", issues);
    if (j.is_object() && j.contains("in_channels") && j.at("in_channels") != c.in_channels())
        issues.add("model.in_channels must equal 5 + use_mr");
    issues.throw_if_any("invalid model config");
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicScoreModel<T>::BasicScoreModel(const ScoreModelConfig& cfg, const NoiseSchedule& sched)
    : cfg_(cfg), sched_(sched) {
    cfg_.validate();
    sched_.validate();
    Rng rng = SeedStream(cfg_.init_seed).engine();

    const int E = cfg_.time_embed_dim;
    embed_ = nn::Linear<T>("embed", E, E);
    embed_.init_lecun(rng);

    int ch = cfg_.in_channels();
    for (int l = 0; l + 1 < cfg_.depth; ++l) {
        const int c = cfg_.level_channels(l);
        const std::string n = "enc" + std::to_string(l);
        enc_.push_back({make_block(n + ".0", ch, c, rng), make_block(n + ".1", c, c, rng)});
        skip_channels_.push_back(c);
        ch = c;
    }
    const int cm = cfg_.level_channels(cfg_.depth - 1);
    mid_ = {make_block("mid.0", ch, cm, rng), make_block("mid.1", cm, cm, rng)};
    ch = cm;
    dec_.resize(enc_.size());
    for (int l = cfg_.depth - 2; l >= 0; --l) {
        const int c = cfg_.level_channels(l);
        const std::string n = "dec" + std::to_string(l);
        dec_[l] = {make_block(n + ".0", ch + c, c, rng), make_block(n + ".1", c, c, rng)};
        ch = c;
    }
    head_ = nn::Conv3d<T>("head", ch, 1, 1);
    head_.zero_init();
}

template <typename T>
typename BasicScoreModel<T>::Block BasicScoreModel<T>::make_block(const std::string& name, int cin, int cout,
                                                                  Rng& rng) {
    Block b;
    b.conv = nn::Conv3d<T>(name + ".conv", cin, cout, 3);
    b.conv.init_lecun(rng);
    b.conv.padding = padding_;
    b.norm = nn::GroupNorm<T>(cout, std::min(cfg_.norm_groups, cout));
    b.mod_linear = nn::Linear<T>(name + ".mod", cfg_.time_embed_dim, 2 * cout);
    b.mod_linear.zero_init();
    return b;
}

template <typename T>
std::vector<T> BasicScoreModel<T>::fourier(std::span<const double> c_noise) const {
    const int half = cfg_.time_embed_dim / 2;
    std::vector<T> f(c_noise.size() * static_cast<std::size_t>(cfg_.time_embed_dim));
    for (std::size_t i = 0; i < c_noise.size(); ++i)
        for (int k = 0; k < half; ++k) {
            const double w = half > 1 ? std::exp(static_cast<double>(k) / (half - 1) * std::log(64.0)) : 1.0;
            f[i * cfg_.time_embed_dim + k] = static_cast<T>(std::cos(w * c_noise[i]));
            f[i * cfg_.time_embed_dim + half + k] = static_cast<T>(std::sin(w * c_noise[i]));
        }
    return f;
}

template <typename T>
nn::Tensor<T> BasicScoreModel<T>::block_forward(Block& b, const nn::Tensor<T>& x, const std::vector<T>& emb,
                                                int n, bool keep) {
    auto h = b.conv.forward(x, keep);
    h = b.norm.forward(h, keep);
    const auto m = b.mod_linear.forward(emb, n, keep);
    h = b.mod.forward(h, m, keep);
    return b.act.forward(h, keep);
}

template <typename T>
nn::Tensor<T> BasicScoreModel<T>::block_backward(Block& b, const nn::Tensor<T>& dy, std::vector<T>& demb, int n) {
    auto d = b.act.backward(dy);
    d = b.mod.backward(d, b.dmod);
    const auto de = b.mod_linear.backward(b.dmod, n);
    for (std::size_t i = 0; i < demb.size(); ++i) demb[i] += de[i];
    d = b.norm.backward(d);
    return b.conv.backward(d);
}

template <typename T>
nn::Tensor<T> BasicScoreModel<T>::raw_forward(const nn::Tensor<T>& x_in, std::span<const double> c_noise, bool keep) {
    if (x_in.c() != cfg_.in_channels())
        throw ConfigError("score model expects " + std::to_string(cfg_.in_channels()) + " input channels, got " +
                          std::to_string(x_in.c()));
    for (int a = 0; a < 3; ++a)
        if (x_in.spatial()[a] % cfg_.spatial_multiple() != 0)
            throw ShapeError("spatial size " + to_string(x_in.spatial()) + " is not divisible by " +
                             std::to_string(cfg_.spatial_multiple()));
    if (c_noise.size() != static_cast<std::size_t>(x_in.n())) throw ShapeError("one c_noise per sample");
    const int n = x_in.n();

    const auto f = fourier(c_noise);
    auto pre = embed_.forward(f, n, keep);
    auto emb = nn::silu_vec(pre);
    if (keep) {
        emb_pre_ = pre;
        emb_ = emb;
        cached_n_ = n;
    }

    nn::Tensor<T> h = x_in;
    std::vector<nn::Tensor<T>> skips;
    for (auto& level : enc_) {
        h = block_forward(level[0], h, emb, n, keep);
        h = block_forward(level[1], h, emb, n, keep);
        skips.push_back(h);
        h = nn::avg_pool2(h);
    }
    h = block_forward(mid_[0], h, emb, n, keep);
    h = block_forward(mid_[1], h, emb, n, keep);
    for (int l = static_cast<int>(dec_.size()) - 1; l >= 0; --l) {
        h = nn::concat_channels(nn::upsample2(h), skips[l]);
        skips[l] = {};
        h = block_forward(dec_[l][0], h, emb, n, keep);
        h = block_forward(dec_[l][1], h, emb, n, keep);
    }
    return head_.forward(h, keep);
}

template <typename T>
void BasicScoreModel<T>::raw_backward(const nn::Tensor<T>& grad_raw) {
    const int n = grad_raw.n();
    if (n != cached_n_) throw ShapeError("score model backward without a matching forward");
    std::vector<T> demb(emb_.size(), T{});

    auto d = head_.backward(grad_raw);
    std::vector<nn::Tensor<T>> dskip(dec_.size());
    for (std::size_t l = 0; l < dec_.size(); ++l) {
        d = block_backward(dec_[l][1], d, demb, n);
        d = block_backward(dec_[l][0], d, demb, n);
        nn::Tensor<T> dup;
        nn::split_channels(d, d.c() - skip_channels_[l], dup, dskip[l]);
        d = nn::upsample2_backward(dup);
    }
    d = block_backward(mid_[1], d, demb, n);
    d = block_backward(mid_[0], d, demb, n);
    for (int l = static_cast<int>(enc_.size()) - 1; l >= 0; --l) {
        d = nn::avg_pool2_backward(d);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dskip[l][i];
        d = block_backward(enc_[l][1], d, demb, n);
        d = block_backward(enc_[l][0], d, demb, n);
    }
    const auto dpre = nn::silu_vec_backward(emb_pre_, demb);
    embed_.backward(dpre, n);
}

template <typename T>
nn::Tensor<T> BasicScoreModel<T>::denoise(const nn::Tensor<T>& noisy, const nn::Tensor<T>& cond,
                                          std::span<const double> sigma, bool keep) {
    if (noisy.c() != 1) throw ConfigError("noisy residual must have one channel");
    if (cond.c() != condition_channels(cfg_.use_mr))
        throw ConfigError("score model (use_mr=" + std::string(cfg_.use_mr ? "true" : "false") + ") expects " +
                          std::to_string(condition_channels(cfg_.use_mr)) + " condition channels, got " +
                          std::to_string(cond.c()));
    if (cond.n() != noisy.n() || cond.spatial() != noisy.spatial())
        throw ShapeError("condition " + cond.shape_string() + " does not match residual " + noisy.shape_string());
    if (sigma.size() != static_cast<std::size_t>(noisy.n())) throw ShapeError("one sigma per sample");

    const int n = noisy.n();
    const std::size_t V = noisy.voxels();
    std::vector<Preconditioning> pre;
    std::vector<double> c_noise;
    nn::Tensor<T> x_in(n, cfg_.in_channels(), noisy.spatial());
    for (int i = 0; i < n; ++i) {
        pre.push_back(preconditioning(sigma[i], sched_));
        c_noise.push_back(pre.back().c_noise);
        const T c_in = static_cast<T>(pre.back().c_in);
        const T* r = noisy.sample(i);
        T* dst = x_in.sample(i);
        for (std::size_t v = 0; v < V; ++v) dst[v] = c_in * r[v];
        std::copy(cond.sample(i), cond.sample(i) + cond.c() * V, dst + V);
    }
    const auto F = raw_forward(x_in, c_noise, keep);
    nn::Tensor<T> D(n, 1, noisy.spatial());
    for (int i = 0; i < n; ++i) {
        const T cs = static_cast<T>(pre[i].c_skip), co = static_cast<T>(pre[i].c_out);
        const T* r = noisy.sample(i);
        const T* f = F.sample(i);
        T* out = D.sample(i);
        for (std::size_t v = 0; v < V; ++v) out[v] = cs * r[v] + co * f[v];
    }
    if (keep) pre_ = std::move(pre);
    return D;
}

template <typename T>
void BasicScoreModel<T>::backward(const nn::Tensor<T>& grad_denoised) {
    if (pre_.size() != static_cast<std::size_t>(grad_denoised.n()))
        throw ShapeError("score model backward without a matching forward");
    nn::Tensor<T> dF(grad_denoised.n(), 1, grad_denoised.spatial());
    const std::size_t V = grad_denoised.voxels();
    for (int i = 0; i < grad_denoised.n(); ++i) {
        const T co = static_cast<T>(pre_[i].c_out);
        for (std::size_t v = 0; v < V; ++v) dF.sample(i)[v] = co * grad_denoised.sample(i)[v];
    }
    raw_backward(dF);
}

template <typename T>
std::vector<nn::Param<T>*> BasicScoreModel<T>::parameters() {
    std::vector<nn::Param<T>*> ps;
    auto add = [&](std::vector<nn::Param<T>*> v) { ps.insert(ps.end(), v.begin(), v.end()); };
    add(embed_.params());
    auto add_block = [&](Block& b) {
        add(b.conv.params());
        add(b.mod_linear.params());
    };
    for (auto& l : enc_) {
        add_block(l[0]);
        add_block(l[1]);
    }
    add_block(mid_[0]);
    add_block(mid_[1]);
    for (int l = static_cast<int>(dec_.size()) - 1; l >= 0; --l) {
        add_block(dec_[l][0]);
        add_block(dec_[l][1]);
    }
    add(head_.params());
    return ps;
}

template <typename T>
void BasicScoreModel<T>::set_padding(nn::Padding p) {
    padding_ = p;
    auto set = [&](Block& b) { b.conv.padding = p; };
    for (auto& l : enc_) {
        set(l[0]);
        set(l[1]);
    }
    set(mid_[0]);
    set(mid_[1]);
    for (auto& l : dec_) {
        set(l[0]);
        set(l[1]);
    }
}

template <typename T>
std::size_t BasicScoreModel<T>::parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->size();
    return n;
}

template <typename T>
void BasicScoreModel<T>::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
void BasicScoreModel<T>::enable_ema() {
    std::vector<std::vector<T>> shadow;
    for (auto* p : parameters()) shadow.push_back(p->value);
    ema_ = std::move(shadow);
}

template <typename T>
void BasicScoreModel<T>::update_ema(double decay) {
    if (!ema_) throw ConfigError("EMA is not enabled");
    const auto ps = parameters();
    const T d = static_cast<T>(decay), od = static_cast<T>(1.0 - decay);
    for (std::size_t k = 0; k < ps.size(); ++k) {
        auto& e = (*ema_)[k];
        const auto& v = ps[k]->value;
        for (std::size_t i = 0; i < e.size(); ++i) e[i] = d * e[i] + od * v[i];
    }
}

template <typename T>
BasicScoreModel<T> BasicScoreModel<T>::with_ema_weights() {
    BasicScoreModel copy = *this;
    if (!ema_) return copy;
    const auto ps = copy.parameters();
    for (std::size_t k = 0; k < ps.size(); ++k) ps[k]->value = (*ema_)[k];
    return copy;
}

template <typename T>
void BasicScoreModel<T>::randomize_head(Rng& rng) {
    head_.init_lecun(rng);
}

// ---------------------------------------------------------------------------

template <typename T>
nn::Tensor<T> roll(const nn::Tensor<T>& x, const Vec3i& shift) {
    nn::Tensor<T> out(x.n(), x.c(), x.spatial());
    const Vec3i s = x.spatial();
    for (int i = 0; i < x.n(); ++i)
        for (int c = 0; c < x.c(); ++c) {
            const T* in = x.channel(i, c);
            T* o = out.channel(i, c);
            for (int z = 0; z < s[2]; ++z)
                for (int y = 0; y < s[1]; ++y)
                    for (int xx = 0; xx < s[0]; ++xx) {
                        const int tz = ((z + shift[2]) % s[2] + s[2]) % s[2];
                        const int ty = ((y + shift[1]) % s[1] + s[1]) % s[1];
                        const int tx = ((xx + shift[0]) % s[0] + s[0]) % s[0];
                        o[(static_cast<std::size_t>(tz) * s[1] + ty) * s[0] + tx] =
                            in[(static_cast<std::size_t>(z) * s[1] + y) * s[0] + xx];
                    }
        }
    return out;
}

template <typename T>
double shift_equivariance_probe(BasicScoreModel<T>& model, const nn::Tensor<T>& noisy, const nn::Tensor<T>& cond,
                                double sigma, const Vec3i& shift, CoordinateMode mode) {
    const nn::Padding saved = model.padding();
    model.set_padding(nn::Padding::periodic);

    nn::Tensor<T> cond_shifted = roll(cond, shift);
    if (mode == CoordinateMode::hold_in_place) {
        const std::size_t V = cond.voxels();
        for (int i = 0; i < cond.n(); ++i)
            for (int c = cond.c() - 3; c < cond.c(); ++c)
                std::copy(cond.channel(i, c), cond.channel(i, c) + V, cond_shifted.channel(i, c));
    }
    std::vector<double> sig(static_cast<std::size_t>(noisy.n()), sigma);
    const auto base = roll(model.denoise(noisy, cond, sig, false), shift);
    const auto moved = model.denoise(roll(noisy, shift), cond_shifted, sig, false);
    model.set_padding(saved);

    const Vec3i s = noisy.spatial();
    double dev = 0.0;
    for (int i = 0; i < noisy.n(); ++i)
        for (int z = std::abs(shift[2]); z < s[2] - std::abs(shift[2]); ++z)
            for (int y = std::abs(shift[1]); y < s[1] - std::abs(shift[1]); ++y)
                for (int x = std::abs(shift[0]); x < s[0] - std::abs(shift[0]); ++x) {
                    const std::size_t k = (static_cast<std::size_t>(z) * s[1] + y) * s[0] + x;
                    dev = std::max(dev, std::abs(static_cast<double>(base.sample(i)[k]) - moved.sample(i)[k]));
                }
    return dev;
}

template class BasicScoreModel<float>;
template class BasicScoreModel<double>;
template nn::Tensor<float> roll(const nn::Tensor<float>&, const Vec3i&);
template nn::Tensor<double> roll(const nn::Tensor<double>&, const Vec3i&);
template double shift_equivariance_probe(BasicScoreModel<float>&, const nn::Tensor<float>&,
                                         const nn::Tensor<float>&, double, const Vec3i&, CoordinateMode);
template double shift_equivariance_probe(BasicScoreModel<double>&, const nn::Tensor<double>&,
                                         const nn::Tensor<double>&, double, const Vec3i&, CoordinateMode);

} // namespace csrd
