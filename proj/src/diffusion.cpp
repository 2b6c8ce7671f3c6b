#include "csrd/diffusion.hpp"

#include <cmath>

#include "csrd/json_util.hpp"

namespace csrd {

using nlohmann::json;

void NoiseSchedule::validate() const {
    ConfigIssues issues;
    if (!(sigma_min > 0.0)) issues.add("sigma_min must be > 0");
    if (!(sigma_max > sigma_min)) issues.add("sigma_max must exceed sigma_min");
    if (!(rho > 0.0)) issues.add("rho must be > 0");
    if (!(sigma_data > 0.0)) issues.add("sigma_data must be > 0");
    if (!(p_std > 0.0)) issues.add("p_std must be > 0");
    issues.throw_if_any("invalid noise schedule");
}

json to_json(const NoiseSchedule& s) {
    return {{"sigma_min", s.sigma_min}, {"sigma_max", s.sigma_max}, {"rho", s.rho},
            {"sigma_data", s.sigma_data}, {"p_mean", s.p_mean},       {"p_std", s.p_std}};
}

NoiseSchedule schedule_from_json(const json& j) {
    NoiseSchedule s;
    ConfigIssues issues;
    reject_unknown_keys(j, {"sigma_min", "sigma_max", "rho", "sigma_data", "p_mean", "p_std"},
                        "schedule", issues);
    read_field(j, "sigma_min", s.sigma_min, "schedule", issues);
    read_field(j, "sigma_max", s.sigma_max, "schedule", issues);
    read_field(j, "rho", s.rho, "schedule", issues);
    read_field(j, "sigma_data", s.sigma_data, "schedule", issues);
    read_field(j, "p_mean", s.p_mean, "schedule", issues);
    read_field(j, "p_std", s.p_std, "schedule", issues);
    issues.throw_if_any("invalid schedule");
    s.validate();
    return s;
}

double sigma_of_t(double t, const NoiseSchedule&) {
    if (!(t >= 0.0)) throw DomainError("sigma(t) requires t >= 0");
    return t;
}

double sigma_dot(double t, const NoiseSchedule&) {
    if (!(t >= 0.0)) throw DomainError("sigma'(t) requires t >= 0");
    return 1.0;
}

std::vector<double> discretize_sigmas(int n_steps, const NoiseSchedule& sched) {
    if (n_steps < 2) throw ConfigError("discretize_sigmas needs n_steps >= 2");
    sched.validate();
    const double inv_rho = 1.0 / sched.rho;
    const double a = std::pow(sched.sigma_max, inv_rho);
    const double b = std::pow(sched.sigma_min, inv_rho);
    std::vector<double> t(static_cast<std::size_t>(n_steps) + 1);
    for (int i = 0; i < n_steps; ++i)
        t[i] = std::pow(a + static_cast<double>(i) / (n_steps - 1) * (b - a), sched.rho);
    // pow(pow(x, 1/rho), rho) is not exact; pin the end points.
    t.front() = sched.sigma_max;
    t[n_steps - 1] = sched.sigma_min;
    t.back() = 0.0;
    return t;
}

double sample_training_sigma(Rng& rng, const NoiseSchedule& sched) {
    std::normal_distribution<double> nd(sched.p_mean, sched.p_std);
    return std::exp(nd(rng));
}

Preconditioning preconditioning(double sigma, const NoiseSchedule& sched) {
    if (!(sigma > 0.0)) throw DomainError("preconditioning requires sigma > 0");
    const double sd = sched.sigma_data;
    const double s2 = sigma * sigma + sd * sd;
    return {sd * sd / s2, sigma * sd / std::sqrt(s2), 1.0 / std::sqrt(s2), std::log(sigma) / 4.0};
}

double loss_weight(double sigma, const NoiseSchedule& sched) {
    if (!(sigma > 0.0)) throw DomainError("loss weight requires sigma > 0");
    const double sd = sched.sigma_data;
    return (sigma * sigma + sd * sd) / ((sigma * sd) * (sigma * sd));
}

template <typename T>
Grid<T> precondition(const Grid<T>& raw, const Grid<T>& noisy, double sigma, const NoiseSchedule& sched) {
    require_same_shape(raw, noisy, "precondition");
    const auto p = preconditioning(sigma, sched);
    Grid<T> out(raw.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(p.c_skip * noisy[i] + p.c_out * raw[i]);
    return out;
}

template <typename T>
Grid<T> score_from_denoiser(const Grid<T>& denoised, const Grid<T>& noisy_r, double sigma) {
    require_same_shape(denoised, noisy_r, "score_from_denoiser");
    if (!(sigma > 0.0)) throw DomainError("score requires sigma > 0");
    const double inv = 1.0 / (sigma * sigma);
    Grid<T> out(denoised.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>((static_cast<double>(denoised[i]) - noisy_r[i]) * inv);
    return out;
}

template <typename T>
void Denoiser<T>::backward(const nn::Tensor<T>&) {
    throw ConfigError("this denoiser has no trainable parameters");
}

namespace {

std::string region_context(std::span<const PatchRegion> regions, int i) {
    if (regions.empty()) return "";
    return " at region origin " + to_string(regions[static_cast<std::size_t>(i)].origin);
}

} // namespace

template <typename T>
BatchLoss dsm_loss_batch(Denoiser<T>& model, const nn::Tensor<T>& y, const nn::Tensor<T>& cond,
                         std::span<const double> sigma, const nn::Tensor<T>& noise,
                         const NoiseSchedule& sched, bool with_grad, std::span<const PatchRegion> regions) {
    if (!y.same_shape(noise) || y.c() != 1)
        throw ShapeError("dsm_loss: residual " + y.shape_string() + " vs noise " + noise.shape_string());
    if (cond.n() != y.n() || cond.spatial() != y.spatial())
        throw ShapeError("dsm_loss: condition " + cond.shape_string() + " vs residual " + y.shape_string());
    if (sigma.size() != static_cast<std::size_t>(y.n())) throw ShapeError("dsm_loss: one sigma per sample");
    for (double s : sigma)
        if (!(s > 0.0)) throw DomainError("dsm_loss requires sigma > 0");

    nn::Tensor<T> noisy(y.n(), 1, y.spatial());
    for (std::size_t i = 0; i < y.size(); ++i) noisy[i] = y[i] + noise[i];

    const nn::Tensor<T> d = model.denoise(noisy, cond, sigma, with_grad);
    if (!d.same_shape(y)) throw ShapeError("dsm_loss: model output " + d.shape_string());

    const std::size_t V = y.voxels();
    BatchLoss out;
    nn::Tensor<T> grad;
    if (with_grad) grad = nn::Tensor<T>(y.n(), 1, y.spatial());
    for (int i = 0; i < y.n(); ++i) {
        const double w = loss_weight(sigma[i], sched);
        double sq = 0.0;
        const T* di = d.sample(i);
        const T* yi = y.sample(i);
        for (std::size_t v = 0; v < V; ++v) {
            const double e = static_cast<double>(di[v]) - yi[v];
            sq += e * e;
        }
        const double loss = w * sq / static_cast<double>(V);
        if (!std::isfinite(loss))
            throw NumericError("non-finite denoiser output at sigma " + std::to_string(sigma[i]) +
                               region_context(regions, i));
        LossRecord rec{sigma[i], loss, w, std::nullopt};
        if (!regions.empty()) rec.region = regions[static_cast<std::size_t>(i)];
        out.terms.push_back(rec);
        out.mean += loss;
        if (with_grad) {
            const double k = 2.0 * w / (static_cast<double>(V) * y.n());
            T* g = grad.sample(i);
            for (std::size_t v = 0; v < V; ++v) g[v] = static_cast<T>(k * (static_cast<double>(di[v]) - yi[v]));
        }
    }
    out.mean /= y.n();
    if (with_grad) model.backward(grad);
    return out;
}

template <typename T>
LossRecord dsm_loss(Denoiser<T>& model, const nn::Tensor<T>& y, const nn::Tensor<T>& cond, double sigma,
                    const nn::Tensor<T>& noise, const NoiseSchedule& sched, std::optional<PatchRegion> region) {
    if (y.n() != 1) throw ShapeError("dsm_loss takes a single patch");
    const double s[1] = {sigma};
    std::vector<PatchRegion> regs;
    if (region) regs.push_back(*region);
    return dsm_loss_batch(model, y, cond, s, noise, sched, false, regs).terms.front();
}

int condition_channels(bool use_mr) { return use_mr ? 5 : 4; }

template <typename T>
void fill_condition(const VolumeTriple& vol, const PatchRegion& region, bool use_mr, T* dst) {
    if (use_mr && !vol.mr) throw ConfigError("model expects an MR prior but none was supplied");
    const std::size_t V = voxel_count(region.size);
    auto copy_grid = [&](const GridF& g, T* out) {
        const GridF p = extract_patch(g, region);
        std::copy(p.storage().begin(), p.storage().end(), out);
    };
    int c = 0;
    copy_grid(vol.low, dst + V * c++);
    if (use_mr) copy_grid(*vol.mr, dst + V * c++);
    for (int axis = 0; axis < 3; ++axis) {
        const GridF g = region.coord_channel(axis);
        std::copy(g.storage().begin(), g.storage().end(), dst + V * c++);
    }
}

PatchDraw draw_patch(const TilingPlan& plan, const SeedStream& stream, std::uint64_t p,
                     const NoiseSchedule& sched) {
    if (plan.regions.empty()) throw TilingError("empty tiling plan");
    const SeedStream s = stream.child(p);
    Rng rng = s.engine();
    std::uniform_int_distribution<std::size_t> pick(0, plan.regions.size() - 1);
    PatchDraw d;
    d.region_index = pick(rng);
    d.sigma = sample_training_sigma(rng, sched);
    d.noise = s.child(1);
    return d;
}

template <typename T>
void fill_noise(const SeedStream& key, double sigma, T* dst, std::size_t n) {
    Rng rng = key.engine();
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(sigma * nd(rng));
}

template <typename T>
PatchwiseLoss patchwise_loss_at(Denoiser<T>& model, const VolumeTriple& vol, const TilingPlan& plan,
                                std::span<const PatchDraw> draws, const NoiseSchedule& sched, bool use_mr) {
    if (plan.shape != vol.residual.shape())
        throw TilingError("plan shape " + to_string(plan.shape) + " does not match volume " +
                          to_string(vol.residual.shape()));
    require_same_shape(vol.residual, vol.low, "patchwise_loss");
    if (vol.mr) require_same_shape(vol.residual, *vol.mr, "patchwise_loss");

    PatchwiseLoss out;
    const int cc = condition_channels(use_mr);
    for (const auto& d : draws) {
        const PatchRegion& reg = plan.regions.at(d.region_index);
        if (!reg.in_bounds()) throw TilingError("patch larger than volume: " + to_string(reg.size));
        const std::size_t V = voxel_count(reg.size);
        nn::Tensor<T> y(1, 1, reg.size), cond(1, cc, reg.size), noise(1, 1, reg.size);
        const GridF yr = extract_patch(vol.residual, reg);
        std::copy(yr.storage().begin(), yr.storage().end(), y.data());
        fill_condition(vol, reg, use_mr, cond.data());
        fill_noise(d.noise, d.sigma, noise.data(), V);
        const LossRecord rec = dsm_loss(model, y, cond, d.sigma, noise, sched, reg);
        out.total += rec.per_patch_loss;
        out.terms.push_back(rec);
    }
    return out;
}

template <typename T>
PatchwiseLoss patchwise_loss(Denoiser<T>& model, const VolumeTriple& vol, const TilingPlan& plan,
                             int n_patches, const SeedStream& stream, const NoiseSchedule& sched, bool use_mr) {
    if (n_patches < 1) throw ConfigError("patchwise_loss needs n_patches >= 1");
    for (int a = 0; a < 3; ++a)
        if (!plan.regions.empty() && plan.regions.front().size[a] > vol.residual.shape()[a])
            throw TilingError("patch larger than volume");
    std::vector<PatchDraw> draws;
    for (int p = 0; p < n_patches; ++p) draws.push_back(draw_patch(plan, stream, static_cast<std::uint64_t>(p), sched));
    return patchwise_loss_at(model, vol, plan, draws, sched, use_mr);
}

#define CSRD_INSTANTIATE(T)                                                                          \
    template Grid<T> precondition(const Grid<T>&, const Grid<T>&, double, const NoiseSchedule&);     \
    template Grid<T> score_from_denoiser(const Grid<T>&, const Grid<T>&, double);                    \
    template class Denoiser<T>;                                                                      \
    template BatchLoss dsm_loss_batch(Denoiser<T>&, const nn::Tensor<T>&, const nn::Tensor<T>&,      \
                                      std::span<const double>, const nn::Tensor<T>&,                 \
                                      const NoiseSchedule&, bool, std::span<const PatchRegion>);     \
    template LossRecord dsm_loss(Denoiser<T>&, const nn::Tensor<T>&, const nn::Tensor<T>&, double,   \
                                 const nn::Tensor<T>&, const NoiseSchedule&, std::optional<PatchRegion>); \
    template void fill_condition(const VolumeTriple&, const PatchRegion&, bool, T*);                 \
    template void fill_noise(const SeedStream&, double, T*, std::size_t);                            \
    template PatchwiseLoss patchwise_loss_at(Denoiser<T>&, const VolumeTriple&, const TilingPlan&,   \
                                             std::span<const PatchDraw>, const NoiseSchedule&, bool); \
    template PatchwiseLoss patchwise_loss(Denoiser<T>&, const VolumeTriple&, const TilingPlan&, int, \
                                          const SeedStream&, const NoiseSchedule&, bool);

CSRD_INSTANTIATE(float)
CSRD_INSTANTIATE(double)

#undef CSRD_INSTANTIATE

} // namespace csrd
