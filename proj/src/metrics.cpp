#include "csrd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "csrd/random.hpp"

namespace csrd {

using nlohmann::json;

namespace {

void require_pair(const Volume3D& ref, const Volume3D& test, const Mask* mask, const char* what) {
    require_same_shape(ref.data, test.data, what);
    if (mask && mask->shape() != ref.shape())
        throw DimensionError(std::string(what) + ": mask " + to_string(mask->shape()) + " vs volume " +
                             to_string(ref.shape()));
}

double masked_mean(const Volume3D& ref, const Volume3D& test, const Mask* mask, bool squared) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < ref.data.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        const double d = static_cast<double>(ref.data[i]) - static_cast<double>(test.data[i]);
        acc += squared ? d * d : std::abs(d);
        ++n;
    }
    if (n == 0) throw DimensionError("metric mask selects no voxels");
    return acc / static_cast<double>(n);
}

std::pair<float, float> min_max(const GridF& g) {
    const auto [lo, hi] = std::minmax_element(g.storage().begin(), g.storage().end());
    return {*lo, *hi};
}

} // namespace

double mae(const Volume3D& ref, const Volume3D& test, const Mask* mask) {
    require_pair(ref, test, mask, "mae");
    return masked_mean(ref, test, mask, false);
}

double psnr(const Volume3D& ref, const Volume3D& test, std::optional<double> peak, const Mask* mask) {
    require_pair(ref, test, mask, "psnr");
    const double pk = peak ? *peak : static_cast<double>(min_max(ref.data).second);
    if (!(pk > 0.0)) throw DomainError("psnr peak must be > 0, got " + std::to_string(pk));
    const double mse = masked_mean(ref, test, mask, true);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(pk * pk / mse);
}

// --------------------------------------------------------------------------
// SSIM

namespace {

/// Valid-mode separable filtering of one nx*ny slice.
std::vector<double> filter_valid(const std::vector<double>& img, int nx, int ny, const std::vector<double>& w) {
    const int k = static_cast<int>(w.size());
    const int ox = nx - k + 1, oy = ny - k + 1;
    std::vector<double> rows(static_cast<std::size_t>(ox) * ny);
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < ox; ++x) {
            double s = 0.0;
            for (int i = 0; i < k; ++i) s += w[i] * img[static_cast<std::size_t>(y) * nx + x + i];
            rows[static_cast<std::size_t>(y) * ox + x] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(ox) * oy);
    for (int y = 0; y < oy; ++y)
        for (int x = 0; x < ox; ++x) {
            double s = 0.0;
            for (int i = 0; i < k; ++i) s += w[i] * rows[static_cast<std::size_t>(y + i) * ox + x];
            out[static_cast<std::size_t>(y) * ox + x] = s;
        }
    return out;
}

} // namespace

double ssim(const Volume3D& ref, const Volume3D& test, const SsimConfig& cfg) {
    require_pair(ref, test, nullptr, "ssim");
    const Vec3i s = ref.shape();
    if (s[0] < cfg.window || s[1] < cfg.window)
        throw DimensionError("ssim: slices " + std::to_string(s[0]) + "x" + std::to_string(s[1]) +
                             " are smaller than the " + std::to_string(cfg.window) + "-voxel window");
    double range = 1.0;
    if (cfg.data_range) {
        range = *cfg.data_range;
    } else {
        const auto [lo, hi] = min_max(ref.data);
        if (hi > lo) range = static_cast<double>(hi) - lo;
    }
    if (!(range > 0.0)) throw DomainError("ssim data range must be > 0");
    const double c1 = (cfg.k1 * range) * (cfg.k1 * range);
    const double c2 = (cfg.k2 * range) * (cfg.k2 * range);

    std::vector<double> w(static_cast<std::size_t>(cfg.window));
    double wsum = 0.0;
    for (int i = 0; i < cfg.window; ++i) {
        const double d = i - (cfg.window - 1) / 2.0;
        w[i] = std::exp(-d * d / (2.0 * cfg.sigma * cfg.sigma));
        wsum += w[i];
    }
    for (auto& v : w) v /= wsum;

    const std::size_t plane = static_cast<std::size_t>(s[0]) * s[1];
    double total = 0.0;
    std::size_t count = 0;
    std::vector<double> a(plane), b(plane), aa(plane), bb(plane), ab(plane);
    for (int z = 0; z < s[2]; ++z) {
        for (std::size_t i = 0; i < plane; ++i) {
            a[i] = ref.data[z * plane + i];
            b[i] = test.data[z * plane + i];
            aa[i] = a[i] * a[i];
            bb[i] = b[i] * b[i];
            ab[i] = a[i] * b[i];
        }
        const auto ma = filter_valid(a, s[0], s[1], w), mb = filter_valid(b, s[0], s[1], w);
        const auto maa = filter_valid(aa, s[0], s[1], w), mbb = filter_valid(bb, s[0], s[1], w);
        const auto mab = filter_valid(ab, s[0], s[1], w);
        for (std::size_t i = 0; i < ma.size(); ++i) {
            const double va = maa[i] - ma[i] * ma[i], vb = mbb[i] - mb[i] * mb[i], cov = mab[i] - ma[i] * mb[i];
            total += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) /
                     ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

// --------------------------------------------------------------------------
// Haralick

const std::array<const char*, kHaralickFeatures>& haralick_feature_names() {
    static const std::array<const char*, kHaralickFeatures> names{
        "angular_second_moment", "contrast",           "correlation",  "sum_of_squares_variance",
        "inverse_difference_moment", "sum_average",    "sum_variance", "sum_entropy",
        "entropy",               "difference_variance", "difference_entropy", "imc1", "imc2"};
    return names;
}

std::vector<Vec3i> HaralickConfig::default_offsets() {
    return {{1, 0, 0},  {0, 1, 0},  {0, 0, 1},  {1, 1, 0},   {1, -1, 0}, {1, 0, 1},  {1, 0, -1},
            {0, 1, 1},  {0, 1, -1}, {1, 1, 1},  {1, 1, -1},  {1, -1, 1}, {1, -1, -1}};
}

void HaralickConfig::validate() const {
    if (n_gray_levels < 2) throw ConfigError("haralick.n_gray_levels must be >= 2");
    if (offsets.empty()) throw ConfigError("haralick.offsets must not be empty");
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        if (offsets[i] == Vec3i{0, 0, 0}) throw ConfigError("haralick offsets must be non-zero");
        if (!symmetric) continue;
        for (std::size_t j = 0; j < i; ++j)
            if (offsets[j] == Vec3i{-offsets[i][0], -offsets[i][1], -offsets[i][2]})
                throw ConfigError("antiparallel haralick offsets duplicate each other when symmetric");
    }
    if (!(epsilon > 0.0)) throw ConfigError("haralick.epsilon must be > 0");
}

Grid<int> quantize(const GridF& g, double lo, double hi, int levels) {
    Grid<int> q(g.shape());
    const double width = hi - lo;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = g[i];
        int level = 0;
        if (width > 0.0)
            level = static_cast<int>(std::floor((v - lo) / width * levels));
        else
            level = v > hi ? levels - 1 : 0;
        q[i] = std::clamp(level, 0, levels - 1);
    }
    return q;
}

std::vector<double> glcm(const Grid<int>& q, int levels, const Vec3i& offset, bool symmetric) {
    std::vector<double> p(static_cast<std::size_t>(levels) * levels, 0.0);
    const Vec3i s = q.shape();
    double total = 0.0;
    for (int z = 0; z < s[2]; ++z) {
        const int z2 = z + offset[2];
        if (z2 < 0 || z2 >= s[2]) continue;
        for (int y = 0; y < s[1]; ++y) {
            const int y2 = y + offset[1];
            if (y2 < 0 || y2 >= s[1]) continue;
            for (int x = 0; x < s[0]; ++x) {
                const int x2 = x + offset[0];
                if (x2 < 0 || x2 >= s[0]) continue;
                const int i = q(x, y, z), j = q(x2, y2, z2);
                p[static_cast<std::size_t>(i) * levels + j] += 1.0;
                total += 1.0;
                if (symmetric) {
                    p[static_cast<std::size_t>(j) * levels + i] += 1.0;
                    total += 1.0;
                }
            }
        }
    }
    if (total > 0.0)
        for (auto& v : p) v /= total;
    return p;
}

HaralickFeatures haralick_features(const std::vector<double>& p, int L) {
    auto P = [&](int i, int j) { return p[static_cast<std::size_t>(i) * L + j]; };
    auto xlogx = [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; };

    std::vector<double> px(L, 0.0), py(L, 0.0), psum(2 * L + 1, 0.0), pdiff(L, 0.0);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            const double v = P(i, j);
            px[i] += v;
            py[j] += v;
            psum[(i + 1) + (j + 1)] += v;
            pdiff[std::abs(i - j)] += v;
        }
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < L; ++i) {
        mx += (i + 1) * px[i];
        my += (i + 1) * py[i];
    }
    double sx = 0.0, sy = 0.0;
    for (int i = 0; i < L; ++i) {
        sx += (i + 1 - mx) * (i + 1 - mx) * px[i];
        sy += (i + 1 - my) * (i + 1 - my) * py[i];
    }
    sx = std::sqrt(sx);
    sy = std::sqrt(sy);

    HaralickFeatures f{};
    double asm_ = 0.0, contrast = 0.0, corr_num = 0.0, ssq = 0.0, idm = 0.0, ent = 0.0;
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            const double v = P(i, j);
            if (v == 0.0) continue;
            asm_ += v * v;
            contrast += (i - j) * (i - j) * v;
            corr_num += (i + 1) * (j + 1) * v;
            ssq += (i + 1 - mx) * (i + 1 - mx) * v;
            idm += v / (1.0 + (i - j) * (i - j));
            ent -= xlogx(v);
        }
    f[0] = asm_;
    f[1] = contrast;
    f[2] = (sx > 0.0 && sy > 0.0) ? (corr_num - mx * my) / (sx * sy) : 1.0;
    f[3] = ssq;
    f[4] = idm;
    double sum_avg = 0.0, sum_ent = 0.0;
    for (int k = 2; k <= 2 * L; ++k) {
        sum_avg += k * psum[k];
        sum_ent -= xlogx(psum[k]);
    }
    double sum_var = 0.0;
    for (int k = 2; k <= 2 * L; ++k) sum_var += (k - sum_avg) * (k - sum_avg) * psum[k];
    f[5] = sum_avg;
    f[6] = sum_var;
    f[7] = sum_ent;
    f[8] = ent;
    double dmean = 0.0, dent = 0.0;
    for (int k = 0; k < L; ++k) {
        dmean += k * pdiff[k];
        dent -= xlogx(pdiff[k]);
    }
    double dvar = 0.0;
    for (int k = 0; k < L; ++k) dvar += (k - dmean) * (k - dmean) * pdiff[k];
    f[9] = dvar;
    f[10] = dent;

    double hx = 0.0, hy = 0.0, hxy1 = 0.0, hxy2 = 0.0;
    for (int i = 0; i < L; ++i) {
        hx -= xlogx(px[i]);
        hy -= xlogx(py[i]);
    }
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            const double q = px[i] * py[j];
            if (q <= 0.0) continue;
            hxy1 -= P(i, j) * std::log(q);
            hxy2 -= q * std::log(q);
        }
    const double hmax = std::max(hx, hy);
    f[11] = hmax > 0.0 ? (ent - hxy1) / hmax : 0.0;
    f[12] = std::sqrt(std::max(0.0, 1.0 - std::exp(-2.0 * (hxy2 - ent))));
    return f;
}

HaralickFeatures haralick_features(const Grid<int>& q, const HaralickConfig& cfg) {
    cfg.validate();
    HaralickFeatures mean{};
    for (const auto& off : cfg.offsets) {
        const auto f = haralick_features(glcm(q, cfg.n_gray_levels, off, cfg.symmetric), cfg.n_gray_levels);
        for (int i = 0; i < kHaralickFeatures; ++i) mean[i] += f[i];
    }
    for (auto& v : mean) v /= static_cast<double>(cfg.offsets.size());
    return mean;
}

HaralickDistance haralick_distance(const Volume3D& ref, const Volume3D& test, const HaralickConfig& cfg) {
    require_pair(ref, test, nullptr, "haralick_distance");
    const auto [lo, hi] = min_max(ref.data);
    const auto fr = haralick_features(quantize(ref.data, lo, hi, cfg.n_gray_levels), cfg);
    const auto ft = haralick_features(quantize(test.data, lo, hi, cfg.n_gray_levels), cfg);
    HaralickDistance out;
    double acc = 0.0;
    for (int i = 0; i < kHaralickFeatures; ++i) {
        double den = std::abs(fr[i]);
        if (den < cfg.epsilon) {
            den = cfg.epsilon;
            if (ft[i] != fr[i]) out.guarded = true;
        }
        const double r = (ft[i] - fr[i]) / den;
        acc += r * r;
    }
    out.value = std::sqrt(acc);
    return out;
}

// --------------------------------------------------------------------------
// Perceptual

BuiltinExtractor::BuiltinExtractor(std::uint64_t seed) {
    Rng rng = SeedStream(seed).engine();
    const int widths[5] = {8, 16, 16, 32, 32};
    const int strides[5] = {1, 2, 2, 2, 2};
    int cin = 3;
    for (int l = 0; l < 5; ++l) {
        Layer layer{cin, widths[l], strides[l], {}, {}};
        std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / (cin * 9)));
        layer.weight.resize(static_cast<std::size_t>(widths[l]) * cin * 9);
        for (auto& w : layer.weight) w = nd(rng);
        layer.bias.assign(static_cast<std::size_t>(widths[l]), 0.0);
        std::uniform_real_distribution<double> ub(-0.05, 0.05);
        for (auto& b : layer.bias) b = ub(rng);
        layers_.push_back(std::move(layer));
        cin = widths[l];
    }
}

std::vector<std::vector<double>> BuiltinExtractor::extract(const std::vector<double>& image, int nx, int ny) const {
    std::vector<std::vector<double>> maps;
    std::vector<double> cur = image;
    int w = nx, h = ny;
    for (const auto& L : layers_) {
        const int ow = (w - 1) / L.stride + 1, oh = (h - 1) / L.stride + 1;
        std::vector<double> out(static_cast<std::size_t>(L.cout) * ow * oh);
        for (int co = 0; co < L.cout; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double s = L.bias[co];
                    for (int ci = 0; ci < L.cin; ++ci)
                        for (int ky = -1; ky <= 1; ++ky) {
                            const int y = oy * L.stride + ky;
                            if (y < 0 || y >= h) continue;
                            for (int kx = -1; kx <= 1; ++kx) {
                                const int x = ox * L.stride + kx;
                                if (x < 0 || x >= w) continue;
                                s += L.weight[((static_cast<std::size_t>(co) * L.cin + ci) * 3 + (ky + 1)) * 3 +
                                              (kx + 1)] *
                                     cur[(static_cast<std::size_t>(ci) * h + y) * w + x];
                            }
                        }
                    out[(static_cast<std::size_t>(co) * oh + oy) * ow + ox] = std::max(0.0, s);
                }
        maps.push_back(out);
        cur = std::move(out);
        w = ow;
        h = oh;
    }
    return maps;
}

PerceptualDistance perceptual_distance(const Volume3D& ref, const Volume3D& test, const FeatureExtractor* extractor) {
    require_pair(ref, test, nullptr, "perceptual_distance");
    static const BuiltinExtractor builtin;
    PerceptualDistance out;
    const FeatureExtractor* fx = extractor;
    if (!fx || !fx->available()) {
        out.fallback = extractor != nullptr;
        fx = &builtin;
    }
    out.extractor = fx->name();
    const Vec3i s = ref.shape();
    const std::size_t plane = static_cast<std::size_t>(s[0]) * s[1];
    const int ch = fx->input_channels();
    auto slice_stack = [&](const Volume3D& v, int z) {
        std::vector<double> img(plane * ch);
        for (int c = 0; c < ch; ++c)
            for (std::size_t i = 0; i < plane; ++i) img[c * plane + i] = v.data[z * plane + i];
        return img;
    };
    double total = 0.0;
    for (int z = 0; z < s[2]; ++z) {
        const auto fa = fx->extract(slice_stack(ref, z), s[0], s[1]);
        const auto fb = fx->extract(slice_stack(test, z), s[0], s[1]);
        if (fa.size() != fb.size() || fa.empty()) throw ShapeError("feature extractor returned mismatched layers");
        double slice = 0.0;
        for (std::size_t l = 0; l < fa.size(); ++l) {
            double se = 0.0;
            for (std::size_t i = 0; i < fa[l].size(); ++i) se += (fa[l][i] - fb[l][i]) * (fa[l][i] - fb[l][i]);
            slice += se / static_cast<double>(fa[l].size());
        }
        total += slice / static_cast<double>(fa.size());
    }
    out.value = total / s[2];
    return out;
}

// --------------------------------------------------------------------------
// Reports

EvalReport evaluate_pair(const Volume3D& ref, const Volume3D& test, const EvalConfig& cfg) {
    EvalReport r;
    r.mae = mae(ref, test, cfg.mask);
    r.psnr_db = psnr(ref, test, std::nullopt, cfg.mask);
    r.ssim = ssim(ref, test, cfg.ssim);
    const auto h = haralick_distance(ref, test, cfg.haralick);
    r.h_dist = h.value;
    r.haralick_guarded = h.guarded;
    const auto p = perceptual_distance(ref, test, cfg.extractor);
    r.p_dist = p.value;
    r.perceptual_fallback = p.fallback;
    r.extractor = p.extractor;
    if (cfg.mask) r.mask = cfg.mask_name.empty() ? "mask" : cfg.mask_name;
    r.reference_name = ref.name;
    r.test_name = test.name;
    return r;
}

namespace {

json number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

} // namespace

json to_json(const EvalReport& r) {
    json j{{"mae", r.mae},
           {"psnr_db", number(r.psnr_db)},
           {"ssim", r.ssim},
           {"h_dist", r.h_dist},
           {"p_dist", r.p_dist},
           {"reference_name", r.reference_name},
           {"test_name", r.test_name},
           {"haralick_guarded", r.haralick_guarded},
           {"perceptual_fallback", r.perceptual_fallback},
           {"extractor", r.extractor}};
    j["mask"] = r.mask ? json(*r.mask) : json(nullptr);
    return j;
}

std::string csv_line(const EvalRow& row) {
    return row.case_id + "," + fmt(row.dose_factor) + "," + row.method + "," + fmt(row.report.mae) + "," +
           fmt(row.report.psnr_db) + "," + fmt(row.report.ssim) + "," + fmt(row.report.h_dist) + "," +
           fmt(row.report.p_dist);
}

void write_report(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                  const std::vector<EvalRow>& rows) {
    json arr = json::array();
    for (const auto& row : rows) {
        json j = to_json(row.report);
        j["case"] = row.case_id;
        j["dose_factor"] = row.dose_factor;
        j["method"] = row.method;
        arr.push_back(std::move(j));
    }
    if (!json_path.empty()) {
        std::ofstream js(json_path);
        if (!js) throw IoError("cannot write " + json_path.string());
        js << json{{"rows", arr}}.dump(2) << "\n";
    }
    if (!csv_path.empty()) {
        std::ofstream cs(csv_path);
        if (!cs) throw IoError("cannot write " + csv_path.string());
        cs << kReportCsvHeader << "\n";
        for (const auto& row : rows) cs << csv_line(row) << "\n";
    }
}

} // namespace csrd
