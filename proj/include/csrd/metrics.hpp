#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "csrd/volume.hpp"

namespace csrd {

/// Non-zero voxels are inside the region of interest.
using Mask = Grid<std::uint8_t>;

double mae(const Volume3D& ref, const Volume3D& test, const Mask* mask = nullptr);

/// 10 log10(peak^2 / MSE); +infinity when MSE is 0. Peak defaults to max(ref).
double psnr(const Volume3D& ref, const Volume3D& test, std::optional<double> peak = std::nullopt,
            const Mask* mask = nullptr);

struct SsimConfig {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    /// Defaults to the reference range (1 when the reference is constant).
    std::optional<double> data_range;
};

/// Mean local SSIM over every axial (z) slice, Gaussian-weighted, valid windows only.
double ssim(const Volume3D& ref, const Volume3D& test, const SsimConfig& cfg = {});

// --------------------------------------------------------------------------
// Haralick texture

inline constexpr int kHaralickFeatures = 13;
using HaralickFeatures = std::array<double, kHaralickFeatures>;

/// Feature order: angular second moment, contrast, correlation, sum of
/// squares variance, inverse difference moment, sum average, sum variance,
/// sum entropy, entropy, difference variance, difference entropy, and the two
/// information measures of correlation.
const std::array<const char*, kHaralickFeatures>& haralick_feature_names();

struct HaralickConfig {
    int n_gray_levels = 64;
    std::vector<Vec3i> offsets = default_offsets();
    bool symmetric = true;
    double epsilon = 1e-12;

    /// The 13 unit offsets of the 26-neighbourhood, one per antipodal pair.
    static std::vector<Vec3i> default_offsets();
    void validate() const;
};

/// Gray levels 0..L-1 by uniform bins over [lo, hi]; values outside are clamped.
Grid<int> quantize(const GridF& g, double lo, double hi, int levels);

/// Normalized co-occurrence matrix (levels x levels, row-major) for one offset.
std::vector<double> glcm(const Grid<int>& q, int levels, const Vec3i& offset, bool symmetric);

/// Features of one normalized GLCM; gray levels are numbered from 1.
HaralickFeatures haralick_features(const std::vector<double>& p, int levels);

/// Features averaged over the configured offsets.
HaralickFeatures haralick_features(const Grid<int>& q, const HaralickConfig& cfg);

struct HaralickDistance {
    double value = 0.0;
    bool guarded = false; ///< some reference feature was 0 and hit the epsilon floor
};

/// sqrt(sum_i ((h_i(test) - h_i(ref)) / h_i(ref))^2), both volumes quantized
/// over the reference intensity range.
HaralickDistance haralick_distance(const Volume3D& ref, const Volume3D& test, const HaralickConfig& cfg = {});

// --------------------------------------------------------------------------
// Perceptual distance

/// 2D image feature extractor; input is a (channels x ny x nx) slice stack.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::string name() const = 0;
    virtual bool available() const { return true; }
    virtual int input_channels() const { return 3; }
    /// One flattened feature map per layer.
    virtual std::vector<std::vector<double>> extract(const std::vector<double>& image, int nx, int ny) const = 0;
};

/// Frozen random strided convolution stack (5 layers, 3x3, ReLU) with fixed weights.
class BuiltinExtractor final : public FeatureExtractor {
public:
    explicit BuiltinExtractor(std::uint64_t seed = 0x5eed);
    std::string name() const override { return "builtin-conv5"; }
    std::vector<std::vector<double>> extract(const std::vector<double>& image, int nx, int ny) const override;

private:
    struct Layer {
        int cin, cout, stride;
        std::vector<double> weight; ///< cout x cin x 3 x 3
        std::vector<double> bias;
    };
    std::vector<Layer> layers_;
};

struct PerceptualDistance {
    double value = 0.0;
    bool fallback = false; ///< the requested extractor was unavailable
    std::string extractor;
};

/// Mean over axial slices and layers of the mean squared feature difference.
PerceptualDistance perceptual_distance(const Volume3D& ref, const Volume3D& test,
                                       const FeatureExtractor* extractor = nullptr);

// --------------------------------------------------------------------------
// Reports

struct EvalConfig {
    SsimConfig ssim;
    HaralickConfig haralick;
    const FeatureExtractor* extractor = nullptr;
    const Mask* mask = nullptr; ///< restricts MAE and PSNR
    std::string mask_name;
};

struct EvalReport {
    double mae = 0.0;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double h_dist = 0.0;
    double p_dist = 0.0;
    std::optional<std::string> mask;
    std::string reference_name;
    std::string test_name;
    bool haralick_guarded = false;
    bool perceptual_fallback = false;
    std::string extractor;
};

EvalReport evaluate_pair(const Volume3D& ref, const Volume3D& test, const EvalConfig& cfg = {});

nlohmann::json to_json(const EvalReport& r);

/// One CSV row: a report tagged with its case, dose factor and method.
struct EvalRow {
    std::string case_id;
    double dose_factor = 0.0;
    std::string method;
    EvalReport report;
};

inline constexpr const char* kReportCsvHeader = "case,dose_factor,method,mae,psnr_db,ssim,h_dist,p_dist";

std::string csv_line(const EvalRow& row);
void write_report(const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                  const std::vector<EvalRow>& rows);

} // namespace csrd
