#pragma once

#include <optional>
#include <vector>

#include <json.hpp>

#include "csrd/diffusion.hpp"
#include "csrd/nn/layers.hpp"

namespace csrd {

struct ScoreModelConfig {
    int base_channels = 64;
    int depth = 3;                      ///< resolution levels; depth - 1 poolings
    std::vector<int> channel_mult{1, 2, 4}; ///< per level, multiplies base_channels
    bool use_mr = true;
    Vec3i patch_size{64, 64, 64};
    int time_embed_dim = 32;
    int norm_groups = 4;
    std::uint64_t init_seed = 0;

    int in_channels() const noexcept { return 5 + (use_mr ? 1 : 0); }
    int level_channels(int level) const;
    /// Spatial extents must be multiples of this.
    int spatial_multiple() const noexcept { return 1 << depth; }
    void validate() const;
    friend bool operator==(const ScoreModelConfig&, const ScoreModelConfig&) = default;
};

nlohmann::json to_json(const ScoreModelConfig& c);
ScoreModelConfig model_config_from_json(const nlohmann::json& j);

/// Conditioned 3D U-net wrapped in the sigma preconditioning, i.e. the
/// denoiser D(r; sigma, x_Low, x_MR, coordinates).
template <typename T>
class BasicScoreModel final : public Denoiser<T> {
public:
    BasicScoreModel() = default;
    BasicScoreModel(const ScoreModelConfig& cfg, const NoiseSchedule& sched);

    const ScoreModelConfig& config() const noexcept { return cfg_; }
    const NoiseSchedule& schedule() const noexcept { return sched_; }

    nn::Tensor<T> denoise(const nn::Tensor<T>& noisy, const nn::Tensor<T>& cond,
                          std::span<const double> sigma, bool keep) override;
    void backward(const nn::Tensor<T>& grad_denoised) override;
    std::vector<nn::Param<T>*> parameters() override;

    /// Raw network F(c_in * r, cond; c_noise), before the skip/out composition.
    nn::Tensor<T> raw_forward(const nn::Tensor<T>& x_in, std::span<const double> c_noise, bool keep);
    /// Backward of raw_forward given dLoss/dF.
    void raw_backward(const nn::Tensor<T>& grad_raw);

    void set_padding(nn::Padding p);
    nn::Padding padding() const noexcept { return padding_; }

    std::size_t parameter_count();
    void zero_grad();

    /// EMA shadow weights (absent until enabled).
    void enable_ema();
    bool has_ema() const noexcept { return ema_.has_value(); }
    void update_ema(double decay);
    std::vector<std::vector<T>>& ema_values() { return *ema_; }
    /// Copy of the model whose live weights are the EMA weights.
    BasicScoreModel with_ema_weights();

    /// Random re-initialisation of the output head (tests and probes only).
    void randomize_head(Rng& rng);

private:
    struct Block {
        nn::Conv3d<T> conv;
        nn::GroupNorm<T> norm;
        nn::Linear<T> mod_linear;
        nn::Modulation<T> mod;
        nn::SiLU<T> act;
        std::vector<T> dmod;
    };
    Block make_block(const std::string& name, int cin, int cout, Rng& rng);
    nn::Tensor<T> block_forward(Block& b, const nn::Tensor<T>& x, const std::vector<T>& emb, int n, bool keep);
    nn::Tensor<T> block_backward(Block& b, const nn::Tensor<T>& dy, std::vector<T>& demb, int n);
    std::vector<T> fourier(std::span<const double> c_noise) const;

    ScoreModelConfig cfg_;
    NoiseSchedule sched_;
    nn::Padding padding_ = nn::Padding::zeros;

    nn::Linear<T> embed_;
    std::vector<std::array<Block, 2>> enc_;
    std::array<Block, 2> mid_;
    std::vector<std::array<Block, 2>> dec_; ///< dec_[l] restores level l
    nn::Conv3d<T> head_;

    // forward caches
    int cached_n_ = 0;
    std::vector<T> emb_pre_;
    std::vector<T> emb_;
    std::vector<int> skip_channels_;
    std::vector<Preconditioning> pre_;

    std::optional<std::vector<std::vector<T>>> ema_;
};

using ScoreModel = BasicScoreModel<float>;

/// Rolls every channel by `shift` (periodic).
template <typename T>
nn::Tensor<T> roll(const nn::Tensor<T>& x, const Vec3i& shift);

enum class CoordinateMode { hold_in_place, shift_with_content };

/// max |D(shift x) - shift D(x)| over voxels at least |shift| away from the
/// borders, evaluated with periodic padding. Coordinate channels (the last
/// three conditioning channels) either stay put or move with the content.
template <typename T>
double shift_equivariance_probe(BasicScoreModel<T>& model, const nn::Tensor<T>& noisy,
                                const nn::Tensor<T>& cond, double sigma, const Vec3i& shift,
                                CoordinateMode mode = CoordinateMode::hold_in_place);

} // namespace csrd
