#pragma once

#include <string>
#include <vector>

#include "csrd/nn/tensor.hpp"
#include "csrd/random.hpp"

namespace csrd::nn {

enum class Padding { zeros, periodic };

// Every layer follows the same contract: forward(x, keep) caches what the
// backward pass needs only when keep is true; backward(dy) returns dx and
// accumulates into the parameter gradients.

template <typename T>
class Conv3d {
public:
    Conv3d() = default;
    Conv3d(std::string name, int cin, int cout, int kernel);

    Tensor<T> forward(const Tensor<T>& x, bool keep);
    Tensor<T> backward(const Tensor<T>& dy);

    void init_lecun(Rng& rng);
    void zero_init();
    std::vector<Param<T>*> params() { return {&weight_, &bias_}; }

    int in_channels() const noexcept { return cin_; }
    int out_channels() const noexcept { return cout_; }
    Padding padding = Padding::zeros;

private:
    int cin_ = 0, cout_ = 0, k_ = 1;
    Param<T> weight_; ///< cout x (cin * k^3), row-major
    Param<T> bias_;
    std::vector<T> cols_; ///< cached im2col per sample (or the raw input when k == 1)
    int cached_n_ = 0;
    Vec3i cached_spatial_{0, 0, 0};
};

/// Group normalization without affine terms; the per-block modulation
/// supplies scale and shift.
template <typename T>
class GroupNorm {
public:
    GroupNorm() = default;
    GroupNorm(int channels, int groups, T eps = T(1e-5));

    Tensor<T> forward(const Tensor<T>& x, bool keep);
    Tensor<T> backward(const Tensor<T>& dy);

private:
    int channels_ = 0, groups_ = 1;
    T eps_ = T(1e-5);
    Tensor<T> xhat_;
    std::vector<T> inv_std_; ///< per (sample, group)
};

/// Dense layer on (n x in) row-major matrices.
template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(std::string name, int in, int out);

    std::vector<T> forward(const std::vector<T>& x, int n, bool keep);
    std::vector<T> backward(const std::vector<T>& dy, int n);

    void init_lecun(Rng& rng);
    void zero_init();
    std::vector<Param<T>*> params() { return {&weight_, &bias_}; }
    int in_features() const noexcept { return in_; }
    int out_features() const noexcept { return out_; }

private:
    int in_ = 0, out_ = 0;
    Param<T> weight_; ///< out x in
    Param<T> bias_;
    std::vector<T> x_;
};

/// y = x * (1 + scale_c) + shift_c with (scale, shift) = mod[n, 0:C], mod[n, C:2C].
template <typename T>
class Modulation {
public:
    Tensor<T> forward(const Tensor<T>& x, const std::vector<T>& mod, bool keep);
    /// Returns dx; writes d(mod) into dmod (n x 2C).
    Tensor<T> backward(const Tensor<T>& dy, std::vector<T>& dmod);

private:
    Tensor<T> x_;
    std::vector<T> mod_;
};

template <typename T>
class SiLU {
public:
    Tensor<T> forward(const Tensor<T>& x, bool keep);
    Tensor<T> backward(const Tensor<T>& dy);

private:
    Tensor<T> x_;
};

template <typename T>
T silu(T x);
template <typename T>
std::vector<T> silu_vec(const std::vector<T>& x);
template <typename T>
std::vector<T> silu_vec_backward(const std::vector<T>& x, const std::vector<T>& dy);

/// 2x2x2 average pooling; spatial extents must be even.
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x);
template <typename T>
Tensor<T> avg_pool2_backward(const Tensor<T>& dy);

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& dy);

/// Adaptive-moment optimizer with bias correction, no weight decay.
template <typename T>
class Adam {
public:
    struct Options {
        double lr = 2e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam() = default;
    Adam(std::vector<Param<T>*> params, Options opt);

    void step();
    long long steps() const noexcept { return t_; }
    const Options& options() const noexcept { return opt_; }

    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    void set_steps(long long t) { t_ = t; }

private:
    std::vector<Param<T>*> params_;
    Options opt_;
    std::vector<std::vector<T>> m_, v_;
    long long t_ = 0;
};

} // namespace csrd::nn
