#include "csrd/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <Eigen/Core>

namespace csrd::nn {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr Eigen::Index kSlabColumns = 8192;

inline int wrap(int i, int n) { return i < 0 ? i + n : (i >= n ? i - n : i); }

// Row r = ci*27 + (dz+1)*9 + (dy+1)*3 + (dx+1) of the column matrix holds the
// input shifted by (dx, dy, dz). Only output planes z in [z0, z1) are written,
// so the matrix has (z1 - z0) * X * Y columns.
template <typename T>
void im2col3(const T* src, int cin, const Vec3i& s, Padding pad, T* cols, int z0, int z1) {
    const int X = s[0], Y = s[1], Z = s[2];
    const std::size_t V = voxel_count(s);
    const std::size_t ld = static_cast<std::size_t>(z1 - z0) * X * Y;
    const bool periodic = pad == Padding::periodic;
    for (int ci = 0; ci < cin; ++ci) {
        const T* in = src + static_cast<std::size_t>(ci) * V;
        for (int kz = -1; kz <= 1; ++kz)
            for (int ky = -1; ky <= 1; ++ky)
                for (int kx = -1; kx <= 1; ++kx) {
                    T* dst = cols + (static_cast<std::size_t>(ci) * 27 + (kz + 1) * 9 + (ky + 1) * 3 +
                                     (kx + 1)) *
                                        ld;
                    for (int z = z0; z < z1; ++z) {
                        int sz = z + kz;
                        const bool zin = sz >= 0 && sz < Z;
                        if (periodic) sz = wrap(sz, Z);
                        for (int y = 0; y < Y; ++y) {
                            T* d = dst + (static_cast<std::size_t>(z - z0) * Y + y) * X;
                            int sy = y + ky;
                            const bool yin = sy >= 0 && sy < Y;
                            if (periodic) sy = wrap(sy, Y);
                            if (!periodic && !(zin && yin)) {
                                std::fill(d, d + X, T{});
                                continue;
                            }
                            const T* row = in + (static_cast<std::size_t>(sz) * Y + sy) * X;
                            if (kx == 0) {
                                std::memcpy(d, row, sizeof(T) * X);
                            } else if (kx < 0) {
                                d[0] = periodic ? row[X - 1] : T{};
                                for (int x = 1; x < X; ++x) d[x] = row[x - 1];
                            } else {
                                for (int x = 0; x + 1 < X; ++x) d[x] = row[x + 1];
                                d[X - 1] = periodic ? row[0] : T{};
                            }
                        }
                    }
                }
    }
}

template <typename T>
void col2im3(const T* cols, int cin, const Vec3i& s, Padding pad, T* dst_all) {
    const int X = s[0], Y = s[1], Z = s[2];
    const std::size_t V = voxel_count(s);
    const bool periodic = pad == Padding::periodic;
    std::fill(dst_all, dst_all + static_cast<std::size_t>(cin) * V, T{});
    for (int ci = 0; ci < cin; ++ci) {
        T* out = dst_all + static_cast<std::size_t>(ci) * V;
        for (int kz = -1; kz <= 1; ++kz)
            for (int ky = -1; ky <= 1; ++ky)
                for (int kx = -1; kx <= 1; ++kx) {
                    const T* src = cols + (static_cast<std::size_t>(ci) * 27 + (kz + 1) * 9 +
                                           (ky + 1) * 3 + (kx + 1)) *
                                              V;
                    for (int z = 0; z < Z; ++z) {
                        int sz = z + kz;
                        const bool zin = sz >= 0 && sz < Z;
                        if (periodic) sz = wrap(sz, Z);
                        for (int y = 0; y < Y; ++y) {
                            int sy = y + ky;
                            const bool yin = sy >= 0 && sy < Y;
                            if (periodic) sy = wrap(sy, Y);
                            if (!periodic && !(zin && yin)) continue;
                            const T* c = src + (static_cast<std::size_t>(z) * Y + y) * X;
                            T* row = out + (static_cast<std::size_t>(sz) * Y + sy) * X;
                            if (kx == 0) {
                                for (int x = 0; x < X; ++x) row[x] += c[x];
                            } else if (kx < 0) {
                                if (periodic) row[X - 1] += c[0];
                                for (int x = 1; x < X; ++x) row[x - 1] += c[x];
                            } else {
                                for (int x = 0; x + 1 < X; ++x) row[x + 1] += c[x];
                                if (periodic) row[0] += c[X - 1];
                            }
                        }
                    }
                }
    }
}

template <typename T>
void lecun_fill(std::vector<T>& w, int fan_in, Rng& rng) {
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    for (auto& v : w) v = static_cast<T>(nd(rng));
}

} // namespace

// ---------------------------------------------------------------- Conv3d

template <typename T>
Conv3d<T>::Conv3d(std::string name, int cin, int cout, int kernel)
    : cin_(cin), cout_(cout), k_(kernel),
      weight_(name + ".weight", static_cast<std::size_t>(cout) * cin * kernel * kernel * kernel),
      bias_(name + ".bias", static_cast<std::size_t>(cout)) {
    if (kernel != 1 && kernel != 3) throw ConfigError("Conv3d supports kernel sizes 1 and 3");
}

template <typename T>
void Conv3d<T>::init_lecun(Rng& rng) {
    lecun_fill(weight_.value, cin_ * k_ * k_ * k_, rng);
    std::fill(bias_.value.begin(), bias_.value.end(), T{});
}

template <typename T>
void Conv3d<T>::zero_init() {
    std::fill(weight_.value.begin(), weight_.value.end(), T{});
    std::fill(bias_.value.begin(), bias_.value.end(), T{});
}

// Eigen's matrix-vector and reduction kernels peel a data-dependent number of
// leading elements to reach an aligned address, so their summation order
// follows the buffer address. Single-row products and bias sums use fixed-order
// loops so results are bitwise reproducible. Matrix-matrix products pack their
// operands first and are unaffected.
namespace {

template <typename T>
void row_times_matrix(const T* w, const T* c, Eigen::Index K, Eigen::Index V, T* y) {
    std::fill(y, y + V, T{});
    for (Eigen::Index k = 0; k < K; ++k) {
        const T wk = w[k];
        const T* row = c + k * V;
        for (Eigen::Index v = 0; v < V; ++v) y[v] += wk * row[v];
    }
}

template <typename T>
void accumulate_row_times_transpose(const T* dy, const T* c, Eigen::Index K, Eigen::Index V, T* dw) {
    for (Eigen::Index k = 0; k < K; ++k) {
        const T* row = c + k * V;
        T acc{};
        for (Eigen::Index v = 0; v < V; ++v) acc += dy[v] * row[v];
        dw[k] += acc;
    }
}

} // namespace

template <typename T>
Tensor<T> Conv3d<T>::forward(const Tensor<T>& x, bool keep) {
    if (x.c() != cin_)
        throw ShapeError(weight_.name + ": expected " + std::to_string(cin_) + " channels, got " +
                         x.shape_string());
    const Vec3i s = x.spatial();
    const auto V = static_cast<Eigen::Index>(x.voxels());
    const Eigen::Index K = static_cast<Eigen::Index>(cin_) * k_ * k_ * k_;
    Tensor<T> y(x.n(), cout_, s);

    Eigen::Map<const MatR<T>> W(weight_.value.data(), cout_, K);

    // Without a backward pass the column matrix is built a few planes at a
    // time; a whole-volume matrix for large inputs is mostly memory traffic.
    if (!keep && k_ != 1) {
        const Eigen::Index plane = static_cast<Eigen::Index>(s[0]) * s[1];
        const int slab = static_cast<int>(std::max<Eigen::Index>(1, kSlabColumns / plane));
        std::vector<T> scratch(static_cast<std::size_t>(K) * plane * std::min(slab, s[2]));
        for (int i = 0; i < x.n(); ++i) {
            for (int z0 = 0; z0 < s[2]; z0 += slab) {
                const int z1 = std::min(s[2], z0 + slab);
                const Eigen::Index n = plane * (z1 - z0);
                im2col3(x.sample(i), cin_, s, padding, scratch.data(), z0, z1);
                Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>> Y(y.sample(i) + plane * z0, cout_, n,
                                                               Eigen::OuterStride<>(V));
                if (cout_ == 1)
                    row_times_matrix(weight_.value.data(), scratch.data(), K, n, y.sample(i) + plane * z0);
                else
                    Y.noalias() = W * Eigen::Map<const MatR<T>>(scratch.data(), K, n);
                for (int o = 0; o < cout_; ++o) Y.row(o).array() += bias_.value[o];
            }
        }
        return y;
    }

    std::vector<T> scratch;
    if (keep) {
        cols_.resize(static_cast<std::size_t>(x.n()) * K * V);
        cached_n_ = x.n();
        cached_spatial_ = s;
    }

    for (int i = 0; i < x.n(); ++i) {
        const T* col = nullptr;
        T* slot = keep ? cols_.data() + static_cast<std::size_t>(i) * K * V : scratch.data();
        if (k_ == 1) {
            if (keep) std::copy(x.sample(i), x.sample(i) + K * V, slot);
            col = keep ? slot : x.sample(i);
        } else {
            im2col3(x.sample(i), cin_, s, padding, slot, 0, s[2]);
            col = slot;
        }
        Eigen::Map<const MatR<T>> C(col, K, V);
        Eigen::Map<MatR<T>> Y(y.sample(i), cout_, V);
        if (cout_ == 1)
            row_times_matrix(weight_.value.data(), col, K, V, y.sample(i));
        else
            Y.noalias() = W * C;
        for (int o = 0; o < cout_; ++o) Y.row(o).array() += bias_.value[o];
    }
    return y;
}

template <typename T>
Tensor<T> Conv3d<T>::backward(const Tensor<T>& dy) {
    if (cols_.empty() || dy.n() != cached_n_ || dy.spatial() != cached_spatial_ || dy.c() != cout_)
        throw ShapeError(weight_.name + ": backward without matching forward cache");
    const Vec3i s = cached_spatial_;
    const auto V = static_cast<Eigen::Index>(dy.voxels());
    const Eigen::Index K = static_cast<Eigen::Index>(cin_) * k_ * k_ * k_;
    Tensor<T> dx(dy.n(), cin_, s);

    Eigen::Map<const MatR<T>> W(weight_.value.data(), cout_, K);
    Eigen::Map<MatR<T>> dW(weight_.grad.data(), cout_, K);
    std::vector<T> dcols(k_ == 1 ? 0 : static_cast<std::size_t>(K) * V);
    for (int i = 0; i < dy.n(); ++i) {
        Eigen::Map<const MatR<T>> C(cols_.data() + static_cast<std::size_t>(i) * K * V, K, V);
        Eigen::Map<const MatR<T>> dY(dy.sample(i), cout_, V);
        if (cout_ == 1)
            accumulate_row_times_transpose(dy.sample(i), cols_.data() + static_cast<std::size_t>(i) * K * V, K, V,
                                           weight_.grad.data());
        else
            dW.noalias() += dY * C.transpose();
        for (int o = 0; o < cout_; ++o) {
            const T* row = dy.sample(i) + static_cast<std::size_t>(o) * V;
            T acc{};
            for (Eigen::Index v = 0; v < V; ++v) acc += row[v];
            bias_.grad[o] += acc;
        }
        if (k_ == 1) {
            Eigen::Map<MatR<T>> dX(dx.sample(i), K, V);
            dX.noalias() = W.transpose() * dY;
        } else {
            Eigen::Map<MatR<T>> dC(dcols.data(), K, V);
            dC.noalias() = W.transpose() * dY;
            col2im3(dcols.data(), cin_, s, padding, dx.sample(i));
        }
    }
    return dx;
}

// ---------------------------------------------------------------- GroupNorm

template <typename T>
GroupNorm<T>::GroupNorm(int channels, int groups, T eps) : channels_(channels), groups_(groups), eps_(eps) {
    if (groups < 1 || channels % groups != 0)
        throw ConfigError("GroupNorm: " + std::to_string(channels) + " channels not divisible into " +
                          std::to_string(groups) + " groups");
}

template <typename T>
Tensor<T> GroupNorm<T>::forward(const Tensor<T>& x, bool keep) {
    if (x.c() != channels_) throw ShapeError("GroupNorm: channel mismatch " + x.shape_string());
    Tensor<T> y(x.n(), x.c(), x.spatial());
    const std::size_t per = static_cast<std::size_t>(channels_ / groups_) * x.voxels();
    if (keep) inv_std_.assign(static_cast<std::size_t>(x.n()) * groups_, T{});
    for (int i = 0; i < x.n(); ++i)
        for (int g = 0; g < groups_; ++g) {
            const T* in = x.sample(i) + g * per;
            T* out = y.sample(i) + g * per;
            double sum = 0.0, sq = 0.0;
            for (std::size_t k = 0; k < per; ++k) sum += in[k];
            const double mean = sum / static_cast<double>(per);
            for (std::size_t k = 0; k < per; ++k) {
                const double d = in[k] - mean;
                sq += d * d;
            }
            const double inv = 1.0 / std::sqrt(sq / static_cast<double>(per) + static_cast<double>(eps_));
            for (std::size_t k = 0; k < per; ++k) out[k] = static_cast<T>((in[k] - mean) * inv);
            if (keep) inv_std_[static_cast<std::size_t>(i) * groups_ + g] = static_cast<T>(inv);
        }
    if (keep) xhat_ = y;
    return y;
}

template <typename T>
Tensor<T> GroupNorm<T>::backward(const Tensor<T>& dy) {
    if (!dy.same_shape(xhat_)) throw ShapeError("GroupNorm: backward without matching forward cache");
    Tensor<T> dx(dy.n(), dy.c(), dy.spatial());
    const std::size_t per = static_cast<std::size_t>(channels_ / groups_) * dy.voxels();
    for (int i = 0; i < dy.n(); ++i)
        for (int g = 0; g < groups_; ++g) {
            const T* d = dy.sample(i) + g * per;
            const T* xh = xhat_.sample(i) + g * per;
            T* out = dx.sample(i) + g * per;
            double md = 0.0, mdx = 0.0;
            for (std::size_t k = 0; k < per; ++k) {
                md += d[k];
                mdx += static_cast<double>(d[k]) * xh[k];
            }
            md /= static_cast<double>(per);
            mdx /= static_cast<double>(per);
            const double inv = inv_std_[static_cast<std::size_t>(i) * groups_ + g];
            for (std::size_t k = 0; k < per; ++k)
                out[k] = static_cast<T>(inv * (d[k] - md - xh[k] * mdx));
        }
    return dx;
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(std::string name, int in, int out)
    : in_(in), out_(out), weight_(name + ".weight", static_cast<std::size_t>(in) * out),
      bias_(name + ".bias", static_cast<std::size_t>(out)) {}

template <typename T>
void Linear<T>::init_lecun(Rng& rng) {
    lecun_fill(weight_.value, in_, rng);
    std::fill(bias_.value.begin(), bias_.value.end(), T{});
}

template <typename T>
void Linear<T>::zero_init() {
    std::fill(weight_.value.begin(), weight_.value.end(), T{});
    std::fill(bias_.value.begin(), bias_.value.end(), T{});
}

template <typename T>
std::vector<T> Linear<T>::forward(const std::vector<T>& x, int n, bool keep) {
    if (x.size() != static_cast<std::size_t>(n) * in_) throw ShapeError(weight_.name + ": input size");
    std::vector<T> y(static_cast<std::size_t>(n) * out_);
    for (int i = 0; i < n; ++i)
        for (int o = 0; o < out_; ++o) {
            T acc = bias_.value[o];
            for (int k = 0; k < in_; ++k) acc += weight_.value[static_cast<std::size_t>(o) * in_ + k] * x[i * in_ + k];
            y[static_cast<std::size_t>(i) * out_ + o] = acc;
        }
    if (keep) x_ = x;
    return y;
}

template <typename T>
std::vector<T> Linear<T>::backward(const std::vector<T>& dy, int n) {
    if (x_.size() != static_cast<std::size_t>(n) * in_) throw ShapeError(weight_.name + ": no forward cache");
    std::vector<T> dx(static_cast<std::size_t>(n) * in_, T{});
    for (int i = 0; i < n; ++i)
        for (int o = 0; o < out_; ++o) {
            const T g = dy[static_cast<std::size_t>(i) * out_ + o];
            bias_.grad[o] += g;
            for (int k = 0; k < in_; ++k) {
                weight_.grad[static_cast<std::size_t>(o) * in_ + k] += g * x_[i * in_ + k];
                dx[static_cast<std::size_t>(i) * in_ + k] += g * weight_.value[static_cast<std::size_t>(o) * in_ + k];
            }
        }
    return dx;
}

// ---------------------------------------------------------------- Modulation

template <typename T>
Tensor<T> Modulation<T>::forward(const Tensor<T>& x, const std::vector<T>& mod, bool keep) {
    const int C = x.c();
    if (mod.size() != static_cast<std::size_t>(x.n()) * 2 * C) throw ShapeError("Modulation: size");
    Tensor<T> y(x.n(), C, x.spatial());
    const std::size_t V = x.voxels();
    for (int i = 0; i < x.n(); ++i)
        for (int c = 0; c < C; ++c) {
            const T scale = T(1) + mod[static_cast<std::size_t>(i) * 2 * C + c];
            const T shift = mod[static_cast<std::size_t>(i) * 2 * C + C + c];
            const T* in = x.channel(i, c);
            T* out = y.channel(i, c);
            for (std::size_t v = 0; v < V; ++v) out[v] = in[v] * scale + shift;
        }
    if (keep) {
        x_ = x;
        mod_ = mod;
    }
    return y;
}

template <typename T>
Tensor<T> Modulation<T>::backward(const Tensor<T>& dy, std::vector<T>& dmod) {
    if (!dy.same_shape(x_)) throw ShapeError("Modulation: backward without forward cache");
    const int C = dy.c();
    const std::size_t V = dy.voxels();
    Tensor<T> dx(dy.n(), C, dy.spatial());
    dmod.assign(static_cast<std::size_t>(dy.n()) * 2 * C, T{});
    for (int i = 0; i < dy.n(); ++i)
        for (int c = 0; c < C; ++c) {
            const T scale = T(1) + mod_[static_cast<std::size_t>(i) * 2 * C + c];
            const T* d = dy.channel(i, c);
            const T* in = x_.channel(i, c);
            T* out = dx.channel(i, c);
            double ds = 0.0, db = 0.0;
            for (std::size_t v = 0; v < V; ++v) {
                out[v] = d[v] * scale;
                ds += static_cast<double>(d[v]) * in[v];
                db += d[v];
            }
            dmod[static_cast<std::size_t>(i) * 2 * C + c] = static_cast<T>(ds);
            dmod[static_cast<std::size_t>(i) * 2 * C + C + c] = static_cast<T>(db);
        }
    return dx;
}

// ---------------------------------------------------------------- SiLU

template <typename T>
T silu(T x) {
    return x / (T(1) + std::exp(-x));
}

template <typename T>
std::vector<T> silu_vec(const std::vector<T>& x) {
    std::vector<T> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = silu(x[i]);
    return y;
}

template <typename T>
std::vector<T> silu_vec_backward(const std::vector<T>& x, const std::vector<T>& dy) {
    std::vector<T> dx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-x[i]));
        dx[i] = dy[i] * s * (T(1) + x[i] * (T(1) - s));
    }
    return dx;
}

template <typename T>
Tensor<T> SiLU<T>::forward(const Tensor<T>& x, bool keep) {
    Tensor<T> y(x.n(), x.c(), x.spatial());
    const T* in = x.data();
    T* out = y.data();
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = silu(in[i]);
    if (keep) x_ = x;
    return y;
}

template <typename T>
Tensor<T> SiLU<T>::backward(const Tensor<T>& dy) {
    if (!dy.same_shape(x_)) throw ShapeError("SiLU: backward without forward cache");
    Tensor<T> dx(dy.n(), dy.c(), dy.spatial());
    for (std::size_t i = 0; i < dy.size(); ++i) {
        const T x = x_[i];
        const T s = T(1) / (T(1) + std::exp(-x));
        dx[i] = dy[i] * s * (T(1) + x * (T(1) - s));
    }
    return dx;
}

// ---------------------------------------------------------------- resampling

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
    const Vec3i s = x.spatial();
    if (s[0] % 2 || s[1] % 2 || s[2] % 2)
        throw ShapeError("avg_pool2 needs even extents, got " + to_string(s));
    const Vec3i h{s[0] / 2, s[1] / 2, s[2] / 2};
    Tensor<T> y(x.n(), x.c(), h);
    for (int i = 0; i < x.n(); ++i)
        for (int c = 0; c < x.c(); ++c) {
            const T* in = x.channel(i, c);
            T* out = y.channel(i, c);
            for (int z = 0; z < h[2]; ++z)
                for (int yy = 0; yy < h[1]; ++yy)
                    for (int xx = 0; xx < h[0]; ++xx) {
                        T acc{};
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx)
                                    acc += in[(static_cast<std::size_t>(2 * z + dz) * s[1] + 2 * yy + dy) * s[0] + 2 * xx + dx];
                        out[(static_cast<std::size_t>(z) * h[1] + yy) * h[0] + xx] = acc * T(0.125);
                    }
        }
    return y;
}

template <typename T>
Tensor<T> avg_pool2_backward(const Tensor<T>& dy) {
    const Vec3i h = dy.spatial();
    const Vec3i s{h[0] * 2, h[1] * 2, h[2] * 2};
    Tensor<T> dx(dy.n(), dy.c(), s);
    for (int i = 0; i < dy.n(); ++i)
        for (int c = 0; c < dy.c(); ++c) {
            const T* g = dy.channel(i, c);
            T* out = dx.channel(i, c);
            for (int z = 0; z < s[2]; ++z)
                for (int y = 0; y < s[1]; ++y)
                    for (int x = 0; x < s[0]; ++x)
                        out[(static_cast<std::size_t>(z) * s[1] + y) * s[0] + x] =
                            g[(static_cast<std::size_t>(z / 2) * h[1] + y / 2) * h[0] + x / 2] * T(0.125);
        }
    return dx;
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
    const Vec3i h = x.spatial();
    const Vec3i s{h[0] * 2, h[1] * 2, h[2] * 2};
    Tensor<T> y(x.n(), x.c(), s);
    for (int i = 0; i < x.n(); ++i)
        for (int c = 0; c < x.c(); ++c) {
            const T* in = x.channel(i, c);
            T* out = y.channel(i, c);
            for (int z = 0; z < s[2]; ++z)
                for (int yy = 0; yy < s[1]; ++yy) {
                    const T* row = in + (static_cast<std::size_t>(z / 2) * h[1] + yy / 2) * h[0];
                    T* o = out + (static_cast<std::size_t>(z) * s[1] + yy) * s[0];
                    for (int xx = 0; xx < s[0]; ++xx) o[xx] = row[xx / 2];
                }
        }
    return y;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& dy) {
    const Vec3i s = dy.spatial();
    const Vec3i h{s[0] / 2, s[1] / 2, s[2] / 2};
    Tensor<T> dx(dy.n(), dy.c(), h);
    for (int i = 0; i < dy.n(); ++i)
        for (int c = 0; c < dy.c(); ++c) {
            const T* g = dy.channel(i, c);
            T* out = dx.channel(i, c);
            for (int z = 0; z < s[2]; ++z)
                for (int y = 0; y < s[1]; ++y)
                    for (int x = 0; x < s[0]; ++x)
                        out[(static_cast<std::size_t>(z / 2) * h[1] + y / 2) * h[0] + x / 2] +=
                            g[(static_cast<std::size_t>(z) * s[1] + y) * s[0] + x];
        }
    return dx;
}

// ---------------------------------------------------------------- Adam

template <typename T>
Adam<T>::Adam(std::vector<Param<T>*> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (auto* p : params_) {
        m_.emplace_back(p->size(), T{});
        v_.emplace_back(p->size(), T{});
    }
}

template <typename T>
void Adam<T>::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
    const T step = static_cast<T>(opt_.lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(opt_.eps);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = *params_[k];
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const T g = p.grad[i];
            m[i] = b1 * m[i] + (T(1) - b1) * g;
            v[i] = b2 * v[i] + (T(1) - b2) * g * g;
            p.value[i] -= step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
        }
    }
}

#define CSRD_INSTANTIATE(T)                                                     \
    template class Conv3d<T>;                                                   \
    template class GroupNorm<T>;                                                \
    template class Linear<T>;                                                   \
    template class Modulation<T>;                                               \
    template class SiLU<T>;                                                     \
    template class Adam<T>;                                                     \
    template T silu<T>(T);                                                      \
    template std::vector<T> silu_vec<T>(const std::vector<T>&);                 \
    template std::vector<T> silu_vec_backward<T>(const std::vector<T>&, const std::vector<T>&); \
    template Tensor<T> avg_pool2<T>(const Tensor<T>&);                          \
    template Tensor<T> avg_pool2_backward<T>(const Tensor<T>&);                 \
    template Tensor<T> upsample2<T>(const Tensor<T>&);                          \
    template Tensor<T> upsample2_backward<T>(const Tensor<T>&);

CSRD_INSTANTIATE(float)
CSRD_INSTANTIATE(double)

#undef CSRD_INSTANTIATE

} // namespace csrd::nn
