#pragma once

// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/poisson.hpp>

#include "csrd/grid.hpp"
#include "csrd/sampler.hpp"

namespace oracle {

/// Data distribution N(mu, s^2): its noised version at sigma is
/// N(mu, s^2 + sigma^2), the exact denoiser is the posterior mean and the
/// exact score is -(x - mu) / (s^2 + sigma^2).
struct Gaussian {
    double mu = 0.0;
    double s = 1.0;

    double denoise(double x, double sigma) const {
        const double s2 = s * s, g2 = sigma * sigma;
        return (s2 * x + g2 * mu) / (s2 + g2);
    }
    double score(double x, double sigma) const { return -(x - mu) / (s * s + sigma * sigma); }

    /// Exact probability-flow solution: (r(t) - mu) / sqrt(s^2 + t^2) is conserved.
    double flow(double x0, double t0, double t1) const {
        return mu + (x0 - mu) * std::sqrt(s * s + t1 * t1) / std::sqrt(s * s + t0 * t0);
    }

    csrd::BatchDenoiseFn fn() const {
        return [*this](std::span<const double> x, double sigma, std::span<double> out) {
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = denoise(x[i], sigma);
        };
    }
};

inline double normal_cdf(double x, double mu, double s) { return 0.5 * std::erfc(-(x - mu) / (s * std::sqrt(2.0))); }

/// Asymptotic Kolmogorov distribution tail with the Stephens small-sample correction.
inline double ks_p_value(std::vector<double> xs, double mu, double s) {
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double d = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double f = normal_cdf(xs[i], mu, s);
        d = std::max({d, (i + 1) / n - f, f - i / n});
    }
    const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
    double p = 0.0;
    for (int k = 1; k <= 200; ++k) p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
    return std::clamp(p, 0.0, 1.0);
}

inline double mean(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m += x;
    return m / static_cast<double>(v.size());
}

inline double stddev(std::span<const double> v) {
    const double m = mean(v);
    double q = 0.0;
    for (double x : v) q += (x - m) * (x - m);
    return std::sqrt(q / static_cast<double>(v.size() - 1));
}

/// Pearson goodness of fit of integer samples against Poisson(mean). Cells
/// are single values k wherever the expected count is at least 5; the two
/// tails are pooled into the end cells.
inline double poisson_chi_square_p(const csrd::GridF& samples, double mean) {
    const boost::math::poisson_distribution<double> pois(mean);
    const double n = static_cast<double>(samples.size());
    int lo = 0;
    while (n * boost::math::cdf(pois, lo) < 5.0) ++lo;
    int hi = lo;
    while (n * boost::math::cdf(boost::math::complement(pois, hi)) >= 5.0) ++hi;
    // cells: (-inf, lo], lo+1, ..., hi-1, [hi, inf)
    std::vector<double> observed(static_cast<std::size_t>(hi - lo + 1), 0.0);
    for (float v : samples.values()) {
        const int k = std::clamp(static_cast<int>(v), lo, hi);
        observed[static_cast<std::size_t>(k - lo)] += 1.0;
    }
    double stat = 0.0;
    for (int k = lo; k <= hi; ++k) {
        double p = boost::math::pdf(pois, k);
        if (k == lo) p = boost::math::cdf(pois, lo);
        if (k == hi) p = boost::math::cdf(boost::math::complement(pois, hi - 1));
        const double e = n * p;
        const double o = observed[static_cast<std::size_t>(k - lo)];
        stat += (o - e) * (o - e) / e;
    }
    const boost::math::chi_squared_distribution<double> chi(static_cast<double>(hi - lo));
    return boost::math::cdf(boost::math::complement(chi, stat));
}

} // namespace oracle
