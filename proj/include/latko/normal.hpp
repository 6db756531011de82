#pragma once

// Univariate and bivariate normal distribution helpers.

#include "latko/core.hpp"

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/special_functions/erf.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace latko {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;

inline double norm_pdf(double x) noexcept {
    return std::exp(-0.5 * x * x - kLogSqrt2Pi);
}

inline double norm_logpdf(double x) noexcept { return -0.5 * x * x - kLogSqrt2Pi; }

inline double norm_cdf(double x) noexcept {
    return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0);
}

/// log Phi(x), accurate in the far lower tail.
inline double norm_logcdf(double x) noexcept {
    if (x > -30.0) return std::log(norm_cdf(x));
    // Asymptotic expansion of the Mills ratio.
    const double x2 = x * x;
    return -0.5 * x2 - kLogSqrt2Pi - std::log(-x) +
           std::log1p(-1.0 / x2 + 3.0 / (x2 * x2));
}

inline double norm_quantile(double p) {
    if (p <= 0.0) return -kInf;
    if (p >= 1.0) return kInf;
    return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

/// P(a < X <= b) for X ~ N(0, 1).
inline double norm_interval(double a, double b) noexcept {
    if (a >= b) return 0.0;
    // Use the tail on the side away from the bulk to avoid cancellation.
    if (a > 0.0) return norm_cdf(-a) - norm_cdf(-b);
    return norm_cdf(b) - norm_cdf(a);
}

/// log P(a < X <= b) for X ~ N(0, 1), robust when both bounds sit in a tail.
inline double norm_log_interval(double a, double b) noexcept {
    if (a >= b) return -kInf;
    if (a > 0.0) {
        // log(Q(a) - Q(b)) with Q(x) = Phi(-x)
        const double la = norm_logcdf(-a);
        const double lb = norm_logcdf(-b);
        return la + std::log1p(-std::exp(lb - la));
    }
    if (b < 0.0) {
        const double lb = norm_logcdf(b);
        const double la = norm_logcdf(a);
        return lb + std::log1p(-std::exp(la - lb));
    }
    return std::log(norm_cdf(b) - norm_cdf(a));
}

namespace detail {

// Robert (1995) exponential rejection for the tail (a, b] with a > 0.
inline double truncnorm_upper_tail(double a, double b, Rng &rng) {
    const double alpha = 0.5 * (a + std::sqrt(a * a + 4.0));
    if (std::isfinite(b) && b - a < 1.0 / alpha) {
        // Narrow window: uniform proposal on (a, b].
        for (;;) {
            const double x = a + (b - a) * rng.uniform();
            if (std::log(rng.uniform()) <= -0.5 * (x * x - a * a)) return x;
        }
    }
    for (;;) {
        const double x = a - std::log(rng.uniform()) / alpha;
        if (x > b) continue;
        const double d = x - alpha;
        if (std::log(rng.uniform()) <= -0.5 * d * d) return x;
    }
}

} // namespace detail

/// Draw from N(0, 1) truncated to (a, b].
inline double sample_truncnorm_std(double a, double b, Rng &rng) {
    if (!(a < b)) throw NumericalError("truncated normal: empty interval");
    if (a >= 4.0) return detail::truncnorm_upper_tail(a, b, rng);
    if (b <= -4.0) return -detail::truncnorm_upper_tail(-b, -a, rng);
    double x;
    if (a > 0.0) {
        const double qa = norm_cdf(-a), qb = norm_cdf(-b);
        x = -norm_quantile(qb + (qa - qb) * rng.uniform());
    } else {
        const double pa = norm_cdf(a), pb = norm_cdf(b);
        x = norm_quantile(pa + (pb - pa) * rng.uniform());
    }
    // Round-off can push the draw onto the boundary of a very thin interval.
    return std::clamp(x, std::nextafter(a, kInf), b);
}

/// Draw from N(mean, sd^2) truncated to (lo, hi].
inline double sample_truncnorm(double mean, double sd, double lo, double hi, Rng &rng) {
    const double z = sample_truncnorm_std((lo - mean) / sd, (hi - mean) / sd, rng);
    return std::clamp(mean + sd * z, std::nextafter(lo, kInf), hi);
}

/// P(X > h, Y > k) for a standard bivariate normal with correlation r
/// (Drezner-Wesolowsky as refined by Genz).
inline double bvn_upper(double h, double k, double r) {
    if (h == kInf || k == kInf) return 0.0;
    if (h == -kInf) return k == -kInf ? 1.0 : norm_cdf(-k);
    if (k == -kInf) return norm_cdf(-h);

    constexpr double two_pi = 2.0 * std::numbers::pi;
    using boost::math::quadrature::gauss;
    auto quad = [&](auto &&f) {
        // Symmetric Gauss-Legendre rule on [-1, 1]; the abscissae tables hold
        // the non-negative half.
        double s = 0.0;
        if (std::abs(r) < 0.3) {
            const auto &x = gauss<double, 6>::abscissa();
            const auto &w = gauss<double, 6>::weights();
            for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * (f(-x[i]) + f(x[i]));
        } else if (std::abs(r) < 0.75) {
            const auto &x = gauss<double, 12>::abscissa();
            const auto &w = gauss<double, 12>::weights();
            for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * (f(-x[i]) + f(x[i]));
        } else {
            const auto &x = gauss<double, 20>::abscissa();
            const auto &w = gauss<double, 20>::weights();
            for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * (f(-x[i]) + f(x[i]));
        }
        return s;
    };

    double hk = h * k;
    double bvn = 0.0;
    if (std::abs(r) < 0.925) {
        const double hs = 0.5 * (h * h + k * k);
        const double asr = std::asin(r);
        bvn = quad([&](double x) {
            const double sn = std::sin(asr * (x + 1.0) / 2.0);
            return std::exp((sn * hk - hs) / (1.0 - sn * sn));
        });
        return bvn * asr / (2.0 * two_pi) + norm_cdf(-h) * norm_cdf(-k);
    }
    if (r < 0.0) {
        k = -k;
        hk = -hk;
    }
    if (std::abs(r) < 1.0) {
        const double as = (1.0 - r) * (1.0 + r);
        double a = std::sqrt(as);
        const double bs = (h - k) * (h - k);
        const double c = (4.0 - hk) / 8.0;
        const double d = (12.0 - hk) / 16.0;
        bvn = a * std::exp(-(bs / as + hk) / 2.0) *
              (1.0 - c * (bs - as) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as * as / 5.0);
        if (hk > -160.0) {
            const double b = std::sqrt(bs);
            bvn -= std::exp(-hk / 2.0) * std::sqrt(two_pi) * norm_cdf(-b / a) * b *
                   (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a /= 2.0;
        bvn += quad([&](double x) {
            const double xs = std::pow(a * (x + 1.0), 2);
            const double rs = std::sqrt(1.0 - xs);
            const double asr = -(bs / xs + hk) / 2.0;
            if (asr <= -100.0) return 0.0;
            return a * std::exp(asr) *
                   (std::exp(-hk * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs -
                    (1.0 + c * xs * (1.0 + d * xs)));
        });
        bvn = -bvn / two_pi;
    }
    if (r > 0.0) return bvn + norm_cdf(-std::max(h, k));
    bvn = -bvn;
    if (k > h) bvn += norm_cdf(k) - norm_cdf(h);
    return std::max(bvn, 0.0);
}

/// P(X <= h, Y <= k) for a standard bivariate normal with correlation r.
inline double bvn_cdf(double h, double k, double r) { return bvn_upper(-h, -k, r); }

/// P(a1 < X <= b1, a2 < Y <= b2) for a standard bivariate normal.
inline double bvn_rectangle(double a1, double b1, double a2, double b2, double r) {
    const double p = bvn_cdf(b1, b2, r) - bvn_cdf(a1, b2, r) - bvn_cdf(b1, a2, r) +
                     bvn_cdf(a1, a2, r);
    return std::max(p, 0.0);
}

} // namespace latko
