#pragma once

// Pairwise mixed-type correlation matrix (Pearson, polyserial, polychoric)
// used to initialise copula fitting.

#include "latko/data.hpp"
#include "latko/normal.hpp"

#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <utility>
#include <vector>

namespace latko {

struct MixedCorrelationOptions {
    int min_pairs = 30;
    double rho_bound = 0.995;
};

struct MixedCorrelation {
    Matrix corr;
    /// Pairs whose pairwise likelihood maximization failed and that fell back
    /// to the Spearman-based estimate.
    std::vector<std::pair<int, int>> fallback_pairs;
};

/// Thresholds Phi^{-1}(cumulative share below category k), k = 1..K, from
/// the observed frequencies of a discrete variable; clamped to [-8, 8].
inline std::vector<double> thresholds_from_frequencies(const std::vector<double> &counts) {
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    std::vector<double> tau;
    double cum = 0.0;
    for (std::size_t k = 0; k + 1 < counts.size(); ++k) {
        cum += counts[k];
        tau.push_back(std::clamp(norm_quantile(cum / total), -8.0, 8.0));
    }
    return tau;
}

/// Projects a symmetric matrix onto a correlation matrix: eigenvalues below
/// `floor` are raised to it, then the diagonal is rescaled to one.
inline Matrix project_correlation_psd(const Matrix &a, double floor = 0.0) {
    const Matrix sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
    Vector ev = es.eigenvalues().cwiseMax(floor);
    Matrix out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    Vector scale = out.diagonal().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
    out = scale.asDiagonal() * out * scale.asDiagonal();
    out = 0.5 * (out + out.transpose()).eval();
    out.diagonal().setOnes();
    return out;
}

namespace detail {

inline double pearson(const std::vector<double> &x, const std::vector<double> &y) {
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0 || syy <= 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

inline std::vector<double> midranks(const std::vector<double> &x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t s = 0; s < idx.size();) {
        std::size_t e = s;
        while (e + 1 < idx.size() && x[idx[e + 1]] == x[idx[s]]) ++e;
        const double mid = 0.5 * static_cast<double>(s + e) + 1.0;
        for (std::size_t k = s; k <= e; ++k) r[idx[k]] = mid;
        s = e + 1;
    }
    return r;
}

/// Spearman-based latent correlation 2 sin(pi r_s / 6).
inline double spearman_latent(const std::vector<double> &x, const std::vector<double> &y) {
    const double rs = pearson(midranks(x), midranks(y));
    return 2.0 * std::sin(std::numbers::pi * rs / 6.0);
}

struct Maximized {
    double rho;
    bool ok;
};

template <class NegLogLik>
Maximized brent_rho(NegLogLik &&nll, double bound) {
    std::uintmax_t max_iter = 200;
    auto [rho, val] =
        boost::math::tools::brent_find_minima(nll, -bound, bound, 40, max_iter);
    const bool interior = std::abs(rho) < bound - 1e-6;
    return {rho, std::isfinite(val) && max_iter < 200 && interior};
}

inline std::vector<double> category_counts(const std::vector<double> &codes, int ncat) {
    std::vector<double> c(ncat, 0.0);
    for (double v : codes) c[static_cast<int>(v)] += 1.0;
    return c;
}

inline double bound_at(const std::vector<double> &tau, int k) {
    // Category k occupies (tau[k-1], tau[k]].
    if (k <= 0) return -kInf;
    if (k > static_cast<int>(tau.size())) return kInf;
    return tau[k - 1];
}

inline Maximized polyserial(const std::vector<double> &x, const std::vector<double> &codes,
                            const std::vector<double> &tau, double bound) {
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double sxx = 0;
    for (double v : x) sxx += (v - mx) * (v - mx);
    const double sd = std::sqrt(sxx / n);
    if (sd <= 0) return {0.0, false};
    std::vector<double> xs(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) xs[i] = (x[i] - mx) / sd;
    auto nll = [&](double rho) {
        const double s = std::sqrt(1.0 - rho * rho);
        double ll = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const int k = static_cast<int>(codes[i]);
            const double lo = (bound_at(tau, k) - rho * xs[i]) / s;
            const double hi = (bound_at(tau, k + 1) - rho * xs[i]) / s;
            ll += norm_log_interval(lo, hi);
        }
        return -ll;
    };
    return brent_rho(nll, bound);
}

inline Maximized polychoric(const std::vector<double> &c1, const std::vector<double> &c2,
                            const std::vector<double> &tau1, const std::vector<double> &tau2,
                            double bound) {
    const int k1 = static_cast<int>(tau1.size()) + 1;
    const int k2 = static_cast<int>(tau2.size()) + 1;
    Matrix table = Matrix::Zero(k1, k2);
    for (std::size_t i = 0; i < c1.size(); ++i)
        table(static_cast<int>(c1[i]), static_cast<int>(c2[i])) += 1.0;
    auto nll = [&](double rho) {
        double ll = 0.0;
        for (int a = 0; a < k1; ++a)
            for (int b = 0; b < k2; ++b) {
                if (table(a, b) == 0.0) continue;
                const double pr = bvn_rectangle(bound_at(tau1, a), bound_at(tau1, a + 1),
                                                bound_at(tau2, b), bound_at(tau2, b + 1), rho);
                ll += table(a, b) * std::log(std::max(pr, 1e-300));
            }
        return -ll;
    };
    return brent_rho(nll, bound);
}

} // namespace detail

/// Pairwise latent correlations of a mixed dataset projected onto the
/// correlation-matrix cone. Pairs are computed on jointly observed rows;
/// discrete thresholds come from each variable's observed margin.
inline MixedCorrelation empirical_mixed_correlation(const MixedDataset &ds,
                                                    const MixedCorrelationOptions &opt = {}) {
    const auto n = ds.rows();
    const auto p = ds.cols();
    MixedCorrelation out;
    out.corr = Matrix::Identity(p, p);

    std::vector<std::vector<double>> tau(p);
    for (Eigen::Index j = 0; j < p; ++j) {
        if (!ds.meta[j].discrete()) continue;
        std::vector<double> counts(ds.meta[j].n_categories, 0.0);
        for (Eigen::Index i = 0; i < n; ++i)
            if (ds.observed(i, j)) counts[ds.code(i, j)] += 1.0;
        tau[j] = thresholds_from_frequencies(counts);
    }

    std::vector<double> x, y;
    for (Eigen::Index a = 0; a < p; ++a) {
        for (Eigen::Index b = a + 1; b < p; ++b) {
            x.clear();
            y.clear();
            for (Eigen::Index i = 0; i < n; ++i)
                if (ds.observed(i, a) && ds.observed(i, b)) {
                    x.push_back(ds.values(i, a));
                    y.push_back(ds.values(i, b));
                }
            if (static_cast<int>(x.size()) < opt.min_pairs)
                throw InputError("insufficient overlap between '" + ds.meta[a].name + "' and '" +
                                 ds.meta[b].name + "' (" + std::to_string(x.size()) + " rows)");
            if (x.size() < 3) {
                out.fallback_pairs.emplace_back(static_cast<int>(a), static_cast<int>(b));
                continue;
            }
            const bool da = ds.meta[a].discrete(), db = ds.meta[b].discrete();
            detail::Maximized est{0.0, true};
            if (!da && !db)
                est = {detail::pearson(x, y), true};
            else if (!da && db)
                est = detail::polyserial(x, y, tau[b], opt.rho_bound);
            else if (da && !db)
                est = detail::polyserial(y, x, tau[a], opt.rho_bound);
            else
                est = detail::polychoric(x, y, tau[a], tau[b], opt.rho_bound);
            if (!est.ok) {
                est.rho = detail::spearman_latent(x, y);
                out.fallback_pairs.emplace_back(static_cast<int>(a), static_cast<int>(b));
            }
            out.corr(a, b) = out.corr(b, a) = std::clamp(est.rho, -1.0, 1.0);
        }
    }
    out.corr = project_correlation_psd(out.corr);
    return out;
}

} // namespace latko
