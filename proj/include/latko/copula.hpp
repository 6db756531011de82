#pragma once

// Gaussian copula model for mixed continuous/binary/ordinal predictors with
// missing cells, fitted by stochastic proximal gradient ascent on the
// observed-data likelihood.

#include "latko/data.hpp"
#include "latko/mixed_correlation.hpp"
#include "latko/normal.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace latko {

// ---------------------------------------------------------------------------
// Threshold reparametrization: c_1 = u_1, c_k = c_{k-1} + exp(u_k).

inline std::vector<double> thresholds_from_u(std::span<const double> u) {
    std::vector<double> c(u.size());
    for (std::size_t k = 0; k < u.size(); ++k) c[k] = k == 0 ? u[0] : c[k - 1] + std::exp(u[k]);
    return c;
}

inline std::vector<double> u_from_thresholds(std::span<const double> c) {
    std::vector<double> u(c.size());
    for (std::size_t k = 0; k < c.size(); ++k) {
        if (k == 0) {
            u[0] = c[0];
            continue;
        }
        if (!(c[k] > c[k - 1])) throw InputError("thresholds must be strictly increasing");
        u[k] = std::log(c[k] - c[k - 1]);
    }
    return u;
}

/// F_j: continuous margins are c + d z*, discrete margins cut z* at
/// thresholds derived from the unconstrained vector u.
struct MarginalTransform {
    bool discrete = false;
    double c = 0.0;
    double d = 1.0;
    std::vector<double> u;

    static MarginalTransform continuous(double c, double d) { return {false, c, d, {}}; }
    static MarginalTransform from_thresholds(std::span<const double> t) {
        return {true, 0.0, 1.0, u_from_thresholds(t)};
    }

    std::vector<double> thresholds() const { return thresholds_from_u(u); }
    int n_thresholds() const noexcept { return static_cast<int>(u.size()); }
};

/// Lower/upper bound of category k given thresholds t_1..t_K:
/// category k occupies (t_k, t_{k+1}] with t_0 = -inf, t_{K+1} = +inf.
inline double category_lower(std::span<const double> t, int k) noexcept {
    return k <= 0 ? -kInf : t[k - 1];
}
inline double category_upper(std::span<const double> t, int k) noexcept {
    return k >= static_cast<int>(t.size()) ? kInf : t[k];
}

/// Category of an underlying value: the k with z in (t_k, t_{k+1}].
inline int category_of(std::span<const double> t, double z) noexcept {
    return static_cast<int>(std::lower_bound(t.begin(), t.end(), z) - t.begin());
}

struct CopulaParams {
    Matrix L; // lower triangular, unit row norms, Sigma = L L^T
    std::vector<MarginalTransform> margins;

    Eigen::Index dim() const noexcept { return L.rows(); }
    Matrix sigma() const { return L * L.transpose(); }

    /// Value of the observed variable implied by an underlying value.
    double transform(Eigen::Index j, double zstar) const {
        const auto &m = margins[j];
        if (!m.discrete) return m.c + m.d * zstar;
        return category_of(m.thresholds(), zstar);
    }

    void validate(double tol = 1e-10) const {
        const auto p = dim();
        if (L.cols() != p || static_cast<Eigen::Index>(margins.size()) != p)
            throw InputError("copula parameters have inconsistent dimensions");
        for (Eigen::Index a = 0; a < p; ++a) {
            if (!(L(a, a) > 1e-8)) throw NumericalError("Cholesky factor is singular");
            for (Eigen::Index b = a + 1; b < p; ++b)
                if (L(a, b) != 0.0) throw InputError("Cholesky factor is not lower triangular");
            if (std::abs(L.row(a).squaredNorm() - 1.0) > tol)
                throw NumericalError("Sigma does not have unit diagonal");
        }
        for (const auto &m : margins)
            if (!m.discrete && !(m.d > 0.0)) throw NumericalError("non-positive scale d_j");
    }

    /// Builds parameters from a correlation matrix and margins.
    static CopulaParams from_sigma(const Matrix &sigma, std::vector<MarginalTransform> margins) {
        Eigen::LLT<Matrix> llt(sigma);
        if (llt.info() != Eigen::Success) throw NumericalError("Sigma is not positive definite");
        CopulaParams out{llt.matrixL(), std::move(margins)};
        for (Eigen::Index a = 0; a < out.L.rows(); ++a) out.L.row(a).normalize();
        return out;
    }
};

/// Quantities derived from Xi that the samplers and gradients reuse.
struct PreparedCopula {
    const CopulaParams *params = nullptr;
    Matrix sigma;
    Matrix precision;
    Matrix L_inv;
    Vector cond_sd; // 1 / sqrt(Q_jj)
    std::vector<std::vector<double>> thresholds;
    double log_det_L = 0.0;

    explicit PreparedCopula(const CopulaParams &xi) : params(&xi) {
        const auto p = xi.dim();
        sigma = xi.sigma();
        L_inv = xi.L.triangularView<Eigen::Lower>().solve(Matrix::Identity(p, p));
        precision = L_inv.transpose() * L_inv;
        cond_sd.resize(p);
        for (Eigen::Index j = 0; j < p; ++j) {
            if (!(precision(j, j) > 0.0) || !std::isfinite(precision(j, j)))
                throw NumericalError("conditional variance is not positive");
            cond_sd[j] = 1.0 / std::sqrt(precision(j, j));
        }
        thresholds.resize(p);
        for (Eigen::Index j = 0; j < p; ++j)
            if (xi.margins[j].discrete) thresholds[j] = xi.margins[j].thresholds();
        log_det_L = xi.L.diagonal().array().log().sum();
    }

    /// Conditional mean of coordinate j given the others (Gaussian part).
    double cond_mean(Eigen::Index j, const Eigen::Ref<const Vector> &z) const {
        return z[j] - precision.row(j).dot(z) / precision(j, j);
    }
};

// ---------------------------------------------------------------------------
// Underlying-state initialisation and Gibbs sampling

struct UnderlyingState {
    RowMatrix zstar;
};

/// Sets z* of observed continuous cells to (z - c) / d.
inline void sync_observed_continuous(const MixedDataset &ds, const CopulaParams &xi,
                                     UnderlyingState &state) {
    for (Eigen::Index i = 0; i < ds.rows(); ++i)
        for (Eigen::Index j = 0; j < ds.cols(); ++j)
            if (ds.observed(i, j) && !xi.margins[j].discrete)
                state.zstar(i, j) = (ds.values(i, j) - xi.margins[j].c) / xi.margins[j].d;
}

/// Deterministic starting state: observed continuous cells mapped exactly,
/// observed discrete cells at the standard-normal mean of their rectangle,
/// missing cells at zero.
inline UnderlyingState initial_state(const MixedDataset &ds, const CopulaParams &xi) {
    UnderlyingState st{RowMatrix::Zero(ds.rows(), ds.cols())};
    std::vector<std::vector<double>> t(ds.cols());
    for (Eigen::Index j = 0; j < ds.cols(); ++j)
        if (xi.margins[j].discrete) t[j] = xi.margins[j].thresholds();
    for (Eigen::Index i = 0; i < ds.rows(); ++i)
        for (Eigen::Index j = 0; j < ds.cols(); ++j) {
            if (!ds.observed(i, j)) continue;
            if (!xi.margins[j].discrete) {
                st.zstar(i, j) = (ds.values(i, j) - xi.margins[j].c) / xi.margins[j].d;
                continue;
            }
            const int k = ds.code(i, j);
            const double lo = category_lower(t[j], k), hi = category_upper(t[j], k);
            const double mass = norm_interval(lo, hi);
            double m = mass > 1e-12 ? (norm_pdf(lo) - norm_pdf(hi)) / mass : 0.0;
            if (!(m > lo && m <= hi)) m = std::isfinite(lo) ? (std::isfinite(hi) ? 0.5 * (lo + hi) : lo + 0.5) : hi - 0.5;
            st.zstar(i, j) = m;
        }
    return st;
}

/// One Gibbs scan over the coordinates of row i under N(0, Sigma):
/// missing cells from the unconstrained conditional, observed discrete cells
/// from the conditional truncated to the observed rectangle. Observed
/// continuous cells are not touched. `order` may permute the scan.
inline void gibbs_sweep_marginal(Eigen::Index i, const MixedDataset &ds, const PreparedCopula &pc,
                                 UnderlyingState &state, Rng &rng,
                                 std::span<const int> order = {}) {
    const auto p = ds.cols();
    auto z = state.zstar.row(i);
    for (Eigen::Index s = 0; s < p; ++s) {
        const Eigen::Index j = order.empty() ? s : order[s];
        const bool obs = ds.observed(i, j);
        const bool disc = pc.params->margins[j].discrete;
        if (obs && !disc) continue;
        const double qjj = pc.precision(j, j);
        const double m = z[j] - pc.precision.row(j).dot(z) / qjj;
        const double sd = pc.cond_sd[j];
        if (!obs) {
            z[j] = m + sd * rng.normal();
        } else {
            const int k = ds.code(i, j);
            const auto &t = pc.thresholds[j];
            z[j] = sample_truncnorm(m, sd, category_lower(t, k), category_upper(t, k), rng);
        }
    }
}

// ---------------------------------------------------------------------------
// Flat parameter layout

/// Maps Xi to a flat vector: per variable [c, d] (continuous) or u
/// (discrete), followed by the lower triangle of L row by row.
struct CopulaLayout {
    std::vector<int> margin_offset;
    int l_offset = 0;
    int size = 0;
    Eigen::Index p = 0;

    explicit CopulaLayout(const CopulaParams &xi) : p(xi.dim()) {
        int off = 0;
        for (const auto &m : xi.margins) {
            margin_offset.push_back(off);
            off += m.discrete ? m.n_thresholds() : 2;
        }
        l_offset = off;
        size = off + static_cast<int>(p * (p + 1) / 2);
    }

    int l_index(Eigen::Index a, Eigen::Index b) const noexcept {
        return l_offset + static_cast<int>(a * (a + 1) / 2 + b);
    }

    Vector pack(const CopulaParams &xi) const {
        Vector v(size);
        for (Eigen::Index j = 0; j < p; ++j) {
            const auto &m = xi.margins[j];
            const int o = margin_offset[j];
            if (m.discrete) {
                for (int k = 0; k < m.n_thresholds(); ++k) v[o + k] = m.u[k];
            } else {
                v[o] = m.c;
                v[o + 1] = m.d;
            }
        }
        for (Eigen::Index a = 0; a < p; ++a)
            for (Eigen::Index b = 0; b <= a; ++b) v[l_index(a, b)] = xi.L(a, b);
        return v;
    }

    CopulaParams unpack(const Vector &v, const CopulaParams &shape) const {
        CopulaParams out = shape;
        for (Eigen::Index j = 0; j < p; ++j) {
            auto &m = out.margins[j];
            const int o = margin_offset[j];
            if (m.discrete) {
                for (int k = 0; k < m.n_thresholds(); ++k) m.u[k] = v[o + k];
            } else {
                m.c = v[o];
                m.d = v[o + 1];
            }
        }
        out.L.setZero();
        for (Eigen::Index a = 0; a < p; ++a)
            for (Eigen::Index b = 0; b <= a; ++b) out.L(a, b) = v[l_index(a, b)];
        return out;
    }
};

// ---------------------------------------------------------------------------
// Densities and gradients

/// Complete-data log density psi_i at the underlying vector: log phi(z*|Sigma)
/// minus sum of log d_j over observed continuous cells.
inline double complete_log_density(const MixedDataset &ds, Eigen::Index i, const PreparedCopula &pc,
                                   const Eigen::Ref<const Vector> &z) {
    const auto p = z.size();
    const Vector v = pc.params->L.triangularView<Eigen::Lower>().solve(z);
    double out = -0.5 * v.squaredNorm() - static_cast<double>(p) * kLogSqrt2Pi - pc.log_det_L;
    for (Eigen::Index j = 0; j < p; ++j)
        if (ds.observed(i, j) && !pc.params->margins[j].discrete)
            out -= std::log(pc.params->margins[j].d);
    return out;
}

struct RowGradient {
    Vector grad;
    Vector neg_hess; // diagonal of the negative Hessian, per parameter
    bool clamped = false;
};

/// Single-sample stochastic gradient of log f_i at Xi given an underlying
/// draw consistent with the observed cells. Also returns the negative second
/// derivatives used by the diagonal preconditioner. Results are accumulated
/// into `acc` when given.
inline void grad_loglik_sample(const MixedDataset &ds, Eigen::Index i,
                               const Eigen::Ref<const Vector> &z, const PreparedCopula &pc,
                               const CopulaLayout &layout, RowGradient &acc) {
    constexpr double kMassFloor = 1e-300;
    const auto &xi = *pc.params;
    const auto p = z.size();
    const Vector w = pc.precision * z;
    const Vector v = pc.L_inv * z;

    for (Eigen::Index j = 0; j < p; ++j) {
        if (!ds.observed(i, j)) continue;
        const auto &m = xi.margins[j];
        const int o = layout.margin_offset[j];
        const double qjj = pc.precision(j, j);
        if (!m.discrete) {
            const double zj = z[j];
            acc.grad[o] += w[j] / m.d;
            acc.grad[o + 1] += (zj * w[j] - 1.0) / m.d;
            acc.neg_hess[o] += qjj / (m.d * m.d);
            acc.neg_hess[o + 1] += (2.0 * zj * w[j] + qjj * zj * zj - 1.0) / (m.d * m.d);
            continue;
        }
        // Rectangle mass of coordinate j given the rest.
        const auto &t = pc.thresholds[j];
        const int k = ds.code(i, j);
        const double mean = z[j] - w[j] / qjj;
        const double sd = pc.cond_sd[j];
        const double lo = category_lower(t, k), hi = category_upper(t, k);
        const double alpha = (lo - mean) / sd, beta = (hi - mean) / sd;
        double log_mass = norm_log_interval(alpha, beta);
        if (!(log_mass > std::log(kMassFloor))) {
            log_mass = std::log(kMassFloor);
            acc.clamped = true;
        }
        const double mass = std::exp(log_mass);
        // First and second derivatives of log mass w.r.t. the two bounds.
        double g_lo = 0, g_hi = 0, h_ll = 0, h_hh = 0, h_lh = 0;
        double r_lo = 0, r_hi = 0; // phi(bound) / mass
        if (std::isfinite(lo)) r_lo = std::exp(norm_logpdf(alpha) - log_mass);
        if (std::isfinite(hi)) r_hi = std::exp(norm_logpdf(beta) - log_mass);
        if (std::isfinite(lo)) {
            g_lo = -r_lo / sd;
            h_ll = r_lo * (alpha - r_lo) / (sd * sd);
        }
        if (std::isfinite(hi)) {
            g_hi = r_hi / sd;
            h_hh = -r_hi * (beta + r_hi) / (sd * sd);
        }
        if (std::isfinite(lo) && std::isfinite(hi)) h_lh = r_lo * r_hi / (sd * sd);
        (void)mass;
        // Threshold index l (0-based) maps to c_{l+1}; lo = t[k-1], hi = t[k].
        const int K = m.n_thresholds();
        const int l_lo = k - 1, l_hi = k;
        auto dc_du = [&](int l, int q) -> double {
            if (l < 0 || l >= K) return 0.0;
            if (q == 0) return 1.0;
            return q <= l ? std::exp(m.u[q]) : 0.0;
        };
        auto d2c_du2 = [&](int l, int q) -> double {
            if (l < 0 || l >= K || q == 0) return 0.0;
            return q <= l ? std::exp(m.u[q]) : 0.0;
        };
        for (int q = 0; q < K; ++q) {
            const double jl = dc_du(l_lo, q), jh = dc_du(l_hi, q);
            acc.grad[o + q] += g_lo * jl + g_hi * jh;
            const double second = h_ll * jl * jl + h_hh * jh * jh + 2.0 * h_lh * jl * jh +
                                  g_lo * d2c_du2(l_lo, q) + g_hi * d2c_du2(l_hi, q);
            acc.neg_hess[o + q] -= second;
        }
    }

    // L block: Sigma^{-1} z z^T L^{-T} - diag(1 / l_aa), lower triangle.
    for (Eigen::Index a = 0; a < p; ++a) {
        const double col_norm2 = pc.L_inv.col(a).squaredNorm();
        for (Eigen::Index b = 0; b <= a; ++b) {
            const int idx = layout.l_index(a, b);
            double g = w[a] * v[b];
            double h = v[b] * v[b] * col_norm2;
            if (a == b) {
                const double laa = xi.L(a, a);
                g -= 1.0 / laa;
                h += 2.0 * pc.L_inv(b, a) * v[b] * w[a] - 1.0 / (laa * laa);
            }
            acc.grad[idx] += g;
            acc.neg_hess[idx] += h;
        }
    }
}

/// Projection onto the feasible set: unit row norms for L with a positive
/// diagonal of at least 1e-6, and d_j >= 1e-6. Feasible input is returned
/// unchanged.
inline CopulaParams project_feasible(CopulaParams xi) {
    constexpr double kFloor = 1e-6;
    const auto p = xi.dim();
    for (Eigen::Index a = 0; a < p; ++a)
        for (Eigen::Index b = a + 1; b < p; ++b) xi.L(a, b) = 0.0;
    for (Eigen::Index a = 0; a < p; ++a) {
        auto row = xi.L.row(a);
        if (row[a] < 0.0) row[a] = -row[a];
        if (row[a] < kFloor) row[a] = kFloor;
        const double norm = row.norm();
        if (std::abs(norm - 1.0) > 4.0 * std::numeric_limits<double>::epsilon()) row /= norm;
        if (row[a] < kFloor) {
            // Off-diagonal mass dominates; keep the floor and shrink the rest.
            const double off = std::sqrt(std::max(row.squaredNorm() - row[a] * row[a], 0.0));
            const double target = std::sqrt(1.0 - kFloor * kFloor);
            for (Eigen::Index b = 0; b < a; ++b) row[b] *= off > 0 ? target / off : 0.0;
            row[a] = kFloor;
        }
    }
    for (auto &m : xi.margins)
        if (!m.discrete && !(m.d >= kFloor)) m.d = kFloor;
    return xi;
}

struct LogDensityEstimate {
    double value = 0.0;
    double mc_se = 0.0; // standard error of `value`; 0 when exact
};

/// log f(z | Xi) for a fully observed row. Exact when at most two variables
/// are discrete; otherwise the rectangle probability is estimated by GHK
/// with `n_mc` draws.
inline LogDensityEstimate log_density_complete(std::span<const double> row, const CopulaParams &xi,
                                               int n_mc = 20000, std::uint64_t seed = 1) {
    const auto p = xi.dim();
    if (static_cast<Eigen::Index>(row.size()) != p) throw InputError("row length does not match Xi");
    std::vector<int> C, D;
    for (Eigen::Index j = 0; j < p; ++j) (xi.margins[j].discrete ? D : C).push_back(static_cast<int>(j));
    const Matrix sigma = xi.sigma();
    {
        Eigen::LLT<Matrix> llt(sigma);
        if (llt.info() != Eigen::Success) throw NumericalError("singular Sigma");
    }
    LogDensityEstimate out;
    const auto nc = static_cast<Eigen::Index>(C.size());
    const auto nd = static_cast<Eigen::Index>(D.size());
    Vector zc(nc);
    Matrix scc(nc, nc);
    for (Eigen::Index a = 0; a < nc; ++a) {
        const auto &m = xi.margins[C[a]];
        zc[a] = (row[C[a]] - m.c) / m.d;
        out.value -= std::log(m.d);
        for (Eigen::Index b = 0; b < nc; ++b) scc(a, b) = sigma(C[a], C[b]);
    }
    Vector cond_mean = Vector::Zero(nd);
    Matrix cond_cov(nd, nd);
    for (Eigen::Index a = 0; a < nd; ++a)
        for (Eigen::Index b = 0; b < nd; ++b) cond_cov(a, b) = sigma(D[a], D[b]);
    if (nc > 0) {
        Eigen::LLT<Matrix> llt(scc);
        if (llt.info() != Eigen::Success) throw NumericalError("singular Sigma");
        const Vector y = llt.matrixL().solve(zc);
        out.value += -0.5 * y.squaredNorm() - static_cast<double>(nc) * kLogSqrt2Pi -
                     Vector(llt.matrixL().toDenseMatrix().diagonal()).array().log().sum();
        if (nd > 0) {
            Matrix sdc(nd, nc);
            for (Eigen::Index a = 0; a < nd; ++a)
                for (Eigen::Index b = 0; b < nc; ++b) sdc(a, b) = sigma(D[a], C[b]);
            const Matrix k = llt.solve(sdc.transpose()).transpose(); // Sigma_DC Sigma_CC^{-1}
            cond_mean = k * zc;
            cond_cov -= k * sdc.transpose();
        }
    }
    if (nd == 0) return out;

    std::vector<double> lo(nd), hi(nd);
    for (Eigen::Index a = 0; a < nd; ++a) {
        const auto &m = xi.margins[D[a]];
        const double v = row[D[a]];
        if (v != std::floor(v) || v < 0 || v > m.n_thresholds())
            throw InputError("category code out of range");
        const auto t = m.thresholds();
        lo[a] = category_lower(t, static_cast<int>(v));
        hi[a] = category_upper(t, static_cast<int>(v));
    }
    if (nd == 1) {
        const double s = std::sqrt(cond_cov(0, 0));
        out.value += norm_log_interval((lo[0] - cond_mean[0]) / s, (hi[0] - cond_mean[0]) / s);
        return out;
    }
    if (nd == 2) {
        const double s1 = std::sqrt(cond_cov(0, 0)), s2 = std::sqrt(cond_cov(1, 1));
        const double r = cond_cov(0, 1) / (s1 * s2);
        const double pr = bvn_rectangle((lo[0] - cond_mean[0]) / s1, (hi[0] - cond_mean[0]) / s1,
                                        (lo[1] - cond_mean[1]) / s2, (hi[1] - cond_mean[1]) / s2, r);
        out.value += std::log(std::max(pr, 1e-300));
        return out;
    }
    // GHK simulator.
    Eigen::LLT<Matrix> llt(cond_cov);
    if (llt.info() != Eigen::Success) throw NumericalError("singular conditional covariance");
    const Matrix Lc = llt.matrixL();
    Rng rng(seed);
    double sum = 0.0, sum2 = 0.0;
    Vector e(nd);
    for (int r = 0; r < n_mc; ++r) {
        double prob = 1.0;
        for (Eigen::Index a = 0; a < nd; ++a) {
            const double mu = cond_mean[a] + Lc.row(a).head(a).dot(e.head(a));
            const double la = (lo[a] - mu) / Lc(a, a), ha = (hi[a] - mu) / Lc(a, a);
            const double mass = norm_interval(la, ha);
            prob *= mass;
            if (mass <= 0.0) break;
            e[a] = sample_truncnorm_std(la, ha, rng);
        }
        sum += prob;
        sum2 += prob * prob;
    }
    const double mean = sum / n_mc;
    const double var = std::max(sum2 / n_mc - mean * mean, 0.0) / n_mc;
    out.value += std::log(std::max(mean, 1e-300));
    out.mc_se = mean > 0 ? std::sqrt(var) / mean : kInf;
    return out;
}

// ---------------------------------------------------------------------------
// Marginal covariance of the regression dummies

struct DummyCov {
    Matrix cov;
    Matrix sqrt; // symmetric square root
};

/// Covariance of g_j(Z_j) under the fitted margin and its symmetric square
/// root. Continuous: d_j^2. Discrete: Cov(1(Z>=k), 1(Z>=l)) = S_max(k,l) - S_k S_l
/// with S_k = 1 - Phi(c_k).
inline DummyCov marginal_dummy_cov(const CopulaParams &xi, Eigen::Index j) {
    const auto &m = xi.margins[j];
    DummyCov out;
    if (!m.discrete) {
        out.cov = Matrix::Constant(1, 1, m.d * m.d);
        out.sqrt = Matrix::Constant(1, 1, m.d);
        return out;
    }
    const auto t = m.thresholds();
    const auto K = static_cast<Eigen::Index>(t.size());
    Vector S(K);
    for (Eigen::Index k = 0; k < K; ++k) S[k] = norm_cdf(-t[k]);
    out.cov.resize(K, K);
    for (Eigen::Index a = 0; a < K; ++a)
        for (Eigen::Index b = 0; b < K; ++b) out.cov(a, b) = S[std::max(a, b)] - S[a] * S[b];
    if (K == 1) {
        out.sqrt = out.cov.cwiseMax(1e-10).cwiseSqrt();
        return out;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(out.cov);
    const Vector ev = es.eigenvalues().cwiseMax(1e-10).cwiseSqrt();
    out.sqrt = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    return out;
}

// ---------------------------------------------------------------------------
// Fitting

struct FitConfig {
    int burn_in = 100;
    int iters = 200;
    double step_exponent = 0.51;
    std::uint64_t seed = 1;
    int gibbs_scans_per_iter = 1;
    bool random_scan = false;
    int divergence_window = 50;
    int threads = 1;

    void validate() const {
        if (burn_in < 1 || iters < 1) throw InputError("burn_in and iters must be >= 1");
        if (!(step_exponent > 0.5 && step_exponent <= 1.0))
            throw InputError("step_exponent must lie in (0.5, 1]");
        if (gibbs_scans_per_iter < 1) throw InputError("gibbs_scans_per_iter must be >= 1");
    }
};

struct CopulaFit {
    CopulaParams params;
    std::vector<double> step_sizes;
    std::vector<double> objective;          // stochastic complete-data log-likelihood
    std::vector<double> smoothed_objective; // moving average over the divergence window
    Vector preconditioner;
    int clamped_rows = 0;
    UnderlyingState state; // final Gibbs state
};

/// Initial Xi from marginal moments/frequencies and the mixed correlation
/// matrix, with eigenvalues floored at `kInitEigenFloor`.
inline constexpr double kInitEigenFloor = 0.2;

inline CopulaParams initial_copula(const MixedDataset &ds) {
    const auto n = ds.rows();
    const auto p = ds.cols();
    std::vector<MarginalTransform> margins;
    for (Eigen::Index j = 0; j < p; ++j) {
        const auto &meta = ds.meta[j];
        if (!meta.discrete()) {
            double s = 0, s2 = 0, cnt = 0;
            for (Eigen::Index i = 0; i < n; ++i)
                if (ds.observed(i, j)) {
                    s += ds.values(i, j);
                    s2 += ds.values(i, j) * ds.values(i, j);
                    cnt += 1;
                }
            const double mean = cnt > 0 ? s / cnt : 0.0;
            const double var = cnt > 1 ? (s2 - cnt * mean * mean) / (cnt - 1) : 1.0;
            margins.push_back(MarginalTransform::continuous(mean, var > 1e-12 ? std::sqrt(var) : 1.0));
            continue;
        }
        std::vector<double> counts(meta.n_categories, 0.0);
        for (Eigen::Index i = 0; i < n; ++i)
            if (ds.observed(i, j)) counts[ds.code(i, j)] += 1.0;
        auto t = thresholds_from_frequencies(counts);
        for (std::size_t k = 1; k < t.size(); ++k) t[k] = std::max(t[k], t[k - 1] + 1e-3);
        margins.push_back(MarginalTransform::from_thresholds(t));
    }
    MixedCorrelationOptions opt;
    opt.min_pairs = 0;
    Matrix corr;
    try {
        corr = empirical_mixed_correlation(ds, opt).corr;
    } catch (const InputError &) {
        corr = Matrix::Identity(p, p);
    }
    corr = project_correlation_psd(corr, kInitEigenFloor);
    return CopulaParams::from_sigma(corr, std::move(margins));
}

/// Maximum likelihood for Xi by stochastic proximal gradient ascent: one
/// Gibbs scan per iteration, preconditioned gradient step, projection, and
/// averaging of the post-burn-in iterates.
inline CopulaFit fit_copula(const MixedDataset &ds, const std::optional<CopulaParams> &init,
                            const FitConfig &cfg) {
    cfg.validate();
    if (ds.rows() == 0) throw InputError("empty dataset");
    ds.validate();
    const auto n = ds.rows();
    const auto p = ds.cols();

    CopulaParams xi = init ? *init : initial_copula(ds);
    for (Eigen::Index j = 0; j < p; ++j)
        if (xi.margins[j].discrete != ds.meta[j].discrete() ||
            (ds.meta[j].discrete() && xi.margins[j].n_thresholds() != ds.meta[j].n_thresholds()))
            throw InputError("initial Xi does not match the dataset metadata");
    xi = project_feasible(xi);

    const CopulaLayout layout(xi);
    CopulaFit fit;
    fit.state = initial_state(ds, xi);
    Vector theta = layout.pack(xi);
    Vector avg = Vector::Zero(layout.size);
    Vector H = Vector::Ones(layout.size);
    std::deque<double> window;
    double window_sum = 0.0;
    int decreasing_run = 0;
    double prev_smoothed = -kInf;

    std::vector<int> order(p);
    std::iota(order.begin(), order.end(), 0);
    const int total = cfg.burn_in + cfg.iters;
    for (int t = 1; t <= total; ++t) {
        const PreparedCopula pc(xi);
        sync_observed_continuous(ds, xi, fit.state);
        // Rows are processed in fixed chunks and reduced in chunk order, so the
        // result does not depend on the thread count.
        const Eigen::Index n_chunks = std::min<Eigen::Index>(n, 64);
        std::vector<RowGradient> partial(n_chunks);
        std::vector<double> partial_obj(n_chunks, 0.0);
        std::vector<int> partial_clamped(n_chunks, 0);
        parallel_for(static_cast<std::size_t>(n_chunks), cfg.threads, [&](std::size_t c) {
            const Eigen::Index begin = n * static_cast<Eigen::Index>(c) / n_chunks;
            const Eigen::Index end = n * static_cast<Eigen::Index>(c + 1) / n_chunks;
            RowGradient &acc = partial[c];
            acc.grad = Vector::Zero(layout.size);
            acc.neg_hess = Vector::Zero(layout.size);
            std::vector<int> local_order = order;
            for (Eigen::Index i = begin; i < end; ++i) {
                Rng rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(i)));
                for (int s = 0; s < cfg.gibbs_scans_per_iter; ++s) {
                    if (cfg.random_scan) {
                        std::shuffle(local_order.begin(), local_order.end(), rng);
                        gibbs_sweep_marginal(i, ds, pc, fit.state, rng, local_order);
                    } else {
                        gibbs_sweep_marginal(i, ds, pc, fit.state, rng);
                    }
                }
                const Vector z = fit.state.zstar.row(i).transpose();
                acc.clamped = false;
                grad_loglik_sample(ds, i, z, pc, layout, acc);
                partial_clamped[c] += acc.clamped;
                partial_obj[c] += complete_log_density(ds, i, pc, z);
            }
        });
        RowGradient acc{Vector::Zero(layout.size), Vector::Zero(layout.size), false};
        double objective = 0.0;
        for (Eigen::Index c = 0; c < n_chunks; ++c) {
            acc.grad += partial[c].grad;
            acc.neg_hess += partial[c].neg_hess;
            objective += partial_obj[c];
            fit.clamped_rows += partial_clamped[c];
        }
        if (t <= cfg.burn_in) H = acc.neg_hess.cwiseMax(1e-4);
        const double gamma = std::pow(static_cast<double>(t), -cfg.step_exponent);
        Vector next = theta + gamma * acc.grad.cwiseQuotient(H);
        xi = project_feasible(layout.unpack(next, xi));
        theta = layout.pack(xi);
        if (!theta.allFinite()) throw NumericalError("copula fit diverged (non-finite parameters)");
        if (t > cfg.burn_in) avg += theta;

        fit.step_sizes.push_back(gamma);
        fit.objective.push_back(objective / static_cast<double>(n));
        window.push_back(objective / static_cast<double>(n));
        window_sum += window.back();
        if (static_cast<int>(window.size()) > cfg.divergence_window) {
            window_sum -= window.front();
            window.pop_front();
        }
        const double smoothed = window_sum / static_cast<double>(window.size());
        fit.smoothed_objective.push_back(smoothed);
        if (static_cast<int>(window.size()) == cfg.divergence_window) {
            decreasing_run = smoothed < prev_smoothed ? decreasing_run + 1 : 0;
            if (decreasing_run >= cfg.divergence_window)
                throw NumericalError("copula fit diverged: averaged log-likelihood decreased for " +
                                     std::to_string(cfg.divergence_window) + " iterations (t = " +
                                     std::to_string(t) + ")");
        }
        prev_smoothed = smoothed;
    }
    avg /= static_cast<double>(cfg.iters);
    fit.params = project_feasible(layout.unpack(avg, xi));
    fit.preconditioner = H;
    return fit;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json copula_to_json(const CopulaParams &xi, const std::vector<VariableMeta> &meta,
                                     const FitConfig *cfg = nullptr) {
    nlohmann::json j;
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index a = 0; a < xi.dim(); ++a) {
        std::vector<double> r(xi.L.cols());
        for (Eigen::Index b = 0; b < xi.L.cols(); ++b) r[b] = xi.L(a, b);
        rows.push_back(r);
    }
    j["L"] = rows;
    nlohmann::json margins = nlohmann::json::array();
    for (Eigen::Index k = 0; k < xi.dim(); ++k) {
        const auto &m = xi.margins[k];
        nlohmann::json o;
        if (k < static_cast<Eigen::Index>(meta.size())) {
            o["name"] = meta[k].name;
            o["kind"] = to_string(meta[k].kind);
        }
        if (m.discrete) {
            o["u"] = m.u;
            o["thresholds"] = m.thresholds();
        } else {
            o["c"] = m.c;
            o["d"] = m.d;
        }
        margins.push_back(std::move(o));
    }
    j["margins"] = margins;
    if (cfg) {
        j["fit"] = {{"seed", cfg->seed},
                    {"burn_in", cfg->burn_in},
                    {"iters", cfg->iters},
                    {"step_exponent", cfg->step_exponent}};
    }
    return j;
}

inline CopulaParams copula_from_json(const nlohmann::json &j) {
    CopulaParams xi;
    try {
        const auto &rows = j.at("L");
        const auto p = static_cast<Eigen::Index>(rows.size());
        xi.L = Matrix::Zero(p, p);
        for (Eigen::Index a = 0; a < p; ++a) {
            const auto r = rows.at(a).get<std::vector<double>>();
            if (static_cast<Eigen::Index>(r.size()) != p) throw InputError("L must be square");
            for (Eigen::Index b = 0; b < p; ++b) xi.L(a, b) = r[b];
        }
        for (const auto &o : j.at("margins")) {
            if (o.contains("u"))
                xi.margins.push_back({true, 0.0, 1.0, o.at("u").get<std::vector<double>>()});
            else
                xi.margins.push_back(MarginalTransform::continuous(o.at("c").get<double>(), o.at("d").get<double>()));
        }
    } catch (const nlohmann::json::exception &e) {
        throw InputError(std::string("copula JSON: ") + e.what());
    }
    xi.validate(1e-8);
    return xi;
}

} // namespace latko
