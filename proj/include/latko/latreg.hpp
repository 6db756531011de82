#pragma once

// Structural latent regression of theta on dummy-coded mixed predictors
// (optionally augmented with knockoff copies), fitted by stochastic EM.

#include "latko/copula.hpp"
#include "latko/measurement.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace latko {

// ---------------------------------------------------------------------------
// Coefficients and design rows

struct RegressionParams {
    double beta0 = 0.0;
    std::vector<Vector> beta;
    std::optional<std::vector<Vector>> gamma;
    double sigma2 = 1.0;

    static RegressionParams zeros(const std::vector<VariableMeta> &meta, bool with_gamma) {
        RegressionParams out;
        for (const auto &m : meta) out.beta.push_back(Vector::Zero(m.block_size()));
        if (with_gamma) out.gamma = out.beta;
        return out;
    }

    bool augmented() const noexcept { return gamma.has_value(); }

    int n_coefficients() const {
        int q = 1;
        for (const auto &b : beta) q += static_cast<int>(b.size());
        return augmented() ? q + (q - 1) : q;
    }

    /// Intercept, beta blocks, then gamma blocks.
    Vector flat() const {
        Vector v(n_coefficients());
        int o = 0;
        v[o++] = beta0;
        for (const auto &b : beta)
            for (Eigen::Index k = 0; k < b.size(); ++k) v[o++] = b[k];
        if (gamma)
            for (const auto &b : *gamma)
                for (Eigen::Index k = 0; k < b.size(); ++k) v[o++] = b[k];
        return v;
    }

    void set_flat(const Vector &v) {
        int o = 0;
        beta0 = v[o++];
        for (auto &b : beta)
            for (Eigen::Index k = 0; k < b.size(); ++k) b[k] = v[o++];
        if (gamma)
            for (auto &b : *gamma)
                for (Eigen::Index k = 0; k < b.size(); ++k) b[k] = v[o++];
    }

    void validate(const std::vector<VariableMeta> &meta) const {
        if (!(sigma2 > 0.0)) throw InputError("sigma2 must be positive");
        if (beta.size() != meta.size()) throw InputError("coefficient blocks do not match the metadata");
        for (std::size_t j = 0; j < meta.size(); ++j) {
            if (beta[j].size() != meta[j].block_size()) throw InputError("beta block shape mismatch for '" + meta[j].name + "'");
            if (gamma && (*gamma)[j].size() != meta[j].block_size())
                throw InputError("gamma block shape mismatch for '" + meta[j].name + "'");
        }
    }
};

/// g_j(z): identity for continuous and binary variables, (1(z>=1), ..., 1(z>=K))
/// for ordinal ones.
inline void append_dummies(const VariableMeta &m, double z, std::vector<double> &out) {
    if (m.kind != VarKind::ordinal) {
        out.push_back(z);
        return;
    }
    for (int k = 1; k < m.n_categories; ++k) out.push_back(z >= k ? 1.0 : 0.0);
}

/// Regressor vector (1, g_1(z_1), ..., g_p(z_p)) for a complete row.
inline Vector design_row(std::span<const double> z, const std::vector<VariableMeta> &meta) {
    if (z.size() != meta.size()) throw InputError("row length does not match the metadata");
    std::vector<double> out = {1.0};
    for (std::size_t j = 0; j < meta.size(); ++j) {
        if (std::isnan(z[j])) throw InputError("missing value for '" + meta[j].name + "' in design row");
        append_dummies(meta[j], z[j], out);
    }
    return Eigen::Map<Vector>(out.data(), static_cast<Eigen::Index>(out.size()));
}

// ---------------------------------------------------------------------------
// M-step

struct OlsResult {
    Vector coef;
    double sigma2 = 0.0;
};

/// Columns that are (numerically) linear combinations of earlier ones.
inline std::vector<int> dependent_columns(const Matrix &X) {
    Vector scale = X.colwise().norm().transpose();
    for (Eigen::Index k = 0; k < scale.size(); ++k)
        if (scale[k] == 0.0) scale[k] = 1.0;
    const Matrix Xs = X * scale.cwiseInverse().asDiagonal();
    Eigen::ColPivHouseholderQR<Matrix> qr(Xs);
    qr.setThreshold(1e-9);
    std::vector<int> out;
    const auto perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < Xs.cols(); ++k) out.push_back(perm[k]);
    std::sort(out.begin(), out.end());
    return out;
}

class RankDeficientError : public NumericalError {
  public:
    RankDeficientError(const std::string &msg, std::vector<int> cols)
        : NumericalError(msg), columns(std::move(cols)) {}
    std::vector<int> columns;
};

/// Ordinary least squares of theta on X with sigma2 = RSS / N.
inline OlsResult mstep_ols(const Vector &theta, const Matrix &X) {
    const auto n = X.rows();
    if (theta.size() != n) throw InputError("theta and design differ in length");
    if (n < X.cols()) throw RankDeficientError("fewer rows than regressors", {});
    const Matrix gram = X.transpose() * X;
    Vector d = gram.diagonal().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
    const Matrix scaled = d.asDiagonal() * gram * d.asDiagonal();
    Eigen::LLT<Matrix> llt(scaled);
    bool ok = llt.info() == Eigen::Success;
    if (ok) {
        const Vector diag = llt.matrixL().toDenseMatrix().diagonal();
        ok = diag.minCoeff() > 1e-7 * diag.maxCoeff() && (gram.diagonal().array() > 0).all();
    }
    if (!ok) {
        auto cols = dependent_columns(X);
        std::string list;
        for (int c : cols) list += (list.empty() ? "" : ", ") + std::to_string(c);
        throw RankDeficientError("rank-deficient design (dependent columns: " + list + ")", cols);
    }
    OlsResult out;
    out.coef = d.asDiagonal() * llt.solve(d.asDiagonal() * (X.transpose() * theta));
    const Vector resid = theta - X * out.coef;
    out.sigma2 = resid.squaredNorm() / static_cast<double>(n);
    return out;
}

// ---------------------------------------------------------------------------
// Joint Gibbs sampling of (theta, Z*, Z~*)

/// Observed inputs for the latent regression: predictors, optional knockoff
/// copies sharing the predictors' observed mask, and item responses.
struct LatentRegressionData {
    const MixedDataset *ds = nullptr;
    const MixedDataset *knockoffs = nullptr;
    const ItemBank *bank = nullptr;
    std::vector<std::vector<ItemResponse>> responses;

    LatentRegressionData(const MixedDataset &x, const ResponseData &rd, const ItemBank &b,
                         const MixedDataset *knock = nullptr)
        : ds(&x), knockoffs(knock), bank(&b) {
        if (rd.rows() != x.rows()) throw InputError("responses and predictors differ in row count");
        rd.validate(b);
        if (knock) {
            if (knock->rows() != x.rows() || knock->cols() != x.cols() || !(knock->observed == x.observed))
                throw InputError("knockoff copies are not aligned with the observed mask");
        }
        responses.reserve(static_cast<std::size_t>(x.rows()));
        for (Eigen::Index i = 0; i < x.rows(); ++i) responses.push_back(responses_of(rd, i));
    }

    /// Reuses already extracted responses (rd is ignored).
    LatentRegressionData(const MixedDataset &x, const ResponseData &, const ItemBank &b, const MixedDataset *knock,
                         std::vector<std::vector<ItemResponse>> pre)
        : ds(&x), knockoffs(knock), bank(&b), responses(std::move(pre)) {
        if (static_cast<Eigen::Index>(responses.size()) != x.rows())
            throw InputError("responses and predictors differ in row count");
        if (knock && (knock->rows() != x.rows() || knock->cols() != x.cols() || !(knock->observed == x.observed)))
            throw InputError("knockoff copies are not aligned with the observed mask");
    }

    Eigen::Index rows() const { return ds->rows(); }
    Eigen::Index p() const { return ds->cols(); }
    bool augmented() const { return knockoffs != nullptr; }
};

/// Gaussian prior for the stacked latent vector [Z*, Z~*] (or Z* alone) with
/// the copula margins repeated for the knockoff coordinates.
struct JointPrior {
    const CopulaParams *xi = nullptr;
    Matrix cov;
    Matrix precision;
    Vector cond_sd;
    std::vector<std::vector<double>> thresholds; // per original variable

    JointPrior(const CopulaParams &params, const Matrix &joint_cov) : xi(&params), cov(joint_cov) {
        const auto q = cov.rows();
        if (q != params.dim() && q != 2 * params.dim())
            throw InputError("joint covariance must be p x p or 2p x 2p");
        Eigen::LLT<Matrix> llt(cov);
        if (llt.info() != Eigen::Success) throw NumericalError("joint covariance is not positive definite");
        precision = llt.solve(Matrix::Identity(q, q));
        precision = 0.5 * (precision + precision.transpose()).eval();
        cond_sd.resize(q);
        for (Eigen::Index k = 0; k < q; ++k) {
            if (!(precision(k, k) > 0.0) || !std::isfinite(precision(k, k)))
                throw NumericalError("degenerate conditional variance in the joint Gibbs sampler");
            cond_sd[k] = 1.0 / std::sqrt(precision(k, k));
        }
        thresholds.resize(params.dim());
        for (Eigen::Index j = 0; j < params.dim(); ++j)
            if (params.margins[j].discrete) thresholds[j] = params.margins[j].thresholds();
    }

    Eigen::Index size() const noexcept { return cov.rows(); }
    Eigen::Index p() const noexcept { return xi->dim(); }
};

struct JointState {
    Vector theta;
    RowMatrix zstar;
    RowMatrix zstar_knock; // 0 x 0 when the model is not augmented

    bool augmented() const noexcept { return zstar_knock.size() > 0; }
};

namespace detail {

/// Cumulative block sums: entry k is the contribution of category k.
inline void cumulative_effects(const Vector &b, const VariableMeta &m, std::vector<double> &out) {
    out.assign(m.n_categories, 0.0);
    if (m.kind == VarKind::binary) {
        out[1] = b[0];
        return;
    }
    for (int k = 1; k < m.n_categories; ++k) out[k] = out[k - 1] + b[k - 1];
}

inline double value_of(const MarginalTransform &m, const std::vector<double> &t, double x) {
    return m.discrete ? category_of(t, x) : m.c + m.d * x;
}

inline double contribution(const VariableMeta &meta, const Vector &b, double value) {
    if (meta.kind != VarKind::ordinal) return b[0] * value;
    double s = 0.0;
    for (int k = 1; k <= static_cast<int>(value); ++k) s += b[k - 1];
    return s;
}

} // namespace detail

/// Linear predictor beta0 + sum beta_j' g_j(Z_j) (+ sum gamma_j' g_j(Z~_j)) at
/// a stacked latent row.
inline double linear_predictor(const RegressionParams &params, const JointPrior &prior,
                               const std::vector<VariableMeta> &meta, const Eigen::Ref<const Vector> &x) {
    const auto p = prior.p();
    double eta = params.beta0;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        const Eigen::Index j = k % p;
        const auto &b = k < p ? params.beta[j] : (*params.gamma)[j];
        eta += detail::contribution(meta[j], b, detail::value_of(prior.xi->margins[j], prior.thresholds[j], x[k]));
    }
    return eta;
}

/// One joint scan for row i: theta from its full conditional (ARS), then each
/// latent coordinate in order Z*_1..Z*_p, Z~*_1..Z~*_p.
inline void gibbs_sweep_joint(Eigen::Index i, const LatentRegressionData &data, const RegressionParams &params,
                              const JointPrior &prior, JointState &state, Rng &rng_theta, Rng &rng_z) {
    const auto p = prior.p();
    const auto q = prior.size();
    const auto &meta = data.ds->meta;
    Vector x(q);
    x.head(p) = state.zstar.row(i).transpose();
    if (q > p) x.tail(p) = state.zstar_knock.row(i).transpose();

    double eta = linear_predictor(params, prior, meta, x);
    const ThetaPosteriorSpec spec{data.responses[static_cast<std::size_t>(i)], eta, params.sigma2};
    const double theta = sample_theta(spec, *data.bank, rng_theta);
    state.theta[i] = theta;
    double resid = theta - eta;

    const double s2 = params.sigma2;
    std::vector<double> cum, logw;
    for (Eigen::Index k = 0; k < q; ++k) {
        const Eigen::Index j = k % p;
        const bool knock = k >= p;
        const auto &margin = prior.xi->margins[j];
        const bool observed = data.ds->observed(i, j);
        if (observed && !margin.discrete) continue;
        const double m = x[k] - prior.precision.row(k).dot(x) / prior.precision(k, k);
        const double sd = prior.cond_sd[k];
        const auto &t = prior.thresholds[j];
        if (observed) {
            const int code = knock ? data.knockoffs->code(i, j) : data.ds->code(i, j);
            x[k] = sample_truncnorm(m, sd, category_lower(t, code), category_upper(t, code), rng_z);
            continue;
        }
        const auto &b = knock ? (*params.gamma)[j] : params.beta[j];
        const double old = detail::contribution(meta[j], b, detail::value_of(margin, t, x[k]));
        const double r = resid + old; // residual without this coordinate
        double next_value;
        if (!margin.discrete) {
            const double bd = b[0] * margin.d;
            const double prec = 1.0 / (sd * sd) + bd * bd / s2;
            const double mean = (m / (sd * sd) + bd * (r - b[0] * margin.c) / s2) / prec;
            x[k] = mean + rng_z.normal() / std::sqrt(prec);
            next_value = margin.c + margin.d * x[k];
        } else {
            detail::cumulative_effects(b, meta[j], cum);
            const int ncat = meta[j].n_categories;
            logw.resize(ncat);
            double mx = -kInf;
            for (int c = 0; c < ncat; ++c) {
                const double e = cum[c] - r;
                logw[c] = -0.5 * e * e / s2 +
                          norm_log_interval((category_lower(t, c) - m) / sd, (category_upper(t, c) - m) / sd);
                mx = std::max(mx, logw[c]);
            }
            if (!std::isfinite(mx)) throw NumericalError("missing discrete cell: all category weights vanish");
            double tot = 0.0;
            for (auto &w : logw) tot += (w = std::exp(w - mx));
            double u = rng_z.uniform() * tot;
            int c = 0;
            while (c + 1 < ncat && u > logw[c]) u -= logw[c++];
            x[k] = sample_truncnorm(m, sd, category_lower(t, c), category_upper(t, c), rng_z);
            next_value = c;
        }
        resid = r - detail::contribution(meta[j], b, next_value);
    }
    state.zstar.row(i) = x.head(p).transpose();
    if (q > p) state.zstar_knock.row(i) = x.tail(p).transpose();
}

/// Starting state: theta = 0; fixed coordinates at their observed values
/// (observed discrete cells at the mean of their rectangle); free
/// coordinates at their Gaussian conditional mean given the fixed ones.
inline JointState initial_joint_state(const LatentRegressionData &data, const JointPrior &prior) {
    const auto n = data.rows();
    const auto p = prior.p();
    const auto q = prior.size();
    JointState st{Vector::Zero(n), RowMatrix::Zero(n, p), RowMatrix(0, 0)};
    if (q > p) st.zstar_knock = RowMatrix::Zero(n, p);
    std::vector<int> fixed, free;
    for (Eigen::Index i = 0; i < n; ++i) {
        Vector x = Vector::Zero(q);
        fixed.clear();
        free.clear();
        for (Eigen::Index k = 0; k < q; ++k) {
            const Eigen::Index j = k % p;
            const auto &src = k < p ? *data.ds : *data.knockoffs;
            if (!src.observed(i, j)) {
                free.push_back(static_cast<int>(k));
                continue;
            }
            const auto &margin = prior.xi->margins[j];
            fixed.push_back(static_cast<int>(k));
            if (!margin.discrete) {
                x[k] = (src.values(i, j) - margin.c) / margin.d;
                continue;
            }
            const auto &t = prior.thresholds[j];
            const int c = src.code(i, j);
            const double lo = category_lower(t, c), hi = category_upper(t, c);
            const double mass = norm_interval(lo, hi);
            double mean = mass > 1e-12 ? (norm_pdf(lo) - norm_pdf(hi)) / mass : 0.0;
            if (!(mean > lo && mean <= hi))
                mean = std::isfinite(lo) ? (std::isfinite(hi) ? 0.5 * (lo + hi) : lo + 0.5) : hi - 0.5;
            x[k] = mean;
        }
        if (!free.empty() && !fixed.empty()) {
            const auto nf = static_cast<Eigen::Index>(fixed.size()), nm = static_cast<Eigen::Index>(free.size());
            Matrix coo(nf, nf), cmo(nm, nf);
            Vector xo(nf);
            for (Eigen::Index a = 0; a < nf; ++a) {
                xo[a] = x[fixed[a]];
                for (Eigen::Index b = 0; b < nf; ++b) coo(a, b) = prior.cov(fixed[a], fixed[b]);
            }
            for (Eigen::Index a = 0; a < nm; ++a)
                for (Eigen::Index b = 0; b < nf; ++b) cmo(a, b) = prior.cov(free[a], fixed[b]);
            const Vector xm = cmo * coo.ldlt().solve(xo);
            for (Eigen::Index a = 0; a < nm; ++a) x[free[a]] = std::isfinite(xm[a]) ? xm[a] : 0.0;
        }
        st.zstar.row(i) = x.head(p).transpose();
        if (q > p) st.zstar_knock.row(i) = x.tail(p).transpose();
    }
    return st;
}

/// Design matrix at the current state (with knockoff blocks when augmented).
inline Matrix current_design(const LatentRegressionData &data, const JointPrior &prior, const JointState &st) {
    const auto n = data.rows();
    const auto p = prior.p();
    const auto &meta = data.ds->meta;
    int width = 1;
    for (const auto &m : meta) width += m.block_size();
    if (prior.size() > p) width += width - 1;
    Matrix X(n, width);
    std::vector<double> row;
    for (Eigen::Index i = 0; i < n; ++i) {
        row.assign(1, 1.0);
        for (Eigen::Index j = 0; j < p; ++j)
            append_dummies(meta[j], detail::value_of(prior.xi->margins[j], prior.thresholds[j], st.zstar(i, j)), row);
        if (prior.size() > p)
            for (Eigen::Index j = 0; j < p; ++j)
                append_dummies(meta[j],
                               detail::value_of(prior.xi->margins[j], prior.thresholds[j], st.zstar_knock(i, j)), row);
        X.row(i) = Eigen::Map<const Vector>(row.data(), width).transpose();
    }
    return X;
}

// ---------------------------------------------------------------------------
// Stochastic EM

struct EmConfig {
    int burn_in = 100;
    int iters = 200;
    std::uint64_t seed = 1;
    int threads = 1;
    int max_rank_failures = 10; // consecutive rank-deficient M-steps tolerated

    void validate() const {
        if (burn_in < 1 || iters < 1) throw InputError("burn_in and iters must be >= 1");
    }
};

struct LatentRegressionFit {
    RegressionParams params;
    JointState state; // final Gibbs state
    std::vector<double> sigma2_trace;
    int rank_failures = 0;
};

/// Stochastic EM: per iteration one joint Gibbs scan per student, then the
/// closed-form M-step; returns the average of the post-burn-in iterates.
/// `joint_cov` is Sigma for the plain model or G for the augmented one.
inline LatentRegressionFit fit_latent_regression(const LatentRegressionData &data, const CopulaParams &xi,
                                                 const Matrix &joint_cov, const EmConfig &cfg,
                                                 const std::optional<RegressionParams> &init = std::nullopt,
                                                 const std::optional<JointState> &init_state = std::nullopt) {
    cfg.validate();
    const auto n = data.rows();
    if (n == 0) throw InputError("empty dataset");
    if ((joint_cov.rows() == 2 * data.p()) != data.augmented())
        throw InputError("joint covariance does not match the presence of knockoffs");
    const JointPrior prior(xi, joint_cov);
    const auto &meta = data.ds->meta;

    LatentRegressionFit fit;
    RegressionParams params = init ? *init : RegressionParams::zeros(meta, data.augmented());
    if (data.augmented() && !params.gamma) {
        params.gamma = std::vector<Vector>();
        for (const auto &m : meta) params.gamma->push_back(Vector::Zero(m.block_size()));
    }
    if (!data.augmented()) params.gamma.reset();
    params.validate(meta);
    fit.state = init_state ? *init_state : initial_joint_state(data, prior);
    if (fit.state.zstar.rows() != n || fit.state.augmented() != data.augmented())
        throw InputError("initial state does not match the data");

    Vector avg = Vector::Zero(params.n_coefficients());
    double avg_s2 = 0.0;
    int consecutive = 0;
    const int total = cfg.burn_in + cfg.iters;
    for (int t = 1; t <= total; ++t) {
        parallel_for(static_cast<std::size_t>(n), cfg.threads, [&](std::size_t i) {
            Rng rt(stream_seed(cfg.seed, static_cast<std::uint64_t>(t), i, 0));
            Rng rz(stream_seed(cfg.seed, static_cast<std::uint64_t>(t), i, 1));
            gibbs_sweep_joint(static_cast<Eigen::Index>(i), data, params, prior, fit.state, rt, rz);
        });
        const Matrix X = current_design(data, prior, fit.state);
        try {
            const auto ols = mstep_ols(fit.state.theta, X);
            params.set_flat(ols.coef);
            params.sigma2 = std::max(ols.sigma2, 1e-6);
            consecutive = 0;
        } catch (const RankDeficientError &) {
            ++fit.rank_failures;
            if (++consecutive > cfg.max_rank_failures) throw;
        }
        if (!params.flat().allFinite() || !std::isfinite(params.sigma2))
            throw NumericalError("latent regression diverged (non-finite coefficients)");
        fit.sigma2_trace.push_back(params.sigma2);
        if (t > cfg.burn_in) {
            avg += params.flat();
            avg_s2 += params.sigma2;
        }
    }
    fit.params = params;
    fit.params.set_flat(avg / static_cast<double>(cfg.iters));
    fit.params.sigma2 = avg_s2 / static_cast<double>(cfg.iters);
    return fit;
}

// ---------------------------------------------------------------------------
// Bootstrap

struct BootstrapResult {
    Vector se;
    int replicates = 0;
    int failed = 0;
    std::vector<std::string> failures;
};

/// Nonparametric bootstrap over students: `refit(ds_b, rd_b, replicate)`
/// returns a coefficient vector; standard errors are the standard
/// deviations across successful replicates.
template <class Refit>
BootstrapResult bootstrap_se(const MixedDataset &ds, const ResponseData &rd, Refit &&refit, int B,
                             std::uint64_t seed, int threads = 1) {
    if (B < 2) throw InputError("bootstrap needs B >= 2");
    const auto n = ds.rows();
    std::vector<std::optional<Vector>> out(static_cast<std::size_t>(B));
    std::vector<std::string> err(static_cast<std::size_t>(B));
    parallel_for(static_cast<std::size_t>(B), threads, [&](std::size_t b) {
        Rng rng(stream_seed(seed, 0xB007, b));
        MixedDataset db;
        db.meta = ds.meta;
        db.values.resize(n, ds.cols());
        db.observed.resize(n, ds.cols());
        ResponseData rb{IntMatrix(n, rd.codes.cols()), MaskMatrix(n, rd.codes.cols())};
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto src = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
            db.values.row(i) = ds.values.row(src);
            db.observed.row(i) = ds.observed.row(src);
            rb.codes.row(i) = rd.codes.row(src);
            rb.administered.row(i) = rd.administered.row(src);
        }
        try {
            out[b] = refit(db, rb, static_cast<int>(b));
        } catch (const std::exception &e) {
            err[b] = e.what();
        }
    });
    BootstrapResult res;
    res.replicates = B;
    std::vector<Vector> ok;
    for (int b = 0; b < B; ++b) {
        if (out[b])
            ok.push_back(*out[b]);
        else
            res.failures.push_back("replicate " + std::to_string(b) + ": " + err[b]);
    }
    res.failed = B - static_cast<int>(ok.size());
    if (ok.size() < 2 || static_cast<double>(ok.size()) < 0.9 * B)
        throw NumericalError("bootstrap: only " + std::to_string(ok.size()) + " of " + std::to_string(B) +
                             " replicates succeeded");
    const auto q = ok.front().size();
    Vector mean = Vector::Zero(q);
    for (const auto &v : ok) mean += v;
    mean /= static_cast<double>(ok.size());
    res.se = Vector::Zero(q);
    for (const auto &v : ok) res.se += (v - mean).cwiseAbs2();
    res.se = (res.se / static_cast<double>(ok.size() - 1)).cwiseSqrt();
    return res;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json regression_to_json(const RegressionParams &params, const std::vector<VariableMeta> &meta,
                                         const EmConfig *cfg = nullptr) {
    nlohmann::json j;
    j["beta0"] = params.beta0;
    j["sigma2"] = params.sigma2;
    auto blocks = [&](const std::vector<Vector> &v) {
        nlohmann::json arr = nlohmann::json::array();
        for (std::size_t k = 0; k < v.size(); ++k)
            arr.push_back({{"name", meta[k].name}, {"coef", std::vector<double>(v[k].data(), v[k].data() + v[k].size())}});
        return arr;
    };
    j["beta"] = blocks(params.beta);
    if (params.gamma) j["gamma"] = blocks(*params.gamma);
    if (cfg) j["config"] = {{"burn_in", cfg->burn_in}, {"iters", cfg->iters}, {"seed", cfg->seed}};
    return j;
}

inline RegressionParams regression_from_json(const nlohmann::json &j, const std::vector<VariableMeta> &meta) {
    RegressionParams p;
    try {
        p.beta0 = j.at("beta0").get<double>();
        p.sigma2 = j.at("sigma2").get<double>();
        auto read = [](const nlohmann::json &arr) {
            std::vector<Vector> out;
            for (const auto &o : arr) {
                const auto v = o.at("coef").get<std::vector<double>>();
                out.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
            }
            return out;
        };
        p.beta = read(j.at("beta"));
        if (j.contains("gamma")) p.gamma = read(j.at("gamma"));
    } catch (const nlohmann::json::exception &e) {
        throw InputError(std::string("regression JSON: ") + e.what());
    }
    p.validate(meta);
    return p;
}

} // namespace latko
