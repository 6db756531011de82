#pragma once

// Knockoff construction under missing data, knockoff statistics, the
// baseline PFER filter and derandomised selection.

#include "latko/latreg.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace latko {

// ---------------------------------------------------------------------------
// S matrix and joint covariance

struct SDiag {
    Vector s;
    bool converged = true;
    int sweeps = 0;
    double objective = 0.0;
};

inline double min_eigenvalue(const Matrix &a) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

namespace detail {

inline void check_correlation(const Matrix &sigma) {
    if (sigma.rows() != sigma.cols() || sigma.rows() == 0) throw InputError("Sigma must be a non-empty square matrix");
    if (!sigma.allFinite()) throw InputError("Sigma has non-finite entries");
    if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-10) throw InputError("Sigma is not symmetric");
}

} // namespace detail

/// s_j = min(1, 2 lambda_min(Sigma)).
inline SDiag s_equicorrelated(const Matrix &sigma) {
    detail::check_correlation(sigma);
    const double lmin = min_eigenvalue(sigma);
    if (lmin <= 1e-12) throw InputError("Sigma is not positive definite (lambda_min = " + std::to_string(lmin) + ")");
    SDiag out;
    out.s = Vector::Constant(sigma.rows(), std::min(1.0, 2.0 * lmin));
    return out;
}

/// trace(G^{-1}) = trace((2 Sigma - S)^{-1}) + sum 1/s_j; infinite when
/// infeasible.
inline double mvr_objective(const Matrix &sigma, const Vector &s) {
    if ((s.array() <= 0.0).any()) return kInf;
    const Matrix a = 2.0 * sigma - Matrix(s.asDiagonal());
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success) return kInf;
    const Matrix inv = llt.solve(Matrix::Identity(a.rows(), a.cols()));
    return inv.trace() + s.cwiseInverse().sum();
}

/// Minimum variance-based reconstructability: cyclic coordinate descent on
/// trace(G^{-1}). With B = 2 Sigma - S excluding s_j, the coordinate objective
/// is s c / (1 - s b) + 1/s (b = B^{-1}_jj, c = |B^{-1} e_j|^2), minimised at
/// s = 1 / (b + sqrt(c)) inside the feasible interval (0, 1/b).
inline SDiag s_mvr(const Matrix &sigma, int iters = 20, double tol = 1e-6) {
    detail::check_correlation(sigma);
    const auto p = sigma.rows();
    const double lmin = min_eigenvalue(sigma);
    if (lmin <= 1e-12) throw InputError("Sigma is not positive definite (lambda_min = " + std::to_string(lmin) + ")");
    SDiag out;
    out.s = Vector::Constant(p, std::min(1.0, lmin));
    double obj = mvr_objective(sigma, out.s);
    out.converged = false;
    for (int sweep = 1; sweep <= iters; ++sweep) {
        out.sweeps = sweep;
        Matrix ainv = (2.0 * sigma - Matrix(out.s.asDiagonal())).llt().solve(Matrix::Identity(p, p));
        for (Eigen::Index j = 0; j < p; ++j) {
            // Remove s_j: B^{-1} = A^{-1} - s A^{-1} e e' A^{-1} / (1 + s A^{-1}_jj).
            const double sj = out.s[j];
            const Vector aj = ainv.col(j);
            const Matrix binv = ainv - (sj / (1.0 + sj * aj[j])) * aj * aj.transpose();
            const double b = binv(j, j);
            const double c = binv.col(j).squaredNorm();
            double next = 1.0 / (b + std::sqrt(c));
            next = std::min(next, (1.0 - 1e-12) / b);
            if (!(next > 0.0) || !std::isfinite(next)) next = sj;
            // Add the new s_j back: A^{-1} = B^{-1} + s B^{-1} e e' B^{-1} / (1 - s b).
            const Vector bj = binv.col(j);
            ainv = binv + (next / (1.0 - next * b)) * bj * bj.transpose();
            out.s[j] = next;
        }
        const double next_obj = mvr_objective(sigma, out.s);
        const double change = std::abs(obj - next_obj) / std::max(1.0, std::abs(obj));
        obj = next_obj;
        if (change < tol) {
            out.converged = true;
            break;
        }
    }
    out.objective = obj;
    if (min_eigenvalue(2.0 * sigma - Matrix(out.s.asDiagonal())) < -1e-8)
        throw NumericalError("MVR produced an infeasible S");
    return out;
}

/// G = [[Sigma, Sigma - S], [Sigma - S, Sigma]].
inline Matrix joint_cov(const Matrix &sigma, const Vector &s) {
    const auto p = sigma.rows();
    Matrix g(2 * p, 2 * p);
    const Matrix off = sigma - Matrix(s.asDiagonal());
    g.topLeftCorner(p, p) = sigma;
    g.bottomRightCorner(p, p) = sigma;
    g.topRightCorner(p, p) = off;
    g.bottomLeftCorner(p, p) = off;
    return g;
}

/// Shrinks S just enough that G is positive definite with margin, so the
/// joint Gibbs sampler has finite conditional precisions. Returns s unchanged
/// when it already is.
inline Vector s_for_sampling(const Matrix &sigma, const Vector &s, double margin = 1e-6) {
    Vector out = s.cwiseMax(margin);
    for (int k = 0; k < 2000; ++k) {
        if (min_eigenvalue(2.0 * sigma - Matrix(out.asDiagonal())) >= margin) return out;
        out *= 1.0 - 1e-3;
    }
    throw NumericalError("cannot regularise S to a positive definite joint covariance");
}

// ---------------------------------------------------------------------------
// Gaussian knockoff draw

/// Precomputed pieces of N((I - S Sigma^{-1}) z, 2S - S Sigma^{-1} S).
struct GaussianKnockoff {
    Matrix mean_map;
    Matrix cov;
    Matrix factor; // cov = factor factor'

    GaussianKnockoff(const Matrix &sigma, const Vector &s) {
        const auto p = sigma.rows();
        if (s.size() != p) throw InputError("S has the wrong length");
        Eigen::LDLT<Matrix> ldlt(sigma);
        const Matrix sinv_s = ldlt.solve(Matrix(s.asDiagonal())); // Sigma^{-1} S
        mean_map = Matrix::Identity(p, p) - sinv_s.transpose();
        cov = 2.0 * Matrix(s.asDiagonal()) - s.asDiagonal() * sinv_s;
        cov = 0.5 * (cov + cov.transpose()).eval();
        Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
        if (es.eigenvalues().minCoeff() < -1e-8)
            throw NumericalError("knockoff conditional covariance is not positive semidefinite");
        factor = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    }

    Vector draw(const Eigen::Ref<const Vector> &z, Rng &rng) const {
        Vector e(z.size());
        for (Eigen::Index k = 0; k < e.size(); ++k) e[k] = rng.normal();
        return mean_map * z + factor * e;
    }
};

inline Vector conditional_knockoff_gaussian(const Vector &zstar, const Matrix &sigma, const SDiag &s, Rng &rng) {
    if (!zstar.allFinite()) throw InputError("latent row has non-finite entries");
    return GaussianKnockoff(sigma, s.s).draw(zstar, rng);
}

// ---------------------------------------------------------------------------
// Knockoff sampling under missing data

struct KnockoffSamplerConfig {
    int gibbs_sweeps = 200;
    std::uint64_t seed = 1;
    int threads = 1;
};

struct KnockoffDraw {
    MixedDataset knockoffs; // observed pattern of the original data
    JointState state;       // latent draws (theta, Z*, Z~*) behind it
};

/// Step 1: Gibbs sweeps of (theta, Z*) under the plain model; step 2: one
/// conditional Gaussian knockoff draw; step 3: F_j on the observed cells.
/// `start` (defaults to the conditional-mean state) seeds every student's
/// chain.
inline KnockoffDraw sample_knockoffs(const LatentRegressionData &data, const CopulaParams &xi,
                                     const RegressionParams &params, const SDiag &s,
                                     const KnockoffSamplerConfig &cfg,
                                     const std::optional<JointState> &start = std::nullopt) {
    if (data.augmented()) throw InputError("knockoff sampling uses the plain model");
    if (cfg.gibbs_sweeps < 0) throw InputError("gibbs_sweeps must be >= 0");
    RegressionParams plain = params;
    plain.gamma.reset();
    plain.validate(data.ds->meta);
    const Matrix sigma = xi.sigma();
    const JointPrior prior(xi, sigma);
    const GaussianKnockoff gk(sigma, s.s);
    const auto n = data.rows();
    const auto p = data.p();

    KnockoffDraw out;
    out.state = start ? *start : initial_joint_state(data, prior);
    if (out.state.zstar.rows() != n || out.state.zstar.cols() != p) throw InputError("start state has the wrong shape");
    out.state.zstar_knock = RowMatrix::Zero(n, p);
    out.knockoffs.meta = data.ds->meta;
    out.knockoffs.values = RowMatrix::Constant(n, p, std::numeric_limits<double>::quiet_NaN());
    out.knockoffs.observed = data.ds->observed;

    JointState &st = out.state;
    JointState plain_state{st.theta, st.zstar, RowMatrix(0, 0)};
    parallel_for(static_cast<std::size_t>(n), cfg.threads, [&](std::size_t ii) {
        const auto i = static_cast<Eigen::Index>(ii);
        for (int t = 1; t <= cfg.gibbs_sweeps; ++t) {
            Rng rt(stream_seed(cfg.seed, static_cast<std::uint64_t>(t), ii, 2));
            Rng rz(stream_seed(cfg.seed, static_cast<std::uint64_t>(t), ii, 3));
            gibbs_sweep_joint(i, data, plain, prior, plain_state, rt, rz);
        }
        Rng rk(stream_seed(cfg.seed, 0x4b4e4f43ULL, ii, 4));
        const Vector zt = gk.draw(plain_state.zstar.row(i).transpose(), rk);
        st.zstar_knock.row(i) = zt.transpose();
        for (Eigen::Index j = 0; j < p; ++j) {
            if (!data.ds->observed(i, j)) continue;
            const auto &m = xi.margins[j];
            out.knockoffs.values(i, j) = m.discrete ? category_of(m.thresholds(), zt[j]) : m.c + m.d * zt[j];
        }
    });
    st.theta = plain_state.theta;
    st.zstar = plain_state.zstar;
    return out;
}

// ---------------------------------------------------------------------------
// Statistics and thresholds

struct WStats {
    Vector w;
};

/// W_j = sign(|b_j| - |g_j|) max(|b_j|, |g_j|) / sqrt(p_j) with standardised
/// blocks b_j = Cov(g_j)^{1/2} beta_j and g_j = Cov(g_j)^{1/2} gamma_j.
inline WStats knockoff_stats(const RegressionParams &params, const CopulaParams &xi) {
    if (!params.gamma) throw InputError("knockoff statistics need gamma coefficients");
    const auto p = static_cast<Eigen::Index>(params.beta.size());
    if (xi.dim() != p) throw InputError("copula and coefficients differ in dimension");
    WStats out{Vector(p)};
    for (Eigen::Index j = 0; j < p; ++j) {
        const auto root = marginal_dummy_cov(xi, j).sqrt;
        if (root.rows() != params.beta[j].size()) throw InputError("coefficient block does not match the margin");
        const double nb = (root * params.beta[j]).norm();
        const double ng = (root * (*params.gamma)[j]).norm();
        const double sign = nb > ng ? 1.0 : (nb < ng ? -1.0 : 0.0);
        out.w[j] = sign * std::max(nb, ng) / std::sqrt(static_cast<double>(root.rows()));
    }
    return out;
}

struct SelectionResult {
    double tau = 0.0;
    bool tau_infinite = false; // tau = -inf: no t reaches the target count
    std::vector<int> selected;
    int nu = 1;
};

/// tau = inf{t > 0 : 1 + #{j : W_j < -t} = nu}; selected = {j : W_j > tau}.
inline SelectionResult baseline_threshold(const Vector &w, int nu) {
    if (nu < 1) throw InputError("nu must be >= 1");
    SelectionResult out;
    out.nu = nu;
    std::vector<double> cand;
    for (Eigen::Index j = 0; j < w.size(); ++j)
        if (w[j] != 0.0) cand.push_back(std::abs(w[j]));
    std::sort(cand.begin(), cand.end());
    auto below = [&](double t, bool open) {
        int c = 0;
        for (Eigen::Index j = 0; j < w.size(); ++j) c += open ? (w[j] < 0.0) : (w[j] < -t);
        return c;
    };
    bool found = false;
    if (1 + below(0.0, true) == nu) {
        out.tau = 0.0;
        found = true;
    }
    for (std::size_t k = 0; !found && k < cand.size(); ++k)
        if (1 + below(cand[k], false) == nu) {
            out.tau = cand[k];
            found = true;
        }
    if (!found) {
        out.tau = -kInf;
        out.tau_infinite = true;
    }
    for (Eigen::Index j = 0; j < w.size(); ++j)
        if (w[j] > out.tau) out.selected.push_back(static_cast<int>(j));
    return out;
}

inline SelectionResult baseline_threshold(const WStats &w, int nu) { return baseline_threshold(w.w, nu); }

// ---------------------------------------------------------------------------
// Swap

/// Exchanges columns j in `set` between the two datasets on observed cells.
inline std::pair<MixedDataset, MixedDataset> swap_columns(const MixedDataset &z, const MixedDataset &zt,
                                                          const std::vector<int> &set) {
    if (z.rows() != zt.rows() || z.cols() != zt.cols() || !(z.observed == zt.observed))
        throw InputError("swap needs aligned observed masks");
    std::pair<MixedDataset, MixedDataset> out{z, zt};
    for (int j : set) {
        if (j < 0 || j >= z.cols()) throw InputError("swap index out of range");
        for (Eigen::Index i = 0; i < z.rows(); ++i)
            if (z.observed(i, j)) std::swap(out.first.values(i, j), out.second.values(i, j));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Derandomised selection

struct DerandomizedConfig {
    int M = 31;
    double eta = 0.5;
    std::vector<int> nus = {1};
    std::uint64_t base_seed = 1;
    int threads = 1;
    KnockoffSamplerConfig sampler{}; // seed is replaced per run
    EmConfig em{};                   // augmented fit; seed is replaced per run
    double s_margin = 1e-6;

    void validate() const {
        if (M < 1) throw InputError("M must be >= 1");
        if (!(eta > 0.0 && eta <= 1.0)) throw InputError("eta must lie in (0, 1]");
        if (nus.empty()) throw InputError("at least one nu is required");
        for (int v : nus)
            if (v < 1) throw InputError("nu must be >= 1");
        em.validate();
    }
};

inline std::uint64_t run_seed(std::uint64_t base_seed, int m) {
    return splitmix64(base_seed ^ splitmix64(static_cast<std::uint64_t>(m) + 0x9e3779b97f4a7c15ULL));
}

struct DerandomizedResult {
    Vector pi;
    std::vector<int> selected;
    std::vector<SelectionResult> per_run;
    int M = 0;
    double eta = 0.5;
    int nu = 1;
};

struct KnockoffRun {
    std::uint64_t seed = 0;
    RegressionParams params;
    Vector w;
};

struct DerandomizedSelection {
    std::vector<KnockoffRun> runs;
    std::map<int, DerandomizedResult> by_nu;

    const DerandomizedResult &at(int nu) const {
        const auto it = by_nu.find(nu);
        if (it == by_nu.end()) throw InputError("nu " + std::to_string(nu) + " was not evaluated");
        return it->second;
    }
};

/// Aggregates per-run W vectors into selection frequencies for each nu.
inline DerandomizedSelection aggregate_runs(std::vector<KnockoffRun> runs, const std::vector<int> &nus, double eta) {
    DerandomizedSelection out;
    const int M = static_cast<int>(runs.size());
    if (M == 0) throw InputError("no runs to aggregate");
    const auto p = runs.front().w.size();
    for (int nu : nus) {
        DerandomizedResult r;
        r.M = M;
        r.eta = eta;
        r.nu = nu;
        r.pi = Vector::Zero(p);
        for (const auto &run : runs) {
            r.per_run.push_back(baseline_threshold(run.w, nu));
            for (int j : r.per_run.back().selected) r.pi[j] += 1.0;
        }
        r.pi /= static_cast<double>(M);
        for (Eigen::Index j = 0; j < p; ++j)
            if (r.pi[j] * M >= eta * M - 1e-9) r.selected.push_back(static_cast<int>(j));
        out.by_nu[nu] = std::move(r);
    }
    out.runs = std::move(runs);
    return out;
}

/// One knockoff run: draw knockoffs, fit the augmented regression, compute W.
/// The plain fit's final state and parameters warm-start both chains.
inline KnockoffRun knockoff_run(const LatentRegressionData &data, const CopulaParams &xi,
                                const LatentRegressionFit &plain, const SDiag &s, const Matrix &g_sampling,
                                const DerandomizedConfig &cfg, std::uint64_t seed) {
    KnockoffSamplerConfig sc = cfg.sampler;
    sc.seed = stream_seed(seed, 1);
    sc.threads = 1;
    auto draw = sample_knockoffs(data, xi, plain.params, s, sc, plain.state);
    const LatentRegressionData aug(*data.ds, ResponseData{}, *data.bank, &draw.knockoffs, data.responses);
    EmConfig em = cfg.em;
    em.seed = stream_seed(seed, 2);
    em.threads = 1;
    RegressionParams init = plain.params;
    init.gamma = std::vector<Vector>();
    for (const auto &b : init.beta) init.gamma->push_back(Vector::Zero(b.size()));
    auto fit = fit_latent_regression(aug, xi, g_sampling, em, init, draw.state);
    KnockoffRun run;
    run.seed = seed;
    run.w = knockoff_stats(fit.params, xi).w;
    run.params = std::move(fit.params);
    return run;
}

/// Derandomised knockoff selection: M independent knockoff runs shared across
/// every nu, selection frequencies Pi_j and selected = {j : Pi_j >= eta}.
inline DerandomizedSelection derandomized_select(const LatentRegressionData &data, const CopulaParams &xi,
                                                 const LatentRegressionFit &plain, const SDiag &s,
                                                 const DerandomizedConfig &cfg) {
    cfg.validate();
    if (data.augmented()) throw InputError("derandomised selection starts from the plain data");
    const Matrix sigma = xi.sigma();
    const Matrix g = joint_cov(sigma, s_for_sampling(sigma, s.s, cfg.s_margin));
    std::vector<std::optional<KnockoffRun>> runs(static_cast<std::size_t>(cfg.M));
    std::vector<std::string> errors(static_cast<std::size_t>(cfg.M));
    parallel_for(static_cast<std::size_t>(cfg.M), cfg.threads, [&](std::size_t m) {
        try {
            runs[m] = knockoff_run(data, xi, plain, s, g, cfg, run_seed(cfg.base_seed, static_cast<int>(m) + 1));
        } catch (const std::exception &e) {
            errors[m] = e.what();
        }
    });
    std::vector<KnockoffRun> done;
    for (int m = 0; m < cfg.M; ++m) {
        if (!runs[m]) throw NumericalError("knockoff run " + std::to_string(m + 1) + " failed: " + errors[m]);
        done.push_back(std::move(*runs[m]));
    }
    return aggregate_runs(std::move(done), cfg.nus, cfg.eta);
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json selection_to_json(const DerandomizedSelection &sel, const std::vector<VariableMeta> &meta,
                                        const DerandomizedConfig &cfg) {
    nlohmann::json j;
    nlohmann::json names = nlohmann::json::array();
    for (const auto &m : meta) names.push_back(m.name);
    j["variables"] = names;
    j["config"] = {{"M", cfg.M},
                   {"eta", cfg.eta},
                   {"nu", cfg.nus},
                   {"base_seed", cfg.base_seed},
                   {"gibbs_sweeps", cfg.sampler.gibbs_sweeps},
                   {"burn_in", cfg.em.burn_in},
                   {"iters", cfg.em.iters}};
    nlohmann::json runs = nlohmann::json::array();
    for (const auto &r : sel.runs)
        runs.push_back({{"seed", r.seed}, {"w", std::vector<double>(r.w.data(), r.w.data() + r.w.size())}});
    j["runs"] = runs;
    nlohmann::json res = nlohmann::json::array();
    for (const auto &[nu, r] : sel.by_nu) {
        nlohmann::json per = nlohmann::json::array();
        for (const auto &s : r.per_run) {
            nlohmann::json tau = s.tau_infinite ? nlohmann::json("-inf") : nlohmann::json(s.tau);
            per.push_back({{"tau", tau}, {"tau_infinite", s.tau_infinite}, {"selected", s.selected}});
        }
        res.push_back({{"nu", nu},
                       {"pi", std::vector<double>(r.pi.data(), r.pi.data() + r.pi.size())},
                       {"selected", r.selected},
                       {"per_run", per}});
    }
    j["results"] = res;
    return j;
}

} // namespace latko
