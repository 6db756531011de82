#pragma once

// Synthetic study: block-correlated mixed predictors, SMAR missingness,
// matrix-sampled 2PL responses, and replicated PFER / TPR reporting.

#include "latko/knockoff.hpp"

#include <chrono>
#include <functional>
#include <mutex>
#include <numeric>
#include <fstream>
#include <sstream>

namespace latko {

enum class ScalePreset { desk, paper };

inline std::string to_string(ScalePreset p) { return p == ScalePreset::desk ? "desk" : "paper"; }

inline ScalePreset parse_preset(const std::string &s) {
    if (s == "desk") return ScalePreset::desk;
    if (s == "paper") return ScalePreset::paper;
    throw InputError("unknown preset '" + s + "' (expected desk or paper)");
}

struct StudyConfig {
    ScalePreset scale_preset = ScalePreset::desk;
    int p = 20;
    int J = 21;
    int N = 1000;
    std::vector<int> sample_sizes; // empty: just N
    int replications = 50;
    std::vector<int> nu_levels = {1, 2, 3, 4, 5};
    int M = 31;
    double eta = 0.5;
    std::uint64_t seed = 1;

    int n_blocks = 5;
    int item_blocks = 3;
    std::vector<int> nonnull;         // 0-based indices of S*
    std::vector<double> nonnull_beta; // matching coefficients
    std::vector<double> binary_thresholds = {-1.2, -0.3, 0.0, 0.3, 1.2};
    double sigma2 = 1.0;

    std::string s_method = "mvr";
    FitConfig copula{};
    EmConfig em{};
    int gibbs_sweeps = 200;
    EmConfig knockoff_em{};
    int threads = 1;
    double max_failure_rate = 0.05;

    static StudyConfig desk() {
        StudyConfig c;
        c.scale_preset = ScalePreset::desk;
        c.p = 20;
        c.J = 21;
        c.N = 1000;
        c.replications = 50;
        c.nonnull = {0, 6, 9, 15};
        c.nonnull_beta = {0.5, -0.5, 0.5, -0.5};
        c.em.burn_in = 50;
        c.em.iters = 100;
        c.gibbs_sweeps = 20;
        c.knockoff_em.burn_in = 20;
        c.knockoff_em.iters = 40;
        return c;
    }

    static StudyConfig paper() {
        StudyConfig c;
        c.scale_preset = ScalePreset::paper;
        c.p = 100;
        c.J = 60;
        c.N = 1000;
        c.sample_sizes = {1000, 2000, 4000};
        c.replications = 100;
        c.nonnull.clear();
        c.nonnull_beta.clear();
        for (int k = 0; k < 5; ++k) {
            c.nonnull.push_back(21 * k);
            c.nonnull_beta.push_back(0.5);
        }
        for (int k = 0; k < 5; ++k) {
            c.nonnull.push_back(10 + 21 * k);
            c.nonnull_beta.push_back(-0.5);
        }
        c.em.burn_in = 100;
        c.em.iters = 200;
        c.gibbs_sweeps = 200;
        c.knockoff_em.burn_in = 100;
        c.knockoff_em.iters = 200;
        return c;
    }

    static StudyConfig preset(ScalePreset p) { return p == ScalePreset::desk ? desk() : paper(); }

    std::vector<int> sizes() const { return sample_sizes.empty() ? std::vector<int>{N} : sample_sizes; }
    int block_size() const { return p / n_blocks; }

    void validate() const {
        if (p < n_blocks || p % n_blocks != 0) throw InputError("p must be a positive multiple of the number of blocks");
        if (block_size() < 2) throw InputError("blocks need at least two variables");
        if (J < item_blocks || J % item_blocks != 0) throw InputError("J must be a positive multiple of the item blocks");
        if (replications < 1) throw InputError("replications must be >= 1");
        for (int n : sizes())
            if (n < 10) throw InputError("sample size must be >= 10");
        if (nu_levels.empty()) throw InputError("nu_levels is empty");
        for (int v : nu_levels)
            if (v < 1) throw InputError("nu must be >= 1");
        if (M < 1) throw InputError("M must be >= 1");
        if (!(eta > 0 && eta <= 1)) throw InputError("eta must lie in (0, 1]");
        if (nonnull.empty() || nonnull.size() != nonnull_beta.size())
            throw InputError("non-null indices and coefficients must be non-empty and aligned");
        for (int j : nonnull)
            if (j < 0 || j >= p) throw InputError("non-null index out of range");
        if (binary_thresholds.empty()) throw InputError("binary_thresholds is empty");
        if (s_method != "mvr" && s_method != "equi") throw InputError("s_method must be mvr or equi");
        if (!(sigma2 > 0)) throw InputError("sigma2 must be positive");
        if (gibbs_sweeps < 0) throw InputError("gibbs_sweeps must be >= 0");
        copula.validate();
        em.validate();
        knockoff_em.validate();
    }
};

inline nlohmann::json study_config_to_json(const StudyConfig &c) {
    return {{"preset", to_string(c.scale_preset)},
            {"p", c.p},
            {"J", c.J},
            {"N", c.sizes()},
            {"replications", c.replications},
            {"nu", c.nu_levels},
            {"M", c.M},
            {"eta", c.eta},
            {"seed", c.seed},
            {"blocks", c.n_blocks},
            {"item_blocks", c.item_blocks},
            {"nonnull", c.nonnull},
            {"nonnull_beta", c.nonnull_beta},
            {"binary_thresholds", c.binary_thresholds},
            {"sigma2", c.sigma2},
            {"s_method", c.s_method},
            {"copula", {{"burn_in", c.copula.burn_in}, {"iters", c.copula.iters}}},
            {"em", {{"burn_in", c.em.burn_in}, {"iters", c.em.iters}}},
            {"gibbs_sweeps", c.gibbs_sweeps},
            {"knockoff_em", {{"burn_in", c.knockoff_em.burn_in}, {"iters", c.knockoff_em.iters}}},
            {"item_parameters", "redrawn per replication"}};
}

// ---------------------------------------------------------------------------
// Data generation

/// Five-block correlation design. With block size b: blocks 1-3 have
/// within-block correlation 0.6, blocks 4-5 0.3; blocks 1-2 cross 0.15 with
/// 0.3 on the matched diagonal; block 3 crosses blocks 1-2 at 0.15; block 4
/// crosses blocks 1-3 at 0.15 with 0.3 on the diagonal against block 1;
/// block 5 crosses everything with U[0.1, 0.2] entries.
inline Matrix build_sigma_blocks(int p, Rng &rng, int max_retries = 50) {
    if (p < 10 || p % 5 != 0) throw InputError("build_sigma_blocks needs p divisible by 5 (p >= 10)");
    const int b = p / 5;
    Matrix s = Matrix::Zero(p, p);
    auto blk = [&](int k) { return k * b; };
    const double within[5] = {0.6, 0.6, 0.6, 0.3, 0.3};
    for (int k = 0; k < 5; ++k) s.block(blk(k), blk(k), b, b).setConstant(within[k]);
    auto cross = [&](int k, int l, double v, double diag) {
        Matrix m = Matrix::Constant(b, b, v);
        if (diag >= 0) m.diagonal().setConstant(diag);
        s.block(blk(k), blk(l), b, b) = m;
        s.block(blk(l), blk(k), b, b) = m.transpose();
    };
    cross(0, 1, 0.15, 0.3);
    cross(0, 2, 0.15, -1);
    cross(1, 2, 0.15, -1);
    cross(3, 0, 0.15, 0.3);
    cross(3, 1, 0.15, -1);
    cross(3, 2, 0.15, -1);
    s.diagonal().setOnes();
    for (int attempt = 0; attempt < max_retries; ++attempt) {
        for (int i = blk(4); i < p; ++i)
            for (int j = 0; j < blk(4); ++j) s(i, j) = s(j, i) = 0.1 + 0.1 * rng.uniform();
        if (min_eigenvalue(s) > 1e-6) return s;
    }
    throw NumericalError("block correlation design is not positive definite");
}

struct GroundTruth {
    Matrix sigma;
    std::vector<MarginalTransform> margins;
    std::vector<VariableMeta> meta;
    Vector beta;
    double beta0 = 0.0;
    double sigma2 = 1.0;
    std::vector<int> support;
    ItemBank bank;
};

struct StudyData {
    MixedDataset ds;
    ResponseData rd;
    GroundTruth truth;
    Vector theta;
    std::vector<int> group; // R_i, 0-based
    RowMatrix complete;     // values before missingness
};

/// Variable kinds and margins: each block is half continuous (c = 0, d = 1)
/// then half binary with thresholds cycling through the configured values.
inline void study_margins(const StudyConfig &cfg, std::vector<VariableMeta> &meta,
                          std::vector<MarginalTransform> &margins) {
    const int b = cfg.block_size();
    const int half = (b + 1) / 2;
    int nb = 0;
    meta.clear();
    margins.clear();
    for (int j = 0; j < cfg.p; ++j) {
        const bool binary = (j % b) >= half;
        if (binary) {
            meta.push_back({"Z" + std::to_string(j + 1), VarKind::binary, 2});
            const double t = cfg.binary_thresholds[nb++ % cfg.binary_thresholds.size()];
            margins.push_back(MarginalTransform::from_thresholds(std::vector<double>{t}));
        } else {
            meta.push_back({"Z" + std::to_string(j + 1), VarKind::continuous, 0});
            margins.push_back(MarginalTransform::continuous(0.0, 1.0));
        }
    }
}

/// Missingness probability 1 / (1 + exp(1 - s / 2)) for the sum s of the
/// group's non-null values.
inline double smar_missing_probability(double s) { return 1.0 / (1.0 + std::exp(1.0 - s / 2.0)); }

inline StudyData generate_study(const StudyConfig &cfg, const Matrix &sigma, int n, Rng &rng) {
    cfg.validate();
    if (sigma.rows() != cfg.p) throw InputError("sigma does not match p");
    StudyData out;
    auto &tr = out.truth;
    tr.sigma = sigma;
    study_margins(cfg, tr.meta, tr.margins);
    tr.beta = Vector::Zero(cfg.p);
    for (std::size_t k = 0; k < cfg.nonnull.size(); ++k) tr.beta[cfg.nonnull[k]] = cfg.nonnull_beta[k];
    tr.support = cfg.nonnull;
    std::sort(tr.support.begin(), tr.support.end());
    tr.sigma2 = cfg.sigma2;
    for (int k = 0; k < cfg.J; ++k)
        tr.bank.items.push_back(
            {"item" + std::to_string(k + 1), ItemModel::twopl, 0.5 + rng.uniform(), {-2.0 + 2.0 * rng.uniform()}});

    const int p = cfg.p;
    const int b = cfg.block_size();
    std::vector<std::vector<int>> group_support(cfg.n_blocks);
    for (int j : tr.support) group_support[j / b].push_back(j);

    const Matrix L = sigma.llt().matrixL();
    out.ds.meta = tr.meta;
    out.ds.values = RowMatrix::Constant(n, p, std::numeric_limits<double>::quiet_NaN());
    out.ds.observed = MaskMatrix::Constant(n, p, false);
    out.complete.resize(n, p);
    out.theta.resize(n);
    out.group.resize(n);
    Vector e(p);
    for (int i = 0; i < n; ++i) {
        for (auto &v : e) v = rng.normal();
        const Vector z = L * e;
        double eta = tr.beta0;
        for (int j = 0; j < p; ++j) {
            const auto &m = tr.margins[j];
            const double x = m.discrete ? category_of(m.thresholds(), z[j]) : m.c + m.d * z[j];
            out.complete(i, j) = x;
            eta += tr.beta[j] * x;
        }
        out.theta[i] = eta + std::sqrt(tr.sigma2) * rng.normal();
        const int g = static_cast<int>(rng.index(static_cast<std::size_t>(cfg.n_blocks)));
        out.group[i] = g;
        double s = 0.0;
        for (int j : group_support[g]) s += out.complete(i, j);
        const double pm = smar_missing_probability(s);
        do {
            for (int j = 0; j < p; ++j) {
                const bool keep = std::find(group_support[g].begin(), group_support[g].end(), j) !=
                                      group_support[g].end() ||
                                  rng.uniform() >= pm;
                out.ds.observed(i, j) = keep;
            }
        } while (!out.ds.observed.row(i).any());
        for (int j = 0; j < p; ++j)
            if (out.ds.observed(i, j)) out.ds.values(i, j) = out.complete(i, j);
    }
    const auto design = equal_blocks(cfg.J, cfg.item_blocks);
    out.rd = simulate_responses(std::span<const double>(out.theta.data(), n), tr.bank, design, rng);
    return out;
}

inline StudyData generate_study(const StudyConfig &cfg, Rng &rng) {
    const Matrix sigma = build_sigma_blocks(cfg.p, rng);
    return generate_study(cfg, sigma, cfg.N, rng);
}

// ---------------------------------------------------------------------------
// Replications

struct PipelineOutcome {
    CopulaFit copula;
    LatentRegressionFit plain;
    SDiag s;
    DerandomizedSelection selection;
};

inline SDiag choose_s(const Matrix &sigma, const std::string &method) {
    if (method == "equi") return s_equicorrelated(sigma);
    if (method == "mvr") return s_mvr(sigma);
    throw InputError("unknown S method '" + method + "'");
}

/// Copula fit, plain latent regression and derandomised knockoff selection
/// for one dataset.
inline PipelineOutcome run_pipeline(const MixedDataset &ds, const ResponseData &rd, const ItemBank &bank,
                                    const StudyConfig &cfg, std::uint64_t seed) {
    PipelineOutcome out;
    FitConfig fc = cfg.copula;
    fc.seed = stream_seed(seed, 11);
    fc.threads = 1;
    out.copula = fit_copula(ds, std::nullopt, fc);
    const LatentRegressionData data(ds, rd, bank);
    EmConfig em = cfg.em;
    em.seed = stream_seed(seed, 12);
    em.threads = 1;
    out.plain = fit_latent_regression(data, out.copula.params, out.copula.params.sigma(), em);
    out.s = choose_s(out.copula.params.sigma(), cfg.s_method);
    DerandomizedConfig dc;
    dc.M = cfg.M;
    dc.eta = cfg.eta;
    dc.nus = cfg.nu_levels;
    dc.base_seed = stream_seed(seed, 13);
    dc.threads = 1;
    dc.sampler.gibbs_sweeps = cfg.gibbs_sweeps;
    dc.em = cfg.knockoff_em;
    out.selection = derandomized_select(data, out.copula.params, out.plain, out.s, dc);
    return out;
}

struct ReplicationRecord {
    int N = 0;
    int index = 0;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    double missing_rate = 0.0;
    // per nu: baseline (first run) and derandomised selections
    std::map<int, std::vector<int>> baseline;
    std::map<int, std::vector<int>> drm;
    std::map<int, bool> baseline_tau_infinite;
    double seconds = 0.0;
};

struct Table1Row {
    int N = 0;
    int nu = 0;
    std::string method;
    double pfer = 0, tpr = 0, se_pfer = 0, se_tpr = 0;
    int replications = 0;
};

struct StudyReport {
    StudyConfig config;
    std::vector<ReplicationRecord> records;
    std::vector<Table1Row> table;
    double seconds = 0.0;
};

inline int false_positives(const std::vector<int> &sel, const std::vector<int> &support) {
    int c = 0;
    for (int j : sel) c += !std::binary_search(support.begin(), support.end(), j);
    return c;
}

inline double true_positive_rate(const std::vector<int> &sel, const std::vector<int> &support) {
    int c = 0;
    for (int j : sel) c += std::binary_search(support.begin(), support.end(), j);
    return static_cast<double>(c) / static_cast<double>(support.size());
}

inline std::vector<Table1Row> summarize(const std::vector<ReplicationRecord> &records, const StudyConfig &cfg) {
    std::vector<int> support = cfg.nonnull;
    std::sort(support.begin(), support.end());
    std::vector<Table1Row> rows;
    for (int n : cfg.sizes())
        for (int nu : cfg.nu_levels)
            for (const std::string method : {"Baseline", "DRM"}) {
                std::vector<double> fp, tp;
                for (const auto &r : records) {
                    if (r.N != n || r.failed) continue;
                    const auto &sel = method == "DRM" ? r.drm.at(nu) : r.baseline.at(nu);
                    fp.push_back(false_positives(sel, support));
                    tp.push_back(true_positive_rate(sel, support));
                }
                Table1Row row{n, nu, method};
                row.replications = static_cast<int>(fp.size());
                if (!fp.empty()) {
                    auto mean_se = [](const std::vector<double> &v, double &m, double &se) {
                        m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
                        double ss = 0;
                        for (double x : v) ss += (x - m) * (x - m);
                        se = v.size() > 1 ? std::sqrt(ss / (v.size() - 1) / v.size()) : 0.0;
                    };
                    mean_se(fp, row.pfer, row.se_pfer);
                    mean_se(tp, row.tpr, row.se_tpr);
                }
                rows.push_back(row);
            }
    return rows;
}

/// Runs every (N, replication) pair; replications run in parallel with one
/// thread each. Block-5 correlations are drawn once from the study seed;
/// everything else (including item parameters) is redrawn per replication.
inline StudyReport run_study(const StudyConfig &cfg, int threads = 1,
                             const std::function<void(const ReplicationRecord &)> &progress = {}) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    Rng sigma_rng(stream_seed(cfg.seed, 0x5167));
    const Matrix sigma = build_sigma_blocks(cfg.p, sigma_rng);
    std::vector<std::pair<int, int>> jobs;
    for (int n : cfg.sizes())
        for (int r = 0; r < cfg.replications; ++r) jobs.emplace_back(n, r);
    StudyReport rep;
    rep.config = cfg;
    rep.records.resize(jobs.size());
    std::mutex progress_mutex;
    parallel_for(jobs.size(), threads, [&](std::size_t k) {
        const auto [n, r] = jobs[k];
        auto &rec = rep.records[k];
        rec.N = n;
        rec.index = r;
        rec.seed = stream_seed(cfg.seed, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(r));
        const auto start = std::chrono::steady_clock::now();
        try {
            Rng rng(rec.seed);
            const auto data = generate_study(cfg, sigma, n, rng);
            rec.missing_rate = 1.0 - static_cast<double>(data.ds.observed.count()) / data.ds.observed.size();
            const auto out = run_pipeline(data.ds, data.rd, data.truth.bank, cfg, rec.seed);
            for (int nu : cfg.nu_levels) {
                const auto &res = out.selection.at(nu);
                rec.drm[nu] = res.selected;
                rec.baseline[nu] = res.per_run.front().selected;
                rec.baseline_tau_infinite[nu] = res.per_run.front().tau_infinite;
            }
        } catch (const std::exception &e) {
            rec.failed = true;
            rec.error = e.what();
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (progress) {
            std::lock_guard<std::mutex> lock(progress_mutex);
            progress(rec);
        }
    });
    int failed = 0;
    for (const auto &r : rep.records) failed += r.failed;
    if (failed > cfg.max_failure_rate * static_cast<double>(rep.records.size())) {
        std::string msg = std::to_string(failed) + " of " + std::to_string(rep.records.size()) + " replications failed";
        for (const auto &r : rep.records)
            if (r.failed) {
                msg += "; first failure (seed " + std::to_string(r.seed) + "): " + r.error;
                break;
            }
        throw NumericalError(msg);
    }
    rep.table = summarize(rep.records, cfg);
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

// ---------------------------------------------------------------------------
// Oracle filter check

/// PFER of the baseline filter on injected statistics: non-nulls W = +1;
/// nulls get a symmetric random sign with magnitude 1 (`coin`) or Exp(1).
struct OracleFilterResult {
    double pfer = 0.0;
    double se = 0.0;
    double tpr = 0.0;
};

inline OracleFilterResult oracle_filter_pfer(int n_null, int n_nonnull, int nu, int trials, std::uint64_t seed,
                                             bool coin = true) {
    Rng rng(seed);
    std::vector<double> fp(static_cast<std::size_t>(trials));
    double tp = 0.0;
    Vector w(n_null + n_nonnull);
    for (int t = 0; t < trials; ++t) {
        for (int j = 0; j < n_nonnull; ++j) w[j] = 1.0;
        for (int j = 0; j < n_null; ++j) {
            const double mag = coin ? 1.0 : -std::log(rng.uniform());
            w[n_nonnull + j] = rng.uniform() < 0.5 ? mag : -mag;
        }
        const auto sel = baseline_threshold(w, nu);
        int f = 0, g = 0;
        for (int j : sel.selected) (j < n_nonnull ? g : f) += 1;
        fp[t] = f;
        tp += n_nonnull > 0 ? static_cast<double>(g) / n_nonnull : 0.0;
    }
    OracleFilterResult out;
    out.pfer = std::accumulate(fp.begin(), fp.end(), 0.0) / trials;
    double ss = 0;
    for (double v : fp) ss += (v - out.pfer) * (v - out.pfer);
    out.se = std::sqrt(ss / std::max(1, trials - 1) / trials);
    out.tpr = tp / trials;
    return out;
}

// ---------------------------------------------------------------------------
// Output

inline std::string table1_csv(const std::vector<Table1Row> &rows) {
    std::ostringstream os;
    os << "N,nu,method,pfer,tpr,se_pfer,se_tpr\n";
    for (const auto &r : rows)
        os << r.N << ',' << r.nu << ',' << r.method << ',' << detail::format_double(r.pfer) << ','
           << detail::format_double(r.tpr) << ',' << detail::format_double(r.se_pfer) << ','
           << detail::format_double(r.se_tpr) << '\n';
    return os.str();
}

/// Deterministic report (no wall-clock fields).
inline nlohmann::json study_report_json(const StudyReport &rep) {
    nlohmann::json j;
    j["config"] = study_config_to_json(rep.config);
    nlohmann::json table = nlohmann::json::array();
    for (const auto &r : rep.table)
        table.push_back({{"N", r.N},
                         {"nu", r.nu},
                         {"method", r.method},
                         {"pfer", r.pfer},
                         {"tpr", r.tpr},
                         {"se_pfer", r.se_pfer},
                         {"se_tpr", r.se_tpr},
                         {"replications", r.replications}});
    j["table"] = table;
    nlohmann::json recs = nlohmann::json::array();
    int failed = 0;
    for (const auto &r : rep.records) {
        nlohmann::json o = {{"N", r.N}, {"replication", r.index}, {"seed", r.seed}, {"failed", r.failed}};
        if (r.failed) {
            o["error"] = r.error;
            ++failed;
        } else {
            o["missing_rate"] = r.missing_rate;
            nlohmann::json sel = nlohmann::json::object();
            for (const auto &[nu, s] : r.drm) {
                sel[std::to_string(nu)] = {{"baseline", r.baseline.at(nu)},
                                           {"drm", s},
                                           {"baseline_tau_infinite", r.baseline_tau_infinite.at(nu)}};
            }
            o["selections"] = sel;
        }
        recs.push_back(o);
    }
    j["replications"] = recs;
    j["failed_replications"] = failed;
    return j;
}

} // namespace latko
