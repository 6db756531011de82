#include "latko/latreg.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>

using namespace latko;

namespace {

ItemBank make_bank(int J, Rng &rng) {
    ItemBank bank;
    for (int k = 0; k < J; ++k)
        bank.items.push_back({"i" + std::to_string(k), ItemModel::twopl, 0.5 + rng.uniform(), {-2.0 + 2.0 * rng.uniform()}});
    return bank;
}

VariableMeta cont(const std::string &n) { return {n, VarKind::continuous, 0}; }
VariableMeta bin(const std::string &n) { return {n, VarKind::binary, 2}; }

MixedDataset empty_dataset(Eigen::Index n, std::vector<VariableMeta> meta) {
    MixedDataset ds;
    const auto p = static_cast<Eigen::Index>(meta.size());
    ds.meta = std::move(meta);
    ds.values = RowMatrix::Constant(n, p, std::numeric_limits<double>::quiet_NaN());
    ds.observed = MaskMatrix::Constant(n, p, false);
    return ds;
}

ResponseData no_items(Eigen::Index n) { return ResponseData{IntMatrix(n, 0), MaskMatrix(n, 0)}; }

struct Simulated {
    MixedDataset ds;
    ResponseData rd;
    ItemBank bank;
    Vector theta;
};

// Continuous predictors with equicorrelation rho, theta = Z beta + N(0,1),
// all J items administered.
Simulated simulate_continuous(int n, const Vector &beta, double rho, int J, std::uint64_t seed) {
    Rng rng(seed);
    const auto p = beta.size();
    std::vector<VariableMeta> meta;
    for (Eigen::Index j = 0; j < p; ++j) meta.push_back(cont("x" + std::to_string(j)));
    Simulated s{empty_dataset(n, meta), {}, make_bank(J, rng), Vector(n)};
    Matrix sigma = Matrix::Constant(p, p, rho);
    sigma.diagonal().setOnes();
    const Matrix L = sigma.llt().matrixL();
    for (int i = 0; i < n; ++i) {
        Vector e(p);
        for (auto &v : e) v = rng.normal();
        const Vector z = L * e;
        s.ds.values.row(i) = z.transpose();
        s.theta[i] = z.dot(beta) + rng.normal();
    }
    s.ds.observed.setConstant(true);
    BlockDesign design{{std::vector<int>()}};
    for (int k = 0; k < J; ++k) design.blocks[0].push_back(k);
    s.rd = J > 0 ? simulate_responses(std::span<const double>(s.theta.data(), n), s.bank, design, rng) : no_items(n);
    return s;
}

} // namespace

TEST(Design, RowDummies) {
    const std::vector<VariableMeta> meta = {{"o", VarKind::ordinal, 3}, bin("b"), cont("c")};
    const std::vector<double> r1 = {1, 1, 2.5};
    const Vector d1 = design_row(r1, meta);
    ASSERT_EQ(d1.size(), 5);
    EXPECT_EQ(d1[0], 1.0);
    EXPECT_EQ(d1[1], 1.0);
    EXPECT_EQ(d1[2], 0.0);
    EXPECT_EQ(d1[3], 1.0);
    EXPECT_EQ(d1[4], 2.5);
    const std::vector<double> r0 = {0, 0, -1};
    const Vector d0 = design_row(r0, meta);
    EXPECT_EQ(d0[1], 0.0);
    EXPECT_EQ(d0[2], 0.0);
    const std::vector<double> r2 = {2, 0, 0};
    EXPECT_EQ(design_row(r2, meta)[2], 1.0);
    const std::vector<double> miss = {1, std::numeric_limits<double>::quiet_NaN(), 0};
    EXPECT_THROW(design_row(miss, meta), InputError);
}

TEST(Ols, ExactInterpolation) {
    Rng rng(3);
    Matrix X(50, 4);
    for (Eigen::Index i = 0; i < 50; ++i) {
        X(i, 0) = 1;
        for (int k = 1; k < 4; ++k) X(i, k) = rng.normal();
    }
    const Vector b = (Vector(4) << 0.5, -1, 2, 0.25).finished();
    const auto r = mstep_ols(X * b, X);
    EXPECT_LT((r.coef - b).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(r.sigma2, 1e-10);
}

TEST(Ols, PureNoise) {
    Rng rng(4);
    const int n = 100000;
    Matrix X(n, 4);
    Vector y(n);
    for (int i = 0; i < n; ++i) {
        X(i, 0) = 1;
        X(i, 1) = rng.normal();
        X(i, 2) = rng.uniform() < 0.3;
        X(i, 3) = rng.normal() * 2;
        y[i] = rng.normal();
    }
    const auto r = mstep_ols(y, X);
    const Matrix cov = r.sigma2 * (X.transpose() * X).inverse();
    for (int k = 0; k < 4; ++k) EXPECT_LT(std::abs(r.coef[k]), 3 * std::sqrt(cov(k, k))) << k;
    EXPECT_NEAR(r.sigma2, 1.0, 0.02);
    // Normal equations.
    const Vector resid = y - X * r.coef;
    EXPECT_LT((X.transpose() * resid).cwiseAbs().maxCoeff(), 1e-8 * n);
}

TEST(Ols, DuplicatedColumnReported) {
    Rng rng(5);
    Matrix X(30, 4);
    for (Eigen::Index i = 0; i < 30; ++i) {
        X(i, 0) = 1;
        X(i, 1) = rng.normal();
        X(i, 2) = rng.normal();
        X(i, 3) = X(i, 1);
    }
    try {
        mstep_ols(Vector::Ones(30), X);
        FAIL() << "expected a rank error";
    } catch (const RankDeficientError &e) {
        ASSERT_EQ(e.columns.size(), 1u);
        EXPECT_TRUE(e.columns[0] == 1 || e.columns[0] == 3);
        EXPECT_NE(std::string(e.what()).find("dependent columns"), std::string::npos);
    }
}

TEST(Ols, ConstantColumnReported) {
    Matrix X = Matrix::Ones(20, 3);
    for (int i = 0; i < 20; ++i) X(i, 1) = i;
    X.col(2).setZero();
    try {
        mstep_ols(Vector::Ones(20), X);
        FAIL();
    } catch (const RankDeficientError &e) {
        ASSERT_EQ(e.columns.size(), 1u);
        EXPECT_EQ(e.columns[0], 2);
    }
}

TEST(JointGibbs, ObservedContinuousOnlyMovesTheta) {
    auto sim = simulate_continuous(20, (Vector(2) << 0.5, -0.5).finished(), 0.3, 5, 11);
    const auto xi = CopulaParams::from_sigma(Matrix::Identity(2, 2),
                                             {MarginalTransform::continuous(0, 1), MarginalTransform::continuous(0, 1)});
    const LatentRegressionData data(sim.ds, sim.rd, sim.bank);
    const JointPrior prior(xi, xi.sigma());
    auto params = RegressionParams::zeros(sim.ds.meta, false);
    auto st = initial_joint_state(data, prior);
    const RowMatrix before = st.zstar;
    Rng a(1), b(2);
    for (Eigen::Index i = 0; i < 20; ++i) gibbs_sweep_joint(i, data, params, prior, st, a, b);
    EXPECT_EQ(st.zstar, before);
    EXPECT_GT(st.theta.cwiseAbs().sum(), 0.0);
}

// Z* | theta for a single missing continuous predictor with no items:
// density prop. to phi(z) N(theta; b0 + b (c + d z), s2), checked per draw
// against quadrature moments.
TEST(JointGibbs, MissingContinuousConditionalMatchesQuadrature) {
    const int n = 20000;
    auto ds = empty_dataset(n, {cont("x")});
    const auto rd = no_items(n);
    ItemBank bank;
    const auto xi = CopulaParams::from_sigma(Matrix::Identity(1, 1), {MarginalTransform::continuous(1.5, 2.0)});
    const LatentRegressionData data(ds, rd, bank);
    const JointPrior prior(xi, xi.sigma());
    RegressionParams params = RegressionParams::zeros(ds.meta, false);
    params.beta0 = 0.3;
    params.beta[0][0] = 0.7;
    params.sigma2 = 0.8;
    auto st = initial_joint_state(data, prior);
    Rng rt(5), rz(6);
    using boost::math::quadrature::gauss_kronrod;
    double zsum = 0, z2sum = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        st.zstar(i, 0) = 0.4;
        gibbs_sweep_joint(i, data, params, prior, st, rt, rz);
        const double th = st.theta[i];
        auto dens = [&](double z) {
            const double e = th - 0.3 - 0.7 * (1.5 + 2.0 * z);
            return std::exp(-0.5 * z * z - 0.5 * e * e / 0.8);
        };
        const double Z = gauss_kronrod<double, 61>::integrate(dens, -12, 12, 10, 1e-12);
        const double m = gauss_kronrod<double, 61>::integrate([&](double z) { return z * dens(z); }, -12, 12, 10, 1e-12) / Z;
        const double v =
            gauss_kronrod<double, 61>::integrate([&](double z) { return (z - m) * (z - m) * dens(z); }, -12, 12, 10, 1e-12) / Z;
        const double u = (st.zstar(i, 0) - m) / std::sqrt(v);
        zsum += u;
        z2sum += u * u;
    }
    const double mean = zsum / n, second = z2sum / n;
    EXPECT_LT(std::abs(mean), 3.0 / std::sqrt(n));
    EXPECT_LT(std::abs(second - 1.0), 3.0 * std::sqrt(2.0 / n));
}

// Start at exact draws from the joint model and apply one sweep: moments of
// (theta, Z*) stay put.
TEST(JointGibbs, InvarianceAtTarget) {
    const int n = 100000;
    Rng rng(21);
    const double rho = 0.5;
    auto ds = empty_dataset(n, {cont("x"), bin("b")});
    ItemBank bank = make_bank(4, rng);
    const auto xi = CopulaParams::from_sigma((Matrix(2, 2) << 1, rho, rho, 1).finished(),
                                             {MarginalTransform::continuous(0.5, 1.5),
                                              MarginalTransform::from_thresholds(std::vector<double>{0.2})});
    RegressionParams params = RegressionParams::zeros(ds.meta, false);
    params.beta0 = -0.2;
    params.beta[0][0] = 0.4;
    params.beta[1][0] = -0.6;
    params.sigma2 = 0.7;
    JointState st{Vector(n), RowMatrix(n, 2), RowMatrix(0, 0)};
    for (int i = 0; i < n; ++i) {
        const double z1 = rng.normal();
        const double z2 = rho * z1 + std::sqrt(1 - rho * rho) * rng.normal();
        st.zstar(i, 0) = z1;
        st.zstar(i, 1) = z2;
        const double x = 0.5 + 1.5 * z1;
        const int c = z2 > 0.2;
        st.theta[i] = -0.2 + 0.4 * x - 0.6 * c + std::sqrt(0.7) * rng.normal();
        // Half the rows observe the binary predictor, a third the continuous one.
        if (i % 2 == 0) {
            ds.values(i, 1) = c;
            ds.observed(i, 1) = true;
        }
        if (i % 3 == 0) {
            ds.values(i, 0) = x;
            ds.observed(i, 0) = true;
        }
    }
    BlockDesign design{{{0, 1, 2, 3}}};
    const auto rd = simulate_responses(std::span<const double>(st.theta.data(), n), bank, design, rng);
    const LatentRegressionData data(ds, rd, bank);
    const JointPrior prior(xi, xi.sigma());
    auto moments = [&](const JointState &s) {
        std::vector<double> m(7, 0.0);
        for (int i = 0; i < n; ++i) {
            m[0] += s.theta[i];
            m[1] += s.theta[i] * s.theta[i];
            m[2] += s.zstar(i, 0);
            m[3] += s.zstar(i, 1);
            m[4] += s.zstar(i, 0) * s.zstar(i, 1);
            m[5] += s.theta[i] * s.zstar(i, 0);
            m[6] += s.zstar(i, 1) > 0.2;
        }
        for (auto &v : m) v /= n;
        return m;
    };
    const auto before = moments(st);
    for (int i = 0; i < n; ++i) {
        Rng a(stream_seed(9, i, 0)), b(stream_seed(9, i, 1));
        gibbs_sweep_joint(i, data, params, prior, st, a, b);
    }
    const auto after = moments(st);
    // Exact population moments.
    const double pc = norm_cdf(-0.2);
    const double ex = 0.5;
    const double e_theta = -0.2 + 0.4 * ex - 0.6 * pc;
    // Rough SE for the difference of two correlated means: sqrt(2 var / n)
    // with var bounded by the second moment.
    const std::vector<double> truth = {e_theta, std::nan(""), 0.0, 0.0, rho, std::nan(""), pc};
    for (int k = 0; k < 7; ++k) {
        const double se = std::sqrt(2.0 * 4.0 / n);
        EXPECT_LT(std::abs(after[k] - before[k]), 3 * se) << k;
        if (!std::isnan(truth[k])) EXPECT_LT(std::abs(after[k] - truth[k]), 3 * se) << k;
    }
}

// With beta = 0 the latent scan reproduces the copula-only sampler.
TEST(JointGibbs, ZeroBetaMatchesCopulaSweep) {
    const int n = 40000;
    auto ds = empty_dataset(n, {bin("a"), bin("b")});
    for (int i = 0; i < n; ++i) {
        ds.values(i, 0) = 1;
        ds.observed(i, 0) = true;
    }
    const auto rd = no_items(n);
    ItemBank bank;
    const auto xi = CopulaParams::from_sigma((Matrix(2, 2) << 1, 0.6, 0.6, 1).finished(),
                                             {MarginalTransform::from_thresholds(std::vector<double>{0.3}),
                                              MarginalTransform::from_thresholds(std::vector<double>{-0.4})});
    const LatentRegressionData data(ds, rd, bank);
    const JointPrior prior(xi, xi.sigma());
    const auto params = RegressionParams::zeros(ds.meta, false);
    auto st = initial_joint_state(data, prior);
    const PreparedCopula pc(xi);
    auto ust = initial_state(ds, xi);
    const std::vector<int> order = {0, 1};
    const int bins = 24;
    std::vector<double> h1(bins, 0.0), h2(bins, 0.0);
    auto bin_of = [&](double z) { return std::clamp(static_cast<int>((z + 3.0) / 6.0 * bins), 0, bins - 1); };
    for (int i = 0; i < n; ++i) {
        for (int t = 0; t < 20; ++t) {
            Rng a(stream_seed(1, t, i, 0)), b(stream_seed(1, t, i, 1)), c(stream_seed(2, t, i));
            gibbs_sweep_joint(i, data, params, prior, st, a, b);
            gibbs_sweep_marginal(i, ds, pc, ust, c, order);
        }
        h1[bin_of(st.zstar(i, 1))] += 1.0 / n;
        h2[bin_of(ust.zstar(i, 1))] += 1.0 / n;
    }
    double tv = 0;
    for (int k = 0; k < bins; ++k) tv += 0.5 * std::abs(h1[k] - h2[k]);
    EXPECT_LE(tv, 0.02);
}

TEST(Em, RecoversCoefficients) {
    const Vector beta = (Vector(4) << 0.5, -0.5, 0.0, 0.0).finished();
    auto sim = simulate_continuous(4000, beta, 0.3, 40, 77);
    const auto cf = fit_copula(sim.ds, std::nullopt, FitConfig{});
    const LatentRegressionData data(sim.ds, sim.rd, sim.bank);
    EmConfig cfg;
    cfg.burn_in = 50;
    cfg.iters = 100;
    const auto fit = fit_latent_regression(data, cf.params, cf.params.sigma(), cfg);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(fit.params.beta[j][0], beta[j], 0.1) << j;
    EXPECT_NEAR(fit.params.sigma2, 1.0, 0.2);
    EXPECT_NEAR(fit.params.beta0, 0.0, 0.1);
}

TEST(Em, SmokeRun) {
    auto sim = simulate_continuous(50, (Vector(2) << 0.5, 0.0).finished(), 0.2, 6, 3);
    for (int i = 0; i < 50; i += 4) {
        sim.ds.observed(i, 1) = false;
        sim.ds.values(i, 1) = std::nan("");
    }
    const auto xi = initial_copula(sim.ds);
    const LatentRegressionData data(sim.ds, sim.rd, sim.bank);
    EmConfig cfg;
    cfg.burn_in = 1;
    cfg.iters = 1;
    const auto fit = fit_latent_regression(data, xi, xi.sigma(), cfg);
    EXPECT_TRUE(fit.params.flat().allFinite());
    EXPECT_GT(fit.params.sigma2, 0.0);
}

TEST(Em, DeterministicAndThreadInvariant) {
    auto sim = simulate_continuous(300, (Vector(3) << 0.5, 0.0, -0.3).finished(), 0.2, 8, 8);
    for (int i = 0; i < 300; i += 3) {
        sim.ds.observed(i, 2) = false;
        sim.ds.values(i, 2) = std::nan("");
    }
    const auto xi = initial_copula(sim.ds);
    const LatentRegressionData data(sim.ds, sim.rd, sim.bank);
    EmConfig cfg;
    cfg.burn_in = 5;
    cfg.iters = 10;
    const auto a = fit_latent_regression(data, xi, xi.sigma(), cfg);
    cfg.threads = 3;
    const auto b = fit_latent_regression(data, xi, xi.sigma(), cfg);
    EXPECT_EQ(a.params.flat(), b.params.flat());
    EXPECT_EQ(a.params.sigma2, b.params.sigma2);
    cfg.seed = 2;
    const auto c = fit_latent_regression(data, xi, xi.sigma(), cfg);
    EXPECT_NE(a.params.flat(), c.params.flat());
}

TEST(Em, BadInputs) {
    auto sim = simulate_continuous(20, (Vector(2) << 0.5, 0.0).finished(), 0.2, 3, 3);
    const auto xi = initial_copula(sim.ds);
    const LatentRegressionData data(sim.ds, sim.rd, sim.bank);
    EmConfig cfg;
    cfg.iters = 0;
    EXPECT_THROW(fit_latent_regression(data, xi, xi.sigma(), cfg), InputError);
    cfg.iters = 1;
    EXPECT_THROW(fit_latent_regression(data, xi, Matrix::Identity(4, 4), cfg), InputError);
    ResponseData short_rd{IntMatrix(3, 3), MaskMatrix::Constant(3, 3, false)};
    EXPECT_THROW(LatentRegressionData(sim.ds, short_rd, sim.bank), InputError);
}

TEST(Em, PersistentRankDeficiencyFails) {
    // Two identical observed columns can never be separated.
    auto sim = simulate_continuous(100, (Vector(2) << 0.5, 0.0).finished(), 0.0, 3, 3);
    sim.ds.values.col(1) = sim.ds.values.col(0);
    const auto xi = CopulaParams::from_sigma(Matrix::Identity(2, 2),
                                             {MarginalTransform::continuous(0, 1), MarginalTransform::continuous(0, 1)});
    const LatentRegressionData data(sim.ds, sim.rd, sim.bank);
    EmConfig cfg;
    cfg.burn_in = 20;
    cfg.iters = 5;
    EXPECT_THROW(fit_latent_regression(data, xi, xi.sigma(), cfg), RankDeficientError);
}

TEST(Em, JsonRoundTrip) {
    const std::vector<VariableMeta> meta = {{"o", VarKind::ordinal, 3}, cont("c")};
    auto p = RegressionParams::zeros(meta, true);
    p.beta0 = 0.1;
    p.beta[0] << 0.2, 0.3;
    p.beta[1][0] = -1;
    (*p.gamma)[0] << 0.01, 0.02;
    p.sigma2 = 0.9;
    const auto back = regression_from_json(nlohmann::json::parse(regression_to_json(p, meta).dump()), meta);
    EXPECT_EQ(back.flat(), p.flat());
    EXPECT_EQ(back.sigma2, p.sigma2);
    EXPECT_TRUE(back.gamma.has_value());
    auto bad = regression_to_json(p, meta);
    bad["sigma2"] = -1;
    EXPECT_THROW(regression_from_json(bad, meta), InputError);
}

namespace {

MixedDataset line_data(int n, double noise, std::uint64_t seed) {
    Rng rng(seed);
    auto ds = empty_dataset(n, {cont("y"), cont("x")});
    ds.observed.setConstant(true);
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        ds.values(i, 1) = x;
        ds.values(i, 0) = 1.0 + 2.0 * x + noise * rng.normal();
    }
    return ds;
}

Vector line_fit(const MixedDataset &ds) {
    Matrix X(ds.rows(), 2);
    X.col(0).setOnes();
    X.col(1) = ds.values.col(1);
    return mstep_ols(ds.values.col(0), X).coef;
}

} // namespace

TEST(Bootstrap, DeterministicThetaGivesZeroSe) {
    const auto ds = line_data(200, 0.0, 1);
    const auto rd = no_items(200);
    const auto r = bootstrap_se(ds, rd, [](const MixedDataset &d, const ResponseData &, int) { return line_fit(d); }, 50, 3);
    EXPECT_LT(r.se.maxCoeff(), 1e-10);
    EXPECT_EQ(r.failed, 0);
}

TEST(Bootstrap, SeShrinksWithSampleSize) {
    auto fit = [](const MixedDataset &d, const ResponseData &, int) { return line_fit(d); };
    double ratio_sum = 0;
    for (int rep = 0; rep < 3; ++rep) {
        const auto small = line_data(400, 1.0, 10 + rep), big = line_data(800, 1.0, 20 + rep);
        const auto a = bootstrap_se(small, no_items(400), fit, 200, rep);
        const auto b = bootstrap_se(big, no_items(800), fit, 200, rep);
        ratio_sum += a.se[1] / b.se[1];
    }
    const double ratio = ratio_sum / 3;
    EXPECT_GE(ratio, 1.2);
    EXPECT_LE(ratio, 1.7);
}

TEST(Bootstrap, FailuresRecordedOrFatal) {
    const auto ds = line_data(100, 1.0, 2);
    const auto rd = no_items(100);
    auto flaky = [](int every) {
        return [every](const MixedDataset &d, const ResponseData &, int b) -> Vector {
            if ((b + 1) % every == 0) throw NumericalError("boom");
            return line_fit(d);
        };
    };
    const auto ok = bootstrap_se(ds, rd, flaky(20), 100, 1);
    EXPECT_EQ(ok.failed, 5);
    EXPECT_EQ(ok.failures.size(), 5u);
    EXPECT_THROW(bootstrap_se(ds, rd, flaky(5), 100, 1), NumericalError);
    const auto two = bootstrap_se(ds, rd, flaky(1000), 2, 1);
    EXPECT_EQ(two.replicates, 2);
    EXPECT_THROW(bootstrap_se(ds, rd, flaky(1000), 1, 1), InputError);
}

TEST(Bootstrap, LatentRegressionClosure) {
    auto sim = simulate_continuous(150, (Vector(2) << 0.5, 0.0).finished(), 0.2, 6, 5);
    const auto xi = initial_copula(sim.ds);
    EmConfig cfg;
    cfg.burn_in = 3;
    cfg.iters = 5;
    auto refit = [&](const MixedDataset &d, const ResponseData &r, int) {
        const LatentRegressionData data(d, r, sim.bank);
        return fit_latent_regression(data, xi, xi.sigma(), cfg).params.flat();
    };
    const auto res = bootstrap_se(sim.ds, sim.rd, refit, 4, 9);
    EXPECT_EQ(res.se.size(), 3);
    EXPECT_TRUE((res.se.array() > 0).all());
}
