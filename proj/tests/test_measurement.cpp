#include "latko/measurement.hpp"
#include "latko/normal.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>

using namespace latko;

namespace {

ItemBank bank_of(std::vector<Item> items) { return ItemBank{std::move(items)}; }

// Posterior moments by adaptive quadrature of the unnormalized density.
struct Moments {
    double mean, var;
};

Moments quadrature_moments(const ThetaPosteriorSpec &spec, const ItemBank &bank) {
    using boost::math::quadrature::gauss_kronrod;
    const double c = theta_log_posterior(spec, bank, spec.prior_mean).logp;
    auto dens = [&](double t) { return std::exp(theta_log_posterior(spec, bank, t).logp - c); };
    const double lo = spec.prior_mean - 12 * std::sqrt(spec.prior_var), hi = spec.prior_mean + 12 * std::sqrt(spec.prior_var);
    const double z = gauss_kronrod<double, 61>::integrate(dens, lo, hi, 15, 1e-13);
    const double m = gauss_kronrod<double, 61>::integrate([&](double t) { return t * dens(t); }, lo, hi, 15, 1e-13) / z;
    const double v = gauss_kronrod<double, 61>::integrate([&](double t) { return (t - m) * (t - m) * dens(t); }, lo, hi, 15, 1e-13) / z;
    return {m, v};
}

double quadrature_mass(const ThetaPosteriorSpec &spec, const ItemBank &bank, double a, double b, double norm, double c) {
    auto dens = [&](double t) { return std::exp(theta_log_posterior(spec, bank, t).logp - c); };
    return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(dens, a, b, 10, 1e-12) / norm;
}

} // namespace

TEST(Irt, TwoPlValues) {
    EXPECT_EQ(prob_2pl(0, 1, 0), 0.5);
    EXPECT_NEAR(prob_2pl(1, 1, 0), 0.7310585786300049, 1e-15);
    const double p = prob_2pl(-50, 2, 0);
    EXPECT_FALSE(std::isnan(p));
    EXPECT_LT(p, 1e-40);
    EXPECT_EQ(prob_2pl(400, 1, 300), 1.0);
    EXPECT_GT(prob_2pl(-400, 1, -300), 0.0);
}

TEST(Irt, GpcmValues) {
    const std::vector<double> b1 = {-0.3};
    const auto p1 = prob_gpcm(0.7, 1.3, b1);
    EXPECT_NEAR(p1[1], prob_2pl(0.7, 1.3, -0.3), 1e-15);
    const std::vector<double> b0 = {0.0, 0.0};
    for (double v : prob_gpcm(0.0, 1.0, b0)) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    Rng rng(1);
    double worst = 0;
    for (int r = 0; r < 1000000; ++r) {
        const double theta = 40 * (rng.uniform() - 0.5), a = 3 * rng.uniform();
        const std::vector<double> b = {4 * (rng.uniform() - 0.5), 4 * (rng.uniform() - 0.5), 4 * (rng.uniform() - 0.5)};
        const auto p = prob_gpcm(theta, a, b);
        double s = 0;
        for (double v : p) {
            ASSERT_GE(v, 0.0);
            s += v;
        }
        worst = std::max(worst, std::abs(s - 1));
    }
    EXPECT_LE(worst, 1e-10);
}

TEST(Irt, MeasurementLikelihood) {
    const auto bank = bank_of({{"a", ItemModel::twopl, 1.0, {0.0}}, {"b", ItemModel::gpcm, 0.8, {0.2, -0.4}}});
    EXPECT_EQ(log_measurement_likelihood({}, 0.3, bank), 0.0);
    const std::vector<ItemResponse> one = {{0, 1}};
    EXPECT_NEAR(log_measurement_likelihood(one, 0.0, bank), std::log(0.5), 1e-15);
    const std::vector<ItemResponse> two = {{0, 0}, {1, 2}};
    const double sum = std::log(1 - prob_2pl(0.4, 1.0, 0.0)) + std::log(prob_gpcm(0.4, 0.8, bank.items[1].b)[2]);
    EXPECT_NEAR(log_measurement_likelihood(two, 0.4, bank), sum, 1e-15);
    const std::vector<ItemResponse> bad = {{1, 3}};
    EXPECT_THROW(log_measurement_likelihood(bad, 0.0, bank), InputError);
}

TEST(Irt, ItemDerivatives) {
    const auto bank = bank_of({{"a", ItemModel::twopl, 1.4, {-0.6}}, {"b", ItemModel::gpcm, 0.7, {0.5, -1.0, 0.3}}});
    for (int l = 0; l < 2; ++l)
        for (int y = 0; y < bank.items[l].n_categories(); ++y)
            for (double t : {-2.0, 0.1, 1.7}) {
                const double h = 1e-5;
                const auto c = item_terms(bank.items[l], y, t);
                const auto up = item_terms(bank.items[l], y, t + h), dn = item_terms(bank.items[l], y, t - h);
                EXPECT_NEAR(c.d1, (up.logp - dn.logp) / (2 * h), 1e-7);
                EXPECT_NEAR(c.d2, (up.d1 - dn.d1) / (2 * h), 1e-7);
            }
}

TEST(Irt, PosteriorIsLogConcave) {
    Rng rng(3);
    for (int rep = 0; rep < 200; ++rep) {
        std::vector<Item> items;
        std::vector<ItemResponse> resp;
        for (int l = 0; l < 12; ++l) {
            const bool g = rng.uniform() < 0.4;
            Item it{std::to_string(l), g ? ItemModel::gpcm : ItemModel::twopl, 0.2 + 2 * rng.uniform(), {}};
            const int K = g ? 2 + static_cast<int>(rng.index(3)) : 1;
            for (int k = 0; k < K; ++k) it.b.push_back(3 * (rng.uniform() - 0.5));
            resp.push_back({l, static_cast<int>(rng.index(K + 1))});
            items.push_back(it);
        }
        const auto bank = bank_of(items);
        const ThetaPosteriorSpec spec{resp, rng.normal(), 0.3 + rng.uniform()};
        double prev = kInf;
        for (double t = -8; t <= 8; t += 0.05) {
            const double d = theta_log_posterior(spec, bank, t).d1;
            ASSERT_LT(d, prev);
            prev = d;
        }
    }
}

TEST(Irt, SimulatedResponsesFollowDesign) {
    std::vector<Item> items;
    for (int l = 0; l < 60; ++l) items.push_back({std::to_string(l), ItemModel::twopl, 1.0, {-0.5}});
    const auto bank = bank_of(items);
    const auto design = equal_blocks(60, 3);
    std::vector<double> thetas(500, 0.0);
    Rng rng(4);
    const auto rd = simulate_responses(thetas, bank, design, rng);
    for (Eigen::Index i = 0; i < rd.rows(); ++i) {
        ASSERT_EQ(rd.administered.row(i).count(), 20);
        const int first = static_cast<int>(std::find(rd.administered.row(i).data(), rd.administered.row(i).data() + 60, true) - rd.administered.row(i).data());
        EXPECT_EQ(first % 20, 0);
        for (int l = first; l < first + 20; ++l) EXPECT_TRUE(rd.administered(i, l));
    }
    EXPECT_THROW(equal_blocks(61, 3), InputError);
    BlockDesign uneven{{{0, 1}, {2}}};
    EXPECT_THROW(simulate_responses(thetas, bank, uneven, rng), InputError);
}

TEST(Irt, SimulationMarginals) {
    // a = 0: P(Y=1) = logistic(b) regardless of theta.
    const auto flat = bank_of({{"z", ItemModel::twopl, 0.0, {0.4}}});
    Rng rng(5);
    std::vector<double> thetas(10000);
    for (auto &t : thetas) t = rng.normal() * 3;
    const auto rd = simulate_responses(thetas, flat, equal_blocks(1, 1), rng);
    const double p = logistic(0.4);
    const double freq = rd.codes.cast<double>().mean();
    EXPECT_LE(std::abs(freq - p), 3 * std::sqrt(p * (1 - p) / 10000));

    const std::vector<double> high(20, 50.0);
    const auto sure = simulate_responses(high, bank_of({{"s", ItemModel::twopl, 1.0, {0.0}}}), equal_blocks(1, 1), rng);
    EXPECT_EQ(sure.codes.sum(), 20);

    // theta ~ N(0,1): per-category frequencies match the integrated response function.
    const auto bank = bank_of({{"g", ItemModel::gpcm, 1.2, {0.3, -0.2, 0.8}}, {"t", ItemModel::twopl, 0.9, {-0.7}}});
    const int n = 20000;
    std::vector<double> th(n);
    for (auto &t : th) t = rng.normal();
    const auto r2 = simulate_responses(th, bank, BlockDesign{{{0, 1}}}, rng);
    using boost::math::quadrature::gauss_kronrod;
    for (int l = 0; l < 2; ++l)
        for (int k = 0; k < bank.items[l].n_categories(); ++k) {
            const double expect = gauss_kronrod<double, 61>::integrate(
                [&](double t) { return norm_pdf(t) * std::exp(item_log_prob(bank.items[l], k, t)); }, -10.0, 10.0, 10, 1e-12);
            const double got = (r2.codes.col(l).array() == k).cast<double>().mean();
            EXPECT_LE(std::abs(got - expect), 3 * std::sqrt(expect * (1 - expect) / n)) << l << " " << k;
        }
}

TEST(ThetaSampler, EmptyItemSetIsGaussian) {
    const ItemBank bank;
    const ThetaPosteriorSpec spec{{}, 0.3, 1.0};
    Rng rng(6);
    double s = 0;
    for (int r = 0; r < 100000; ++r) s += sample_theta(spec, bank, rng);
    EXPECT_NEAR(s / 100000, 0.3, 0.01);
}

TEST(ThetaSampler, SingleItemPosteriorMean) {
    const auto bank = bank_of({{"a", ItemModel::twopl, 1.0, {0.0}}});
    const std::vector<ItemResponse> resp = {{0, 1}};
    const ThetaPosteriorSpec spec{resp, 0.0, 1.0};
    const auto m = quadrature_moments(spec, bank);
    EXPECT_NEAR(m.mean, 0.413241928283814, 1e-9);
    Rng rng(7);
    const int n = 100000;
    double s = 0;
    for (int r = 0; r < n; ++r) s += sample_theta(spec, bank, rng);
    EXPECT_LE(std::abs(s / n - m.mean), 3 * std::sqrt(m.var / n));
}

TEST(ThetaSampler, GpcmHistogramMatchesQuadrature) {
    const auto bank = bank_of({{"g", ItemModel::gpcm, 1.1, {0.4, -0.3, 0.2}}});
    const std::vector<ItemResponse> resp = {{0, 3}};
    const ThetaPosteriorSpec spec{resp, 0.0, 1.0};
    const double c = theta_log_posterior(spec, bank, 0.0).logp;
    const double norm = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
        [&](double t) { return std::exp(theta_log_posterior(spec, bank, t).logp - c); }, -12.0, 12.0, 15, 1e-13);
    std::vector<double> edges = {-kInf};
    for (double e = -2.5; e <= 4.0; e += 0.25) edges.push_back(e);
    edges.push_back(kInf);
    std::vector<double> counts(edges.size() - 1, 0.0);
    Rng rng(8);
    const int n = 100000;
    for (int r = 0; r < n; ++r) {
        const double x = sample_theta(spec, bank, rng);
        counts[std::upper_bound(edges.begin(), edges.end(), x) - edges.begin() - 1] += 1;
    }
    double tv = 0;
    for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
        const double lo = std::max(edges[b], -12.0), hi = std::min(edges[b + 1], 12.0);
        tv += std::abs(counts[b] / n - quadrature_mass(spec, bank, lo, hi, norm, c));
    }
    EXPECT_LE(0.5 * tv, 0.02);
}

TEST(ThetaSampler, RandomizedMomentsMatchQuadrature) {
    Rng gen(9);
    for (int rep = 0; rep < 12; ++rep) {
        std::vector<Item> items;
        std::vector<ItemResponse> resp;
        const int J = 1 + static_cast<int>(gen.index(25));
        for (int l = 0; l < J; ++l) {
            const bool g = gen.uniform() < 0.3;
            Item it{std::to_string(l), g ? ItemModel::gpcm : ItemModel::twopl, 0.5 + gen.uniform(), {}};
            const int K = g ? 2 + static_cast<int>(gen.index(2)) : 1;
            for (int k = 0; k < K; ++k) it.b.push_back(-2 * gen.uniform());
            resp.push_back({l, static_cast<int>(gen.index(K + 1))});
            items.push_back(it);
        }
        const auto bank = bank_of(items);
        const ThetaPosteriorSpec spec{resp, gen.normal(), 0.2 + 1.5 * gen.uniform()};
        const auto m = quadrature_moments(spec, bank);
        Rng rng(100 + rep);
        const int n = 100000;
        double s = 0, s2 = 0;
        for (int r = 0; r < n; ++r) {
            const double x = sample_theta(spec, bank, rng);
            s += x;
            s2 += x * x;
        }
        const double mean = s / n, var = s2 / n - mean * mean;
        EXPECT_LE(std::abs(mean - m.mean), 3 * std::sqrt(m.var / n)) << rep;
        EXPECT_LE(std::abs(var / m.var - 1), 0.05) << rep;
    }
}

TEST(ThetaSampler, SaturatedResponses) {
    // All items answered correctly with large discriminations: the posterior
    // is far in the upper tail of the prior but still log-concave.
    std::vector<Item> items;
    std::vector<ItemResponse> resp;
    for (int l = 0; l < 30; ++l) {
        items.push_back({std::to_string(l), ItemModel::twopl, 4.0, {-20.0}});
        resp.push_back({l, 1});
    }
    const auto bank = bank_of(items);
    const ThetaPosteriorSpec spec{resp, 0.0, 0.01};
    Rng rng(10);
    for (int r = 0; r < 1000; ++r) EXPECT_TRUE(std::isfinite(sample_theta(spec, bank, rng)));
    EXPECT_THROW(sample_theta(ThetaPosteriorSpec{resp, 0.0, -1.0}, bank, rng), InputError);
}
