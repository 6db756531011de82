#pragma once

// IRT measurement model with fixed item parameters (2PL and GPCM) and
// posterior sampling of the latent proficiency.

#include "latko/data.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace latko {

/// exp(x) / (1 + exp(x)) without overflow.
inline double logistic(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// log(logistic(x)).
inline double log_logistic(double x) noexcept {
    if (x >= 0.0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

inline double prob_2pl(double theta, double a, double b) noexcept { return logistic(a * theta + b); }

/// GPCM category probabilities: category k has numerator
/// exp(sum_{r<=k} (a theta + b_r)), category 0 has numerator 1.
inline std::vector<double> prob_gpcm(double theta, double a, std::span<const double> b) {
    std::vector<double> s(b.size() + 1, 0.0);
    for (std::size_t k = 0; k < b.size(); ++k) s[k + 1] = s[k] + a * theta + b[k];
    const double mx = *std::max_element(s.begin(), s.end());
    double tot = 0.0;
    for (auto &v : s) tot += (v = std::exp(v - mx));
    for (auto &v : s) v /= tot;
    return s;
}

struct ItemResponse {
    int item;
    int code;
};

/// log h(y | theta) and its first two theta-derivatives for one item.
struct ItemTerms {
    double logp = 0.0, d1 = 0.0, d2 = 0.0;
};

inline ItemTerms item_terms(const Item &it, int y, double theta) {
    ItemTerms out;
    if (it.model == ItemModel::twopl) {
        const double x = it.a * theta + it.b[0];
        const double p = logistic(x);
        out.logp = y == 1 ? log_logistic(x) : log_logistic(-x);
        out.d1 = it.a * (y - p);
        out.d2 = -it.a * it.a * p * (1.0 - p);
        return out;
    }
    // Cumulative numerators on the log scale.
    const std::size_t K = it.b.size();
    double s[64];
    std::vector<double> heap;
    double *sp = s;
    if (K + 1 > 64) {
        heap.resize(K + 1);
        sp = heap.data();
    }
    sp[0] = 0.0;
    double mx = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        sp[k + 1] = sp[k] + it.a * theta + it.b[k];
        mx = std::max(mx, sp[k + 1]);
    }
    double tot = 0.0, m1 = 0.0, m2 = 0.0;
    for (std::size_t k = 0; k <= K; ++k) {
        const double e = std::exp(sp[k] - mx);
        tot += e;
        m1 += e * static_cast<double>(k);
        m2 += e * static_cast<double>(k * k);
    }
    m1 /= tot;
    m2 /= tot;
    out.logp = sp[y] - mx - std::log(tot);
    out.d1 = it.a * (y - m1);
    out.d2 = -it.a * it.a * std::max(m2 - m1 * m1, 0.0);
    return out;
}

inline double item_log_prob(const Item &it, int y, double theta) { return item_terms(it, y, theta).logp; }

/// Sum of log h_l(y_l | theta) over the administered items of one row.
inline double log_measurement_likelihood(std::span<const ItemResponse> responses, double theta,
                                         const ItemBank &bank) {
    double out = 0.0;
    for (const auto &r : responses) {
        const auto &it = bank.items.at(r.item);
        if (r.code < 0 || r.code >= it.n_categories())
            throw InputError("response code " + std::to_string(r.code) + " out of range for item '" + it.id + "'");
        out += item_log_prob(it, r.code, theta);
    }
    return out;
}

/// Administered (item, code) pairs of row i.
inline std::vector<ItemResponse> responses_of(const ResponseData &rd, Eigen::Index i) {
    std::vector<ItemResponse> out;
    for (Eigen::Index l = 0; l < rd.codes.cols(); ++l)
        if (rd.administered(i, l)) out.push_back({static_cast<int>(l), rd.codes(i, l)});
    return out;
}

// ---------------------------------------------------------------------------
// Matrix-sampling design and simulation

struct BlockDesign {
    std::vector<std::vector<int>> blocks;
};

/// Consecutive equal-size blocks of items 0..J-1.
inline BlockDesign equal_blocks(int n_items, int n_blocks) {
    if (n_blocks < 1 || n_items % n_blocks != 0)
        throw InputError("cannot split " + std::to_string(n_items) + " items into " + std::to_string(n_blocks) +
                         " equal blocks");
    BlockDesign d;
    const int size = n_items / n_blocks;
    for (int b = 0; b < n_blocks; ++b) {
        d.blocks.emplace_back();
        for (int l = 0; l < size; ++l) d.blocks.back().push_back(b * size + l);
    }
    return d;
}

inline int draw_response(const Item &it, double theta, Rng &rng) {
    if (it.model == ItemModel::twopl) return rng.uniform() < prob_2pl(theta, it.a, it.b[0]) ? 1 : 0;
    const auto p = prob_gpcm(theta, it.a, it.b);
    double u = rng.uniform(), cum = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        cum += p[k];
        if (u < cum) return static_cast<int>(k);
    }
    return static_cast<int>(p.size()) - 1;
}

/// Each student is administered one uniformly chosen block; codes are drawn
/// from the item response functions.
inline ResponseData simulate_responses(std::span<const double> thetas, const ItemBank &bank,
                                       const BlockDesign &design, Rng &rng, bool require_equal = true) {
    if (design.blocks.empty()) throw InputError("design has no blocks");
    if (require_equal)
        for (const auto &b : design.blocks)
            if (b.size() != design.blocks.front().size()) throw InputError("design blocks have unequal sizes");
    const auto n = static_cast<Eigen::Index>(thetas.size());
    const auto J = static_cast<Eigen::Index>(bank.size());
    ResponseData rd{IntMatrix::Zero(n, J), MaskMatrix::Constant(n, J, false)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto &block = design.blocks[rng.index(design.blocks.size())];
        for (int l : block) {
            if (l < 0 || l >= J) throw InputError("design refers to a missing item");
            rd.codes(i, l) = draw_response(bank.items[l], thetas[i], rng);
            rd.administered(i, l) = true;
        }
    }
    return rd;
}

// ---------------------------------------------------------------------------
// Posterior of theta

struct ThetaPosteriorSpec {
    std::span<const ItemResponse> responses;
    double prior_mean = 0.0;
    double prior_var = 1.0;
};

/// Log posterior (up to a constant) and its derivatives.
inline ItemTerms theta_log_posterior(const ThetaPosteriorSpec &spec, const ItemBank &bank, double theta) {
    const double r = theta - spec.prior_mean;
    ItemTerms out{-0.5 * r * r / spec.prior_var, -r / spec.prior_var, -1.0 / spec.prior_var};
    for (const auto &resp : spec.responses) {
        const auto t = item_terms(bank.items[resp.item], resp.code, theta);
        out.logp += t.logp;
        out.d1 += t.d1;
        out.d2 += t.d2;
    }
    return out;
}

namespace detail {

struct HullPoint {
    double x, h, dh;
};

/// Adaptive rejection sampler for a log-concave density on the real line
/// with tangent-line upper hulls and chord squeezes. Returns false if a valid
/// initial hull cannot be found.
template <class LogDens>
bool ars_draw(LogDens &&f, double center, double scale, Rng &rng, double &out, int max_points = 40,
              int max_trials = 10000) {
    std::vector<HullPoint> pts;
    pts.reserve(max_points + 3);
    auto eval = [&](double x) {
        const auto t = f(x);
        return HullPoint{x, t.logp, t.d1};
    };
    for (double off : {-1.0, 0.0, 1.0}) {
        const auto p = eval(center + off * scale);
        if (!std::isfinite(p.h) || !std::isfinite(p.dh)) return false;
        pts.push_back(p);
    }
    // The hull must be bounded: leftmost slope > 0, rightmost slope < 0.
    for (int k = 0; pts.front().dh <= 0.0; ++k) {
        if (k > 60) return false;
        const double step = scale * std::ldexp(1.0, k + 1);
        const auto p = eval(pts.front().x - step);
        if (!std::isfinite(p.h) || !std::isfinite(p.dh)) return false;
        pts.insert(pts.begin(), p);
    }
    for (int k = 0; pts.back().dh >= 0.0; ++k) {
        if (k > 60) return false;
        const double step = scale * std::ldexp(1.0, k + 1);
        const auto p = eval(pts.back().x + step);
        if (!std::isfinite(p.h) || !std::isfinite(p.dh)) return false;
        pts.push_back(p);
    }

    std::vector<double> z, logmass;
    for (int trial = 0; trial < max_trials; ++trial) {
        const std::size_t m = pts.size();
        // Tangent intersections z_k between points k and k+1.
        z.assign(m + 1, 0.0);
        z[0] = -kInf;
        z[m] = kInf;
        for (std::size_t k = 0; k + 1 < m; ++k) {
            const auto &a = pts[k], &b = pts[k + 1];
            const double ds = a.dh - b.dh;
            double zk;
            if (ds > 1e-12 * (std::abs(a.dh) + std::abs(b.dh) + 1e-300))
                zk = (b.h - a.h - b.x * b.dh + a.x * a.dh) / ds;
            else
                zk = 0.5 * (a.x + b.x);
            z[k + 1] = std::clamp(zk, a.x, b.x);
        }
        // Log mass of exp(tangent) on each segment.
        logmass.assign(m, -kInf);
        double lmax = -kInf;
        for (std::size_t k = 0; k < m; ++k) {
            const auto &p = pts[k];
            const double lo = z[k], hi = z[k + 1];
            const double w = hi - lo;
            if (!(w > 0.0)) continue;
            const double ta = std::isfinite(lo) ? p.h + p.dh * (lo - p.x) : -kInf;
            const double tb = std::isfinite(hi) ? p.h + p.dh * (hi - p.x) : -kInf;
            double lm;
            if (std::abs(p.dh) * (std::isfinite(w) ? w : kInf) < 1e-10) {
                lm = std::max(ta, tb) + std::log(w);
            } else {
                const double big = std::max(ta, tb), small = std::min(ta, tb);
                lm = big + std::log1p(-std::exp(small - big)) - std::log(std::abs(p.dh));
            }
            logmass[k] = lm;
            lmax = std::max(lmax, lm);
        }
        if (!std::isfinite(lmax)) return false;
        double total = 0.0;
        for (auto &v : logmass) total += (v = std::exp(v - lmax));
        double u = rng.uniform() * total;
        std::size_t k = 0;
        while (k + 1 < m && u > logmass[k]) u -= logmass[k++];
        const auto &p = pts[k];
        const double lo = z[k], hi = z[k + 1], w = hi - lo;
        const double v = rng.uniform();
        double x;
        if (std::abs(p.dh) * (std::isfinite(w) ? w : kInf) < 1e-10)
            x = lo + v * w;
        else if (p.dh > 0.0)
            x = hi + std::log(v + (1.0 - v) * std::exp(-p.dh * w)) / p.dh;
        else
            x = lo + std::log((1.0 - v) + v * std::exp(p.dh * w)) / p.dh;
        if (!std::isfinite(x)) continue;
        const double upper = p.h + p.dh * (x - p.x);
        const double logu = std::log(rng.uniform());
        // Squeeze: chord between the neighbouring abscissae.
        const auto it = std::upper_bound(pts.begin(), pts.end(), x,
                                         [](double xv, const HullPoint &q) { return xv < q.x; });
        if (it != pts.begin() && it != pts.end()) {
            const auto &l = *(it - 1), &r = *it;
            const double lower = l.h + (r.h - l.h) * (x - l.x) / (r.x - l.x);
            if (logu <= lower - upper) {
                out = x;
                return true;
            }
        }
        const auto q = eval(x);
        if (!std::isfinite(q.h)) return false;
        if (logu <= q.h - upper) {
            out = x;
            return true;
        }
        const bool duplicate = (it != pts.end() && it->x == x) || (it != pts.begin() && (it - 1)->x == x);
        if (static_cast<int>(pts.size()) < max_points && std::isfinite(q.dh) && !duplicate) pts.insert(it, q);
    }
    return false;
}

/// Slice sampler with stepping out and shrinkage.
template <class LogDens>
double slice_draw(LogDens &&f, double x0, double width, int steps, Rng &rng) {
    double x = x0;
    double fx = f(x).logp;
    for (int s = 0; s < steps; ++s) {
        const double level = fx + std::log(rng.uniform());
        double lo = x - width * rng.uniform();
        double hi = lo + width;
        for (int k = 0; k < 100 && f(lo).logp > level; ++k) lo -= width;
        for (int k = 0; k < 100 && f(hi).logp > level; ++k) hi += width;
        for (int k = 0; k < 200; ++k) {
            const double c = lo + (hi - lo) * rng.uniform();
            const double fc = f(c).logp;
            if (fc > level) {
                x = c;
                fx = fc;
                break;
            }
            (c < x ? lo : hi) = c;
        }
    }
    return x;
}

} // namespace detail

/// Draw from p(theta | y) proportional to prod_l h_l(y_l | theta) N(mu, s2),
/// by adaptive rejection sampling (the density is log-concave). Empty item
/// sets give an exact Gaussian draw.
inline double sample_theta(const ThetaPosteriorSpec &spec, const ItemBank &bank, Rng &rng) {
    if (!(spec.prior_var > 0.0) || !std::isfinite(spec.prior_var) || !std::isfinite(spec.prior_mean))
        throw InputError("theta prior must have finite mean and positive variance");
    if (spec.responses.empty()) return spec.prior_mean + std::sqrt(spec.prior_var) * rng.normal();
    auto f = [&](double x) { return theta_log_posterior(spec, bank, x); };
    // A few guarded Newton steps towards the mode place the initial
    // abscissae where the hull is tight.
    double center = spec.prior_mean;
    double info = 1.0 / spec.prior_var;
    for (int k = 0; k < 4; ++k) {
        const auto t = f(center);
        if (!std::isfinite(t.d1) || !(t.d2 < 0.0)) break;
        info = -t.d2;
        const double step = std::clamp(t.d1 / info, -2.0, 2.0);
        center += step;
        if (std::abs(step) < 1e-3) break;
    }
    const double scale = 1.0 / std::sqrt(info);
    double x;
    for (int attempt = 0; attempt < 2; ++attempt)
        if (detail::ars_draw(f, center, scale * (attempt + 1), rng, x)) return x;
    if (!std::isfinite(f(center).logp))
        throw NumericalError("theta posterior: non-finite log density at " + std::to_string(center));
    return detail::slice_draw(f, center, 2.0 * scale, 50, rng);
}

} // namespace latko
