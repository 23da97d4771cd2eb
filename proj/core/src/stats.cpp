#include "bailkit/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "bailkit/conversation.hpp"
#include "bailkit/parallel.hpp"
#include "bailkit/random.hpp"

namespace bailkit {

namespace {

void require_paired(std::span<const double> x, std::span<const double> y, const char* op) {
    if (x.size() != y.size()) throw Error(std::string(op) + ": vectors differ in length");
    if (x.size() < 3) throw Error(std::string(op) + ": need at least 3 points");
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw Error(std::string(op) + ": non-finite value");
    }
}

/// Double-centred |xi - xj| matrix, row-major.
std::vector<double> centred_distances(std::span<const double> v) {
    const auto n = v.size();
    std::vector<double> d(n * n);
    std::vector<double> row(n, 0.0);
    double grand = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double a = std::abs(v[i] - v[j]);
            d[i * n + j] = a;
            row[i] += a;
        }
        grand += row[i];
        row[i] /= static_cast<double>(n);
    }
    grand /= static_cast<double>(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += grand - row[i] - row[j];
    }
    return d;
}

double mean_product(const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0) / static_cast<double>(a.size());
}

double dcor_from(double dcov2, double dvar_x, double dvar_y) {
    if (dvar_x <= 0.0 || dvar_y <= 0.0) return 0.0;
    const double r2 = std::max(0.0, dcov2) / std::sqrt(dvar_x * dvar_y);
    return std::min(1.0, std::sqrt(r2));
}

/// Sum of f(t) over tie-group sizes t of v.
template <class F>
double tie_sum(std::span<const double> v, F f) {
    std::map<double, std::size_t> counts;
    for (double x : v) ++counts[x];
    double s = 0.0;
    for (const auto& [_, t] : counts) s += f(static_cast<double>(t));
    return s;
}

} // namespace

double wilson_halfwidth(std::size_t count, std::size_t total, double z) {
    if (total == 0) throw Error("wilson_halfwidth: total must be positive");
    if (count > total) throw Error("wilson_halfwidth: count exceeds total");
    const double n = static_cast<double>(total);
    const double z2 = z * z;
    // k(n-k)/n^3 is p(1-p)/n written so that count and total-count commute.
    const double var = static_cast<double>(count) * static_cast<double>(total - count) / (n * n * n);
    return z / (1.0 + z2 / n) * std::sqrt(var + z2 / (4.0 * n * n));
}

RateEstimate rate_estimate(std::size_t count, std::size_t total, double z) {
    const double hw = wilson_halfwidth(count, total, z);
    return {count, total, static_cast<double>(count) / static_cast<double>(total), hw};
}

void to_json(nlohmann::json& j, const RateEstimate& r) {
    j = {{"count", r.count}, {"total", r.total}, {"rate", r.rate}, {"halfwidth95", r.halfwidth95}};
}

RateEstimate rate_from_json(const nlohmann::json& j) {
    return {j.at("count").get<std::size_t>(), j.at("total").get<std::size_t>(), j.at("rate").get<double>(),
            j.at("halfwidth95").get<double>()};
}

double no_refusal_bail(std::span<const std::pair<double, double>> per_prompt) {
    if (per_prompt.empty()) throw Error("no_refusal_bail: no prompts");
    double sum = 0.0;
    for (const auto& [refusal, bail] : per_prompt) {
        if (!(refusal >= 0.0 && refusal <= 1.0 && bail >= 0.0 && bail <= 1.0)) {
            throw Error("no_refusal_bail: rates must lie in [0, 1]");
        }
        sum += (1.0 - refusal) * bail;
    }
    return sum / static_cast<double>(per_prompt.size());
}

std::optional<double> percent_increase(double cross_rate, double base_rate) {
    if (base_rate == 0.0) return std::nullopt;
    return 100.0 * (cross_rate - base_rate) / base_rate;
}

Correlation pearson(std::span<const double> x, std::span<const double> y) {
    require_paired(x, y, "pearson");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw Error("pearson: zero variance");
    const double r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    if (std::abs(r) == 1.0) return {r, 0.0};
    const double df = n - 2.0;
    const double t = r * std::sqrt(df / (1.0 - r * r));
    const boost::math::students_t dist(df);
    const double p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    return {r, std::clamp(p, 0.0, 1.0)};
}

Correlation kendall_tau(std::span<const double> x, std::span<const double> y) {
    require_paired(x, y, "kendall_tau");
    const auto n = x.size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = x[i] - x[j], dy = y[i] - y[j];
            if (dx == 0.0 || dy == 0.0) continue;
            s += ((dx > 0) == (dy > 0)) ? 1.0 : -1.0;
        }
    }
    const double nn = static_cast<double>(n);
    const double n0 = nn * (nn - 1.0) / 2.0;
    const double n1 = tie_sum(x, [](double t) { return t * (t - 1.0) / 2.0; });
    const double n2 = tie_sum(y, [](double t) { return t * (t - 1.0) / 2.0; });
    if (n1 == n0 || n2 == n0) throw Error("kendall_tau: a vector is constant");
    const double tau = std::clamp(s / std::sqrt((n0 - n1) * (n0 - n2)), -1.0, 1.0);

    const auto v0 = [](double t) { return t * (t - 1.0) * (2.0 * t + 5.0); };
    const auto t1 = [](double t) { return t * (t - 1.0); };
    const auto t2 = [](double t) { return t * (t - 1.0) * (t - 2.0); };
    const double var = (v0(nn) - tie_sum(x, v0) - tie_sum(y, v0)) / 18.0 +
                       tie_sum(x, t1) * tie_sum(y, t1) / (2.0 * nn * (nn - 1.0)) +
                       tie_sum(x, t2) * tie_sum(y, t2) / (9.0 * nn * (nn - 1.0) * (nn - 2.0));
    const double z = s / std::sqrt(var);
    return {tau, std::clamp(std::erfc(std::abs(z) / std::sqrt(2.0)), 0.0, 1.0)};
}

double distance_correlation(std::span<const double> x, std::span<const double> y) {
    require_paired(x, y, "distance_correlation");
    const auto a = centred_distances(x);
    const auto b = centred_distances(y);
    return dcor_from(mean_product(a, b), mean_product(a, a), mean_product(b, b));
}

double dcor_permutation_p(std::span<const double> x, std::span<const double> y, int permutations,
                          std::uint64_t seed, std::size_t threads) {
    require_paired(x, y, "dcor_permutation_p");
    if (permutations < 100) throw Error("dcor_permutation_p: need at least 100 permutations");
    const auto n = x.size();
    const auto a = centred_distances(x);
    const auto b = centred_distances(y);
    const double vx = mean_product(a, a), vy = mean_product(b, b);
    const double observed = dcor_from(mean_product(a, b), vx, vy);
    // Guards against counting the identity as below itself through rounding.
    const double threshold = observed - 1e-12 * std::max(1.0, observed);

    std::vector<unsigned char> hit(static_cast<std::size_t>(permutations), 0);
    parallel_for(hit.size(), threads, [&](std::size_t k) {
        std::vector<std::size_t> pi(n);
        std::iota(pi.begin(), pi.end(), std::size_t{0});
        auto rng = substream(seed, k);
        shuffle(pi, rng);
        // Double-centring commutes with relabelling, so permuting B's rows
        // and columns gives the centred matrix of the permuted y.
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto* brow = &b[pi[i] * n];
            const auto* arow = &a[i * n];
            for (std::size_t j = 0; j < n; ++j) sum += arow[j] * brow[pi[j]];
        }
        hit[k] = dcor_from(sum / static_cast<double>(n * n), vx, vy) >= threshold ? 1 : 0;
    });
    const auto count = std::count(hit.begin(), hit.end(), 1);
    return (1.0 + static_cast<double>(count)) / (static_cast<double>(permutations) + 1.0);
}

CorrelationReport correlate(std::span<const double> x, std::span<const double> y, int permutations,
                            std::uint64_t seed, std::size_t threads) {
    CorrelationReport r;
    const auto p = pearson(x, y);
    const auto k = kendall_tau(x, y);
    r.pearson_r = p.statistic;
    r.pearson_p = p.p_value;
    r.kendall_tau = k.statistic;
    r.kendall_p = k.p_value;
    r.dcor = distance_correlation(x, y);
    r.dcor_p = dcor_permutation_p(x, y, permutations, seed, threads);
    r.n = x.size();
    r.permutations = permutations;
    r.seed = seed;
    return r;
}

void to_json(nlohmann::json& j, const CorrelationReport& r) {
    j = {{"pearson_r", r.pearson_r}, {"pearson_p", r.pearson_p}, {"kendall_tau", r.kendall_tau},
         {"kendall_p", r.kendall_p}, {"dcor", r.dcor},           {"dcor_p", r.dcor_p},
         {"n", r.n},                 {"permutations", r.permutations}, {"seed", r.seed}};
}

CorrelationReport correlation_from_json(const nlohmann::json& j) {
    CorrelationReport r;
    r.pearson_r = j.at("pearson_r").get<double>();
    r.pearson_p = j.at("pearson_p").get<double>();
    r.kendall_tau = j.at("kendall_tau").get<double>();
    r.kendall_p = j.at("kendall_p").get<double>();
    r.dcor = j.at("dcor").get<double>();
    r.dcor_p = j.at("dcor_p").get<double>();
    r.n = j.at("n").get<std::size_t>();
    r.permutations = j.at("permutations").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

} // namespace bailkit
