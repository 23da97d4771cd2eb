#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace bailkit {

/// z for two-sided 95% intervals. 1.96 rather than the exact quantile so
/// published error bars reproduce to the last digit.
inline constexpr double default_z = 1.96;

/// Half-width of the Wilson score interval for count/total.
double wilson_halfwidth(std::size_t count, std::size_t total, double z = default_z);

struct RateEstimate {
    std::size_t count = 0;
    std::size_t total = 1;
    double rate = 0.0;
    double halfwidth95 = 0.0;

    bool operator==(const RateEstimate&) const = default;
};

RateEstimate rate_estimate(std::size_t count, std::size_t total, double z = default_z);

void to_json(nlohmann::json& j, const RateEstimate& r);
RateEstimate rate_from_json(const nlohmann::json& j);

/// Mean over prompts of (1 - refusal_rate) * bail_rate. Pairs are
/// (refusal_rate, bail_rate).
double no_refusal_bail(std::span<const std::pair<double, double>> per_prompt);

/// 100 * (cross - base) / base; nullopt when base is 0.
std::optional<double> percent_increase(double cross_rate, double base_rate);

struct Correlation {
    double statistic = 0.0;
    double p_value = 1.0;
};

/// Pearson r with a two-sided p from Student's t on n - 2 degrees of freedom.
Correlation pearson(std::span<const double> x, std::span<const double> y);

/// Kendall tau-b; p from the normal approximation with tie-adjusted variance.
Correlation kendall_tau(std::span<const double> x, std::span<const double> y);

/// Sample distance correlation (biased V-statistic form), in [0, 1].
double distance_correlation(std::span<const double> x, std::span<const double> y);

/// (1 + #{permuted dcor >= observed}) / (permutations + 1). Permutation i
/// shuffles y with a stream derived from (seed, i), so the result does not
/// depend on `threads`.
double dcor_permutation_p(std::span<const double> x, std::span<const double> y, int permutations,
                          std::uint64_t seed, std::size_t threads = 1);

struct CorrelationReport {
    double pearson_r = 0.0;
    double pearson_p = 1.0;
    double kendall_tau = 0.0;
    double kendall_p = 1.0;
    double dcor = 0.0;
    double dcor_p = 1.0;
    std::size_t n = 0;
    int permutations = 0;
    std::uint64_t seed = 0;
};

CorrelationReport correlate(std::span<const double> x, std::span<const double> y, int permutations = 10000,
                            std::uint64_t seed = 0, std::size_t threads = 1);

void to_json(nlohmann::json& j, const CorrelationReport& r);
CorrelationReport correlation_from_json(const nlohmann::json& j);

} // namespace bailkit
