#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bailkit/runner.hpp"
#include "bailkit/stats.hpp"

namespace bailkit {

enum class GroupField { dataset, model, method, kind, category, cross_model };

/// Parses "model,method" style lists. Fields: dataset, model, method (kind,
/// variant and ordering together), kind, category, cross_model.
std::vector<GroupField> parse_grouping(std::string_view text);
std::vector<GroupField> default_grouping();

/// Ungrouped fields hold "*". Trials without a responder have cross_model
/// "self"; ordering is empty for tool and string methods.
struct AggregateRow {
    std::string dataset = "*";
    std::string model = "*";
    std::string method = "*";
    std::string variant = "*";
    std::string ordering;
    std::string category = "*";
    std::string cross_model = "*";
    std::string granularity; // "trial" or "conversation"

    // Bail/unknown over method trials; both absent for refusal-only groups.
    std::optional<RateEstimate> bail;
    std::optional<RateEstimate> unknown;
    std::size_t continue_count = 0;
    std::optional<RateEstimate> refusal;
    std::optional<double> no_refusal_bail;

    std::size_t total() const noexcept { return bail ? bail->total : 0; }
    std::string method_label() const;
};

void to_json(nlohmann::json& j, const AggregateRow& row);
AggregateRow row_from_json(const nlohmann::json& j);

struct Aggregation {
    std::vector<AggregateRow> rows;
    std::vector<std::string> warnings;
};

/// Counts Bail/Continue/Unknown per group. Replay trials are folded into
/// one unit per (conversation, sample index) first: a unit is Bail if any
/// turn bailed, Continue if every turn resolved without a bail, else
/// Unknown. A group mixing replay and single-turn trials is rejected.
///
/// With `baseline`, refusal rates and the no-refusal bail estimate are
/// attached per row, matching baseline trials on (dataset, item, model).
Aggregation aggregate(const std::vector<TrialRecord>& trials, const std::vector<GroupField>& grouping,
                      const std::vector<TrialRecord>* baseline = nullptr);

/// Cross-model rows paired with the same group's self row.
struct CrossModelRow {
    std::string dataset;
    std::string model;
    std::string method;
    std::string responder;
    double cross_rate = 0.0;
    double base_rate = 0.0;
    std::optional<double> increase_pct;
};

std::vector<CrossModelRow> cross_model_rows(const std::vector<AggregateRow>& rows);

/// 32-model style (label, bail %, refusal %) scatter data.
struct ScatterFixture {
    std::string name;
    std::vector<std::string> labels;
    std::vector<double> bail_pct;
    std::vector<double> refusal_pct;
};

/// Whitespace-separated text: '#' comment lines, a "Label bailPr refusePr"
/// header, then one row per model.
ScatterFixture load_scatter_fixture(const std::filesystem::path& path);

/// Per-model (bail %, refusal %) pairs from a method log and a baseline log.
ScatterFixture scatter_from_logs(const std::vector<TrialRecord>& method_trials,
                                 const std::vector<TrialRecord>& baseline_trials, const std::string& name);

struct NamedCorrelation {
    std::string label;
    CorrelationReport report;
};

/// Reads the "rows" and "correlations" arrays written by the structured format.
std::pair<std::vector<AggregateRow>, std::vector<NamedCorrelation>> parse_structured_report(
    const nlohmann::json& doc);

struct Provenance {
    std::optional<std::string> plan_hash;
    std::optional<std::uint64_t> seed;
    std::optional<ResponseCache::Stats> cache;
    std::vector<std::string> inputs;
};

enum class ReportFormat { csv, structured, plot_table, table };
ReportFormat parse_report_format(std::string_view text);

/// Pure function of its arguments; rows are emitted in the given order.
std::string render_report(const std::vector<AggregateRow>& rows, const std::vector<NamedCorrelation>& correlations,
                          ReportFormat format, const Provenance& provenance = {});

/// Writes render_report to `out`, creating parent directories.
void emit_report(const std::vector<AggregateRow>& rows, const std::vector<NamedCorrelation>& correlations,
                 ReportFormat format, const Provenance& provenance, const std::filesystem::path& out);

/// Shortest round-trip decimal form.
std::string format_double(double v);

} // namespace bailkit
