#include "bailkit/report.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

namespace bailkit {

namespace {

bool has(const std::vector<GroupField>& g, GroupField f) { return std::find(g.begin(), g.end(), f) != g.end(); }

using RowKey = std::tuple<std::string, std::string, std::string, std::string, std::string, std::string, std::string>;

RowKey key_of(const AggregateRow& r) {
    return {r.dataset, r.model, r.method, r.variant, r.ordering, r.category, r.cross_model};
}

AggregateRow row_for(const TrialRecord& t, const std::vector<GroupField>& g) {
    AggregateRow r;
    if (has(g, GroupField::dataset)) r.dataset = t.dataset_id;
    if (has(g, GroupField::model)) r.model = t.model;
    if (has(g, GroupField::method) || has(g, GroupField::kind)) {
        r.method = t.method ? std::string(to_string(t.method->kind)) : "none";
    }
    if (has(g, GroupField::method)) {
        r.variant = t.method ? t.method->variant : "-";
        if (t.method && t.method->ordering) r.ordering = std::string(to_string(*t.method->ordering));
    }
    if (has(g, GroupField::category)) r.category = t.category.value_or("-");
    if (has(g, GroupField::cross_model)) r.cross_model = t.cross_model.value_or("self");
    return r;
}

using ItemKey = std::tuple<std::string, std::string, std::string>; // dataset, item, model

ItemKey item_key(const TrialRecord& t) { return {t.dataset_id, t.item_id, t.model}; }

struct RefusalCounts {
    std::size_t refusal = 0;
    std::size_t labelled = 0; // refusal + compliance
};

void count_refusal(const TrialRecord& t, RefusalCounts& c) {
    if (!t.refusal || t.refusal->is_unknown()) return;
    ++c.labelled;
    if (t.refusal->is_refusal()) ++c.refusal;
}

std::string pct(double rate) { return format_double(100.0 * rate); }

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string fixed2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

void provenance_lines(const Provenance& p, const std::string& prefix, std::ostringstream& out) {
    if (p.plan_hash) out << prefix << "plan_hash=" << *p.plan_hash << '\n';
    if (p.seed) out << prefix << "seed=" << *p.seed << '\n';
    if (p.cache) {
        out << prefix << "cache_hits=" << p.cache->hits << " cache_misses=" << p.cache->misses
            << " cache_writes=" << p.cache->writes << '\n';
    }
    for (const auto& in : p.inputs) out << prefix << "input=" << in << '\n';
}

std::string render_csv(const std::vector<AggregateRow>& rows, const std::vector<NamedCorrelation>& correlations,
                       const Provenance& prov) {
    std::ostringstream out;
    out << "dataset,model,method,variant,ordering,category,cross_model,granularity,total,bail_count,bail_pct,"
           "bail_err_pct,continue_count,unknown_count,unknown_pct,unknown_err_pct,refusal_count,refusal_total,"
           "refusal_pct,refusal_err_pct,no_refusal_bail_pct\n";
    for (const auto& r : rows) {
        out << csv_field(r.dataset) << ',' << csv_field(r.model) << ',' << csv_field(r.method) << ','
            << csv_field(r.variant) << ',' << csv_field(r.ordering) << ',' << csv_field(r.category) << ','
            << csv_field(r.cross_model) << ',' << r.granularity << ',' << r.total() << ',';
        if (r.bail) {
            out << r.bail->count << ',' << pct(r.bail->rate) << ',' << pct(r.bail->halfwidth95) << ','
                << r.continue_count << ',' << r.unknown->count << ',' << pct(r.unknown->rate) << ','
                << pct(r.unknown->halfwidth95) << ',';
        } else {
            out << ",,,,,,,";
        }
        if (r.refusal) {
            out << r.refusal->count << ',' << r.refusal->total << ',' << pct(r.refusal->rate) << ','
                << pct(r.refusal->halfwidth95) << ',';
        } else {
            out << ",,,,";
        }
        if (r.no_refusal_bail) out << pct(*r.no_refusal_bail);
        out << '\n';
    }
    if (const auto cross = cross_model_rows(rows); !cross.empty()) {
        out << "\ndataset,model,method,responder,cross_pct,base_pct,increase_pct\n";
        for (const auto& c : cross) {
            out << csv_field(c.dataset) << ',' << csv_field(c.model) << ',' << csv_field(c.method) << ','
                << csv_field(c.responder) << ',' << pct(c.cross_rate) << ',' << pct(c.base_rate) << ','
                << (c.increase_pct ? format_double(*c.increase_pct) : std::string()) << '\n';
        }
    }
    if (!correlations.empty()) {
        out << "\nlabel,n,pearson_r,pearson_p,kendall_tau,kendall_p,dcor,dcor_p,permutations,seed\n";
        for (const auto& c : correlations) {
            const auto& r = c.report;
            out << csv_field(c.label) << ',' << r.n << ',' << format_double(r.pearson_r) << ','
                << format_double(r.pearson_p) << ',' << format_double(r.kendall_tau) << ','
                << format_double(r.kendall_p) << ',' << format_double(r.dcor) << ',' << format_double(r.dcor_p)
                << ',' << r.permutations << ',' << r.seed << '\n';
        }
    }
    provenance_lines(prov, "# ", out);
    return out.str();
}

std::string render_structured(const std::vector<AggregateRow>& rows,
                              const std::vector<NamedCorrelation>& correlations, const Provenance& prov) {
    nlohmann::json doc;
    doc["rows"] = nlohmann::json::array();
    for (const auto& r : rows) doc["rows"].push_back(r);
    doc["correlations"] = nlohmann::json::array();
    for (const auto& c : correlations) {
        nlohmann::json j = c.report;
        j["label"] = c.label;
        doc["correlations"].push_back(std::move(j));
    }
    doc["cross_model"] = nlohmann::json::array();
    for (const auto& c : cross_model_rows(rows)) {
        doc["cross_model"].push_back({{"dataset", c.dataset},
                                      {"model", c.model},
                                      {"method", c.method},
                                      {"responder", c.responder},
                                      {"cross_rate", c.cross_rate},
                                      {"base_rate", c.base_rate},
                                      {"increase_pct", c.increase_pct ? nlohmann::json(*c.increase_pct)
                                                                      : nlohmann::json(nullptr)}});
    }
    nlohmann::json p = nlohmann::json::object();
    if (prov.plan_hash) p["plan_hash"] = *prov.plan_hash;
    if (prov.seed) p["seed"] = *prov.seed;
    if (prov.cache) {
        p["cache"] = {{"hits", prov.cache->hits}, {"misses", prov.cache->misses}, {"writes", prov.cache->writes}};
    }
    if (!prov.inputs.empty()) p["inputs"] = prov.inputs;
    doc["provenance"] = std::move(p);
    return doc.dump(2) + "\n";
}

std::string render_plot_table(const std::vector<AggregateRow>& rows, const Provenance& prov) {
    // One table per method, labelled by model, in the order rows arrive.
    std::vector<std::string> order;
    std::map<std::string, std::vector<const AggregateRow*>> by_method;
    for (const auto& r : rows) {
        if (!r.bail) continue;
        const auto label = r.method_label();
        if (!by_method.count(label)) order.push_back(label);
        by_method[label].push_back(&r);
    }
    std::ostringstream out;
    for (const auto& m : order) {
        out << "# method " << m << '\n';
        out << "Label bailPr bailPr_err unknownPr\n";
        for (const auto* r : by_method[m]) {
            std::string label = r->model;
            if (r->category != "*") label += "/" + r->category;
            if (r->cross_model != "*" && r->cross_model != "self") label += "<-" + r->cross_model;
            std::replace(label.begin(), label.end(), ' ', '_');
            out << label << ' ' << pct(r->bail->rate) << ' ' << pct(r->bail->halfwidth95) << ' '
                << pct(r->unknown->rate) << '\n';
        }
        out << '\n';
    }
    provenance_lines(prov, "# ", out);
    return out.str();
}

std::string render_table(const std::vector<AggregateRow>& rows, const std::vector<NamedCorrelation>& correlations,
                         const Provenance& prov) {
    std::vector<std::vector<std::string>> cells{
        {"dataset", "model", "method", "category", "source", "n", "bail %", "+-", "unknown %", "refusal %",
         "no-refusal bail %"}};
    for (const auto& r : rows) {
        cells.push_back({r.dataset, r.model, r.method_label(), r.category, r.cross_model,
                         std::to_string(r.total()), r.bail ? fixed2(100 * r.bail->rate) : "-",
                         r.bail ? fixed2(100 * r.bail->halfwidth95) : "-",
                         r.unknown ? fixed2(100 * r.unknown->rate) : "-",
                         r.refusal ? fixed2(100 * r.refusal->rate) : "-",
                         r.no_refusal_bail ? fixed2(100 * *r.no_refusal_bail) : "-"});
    }
    std::vector<std::size_t> width(cells.front().size(), 0);
    for (const auto& row : cells) {
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    }
    std::ostringstream out;
    if (rows.empty()) cells.clear();
    for (const auto& row : cells) {
        std::string line;
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) line += "  ";
            line += row[i];
            if (i + 1 < row.size()) line.append(width[i] - row[i].size(), ' ');
        }
        out << line << '\n';
    }
    if (const auto cross = cross_model_rows(rows); !cross.empty()) {
        out << '\n';
        for (const auto& c : cross) {
            out << c.model << ' ' << c.method << " after " << c.responder << ": " << fixed2(100 * c.cross_rate)
                << "% vs " << fixed2(100 * c.base_rate) << "% self, increase "
                << (c.increase_pct ? fixed2(*c.increase_pct) + "%" : std::string("undefined")) << '\n';
        }
    }
    if (!correlations.empty()) {
        out << '\n';
        for (const auto& c : correlations) {
            const auto& r = c.report;
            out << c.label << ": n=" << r.n << " pearson r=" << fixed2(r.pearson_r) << " (p=" << fixed2(r.pearson_p)
                << ") kendall tau=" << fixed2(r.kendall_tau) << " (p=" << fixed2(r.kendall_p)
                << ") dcor=" << fixed2(r.dcor) << " (p=" << fixed2(r.dcor_p) << ", " << r.permutations
                << " permutations, seed " << r.seed << ")\n";
        }
    }
    provenance_lines(prov, "# ", out);
    return out.str();
}

} // namespace

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::vector<GroupField> parse_grouping(std::string_view text) {
    std::vector<GroupField> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find(',', start);
        if (end == std::string_view::npos) end = text.size();
        auto f = text.substr(start, end - start);
        while (!f.empty() && f.front() == ' ') f.remove_prefix(1);
        while (!f.empty() && f.back() == ' ') f.remove_suffix(1);
        if (f == "dataset") out.push_back(GroupField::dataset);
        else if (f == "model") out.push_back(GroupField::model);
        else if (f == "method") out.push_back(GroupField::method);
        else if (f == "kind") out.push_back(GroupField::kind);
        else if (f == "category") out.push_back(GroupField::category);
        else if (f == "cross_model") out.push_back(GroupField::cross_model);
        else if (!f.empty()) throw Error("unknown group field '" + std::string(f) + "'");
        start = end + 1;
    }
    return out;
}

std::vector<GroupField> default_grouping() {
    return {GroupField::dataset, GroupField::model, GroupField::method, GroupField::cross_model};
}

std::string AggregateRow::method_label() const {
    std::string out = method;
    if (variant != "*" && variant != "-") out += ":" + variant;
    if (!ordering.empty()) out += ":" + ordering;
    return out;
}

void to_json(nlohmann::json& j, const AggregateRow& r) {
    j = {{"dataset", r.dataset},         {"model", r.model},       {"method", r.method},
         {"variant", r.variant},         {"category", r.category}, {"cross_model", r.cross_model},
         {"granularity", r.granularity}, {"total", r.total()},     {"continue_count", r.continue_count}};
    j["ordering"] = r.ordering.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.ordering);
    j["bail"] = r.bail ? nlohmann::json(*r.bail) : nlohmann::json(nullptr);
    j["unknown"] = r.unknown ? nlohmann::json(*r.unknown) : nlohmann::json(nullptr);
    j["refusal"] = r.refusal ? nlohmann::json(*r.refusal) : nlohmann::json(nullptr);
    j["no_refusal_bail"] = r.no_refusal_bail ? nlohmann::json(*r.no_refusal_bail) : nlohmann::json(nullptr);
}

AggregateRow row_from_json(const nlohmann::json& j) {
    AggregateRow r;
    r.dataset = j.at("dataset").get<std::string>();
    r.model = j.at("model").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.variant = j.at("variant").get<std::string>();
    if (!j.at("ordering").is_null()) r.ordering = j.at("ordering").get<std::string>();
    r.category = j.at("category").get<std::string>();
    r.cross_model = j.at("cross_model").get<std::string>();
    r.granularity = j.at("granularity").get<std::string>();
    r.continue_count = j.at("continue_count").get<std::size_t>();
    if (!j.at("bail").is_null()) r.bail = rate_from_json(j.at("bail"));
    if (!j.at("unknown").is_null()) r.unknown = rate_from_json(j.at("unknown"));
    if (!j.at("refusal").is_null()) r.refusal = rate_from_json(j.at("refusal"));
    if (!j.at("no_refusal_bail").is_null()) r.no_refusal_bail = j.at("no_refusal_bail").get<double>();
    if (r.bail.has_value() != r.unknown.has_value()) throw Error("row has bail without unknown or vice versa");
    return r;
}

std::pair<std::vector<AggregateRow>, std::vector<NamedCorrelation>> parse_structured_report(
    const nlohmann::json& doc) {
    std::pair<std::vector<AggregateRow>, std::vector<NamedCorrelation>> out;
    for (const auto& r : doc.at("rows")) out.first.push_back(row_from_json(r));
    if (doc.contains("correlations")) {
        for (const auto& c : doc.at("correlations")) {
            out.second.push_back({c.at("label").get<std::string>(), correlation_from_json(c)});
        }
    }
    return out;
}

Aggregation aggregate(const std::vector<TrialRecord>& trials, const std::vector<GroupField>& grouping,
                      const std::vector<TrialRecord>* baseline) {
    Aggregation result;
    if (trials.empty()) {
        result.warnings.emplace_back("no trials to aggregate");
        return result;
    }

    std::map<RowKey, std::pair<AggregateRow, std::vector<const TrialRecord*>>> groups;
    for (const auto& t : trials) {
        auto row = row_for(t, grouping);
        auto key = key_of(row);
        auto [it, _] = groups.try_emplace(std::move(key), std::move(row), std::vector<const TrialRecord*>{});
        it->second.second.push_back(&t);
    }

    std::map<ItemKey, RefusalCounts> base_counts;
    if (baseline) {
        for (const auto& t : *baseline) count_refusal(t, base_counts[item_key(t)]);
    }

    for (auto& [key, entry] : groups) {
        auto& [row, members] = entry;
        std::vector<TrialRecord> method_trials;
        RefusalCounts own_refusals;
        for (const auto* t : members) {
            if (t->signal) method_trials.push_back(*t);
            count_refusal(*t, own_refusals);
        }
        const auto n_replay = std::count_if(method_trials.begin(), method_trials.end(),
                                            [](const TrialRecord& t) { return t.is_replay(); });
        if (n_replay != 0 && static_cast<std::size_t>(n_replay) != method_trials.size()) {
            throw Error("group " + row.model + "/" + row.method_label() +
                        " mixes replay and single-turn trials; aggregate them separately");
        }
        const bool replay = n_replay != 0;

        if (!method_trials.empty()) {
            std::size_t bail = 0, cont = 0, unk = 0;
            if (replay) {
                for (const auto& f : conversation_flags(method_trials)) {
                    if (f.bailed) ++bail;
                    else if (f.resolved_turns == f.turns) ++cont;
                    else ++unk;
                }
            } else {
                for (const auto& t : method_trials) {
                    if (t.signal->is_bail()) ++bail;
                    else if (t.signal->is_continue()) ++cont;
                    else ++unk;
                }
            }
            const auto total = bail + cont + unk;
            row.granularity = replay ? "conversation" : "trial";
            row.bail = rate_estimate(bail, total);
            row.unknown = rate_estimate(unk, total);
            row.continue_count = cont;
        } else {
            row.granularity = "trial";
        }

        if (baseline && !method_trials.empty()) {
            // Per item: refusal rate from the baseline, bail rate from this group.
            std::map<ItemKey, std::pair<std::size_t, std::size_t>> item_bails; // bails, trials
            for (const auto& t : method_trials) {
                auto& c = item_bails[item_key(t)];
                if (t.signal->is_bail()) ++c.first;
                ++c.second;
            }
            RefusalCounts agg;
            std::vector<std::pair<double, double>> per_prompt;
            for (const auto& [item, c] : item_bails) {
                const auto it = base_counts.find(item);
                if (it == base_counts.end() || it->second.labelled == 0) continue;
                agg.refusal += it->second.refusal;
                agg.labelled += it->second.labelled;
                per_prompt.emplace_back(static_cast<double>(it->second.refusal) / it->second.labelled,
                                        static_cast<double>(c.first) / c.second);
            }
            if (agg.labelled > 0) row.refusal = rate_estimate(agg.refusal, agg.labelled);
            if (replay) {
                result.warnings.push_back("no-refusal bail is not defined for replay group " + row.model + "/" +
                                          row.method_label());
            } else if (!per_prompt.empty()) {
                row.no_refusal_bail = no_refusal_bail(per_prompt);
            } else {
                result.warnings.push_back("no baseline refusal labels match group " + row.model + "/" +
                                          row.method_label());
            }
        } else if (own_refusals.labelled > 0) {
            row.refusal = rate_estimate(own_refusals.refusal, own_refusals.labelled);
        }

        if (!row.bail && !row.refusal) {
            result.warnings.push_back("group " + row.model + "/" + row.method_label() +
                                      " has nothing to count; dropped");
            continue;
        }
        result.rows.push_back(std::move(row));
    }
    return result;
}

std::vector<CrossModelRow> cross_model_rows(const std::vector<AggregateRow>& rows) {
    std::vector<CrossModelRow> out;
    for (const auto& r : rows) {
        if (!r.bail || r.cross_model == "*" || r.cross_model == "self") continue;
        const auto self = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& s) {
            return s.bail && s.cross_model == "self" && s.dataset == r.dataset && s.model == r.model &&
                   s.method == r.method && s.variant == r.variant && s.ordering == r.ordering &&
                   s.category == r.category;
        });
        if (self == rows.end()) continue;
        out.push_back({r.dataset, r.model, r.method_label(), r.cross_model, r.bail->rate, self->bail->rate,
                       percent_increase(r.bail->rate, self->bail->rate)});
    }
    return out;
}

ScatterFixture load_scatter_fixture(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    ScatterFixture fx;
    fx.name = path.stem().string();
    std::string line;
    bool header = false;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (line.empty() || line.front() == '#') continue;
        std::istringstream ls(line);
        std::string label, a, b, extra;
        if (!(ls >> label >> a >> b) || (ls >> extra)) {
            throw Error(path.string() + ":" + std::to_string(n) + ": expected three columns");
        }
        if (!header) {
            if (label != "Label") throw Error(path.string() + ":" + std::to_string(n) + ": missing header");
            header = true;
            continue;
        }
        try {
            fx.labels.push_back(label);
            fx.bail_pct.push_back(std::stod(a));
            fx.refusal_pct.push_back(std::stod(b));
        } catch (const std::exception&) {
            throw Error(path.string() + ":" + std::to_string(n) + ": bad number");
        }
    }
    if (fx.labels.size() < 3) throw Error(path.string() + ": need at least 3 rows");
    return fx;
}

ScatterFixture scatter_from_logs(const std::vector<TrialRecord>& method_trials,
                                 const std::vector<TrialRecord>& baseline_trials, const std::string& name) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> bails; // bail, total
    for (const auto& t : method_trials) {
        if (!t.signal) continue;
        auto& c = bails[t.model];
        if (t.signal->is_bail()) ++c.first;
        ++c.second;
    }
    std::map<std::string, RefusalCounts> refusals;
    for (const auto& t : baseline_trials) count_refusal(t, refusals[t.model]);

    ScatterFixture fx;
    fx.name = name;
    for (const auto& [model, c] : bails) {
        const auto it = refusals.find(model);
        if (it == refusals.end() || it->second.labelled == 0 || c.second == 0) continue;
        fx.labels.push_back(model);
        fx.bail_pct.push_back(100.0 * static_cast<double>(c.first) / c.second);
        fx.refusal_pct.push_back(100.0 * static_cast<double>(it->second.refusal) / it->second.labelled);
    }
    return fx;
}

ReportFormat parse_report_format(std::string_view text) {
    if (text == "csv") return ReportFormat::csv;
    if (text == "structured" || text == "json") return ReportFormat::structured;
    if (text == "plot-table") return ReportFormat::plot_table;
    if (text == "table") return ReportFormat::table;
    throw Error("unknown report format '" + std::string(text) + "'");
}

std::string render_report(const std::vector<AggregateRow>& rows, const std::vector<NamedCorrelation>& correlations,
                          ReportFormat format, const Provenance& provenance) {
    switch (format) {
    case ReportFormat::csv: return render_csv(rows, correlations, provenance);
    case ReportFormat::structured: return render_structured(rows, correlations, provenance);
    case ReportFormat::plot_table: return render_plot_table(rows, provenance);
    case ReportFormat::table: return render_table(rows, correlations, provenance);
    }
    throw Error("unreachable report format");
}

void emit_report(const std::vector<AggregateRow>& rows, const std::vector<NamedCorrelation>& correlations,
                 ReportFormat format, const Provenance& provenance, const std::filesystem::path& out) {
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + out.string());
    f << render_report(rows, correlations, format, provenance);
    if (!f) throw Error("write failed: " + out.string());
}

} // namespace bailkit
