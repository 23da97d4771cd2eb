#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bailkit/classifiers.hpp"
#include "bailkit/datasets.hpp"
#include "bailkit/mock_provider.hpp"
#include "bailkit/provider.hpp"
#include "bailkit/report.hpp"
#include "bailkit/runner.hpp"
#include "bailkit/stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bailkit;

namespace {

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(path.string() + ": " + e.what());
    }
}

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_relative() ? base / path : path;
}

/// Options shared by the commands that talk to a model.
struct RunOptions {
    std::string plan;
    std::string endpoint;
    std::string dataset;
    std::string dataset_kind;
    std::string tag;
    std::vector<std::string> methods;
    int samples = 0;
    std::optional<std::uint64_t> seed;
    std::string cache_dir;
    std::string judge;
    std::string mock;
    std::string responder;
    std::string response_source;
    std::string semantics;
    std::string out;
};

void add_run_options(CLI::App* cmd, RunOptions& o, bool needs_methods) {
    cmd->add_option("--plan", o.plan, "Plan file (JSON)");
    cmd->add_option("--endpoint", o.endpoint, "Endpoint file (JSON); overrides the plan");
    cmd->add_option("--dataset", o.dataset, "Dataset file; overrides the plan");
    cmd->add_option("--dataset-kind", o.dataset_kind, "prompts, transcripts or jailbreak")
        ->check(CLI::IsMember({"prompts", "transcripts", "jailbreak"}));
    cmd->add_option("--tag", o.tag, "Keep only transcripts carrying this tag");
    if (needs_methods) cmd->add_option("--method", o.methods, "kind:variant[:ordering]; repeatable");
    cmd->add_option("--samples", o.samples, "Samples per prompt (K)")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", o.seed, "Scheduling seed");
    cmd->add_option("--cache-dir", o.cache_dir, "Response cache directory");
    cmd->add_option("--judge", o.judge, "Judge config (JSON)");
    cmd->add_option("--mock", o.mock, "Scripted mock rules (JSON) instead of a live endpoint");
    cmd->add_option("--out", o.out, "Trial log to write")->required();
}

struct Session {
    json plan_doc;
    fs::path base;
    RunPlan plan;
    std::shared_ptr<ProviderClient> client;
    std::unique_ptr<JudgeBackend> judge;
    std::optional<ModelEndpoint> responder;
    PromptDataset prompts;
    TranscriptDataset transcripts;
    bool have_prompts = false;
};

Session open_session(const RunOptions& o, const std::string& default_kind) {
    Session s;
    s.base = fs::current_path();
    if (!o.plan.empty()) {
        s.plan_doc = read_json(o.plan);
        s.base = fs::absolute(o.plan).parent_path();
    } else {
        s.plan_doc = json::object();
    }
    auto& doc = s.plan_doc;
    if (!o.endpoint.empty()) doc["endpoint"] = read_json(o.endpoint);
    if (!o.methods.empty()) doc["methods"] = o.methods;
    if (o.samples > 0) doc["params"]["samples_per_prompt"] = o.samples;
    if (o.seed) doc["seed"] = *o.seed;
    if (!o.response_source.empty()) doc["response_source"] = o.response_source;
    if (!o.semantics.empty()) doc["semantics"] = o.semantics;
    if (!o.cache_dir.empty()) doc["cache_dir"] = fs::absolute(o.cache_dir).string();
    if (!o.judge.empty()) doc["judge"] = read_json(o.judge);
    if (!o.mock.empty()) doc["mock"] = fs::absolute(o.mock).string();
    if (!o.responder.empty()) doc["responder"] = read_json(o.responder);
    if (!o.dataset.empty()) doc["dataset"]["path"] = fs::absolute(o.dataset).string();
    if (!o.dataset_kind.empty()) doc["dataset"]["kind"] = o.dataset_kind;
    if (!o.tag.empty()) doc["dataset"]["tag"] = o.tag;
    if (!doc.contains("endpoint")) throw Error("no endpoint: pass --endpoint or set it in the plan");
    if (!doc.contains("dataset") || !doc["dataset"].contains("path")) {
        throw Error("no dataset: pass --dataset or set dataset.path in the plan");
    }

    s.plan = plan_from_json(doc);

    std::shared_ptr<Backend> backend;
    if (doc.contains("mock")) {
        backend = mock_provider(MockBackend::load_rules(resolve(s.base, doc["mock"].get<std::string>())));
    } else {
        backend = std::make_shared<OpenAICompatibleBackend>();
    }
    std::optional<fs::path> cache_dir;
    if (doc.contains("cache_dir")) cache_dir = resolve(s.base, doc["cache_dir"].get<std::string>());
    s.client = std::make_shared<ProviderClient>(backend, std::make_shared<ResponseCache>(cache_dir));
    if (doc.contains("judge")) s.judge = make_judge(doc["judge"], s.client, s.base);
    if (doc.contains("responder")) s.responder = doc["responder"].get<ModelEndpoint>();

    const auto& ds = doc["dataset"];
    const auto kind = ds.value("kind", default_kind);
    const auto path = resolve(s.base, ds["path"].get<std::string>());
    if (kind == "prompts") {
        s.prompts = load_prompt_dataset(path);
        s.have_prompts = true;
        if (s.plan.dataset_id.empty()) s.plan.dataset_id = s.prompts.name;
    } else if (kind == "transcripts") {
        LoadReport report;
        std::optional<std::string> tag;
        if (ds.contains("tag")) tag = ds["tag"].get<std::string>();
        s.transcripts = load_transcripts(path, tag, &report);
        if (s.plan.dataset_id.empty()) s.plan.dataset_id = s.transcripts.name;
        std::cerr << "loaded " << s.transcripts.conversations.size() << " conversations (dropped "
                  << report.dropped_empty << " empty, " << report.dropped_filtered << " filtered; merged "
                  << report.merged_messages << " messages)\n";
    } else if (kind == "jailbreak") {
        if (!ds.contains("jailbreak")) throw Error("jailbreak datasets need dataset.jailbreak");
        const auto jb = load_jailbreak_context(resolve(s.base, ds["jailbreak"].get<std::string>()));
        s.transcripts = build_jailbreak_dataset(jb, load_prompt_dataset(path));
        if (s.plan.dataset_id.empty()) s.plan.dataset_id = s.transcripts.name;
    } else {
        throw Error("unknown dataset kind '" + kind + "'");
    }
    return s;
}

std::vector<EvalItem> items(const Session& s) {
    return s.have_prompts ? items_from(s.prompts) : items_from(s.transcripts);
}

void write_outputs(const Session& s, const std::vector<TrialRecord>& trials, const std::string& out) {
    write_trial_log(trials, out);
    json effective = s.plan_doc;
    effective["resolved_plan"] = s.plan;
    const auto stats = s.client->cache().stats();
    json meta = {{"plan_hash", sha256_hex(canonical_dump(effective))},
                 {"seed", s.plan.seed},
                 {"cache", {{"hits", stats.hits}, {"misses", stats.misses}, {"writes", stats.writes}}},
                 {"trials", trials.size()}};
    std::ofstream(out + ".meta.json") << meta.dump(2) << '\n';

    std::size_t bails = 0, unknown = 0;
    for (const auto& t : trials) {
        if (t.signal && t.signal->is_bail()) ++bails;
        if (t.signal && t.signal->is_unknown()) ++unknown;
    }
    std::cerr << "wrote " << trials.size() << " trials to " << out << " (" << bails << " bail, " << unknown
              << " unknown; cache hits " << stats.hits << ", misses " << stats.misses << ")\n";
}

Provenance provenance_for(const std::vector<std::string>& logs) {
    Provenance p;
    for (const auto& log : logs) {
        p.inputs.push_back(fs::path(log).filename().string());
        const fs::path meta = log + ".meta.json";
        if (!fs::exists(meta)) continue;
        const auto m = read_json(meta);
        if (!p.plan_hash) p.plan_hash = m.value("plan_hash", std::string());
        if (!p.seed && m.contains("seed")) p.seed = m["seed"].get<std::uint64_t>();
        if (!p.cache && m.contains("cache")) {
            p.cache = ResponseCache::Stats{m["cache"]["hits"].get<std::size_t>(),
                                           m["cache"]["misses"].get<std::size_t>(),
                                           m["cache"]["writes"].get<std::size_t>()};
        }
    }
    return p;
}

struct StatsOptions {
    std::vector<std::string> logs;
    std::vector<std::string> baseline_logs;
    std::string group = "dataset,model,method,cross_model";
    std::vector<std::string> fixtures;
    std::vector<std::string> correlate;
    int permutations = 10000;
    std::uint64_t seed = 0;
    std::string judge;
    bool filter_false_bails = false;
    std::string stats_input;
    std::string format;
    std::string out;
};

std::vector<TrialRecord> read_logs(const std::vector<std::string>& paths) {
    std::vector<TrialRecord> out;
    for (const auto& p : paths) {
        auto t = read_trial_log(p);
        std::move(t.begin(), t.end(), std::back_inserter(out));
    }
    return out;
}

void emit(const std::string& text, const std::string& out) {
    if (out.empty() || out == "-") {
        std::cout << text;
        return;
    }
    const fs::path p(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + out);
    f << text;
}

std::string compute_report(const StatsOptions& o, ReportFormat format) {
    std::vector<AggregateRow> rows;
    std::vector<NamedCorrelation> correlations;
    Provenance prov;

    if (!o.stats_input.empty()) {
        const auto doc = read_json(o.stats_input);
        std::tie(rows, correlations) = parse_structured_report(doc);
        if (doc.contains("provenance")) {
            const auto& p = doc["provenance"];
            if (p.contains("plan_hash")) prov.plan_hash = p["plan_hash"].get<std::string>();
            if (p.contains("seed")) prov.seed = p["seed"].get<std::uint64_t>();
            if (p.contains("cache")) {
                prov.cache = ResponseCache::Stats{p["cache"]["hits"].get<std::size_t>(),
                                                  p["cache"]["misses"].get<std::size_t>(),
                                                  p["cache"]["writes"].get<std::size_t>()};
            }
            if (p.contains("inputs")) prov.inputs = p["inputs"].get<std::vector<std::string>>();
        }
        return render_report(rows, correlations, format, prov);
    }

    if (!o.logs.empty()) {
        auto trials = read_logs(o.logs);
        if (o.filter_false_bails) {
            if (o.judge.empty()) throw Error("--filter-false-bails needs --judge");
            auto client = std::make_shared<ProviderClient>(std::make_shared<OpenAICompatibleBackend>(),
                                                           std::make_shared<ResponseCache>());
            const auto judge = make_judge(read_json(o.judge), client, fs::absolute(o.judge).parent_path());
            auto part = filter_false_bails(trials, *judge);
            std::cerr << "false-bail filter removed " << part.filtered.size() << " of " << trials.size()
                      << " trials\n";
            trials = std::move(part.kept);
        }
        const auto baseline = read_logs(o.baseline_logs);
        auto agg = aggregate(trials, parse_grouping(o.group), o.baseline_logs.empty() ? nullptr : &baseline);
        for (const auto& w : agg.warnings) std::cerr << "warning: " << w << '\n';
        rows = std::move(agg.rows);
        prov = provenance_for(o.logs);
    }

    const auto threads = std::max(1u, std::thread::hardware_concurrency());
    for (const auto& f : o.fixtures) {
        const auto fx = load_scatter_fixture(f);
        correlations.push_back({fx.name, correlate(fx.bail_pct, fx.refusal_pct, o.permutations, o.seed, threads)});
    }
    if (!o.correlate.empty()) {
        if (o.baseline_logs.empty()) throw Error("--correlate needs --baseline-log for refusal rates");
        const auto fx = scatter_from_logs(read_logs(o.correlate), read_logs(o.baseline_logs), "logs");
        correlations.push_back({fx.name, correlate(fx.bail_pct, fx.refusal_pct, o.permutations, o.seed, threads)});
    }
    if (rows.empty() && correlations.empty()) throw Error("nothing to report: pass --log, --fixture or --correlate");
    return render_report(rows, correlations, format, prov);
}

void add_stats_options(CLI::App* cmd, StatsOptions& o, const std::string& default_format) {
    o.format = default_format;
    cmd->add_option("--log", o.logs, "Trial log; repeatable");
    cmd->add_option("--baseline-log", o.baseline_logs, "Refusal-labelled baseline log; repeatable");
    cmd->add_option("--group", o.group, "Comma-separated group fields");
    cmd->add_option("--fixture", o.fixtures, "Scatter fixture to correlate; repeatable");
    cmd->add_option("--correlate", o.correlate, "Method log to correlate against --baseline-log; repeatable");
    cmd->add_option("--permutations", o.permutations, "Permutations for the dcor test")->check(CLI::Range(100, 10000000));
    cmd->add_option("--seed", o.seed, "Permutation seed");
    cmd->add_option("--judge", o.judge, "Judge config for --filter-false-bails");
    cmd->add_flag("--filter-false-bails", o.filter_false_bails, "Drop judged false bails before counting");
    cmd->add_option("--format", o.format, "csv, structured, plot-table or table")
        ->check(CLI::IsMember({"csv", "structured", "json", "plot-table", "table"}));
    cmd->add_option("--out", o.out, "Output file (default stdout)");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Measure when language models choose to leave a conversation."};
    app.require_subcommand(1);

    RunOptions run_o, replay_o, cross_o, base_o;
    auto* run = app.add_subcommand("run", "Single-turn bail trials over a dataset");
    add_run_options(run, run_o, true);
    auto* replay = app.add_subcommand("replay", "Bail trials after every user turn of each transcript");
    add_run_options(replay, replay_o, true);
    replay->add_option("--response-source", replay_o.response_source, "original or fresh")
        ->check(CLI::IsMember({"original", "fresh"}));
    replay->add_option("--semantics", replay_o.semantics, "measurement or intervention")
        ->check(CLI::IsMember({"measurement", "intervention"}));
    auto* cross = app.add_subcommand("crossmodel", "Bail prompt after another model's response");
    add_run_options(cross, cross_o, true);
    cross->add_option("--responder", cross_o.responder, "Responder endpoint file (JSON)");
    auto* baseline = app.add_subcommand("baseline", "Refusal-labelled responses without any bail option");
    add_run_options(baseline, base_o, false);

    StatsOptions stats_o, report_o;
    auto* stats = app.add_subcommand("stats", "Aggregate logs into rates and correlations");
    add_stats_options(stats, stats_o, "structured");
    auto* report = app.add_subcommand("report", "Render logs or stats output as tables");
    add_stats_options(report, report_o, "table");
    report->add_option("--stats", report_o.stats_input, "Structured output of the stats command");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            auto s = open_session(run_o, "prompts");
            Runner runner(s.client, s.judge.get());
            write_outputs(s, runner.run_single_turn(s.plan, items(s)), run_o.out);
        } else if (replay->parsed()) {
            auto s = open_session(replay_o, "transcripts");
            if (s.have_prompts) throw Error("replay needs a transcript dataset");
            Runner runner(s.client, s.judge.get());
            auto result = runner.replay_transcripts(s.plan, s.transcripts);
            std::size_t bailed = 0;
            for (const auto& f : result.flags) bailed += f.bailed ? 1 : 0;
            std::cerr << bailed << " of " << result.flags.size() << " (conversation, sample) pairs bailed\n";
            write_outputs(s, result.trials, replay_o.out);
        } else if (cross->parsed()) {
            auto s = open_session(cross_o, "prompts");
            if (!s.responder) throw Error("crossmodel needs --responder or a plan responder");
            Runner runner(s.client, s.judge.get());
            write_outputs(s, runner.run_cross_model(s.plan, *s.responder, items(s)), cross_o.out);
        } else if (baseline->parsed()) {
            auto s = open_session(base_o, "prompts");
            if (!s.judge) throw Error("baseline needs --judge or a plan judge");
            Runner runner(s.client, s.judge.get());
            write_outputs(s, runner.run_baseline_responses(s.plan, items(s)), base_o.out);
        } else if (stats->parsed()) {
            emit(compute_report(stats_o, parse_report_format(stats_o.format)), stats_o.out);
        } else if (report->parsed()) {
            emit(compute_report(report_o, parse_report_format(report_o.format)), report_o.out);
        }
    } catch (const std::exception& e) {
        std::cerr << "bailkit: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
