#include "bailkit/runner.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "bailkit/parallel.hpp"
#include "bailkit/random.hpp"

namespace bailkit {

namespace {

Message tagged(Message m, std::string_view tag) {
    m.source_tag = std::string(tag);
    return m;
}

std::size_t threads_for(const ModelEndpoint& endpoint) {
    return static_cast<std::size_t>(std::max(1, endpoint.max_parallel));
}

/// Runs fn over [0, n) in a seed-shuffled order and collects the per-index
/// results in index order.
template <class T, class Fn>
std::vector<T> scheduled(std::size_t n, std::size_t threads, std::uint64_t seed, Fn&& fn) {
    const auto order = permutation(n, seed);
    std::vector<T> slots(n);
    parallel_for(n, threads, [&](std::size_t i) { slots[order[i]] = fn(order[i]); });
    return slots;
}

BailSignal blocked_or_failed(const CompletionOutcome& outcome) {
    return BailSignal::unknown(std::string(outcome.is_blocked() ? signal_reasons::refusal_blocked
                                                                : signal_reasons::provider_error));
}

/// Appends a model reply, or nullopt if the reply cannot be a message
/// (empty content without tool calls).
std::optional<Conversation> try_append(const Conversation& conv, Message msg) {
    try {
        return append_turn(conv, std::move(msg));
    } catch (const InvariantViolation&) {
        return std::nullopt;
    }
}

std::vector<std::size_t> user_positions(const Conversation& conv) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < conv.messages.size(); ++i) {
        if (conv.messages[i].role == Role::user) out.push_back(i);
    }
    return out;
}

const Message* original_reply(const Conversation& conv, std::size_t user_pos) {
    const auto next = user_pos + 1;
    if (next < conv.messages.size() && conv.messages[next].role == Role::assistant) return &conv.messages[next];
    return nullptr;
}

Conversation prefix(const Conversation& conv, std::size_t end_inclusive) {
    Conversation out{conv.id, {}};
    for (std::size_t i = 0; i <= end_inclusive; ++i) {
        out.messages.push_back(tagged(conv.messages[i], source_tags::original_transcript));
    }
    return out;
}

std::string_view to_string(ReplaySemantics s) noexcept {
    return s == ReplaySemantics::measurement ? "measurement" : "intervention";
}

ReplaySemantics parse_semantics(std::string_view text) {
    if (text == "measurement") return ReplaySemantics::measurement;
    if (text == "intervention") return ReplaySemantics::intervention;
    throw Error("unknown replay semantics '" + std::string(text) + "'");
}

} // namespace

void to_json(nlohmann::json& j, const TrialRecord& t) {
    j = nlohmann::json::object();
    j["dataset_id"] = t.dataset_id;
    j["item_id"] = t.item_id;
    if (t.category) j["category"] = *t.category;
    j["model"] = t.model;
    if (t.method) j["method"] = t.method->key();
    j["sample_index"] = t.sample_index;
    if (t.turn_index) j["turn_index"] = *t.turn_index;
    j["outcome"] = t.outcome;
    if (t.signal) j["signal"] = *t.signal;
    if (t.refusal) j["refusal"] = *t.refusal;
    if (t.cross_model) j["cross_model"] = *t.cross_model;
    if (t.response_source) j["response_source"] = *t.response_source;
    if (t.probe_context) j["probe_context"] = *t.probe_context;
}

TrialRecord trial_from_json(const nlohmann::json& j) {
    TrialRecord t;
    t.dataset_id = j.at("dataset_id").get<std::string>();
    t.item_id = j.at("item_id").get<std::string>();
    if (j.contains("category")) t.category = j.at("category").get<std::string>();
    t.model = j.at("model").get<std::string>();
    if (j.contains("method")) t.method = j.at("method").get<BailMethodSpec>();
    t.sample_index = j.at("sample_index").get<int>();
    if (j.contains("turn_index")) t.turn_index = j.at("turn_index").get<int>();
    t.outcome = outcome_from_json(j.at("outcome"));
    if (j.contains("signal")) t.signal = signal_from_json(j.at("signal"));
    if (j.contains("refusal")) t.refusal = refusal_from_json(j.at("refusal"));
    if (j.contains("cross_model")) t.cross_model = j.at("cross_model").get<std::string>();
    if (j.contains("response_source")) t.response_source = j.at("response_source").get<std::string>();
    if (j.contains("probe_context")) t.probe_context = j.at("probe_context").get<Conversation>();
    if (t.method.has_value() != t.signal.has_value()) {
        throw InvariantViolation({"trial " + t.item_id + ": signal must be present iff method is"});
    }
    return t;
}

void sort_trials(std::vector<TrialRecord>& trials) {
    const auto key = [](const TrialRecord& t) {
        return std::make_tuple(std::cref(t.dataset_id), std::cref(t.item_id), t.method_key(), t.sample_index,
                               t.turn_index.value_or(-1), std::cref(t.model), t.cross_model.value_or(""),
                               t.response_source.value_or(""));
    };
    std::stable_sort(trials.begin(), trials.end(),
                     [&](const TrialRecord& a, const TrialRecord& b) { return key(a) < key(b); });
}

std::string format_trial_log(const std::vector<TrialRecord>& trials) {
    auto sorted = trials;
    sort_trials(sorted);
    std::string out;
    for (const auto& t : sorted) {
        out += canonical_dump(nlohmann::json(t));
        out += '\n';
    }
    return out;
}

void write_trial_log(const std::vector<TrialRecord>& trials, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << format_trial_log(trials);
    if (!out) throw Error("write failed: " + path.string());
}

std::vector<TrialRecord> read_trial_log(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<TrialRecord> out;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(trial_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw Error(path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

BailSignal signal_for_outcome(const CompletionOutcome& outcome,
                              const std::function<BailSignal(const Message&)>& detect) {
    if (outcome.is_ok()) return detect(outcome.message());
    return blocked_or_failed(outcome);
}

std::vector<EvalItem> items_from(const PromptDataset& dataset) {
    std::vector<EvalItem> out;
    out.reserve(dataset.records.size());
    for (const auto& r : dataset.records) {
        out.push_back({r.id, r.category, Conversation{r.id, {Message::user(r.text)}}});
    }
    return out;
}

std::vector<EvalItem> items_from(const TranscriptDataset& dataset) {
    std::vector<EvalItem> out;
    out.reserve(dataset.conversations.size());
    for (const auto& c : dataset.conversations) {
        if (c.messages.empty() || c.messages.back().role != Role::user) {
            throw Error("conversation '" + c.id + "' does not end with a user message");
        }
        out.push_back({c.id, dataset.category_of(c.id), c});
    }
    return out;
}

std::string_view to_string(ResponseSource source) noexcept {
    return source == ResponseSource::original ? "original" : "fresh";
}

ResponseSource parse_response_source(std::string_view text) {
    if (text == "original") return ResponseSource::original;
    if (text == "fresh") return ResponseSource::fresh;
    throw Error("unknown response source '" + std::string(text) + "'");
}

void RunPlan::validate(const VariantRegistry& registry, bool refusal_only) const {
    endpoint.validate();
    params.validate();
    if (dataset_id.empty()) throw Error("run plan has no dataset_id");
    if (!refusal_only) {
        if (methods.empty()) throw Error("run plan lists no methods");
        for (const auto& m : methods) registry.check(m);
    }
    if (glyphs.bail.empty() || glyphs.continue_.empty() || glyphs.bail == glyphs.continue_) {
        throw Error("glyph binding needs two distinct non-empty glyphs");
    }
}

void to_json(nlohmann::json& j, const RunPlan& plan) {
    std::vector<std::string> methods;
    for (const auto& m : plan.methods) methods.push_back(m.key());
    j = {{"dataset_id", plan.dataset_id},
         {"endpoint", plan.endpoint},
         {"methods", methods},
         {"params", plan.params},
         {"response_source", to_string(plan.response_source)},
         {"semantics", to_string(plan.semantics)},
         {"seed", plan.seed},
         {"glyphs", {{"bail", plan.glyphs.bail}, {"continue", plan.glyphs.continue_}}}};
}

RunPlan plan_from_json(const nlohmann::json& j) {
    RunPlan p;
    p.dataset_id = j.value("dataset_id", std::string());
    p.endpoint = j.at("endpoint").get<ModelEndpoint>();
    if (j.contains("methods")) p.methods = j.at("methods").get<std::vector<BailMethodSpec>>();
    if (j.contains("params")) p.params = j.at("params").get<SamplingParams>();
    if (j.contains("response_source")) {
        p.response_source = parse_response_source(j.at("response_source").get<std::string>());
    }
    if (j.contains("semantics")) p.semantics = parse_semantics(j.at("semantics").get<std::string>());
    p.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("glyphs")) {
        const auto& g = j.at("glyphs");
        p.glyphs.bail = g.value("bail", p.glyphs.bail);
        p.glyphs.continue_ = g.value("continue", p.glyphs.continue_);
    }
    return p;
}

std::vector<ConversationFlag> conversation_flags(const std::vector<TrialRecord>& trials) {
    using Key = std::tuple<std::string, std::string, std::string, std::string, std::string, int>;
    std::map<Key, ConversationFlag> groups;
    std::map<Key, std::map<int, std::pair<bool, bool>>> turns; // turn -> (bailed, resolved)
    for (const auto& t : trials) {
        if (!t.is_replay() || !t.method || !t.signal) continue;
        Key key{t.dataset_id, t.item_id, t.model, t.method_key(), t.response_source.value_or(""), t.sample_index};
        auto [it, fresh] = groups.try_emplace(key);
        if (fresh) {
            it->second = ConversationFlag{t.dataset_id, t.item_id, t.model, t.method_key(), t.response_source,
                                          t.sample_index};
        }
        auto& turn = turns[key][*t.turn_index];
        turn.first = turn.first || t.signal->is_bail();
        turn.second = turn.second || !t.signal->is_unknown();
    }
    std::vector<ConversationFlag> out;
    out.reserve(groups.size());
    for (auto& [key, flag] : groups) {
        for (const auto& [_, turn] : turns[key]) {
            flag.bailed = flag.bailed || turn.first;
            ++flag.turns;
            if (turn.second) ++flag.resolved_turns;
        }
        out.push_back(std::move(flag));
    }
    return out;
}

Conversation with_system_suffix(const Conversation& conv, std::string_view suffix) {
    Conversation out = conv;
    if (!out.messages.empty() && out.messages.front().role == Role::system) {
        auto& content = out.messages.front().content;
        if (!content.empty()) content += "\n\n";
        content += suffix;
    } else {
        out.messages.insert(out.messages.begin(), Message::system(std::string(suffix)));
    }
    return out;
}

struct Runner::MethodTrial {
    CompletionOutcome outcome;
    std::optional<BailSignal> signal;
    std::optional<Conversation> probe_context;
};

Runner::Runner(std::shared_ptr<ProviderClient> client, JudgeBackend* judge, const VariantRegistry& registry)
    : client_(std::move(client)), judge_(judge), registry_(registry) {
    if (!client_) throw Error("Runner requires a provider client");
}

ProbeResult Runner::run_bail_prompt_probe(const Conversation& context, PromptOrdering ordering,
                                          std::string_view variant, const ModelEndpoint& endpoint,
                                          const SamplingParams& params, int sample_index,
                                          const GlyphBinding& glyphs) {
    if (context.messages.empty() || context.messages.back().role != Role::assistant) {
        throw Error("bail prompt probe needs a context ending with an assistant message");
    }
    auto probe = tagged(Message::user(render_bail_prompt(ordering, variant, glyphs, registry_)),
                        source_tags::bail_probe);
    const auto probe_conv = append_turn(context, std::move(probe));
    const auto outcome = client_->complete(CompletionRequest{endpoint, probe_conv, params, {}, sample_index});
    auto signal = signal_for_outcome(
        outcome, [&](const Message& m) { return parse_wellbeing_response(m.content, glyphs); });
    return {outcome, std::move(signal), without_source_tag(probe_conv, source_tags::bail_probe)};
}

Runner::MethodTrial Runner::run_method_once(const RunPlan& plan, const BailMethodSpec& method,
                                            const Conversation& context, int sample_index) {
    switch (method.kind) {
    case BailKind::tool: {
        auto tool = render_tool_definition(plan.endpoint.name, method.variant, registry_);
        const auto name = tool.tool_name;
        auto outcome =
            client_->complete(CompletionRequest{plan.endpoint, context, plan.params, {std::move(tool)}, sample_index});
        auto signal = signal_for_outcome(outcome, [&](const Message& m) { return detect_tool_bail(m, name); });
        return {std::move(outcome), std::move(signal), std::nullopt};
    }
    case BailKind::string: {
        const auto spec = render_string_suffix(plan.endpoint.name, method.variant, registry_);
        auto outcome = client_->complete(CompletionRequest{
            plan.endpoint, with_system_suffix(context, spec.system_suffix), plan.params, {}, sample_index});
        auto signal = signal_for_outcome(
            outcome, [&](const Message& m) { return detect_string_bail(m.content, spec.marker); });
        return {std::move(outcome), std::move(signal), std::nullopt};
    }
    case BailKind::prompt: {
        auto target = client_->complete(CompletionRequest{plan.endpoint, context, plan.params, {}, sample_index});
        if (!target.is_ok()) {
            auto signal = blocked_or_failed(target);
            return {std::move(target), std::move(signal), std::nullopt};
        }
        auto pctx = try_append(context, tagged(target.message(), source_tags::target_model));
        if (!pctx) {
            return {std::move(target), BailSignal::unknown(std::string(signal_reasons::empty_response)),
                    std::nullopt};
        }
        auto probe = run_bail_prompt_probe(*pctx, *method.ordering, method.variant, plan.endpoint, plan.params,
                                           sample_index, plan.glyphs);
        return {std::move(probe.outcome), std::move(probe.signal), std::move(pctx)};
    }
    }
    throw Error("unreachable bail kind");
}

std::vector<TrialRecord> Runner::run_single_turn(const RunPlan& plan, const std::vector<EvalItem>& items) {
    plan.validate(registry_);
    const auto k = static_cast<std::size_t>(plan.params.samples_per_prompt);
    const auto per_item = plan.methods.size() * k;
    auto trials = scheduled<TrialRecord>(items.size() * per_item, threads_for(plan.endpoint), plan.seed,
                                         [&](std::size_t u) {
                                             const auto& item = items[u / per_item];
                                             const auto& method = plan.methods[(u % per_item) / k];
                                             const auto s = static_cast<int>(u % k);
                                             auto mt = run_method_once(plan, method, item.context, s);
                                             TrialRecord t;
                                             t.dataset_id = plan.dataset_id;
                                             t.item_id = item.id;
                                             t.category = item.category;
                                             t.model = plan.endpoint.name;
                                             t.method = method;
                                             t.sample_index = s;
                                             t.outcome = std::move(mt.outcome);
                                             t.signal = std::move(mt.signal);
                                             t.probe_context = std::move(mt.probe_context);
                                             return t;
                                         });
    sort_trials(trials);
    return trials;
}

std::vector<TrialRecord> Runner::run_baseline_responses(const RunPlan& plan, const std::vector<EvalItem>& items) {
    plan.validate(registry_, true);
    if (!judge_) throw Error("baseline responses need a refusal judge");
    const auto k = static_cast<std::size_t>(plan.params.samples_per_prompt);
    auto trials = scheduled<TrialRecord>(items.size() * k, threads_for(plan.endpoint), plan.seed, [&](std::size_t u) {
        const auto& item = items[u / k];
        const auto s = static_cast<int>(u % k);
        TrialRecord t;
        t.dataset_id = plan.dataset_id;
        t.item_id = item.id;
        t.category = item.category;
        t.model = plan.endpoint.name;
        t.sample_index = s;
        t.outcome = client_->complete(CompletionRequest{plan.endpoint, item.context, plan.params, {}, s});
        if (t.outcome.is_ok()) {
            const auto* user = item.context.last_of(Role::user);
            t.refusal = classify_refusal(user ? user->content : std::string(), t.outcome.message(), *judge_);
        } else {
            t.refusal = RefusalLabel::unknown(std::string(t.outcome.is_blocked() ? signal_reasons::refusal_blocked
                                                                                 : signal_reasons::provider_error));
        }
        return t;
    });
    sort_trials(trials);
    return trials;
}

ReplayResult Runner::replay_transcripts(const RunPlan& plan, const TranscriptDataset& dataset) {
    plan.validate(registry_);
    const auto k = plan.params.samples_per_prompt;
    const auto n_methods = plan.methods.size();
    const auto source = std::string(to_string(plan.response_source));

    auto units = scheduled<std::vector<TrialRecord>>(
        dataset.conversations.size() * n_methods, threads_for(plan.endpoint), plan.seed, [&](std::size_t u) {
            const auto& conv = dataset.conversations[u / n_methods];
            const auto& method = plan.methods[u % n_methods];
            const auto category = dataset.category_of(conv.id);
            const auto users = user_positions(conv);
            std::vector<TrialRecord> out;

            Conversation running{conv.id, {}};
            if (!conv.messages.empty() && conv.messages.front().role == Role::system) {
                running.messages.push_back(tagged(conv.messages.front(), source_tags::original_transcript));
            }

            for (std::size_t turn = 0; turn < users.size(); ++turn) {
                const auto upos = users[turn];
                const auto* reply = original_reply(conv, upos);
                Conversation ctx;
                if (plan.response_source == ResponseSource::original) {
                    ctx = prefix(conv, upos);
                } else {
                    ctx = append_turn(running, tagged(conv.messages[upos], source_tags::original_transcript));
                }

                const auto record = [&](int s, CompletionOutcome outcome, BailSignal signal,
                                        std::optional<Conversation> pctx) {
                    TrialRecord t;
                    t.dataset_id = dataset.name;
                    t.item_id = conv.id;
                    t.category = category;
                    t.model = plan.endpoint.name;
                    t.method = method;
                    t.sample_index = s;
                    t.turn_index = static_cast<int>(turn);
                    t.outcome = std::move(outcome);
                    t.signal = std::move(signal);
                    t.response_source = source;
                    t.probe_context = std::move(pctx);
                    out.push_back(std::move(t));
                };

                std::optional<Message> continuation;
                bool first_sample_bailed = false;

                if (method.kind == BailKind::prompt) {
                    std::optional<Conversation> pctx;
                    if (plan.response_source == ResponseSource::original && reply) {
                        pctx = prefix(conv, upos + 1);
                    } else {
                        auto target = client_->complete(CompletionRequest{plan.endpoint, ctx, plan.params, {}, 0});
                        if (target.is_ok()) {
                            pctx = try_append(ctx, tagged(target.message(), source_tags::target_model));
                        }
                        if (!pctx) {
                            const auto signal = target.is_ok()
                                                    ? BailSignal::unknown(std::string(signal_reasons::empty_response))
                                                    : blocked_or_failed(target);
                            for (int s = 0; s < k; ++s) record(s, target, signal, std::nullopt);
                        }
                    }
                    if (pctx) {
                        for (int s = 0; s < k; ++s) {
                            auto probe = run_bail_prompt_probe(*pctx, *method.ordering, method.variant, plan.endpoint,
                                                               plan.params, s, plan.glyphs);
                            if (s == 0) first_sample_bailed = probe.signal.is_bail();
                            record(s, std::move(probe.outcome), std::move(probe.signal), pctx);
                        }
                        continuation = pctx->messages.back();
                    }
                } else {
                    const auto marker = method.kind == BailKind::string
                                            ? render_string_suffix(plan.endpoint.name, method.variant, registry_).marker
                                            : std::string();
                    for (int s = 0; s < k; ++s) {
                        auto mt = run_method_once(plan, method, ctx, s);
                        if (s == 0) {
                            first_sample_bailed = mt.signal->is_bail();
                            if (mt.outcome.is_ok()) {
                                auto m = mt.outcome.message();
                                m.tool_calls.clear();
                                if (!marker.empty()) m.content = strip_bail_artifacts(m.content, marker);
                                if (!m.content.empty()) continuation = tagged(std::move(m), source_tags::target_model);
                            }
                        }
                        record(s, std::move(mt.outcome), std::move(*mt.signal), std::nullopt);
                    }
                }

                if (plan.semantics == ReplaySemantics::intervention && first_sample_bailed) break;
                if (plan.response_source == ResponseSource::fresh) {
                    if (!continuation && reply) continuation = tagged(*reply, source_tags::original_transcript);
                    if (!continuation) break;
                    running = append_turn(ctx, std::move(*continuation));
                }
            }
            return out;
        });

    ReplayResult result;
    for (auto& u : units) {
        std::move(u.begin(), u.end(), std::back_inserter(result.trials));
    }
    sort_trials(result.trials);
    result.flags = conversation_flags(result.trials);
    return result;
}

std::vector<TrialRecord> Runner::run_cross_model(const RunPlan& plan, const ModelEndpoint& responder,
                                                 const std::vector<EvalItem>& items) {
    plan.validate(registry_);
    responder.validate();
    for (const auto& m : plan.methods) {
        if (m.kind != BailKind::prompt) throw Error("cross-model runs use bail-prompt methods only, got " + m.key());
    }
    const auto k = static_cast<std::size_t>(plan.params.samples_per_prompt);
    const auto per_item = plan.methods.size() * k;
    const auto threads = threads_for(plan.endpoint) + threads_for(responder);
    auto trials = scheduled<TrialRecord>(items.size() * per_item, threads, plan.seed, [&](std::size_t u) {
        const auto& item = items[u / per_item];
        const auto& method = plan.methods[(u % per_item) / k];
        const auto s = static_cast<int>(u % k);
        TrialRecord t;
        t.dataset_id = plan.dataset_id;
        t.item_id = item.id;
        t.category = item.category;
        t.model = plan.endpoint.name;
        t.method = method;
        t.sample_index = s;
        t.cross_model = responder.name;

        auto response = client_->complete(CompletionRequest{responder, item.context, plan.params, {}, s});
        if (!response.is_ok()) {
            t.signal = blocked_or_failed(response);
            t.outcome = std::move(response);
            return t;
        }
        auto pctx = try_append(item.context, tagged(response.message(), source_tags::responder_model));
        if (!pctx) {
            t.signal = BailSignal::unknown(std::string(signal_reasons::empty_response));
            t.outcome = std::move(response);
            return t;
        }
        auto probe =
            run_bail_prompt_probe(*pctx, *method.ordering, method.variant, plan.endpoint, plan.params, s, plan.glyphs);
        t.outcome = std::move(probe.outcome);
        t.signal = std::move(probe.signal);
        t.probe_context = std::move(pctx);
        return t;
    });
    sort_trials(trials);
    return trials;
}

} // namespace bailkit
