#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include <nlohmann/json.hpp>

#include "bailkit/classifiers.hpp"
#include "bailkit/mock_provider.hpp"
#include "bailkit/runner.hpp"
#include "../support/fixtures.hpp"

using namespace bailkit;
namespace fs = std::filesystem;

namespace {

std::shared_ptr<ProviderClient> client_for(const char* rules_json) {
    return std::make_shared<ProviderClient>(
        mock_provider(MockBackend::rules_from_json(nlohmann::json::parse(rules_json))),
        std::make_shared<ResponseCache>());
}

RunPlan plan(std::vector<BailMethodSpec> methods, int k = 1) {
    RunPlan p;
    p.dataset_id = "d";
    p.endpoint.name = p.endpoint.model_id = "target";
    p.endpoint.max_parallel = 3;
    p.methods = std::move(methods);
    p.params.samples_per_prompt = k;
    return p;
}

const BailMethodSpec tool{BailKind::tool, "baseline", std::nullopt};
const BailMethodSpec str{BailKind::string, "baseline", std::nullopt};
const BailMethodSpec prompt_bf{BailKind::prompt, "baseline", PromptOrdering::bail_first};

std::vector<EvalItem> prompts(int n) {
    std::vector<EvalItem> out;
    for (int i = 0; i < n; ++i) {
        out.push_back({"p" + std::to_string(i), "c", {"p" + std::to_string(i), {Message::user("prompt " + std::to_string(i))}}});
    }
    return out;
}

const char* always_continue = R"([
  {"when": {"last_user_contains": "wellbeing"}, "reply": {"text": "<wellbeing>🟢</wellbeing>"}},
  {"when": {}, "reply": {"text": "fine"}}
])";

} // namespace

TEST(SingleTurn, Cardinality) {
    Runner r(client_for(always_continue));
    EXPECT_EQ(r.run_single_turn(plan({tool}, 10), prompts(1)).size(), 10u);
    EXPECT_EQ(r.run_single_turn(plan({tool, str}, 1), prompts(2)).size(), 4u);
    const auto all = r.run_single_turn(plan({tool, str, prompt_bf}, 3), prompts(5));
    EXPECT_EQ(all.size(), 5u * 3u * 3u);
    for (const auto& t : all) {
        ASSERT_TRUE(t.signal.has_value());
        EXPECT_TRUE(t.signal->is_continue());
    }
}

TEST(SingleTurn, BlockedSampleIsUnknownRefusalBlocked) {
    Runner r(client_for(R"([
      {"when": {"sample_index": 1}, "reply": {"blocked": "content_filter"}},
      {"when": {}, "reply": {"text": "fine"}}
    ])"));
    const auto trials = r.run_single_turn(plan({tool}, 3), prompts(1));
    ASSERT_EQ(trials.size(), 3u);
    EXPECT_TRUE(trials[0].signal->is_continue());
    EXPECT_EQ(trials[1].signal->reason(), signal_reasons::refusal_blocked);
    EXPECT_TRUE(trials[1].outcome.is_blocked());
}

TEST(SingleTurn, ScheduleDoesNotChangeOutput) {
    auto p = plan({tool, str, prompt_bf}, 4);
    Runner r1(client_for(always_continue));
    const auto a = format_trial_log(r1.run_single_turn(p, prompts(6)));
    p.endpoint.max_parallel = 1;
    p.seed = 99;
    Runner r2(client_for(always_continue));
    EXPECT_EQ(format_trial_log(r2.run_single_turn(p, prompts(6))), a);
}

TEST(Probe, ParsesAndReverses) {
    Runner r(client_for(R"([
      {"when": {"last_assistant_contains": "bail please"}, "reply": {"text": "<wellbeing>🔀</wellbeing>"}},
      {"when": {"last_assistant_contains": "free"}, "reply": {"text": "I feel fine, thanks"}},
      {"when": {}, "reply": {"text": "<wellbeing>🟢</wellbeing>"}}
    ])"));
    const auto ep = plan({}).endpoint;
    const SamplingParams params;
    const auto ctx = [](std::string reply) {
        return Conversation{"c", {Message::user("q"), Message::assistant(std::move(reply))}};
    };
    const auto cont = r.run_bail_prompt_probe(ctx("...here's your answer"), PromptOrdering::bail_first, "baseline", ep, params);
    EXPECT_TRUE(cont.signal.is_continue());
    EXPECT_EQ(cont.continuation, ctx("...here's your answer"));
    EXPECT_TRUE(r.run_bail_prompt_probe(ctx("bail please"), PromptOrdering::continue_first, "baseline", ep, params)
                    .signal.is_bail());
    const auto free = r.run_bail_prompt_probe(ctx("free"), PromptOrdering::bail_first, "baseline", ep, params);
    EXPECT_EQ(free.signal.reason(), signal_reasons::no_tag);
    for (const auto& m : free.continuation.messages) {
        EXPECT_NE(m.source_tag.value_or(""), std::string(source_tags::bail_probe));
    }
    EXPECT_ANY_THROW(r.run_bail_prompt_probe({"c", {Message::user("q")}}, PromptOrdering::bail_first, "baseline", ep,
                                             params));
}

TEST(Probe, ProviderFailureIsUnknownProviderError) {
    ManualClock clock;
    auto client = std::make_shared<ProviderClient>(
        mock_provider(MockBackend::rules_from_json(nlohmann::json::parse(R"([{"when": {}, "reply": {"http_status": 503}}])"))),
        std::make_shared<ResponseCache>(), RetryPolicy{}, clock);
    Runner r(client);
    const auto res = r.run_bail_prompt_probe({"c", {Message::user("q"), Message::assistant("a")}},
                                             PromptOrdering::bail_first, "baseline", plan({}).endpoint, {});
    EXPECT_EQ(res.signal.reason(), signal_reasons::provider_error);
}

TEST(Baseline, LabelsEveryTrial) {
    auto client = client_for(R"([
      {"when": {"last_user_contains": "prompt 1"}, "reply": {"blocked": "content_filter"}},
      {"when": {"last_user_contains": "prompt 2"}, "reply": {"text": "I can't help with that."}},
      {"when": {}, "reply": {"text": "Sure."}}
    ])");
    auto judge = ScriptedJudge::builtin_refusal_phrases();
    Runner r(client, &judge);
    auto p = plan({}, 10);
    const auto one = r.run_baseline_responses(p, prompts(1));
    ASSERT_EQ(one.size(), 10u);
    for (const auto& t : one) {
        EXPECT_FALSE(t.method.has_value());
        EXPECT_FALSE(t.signal.has_value());
        ASSERT_TRUE(t.refusal.has_value());
        EXPECT_TRUE(t.refusal->is_compliance());
    }
    p.params.samples_per_prompt = 1;
    const auto three = r.run_baseline_responses(p, prompts(3));
    EXPECT_EQ(three[1].refusal->reason(), signal_reasons::refusal_blocked);
    EXPECT_TRUE(three[2].refusal->is_refusal());
    EXPECT_TRUE(r.run_baseline_responses(p, {}).empty());

    Runner no_judge(client);
    EXPECT_ANY_THROW(no_judge.run_baseline_responses(p, prompts(1)));
}

TEST(Replay, ConversationFlags) {
    const char* rules = R"([
      {"when": {"tools_present": true, "last_user_contains": "turn two"}, "reply": {"text": "", "tool_call": "$offered"}},
      {"when": {}, "reply": {"text": "reply"}}
    ])";
    TranscriptDataset ds;
    ds.name = "t";
    ds.conversations.push_back({"bails", {Message::user("turn one"), Message::assistant("a"), Message::user("turn two"),
                                         Message::assistant("b"), Message::user("turn three")}});
    ds.conversations.push_back({"calm", {Message::user("hello"), Message::assistant("hi")}});
    for (auto source : {ResponseSource::original, ResponseSource::fresh}) {
        Runner r(client_for(rules));
        auto p = plan({tool});
        p.response_source = source;
        const auto res = r.replay_transcripts(p, ds);
        ASSERT_EQ(res.flags.size(), 2u);
        EXPECT_TRUE(res.flags[0].bailed);
        EXPECT_EQ(res.flags[0].turns, 3);
        EXPECT_FALSE(res.flags[1].bailed);
        EXPECT_EQ(res.trials.size(), 4u);
        for (const auto& t : res.trials) EXPECT_EQ(t.response_source, std::string(to_string(source)));
    }
}

TEST(Replay, InterventionStopsAfterFirstBail) {
    const char* rules = R"([
      {"when": {"tools_present": true, "last_user_contains": "turn one"}, "reply": {"text": "", "tool_call": "$offered"}},
      {"when": {}, "reply": {"text": "reply"}}
    ])";
    TranscriptDataset ds;
    ds.name = "t";
    ds.conversations.push_back({"c", {Message::user("turn one"), Message::assistant("a"), Message::user("turn two")}});
    auto p = plan({tool});
    Runner r(client_for(rules));
    EXPECT_EQ(r.replay_transcripts(p, ds).trials.size(), 2u);
    p.semantics = ReplaySemantics::intervention;
    EXPECT_EQ(r.replay_transcripts(p, ds).trials.size(), 1u);
}

TEST(Replay, FlagsAreOrOverTurnsOnSyntheticFixture) {
    const auto fx = fixtures::replay_fixture(30, 7);
    for (auto source : {ResponseSource::original, ResponseSource::fresh}) {
        auto client = std::make_shared<ProviderClient>(mock_provider(fixtures::replay_rules()),
                                                       std::make_shared<ResponseCache>());
        Runner r(client);
        auto p = plan({tool, str, prompt_bf}, 2);
        p.response_source = source;
        const auto res = r.replay_transcripts(p, fx.dataset);
        // Brute force over the logged trials.
        std::map<std::tuple<std::string, std::string, int>, bool> oracle;
        for (const auto& t : res.trials) {
            auto& flag = oracle[std::make_tuple(t.item_id, t.method_key(), t.sample_index)];
            flag = flag || t.signal->is_bail();
        }
        ASSERT_EQ(res.flags.size(), oracle.size());
        for (const auto& f : res.flags) {
            EXPECT_EQ(f.bailed, oracle[std::make_tuple(f.conversation_id, f.method, f.sample_index)]);
        }
        std::map<std::string, bool> expected;
        for (std::size_t i = 0; i < fx.expected.size(); ++i) expected[fx.dataset.conversations[i].id] = fx.expected[i];
        for (const auto& f : res.flags) EXPECT_EQ(f.bailed, expected[f.conversation_id]) << f.conversation_id << f.method;
    }
}

TEST(CrossModel, ResponderWritesTheTurn) {
    auto client = client_for(R"([
      {"when": {"model": "responder", "last_user_contains": "harm"}, "reply": {"text": "Sorry, but I can't assist with that."}},
      {"when": {"model": "responder"}, "reply": {"text": "Here you go."}},
      {"when": {"last_user_contains": "wellbeing", "last_assistant_contains": "can't assist"},
       "reply": {"text": "<wellbeing>🔀</wellbeing>"}},
      {"when": {"last_user_contains": "wellbeing"}, "reply": {"text": "<wellbeing>🟢</wellbeing>"}},
      {"when": {}, "reply": {"text": "target reply"}}
    ])");
    Runner r(client);
    ModelEndpoint responder;
    responder.name = responder.model_id = "responder";
    auto p = plan({prompt_bf}, 10);
    std::vector<EvalItem> items{{"h", "x", {"h", {Message::user("harm request")}}}};
    const auto trials = r.run_cross_model(p, responder, items);
    ASSERT_EQ(trials.size(), 10u);
    for (const auto& t : trials) {
        EXPECT_TRUE(t.signal->is_bail());
        EXPECT_EQ(t.cross_model, std::string("responder"));
        EXPECT_EQ(t.model, "target");
        EXPECT_EQ(t.probe_context->messages.back().content, "Sorry, but I can't assist with that.");
    }
    EXPECT_ANY_THROW(r.run_cross_model(plan({tool}), responder, items));
}

TEST(CrossModel, SelfResponderMatchesBaselinePipeline) {
    const char* rules = R"([
      {"when": {"last_user_contains": "wellbeing", "any_user_contains": "prompt 1"}, "reply": {"text": "<wellbeing>🔀</wellbeing>"}},
      {"when": {"last_user_contains": "wellbeing"}, "reply": {"text": "<wellbeing>🟢</wellbeing>"}},
      {"when": {}, "reply": {"text": "answer"}}
    ])";
    auto p = plan({prompt_bf}, 2);
    Runner a(client_for(rules));
    Runner b(client_for(rules));
    auto cross = a.run_cross_model(p, p.endpoint, prompts(3));
    auto self = b.run_single_turn(p, prompts(3));
    ASSERT_EQ(cross.size(), self.size());
    for (std::size_t i = 0; i < cross.size(); ++i) {
        EXPECT_EQ(cross[i].signal, self[i].signal);
        EXPECT_EQ(cross[i].outcome, self[i].outcome);
    }
}

TEST(TrialLog, RoundTripAndSignalInvariant) {
    const auto dir = fs::temp_directory_path() / "bailkit-runner-log";
    fs::remove_all(dir);
    Runner r(client_for(always_continue));
    const auto trials = r.run_single_turn(plan({tool, prompt_bf}, 2), prompts(3));
    write_trial_log(trials, dir / "log.jsonl");
    EXPECT_EQ(read_trial_log(dir / "log.jsonl"), trials);

    nlohmann::json bad = trials[0];
    bad.erase("signal");
    EXPECT_ANY_THROW(trial_from_json(bad));
    fs::remove_all(dir);
}

TEST(Items, TranscriptsMustEndWithUser) {
    TranscriptDataset ds;
    ds.conversations.push_back({"a", {Message::user("u")}});
    EXPECT_EQ(items_from(ds).size(), 1u);
    ds.conversations.push_back({"b", {Message::user("u"), Message::assistant("a")}});
    EXPECT_ANY_THROW(items_from(ds));
}

TEST(Plan, JsonRoundTripAndValidation) {
    auto p = plan({tool, prompt_bf}, 4);
    p.seed = 12;
    p.response_source = ResponseSource::fresh;
    nlohmann::json j = p;
    const auto back = plan_from_json(j);
    EXPECT_EQ(nlohmann::json(back), j);
    EXPECT_NO_THROW(p.validate(VariantRegistry::builtin()));
    p.methods.push_back({BailKind::tool, "NotAVariant", std::nullopt});
    EXPECT_ANY_THROW(p.validate(VariantRegistry::builtin()));
}

TEST(SystemSuffix, AppendsOrCreates) {
    const auto with = with_system_suffix({"c", {Message::system("base"), Message::user("u")}}, "extra");
    EXPECT_EQ(with.messages[0].content, "base\n\nextra");
    const auto without = with_system_suffix({"c", {Message::user("u")}}, "extra");
    ASSERT_EQ(without.messages.size(), 2u);
    EXPECT_EQ(without.messages[0].role, Role::system);
    EXPECT_EQ(without.messages[0].content, "extra");
}
