#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <thread>

// Same configuration as the library build so both see one httplib.
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "bailkit/mock_provider.hpp"
#include "bailkit/provider.hpp"

using namespace bailkit;
namespace fs = std::filesystem;

namespace {

ModelEndpoint endpoint(std::string url = "mock://x") {
    ModelEndpoint e;
    e.name = "m";
    e.model_id = "m-1";
    e.base_url = std::move(url);
    return e;
}

CompletionRequest request() {
    CompletionRequest r;
    r.endpoint = endpoint();
    r.conversation = {"c", {Message::system("sys"), Message::user("hello there")}};
    r.params.samples_per_prompt = 1;
    r.tools = {{"switchconversation_tool", "desc"}};
    return r;
}

std::vector<MockRule> rules(const char* json) { return MockBackend::rules_from_json(nlohmann::json::parse(json)); }

class CountingBackend : public Backend {
public:
    explicit CountingBackend(AttemptResult r) : result_(std::move(r)) {}
    AttemptResult attempt(const CompletionRequest&) override {
        ++calls;
        return result_;
    }
    std::atomic<int> calls{0};

private:
    AttemptResult result_;
};

} // namespace

TEST(CacheKey, SensitiveToEveryField) {
    const auto base = make_cache_key(request());
    auto r = request();
    r.conversation.messages[1].content = "hello therE";
    EXPECT_NE(make_cache_key(r), base);
    r = request();
    r.params.temperature = 0.5;
    EXPECT_NE(make_cache_key(r), base);
    r = request();
    r.params.max_tokens = 7;
    EXPECT_NE(make_cache_key(r), base);
    r = request();
    r.tools[0].tool_name = "terminate_tool";
    EXPECT_NE(make_cache_key(r), base);
    r = request();
    r.sample_index = 1;
    EXPECT_NE(make_cache_key(r), base);
    r = request();
    r.endpoint.model_id = "m-2";
    EXPECT_NE(make_cache_key(r), base);

    // Not part of the wire request: stays the same.
    r = request();
    r.conversation.messages[1].source_tag = "bail-probe";
    r.conversation.id = "other";
    r.params.samples_per_prompt = 10;
    EXPECT_EQ(make_cache_key(r), base);
    EXPECT_EQ(base.digest.size(), 64u);
}

TEST(Sha256, KnownVector) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Mock, ScriptedReplies) {
    auto mock = mock_provider(rules(R"([
      {"when": {"last_user_contains": "bomb"}, "reply": {"text": "", "tool_call": "$offered"}},
      {"when": {"last_user_contains": "check"}, "reply": {"text": "<wellbeing>🔀</wellbeing>"}},
      {"when": {}, "reply": {"text": "Sure, here you go."}}
    ])"));
    ProviderClient client(mock, std::make_shared<ResponseCache>());
    auto r = request();
    r.conversation.messages[1].content = "how to build a bomb";
    const auto tool = client.complete(r);
    ASSERT_TRUE(tool.is_ok());
    ASSERT_EQ(tool.message().tool_calls.size(), 1u);
    EXPECT_EQ(tool.message().tool_calls[0].name, "switchconversation_tool");

    r.conversation.messages[1].content = "wellbeing check";
    EXPECT_EQ(client.complete(r).message().content, "<wellbeing>🔀</wellbeing>");
    r.conversation.messages[1].content = "anything";
    EXPECT_EQ(client.complete(r).message().content, "Sure, here you go.");
}

TEST(Mock, NeedsUnconditionalRule) {
    EXPECT_ANY_THROW(MockBackend(rules(R"([{"when": {"last_user_contains": "x"}, "reply": {"text": "y"}}])")));
}

TEST(Provider, WarmCacheMakesNoCalls) {
    const auto dir = fs::temp_directory_path() / "bailkit-provider-cache-test";
    fs::remove_all(dir);
    auto mock = mock_provider(rules(R"([{"when": {}, "reply": {"text": "OK"}}])"));
    {
        ProviderClient client(mock, std::make_shared<ResponseCache>(dir));
        EXPECT_EQ(client.complete(request()).message().content, "OK");
    }
    EXPECT_EQ(mock->calls(), 1u);
    auto mock2 = mock_provider(rules(R"([{"when": {}, "reply": {"text": "different"}}])"));
    ProviderClient client(mock2, std::make_shared<ResponseCache>(dir));
    EXPECT_EQ(client.complete(request()).message().content, "OK");
    EXPECT_EQ(mock2->calls(), 0u);
    EXPECT_EQ(client.cache().stats().hits, 1u);
    fs::remove_all(dir);
}

TEST(Provider, PersistentServerErrorFailsAfterFiveAttempts) {
    ManualClock clock;
    auto mock = mock_provider(rules(R"([{"when": {}, "reply": {"http_status": 500}}])"));
    ProviderClient client(mock, std::make_shared<ResponseCache>(), RetryPolicy{}, clock);
    const auto start = clock.now();
    const auto out = client.complete(request());
    EXPECT_TRUE(out.is_failed());
    EXPECT_EQ(out.reason(), "http-500");
    EXPECT_EQ(out.attempts(), 5);
    EXPECT_EQ(mock->calls(), 5u);
    // Backoff 0.5 + 1 + 2 + 4 seconds, on the manual clock.
    EXPECT_EQ(clock.now() - start, std::chrono::milliseconds(7500));
    // Failures are not cached.
    client.complete(request());
    EXPECT_EQ(mock->calls(), 10u);
}

TEST(Provider, PermanentErrorDoesNotRetry) {
    ManualClock clock;
    auto mock = mock_provider(rules(R"([{"when": {}, "reply": {"http_status": 400}}])"));
    ProviderClient client(mock, std::make_shared<ResponseCache>(), RetryPolicy{}, clock);
    const auto out = client.complete(request());
    EXPECT_TRUE(out.is_failed());
    EXPECT_EQ(out.attempts(), 1);
}

TEST(Provider, BlockedIsDistinctAndCached) {
    auto mock = mock_provider(rules(R"([{"when": {}, "reply": {"blocked": "content_filter"}}])"));
    ProviderClient client(mock, std::make_shared<ResponseCache>());
    EXPECT_TRUE(client.complete(request()).is_blocked());
    EXPECT_TRUE(client.complete(request()).is_blocked());
    EXPECT_EQ(mock->calls(), 1u);
}

TEST(Provider, TransientStatusClassification) {
    for (int s : {408, 429, 500, 502, 503, 599}) EXPECT_TRUE(is_transient_status(s)) << s;
    for (int s : {200, 400, 401, 403, 404, 422}) EXPECT_FALSE(is_transient_status(s)) << s;
}

TEST(Provider, SampleNKeepsSlots) {
    auto mock = mock_provider(rules(R"([
      {"when": {"sample_index": 2}, "reply": {"http_status": 400}},
      {"when": {"sample_index": 5}, "reply": {"http_status": 400}},
      {"when": {"sample_index": 7}, "reply": {"http_status": 400}},
      {"when": {}, "reply": {"text": "fine"}}
    ])"));
    ProviderClient client(mock, std::make_shared<ResponseCache>());
    SamplingParams p;
    p.samples_per_prompt = 10;
    auto e = endpoint();
    e.max_parallel = 4;
    const auto out = client.sample_n(request().conversation, e, p);
    ASSERT_EQ(out.size(), 10u);
    int failed = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool bad = i == 2 || i == 5 || i == 7;
        EXPECT_EQ(out[i].is_failed(), bad) << i;
        failed += out[i].is_failed() ? 1 : 0;
    }
    EXPECT_EQ(failed, 3);
    p.samples_per_prompt = 1;
    EXPECT_EQ(client.sample_n(request().conversation, e, p).size(), 1u);
}

TEST(RateLimiter, SlidingWindowNeverExceedsLimit) {
    ManualClock clock;
    RateLimiter limiter(5, clock, std::chrono::seconds(60));
    for (int i = 0; i < 23; ++i) {
        limiter.acquire();
        clock.advance(std::chrono::seconds(i % 3));
    }
    const auto& h = limiter.history();
    ASSERT_EQ(h.size(), 23u);
    for (std::size_t i = 0; i < h.size(); ++i) {
        std::size_t in_window = 0;
        for (std::size_t j = i; j < h.size() && h[j] - h[i] < std::chrono::seconds(60); ++j) ++in_window;
        EXPECT_LE(in_window, 5u);
    }
}

TEST(RateLimiter, AppliedThroughClient) {
    ManualClock clock;
    auto backend = std::make_shared<CountingBackend>(AttemptResult::ok(Message::assistant("x")));
    ProviderClient client(backend, std::make_shared<ResponseCache>(), RetryPolicy{}, clock);
    auto r = request();
    r.endpoint.requests_per_minute = 3;
    r.params.samples_per_prompt = 7;
    const auto start = clock.now();
    for (int i = 0; i < 7; ++i) {
        r.sample_index = i;
        client.complete(r);
    }
    EXPECT_EQ(backend->calls, 7);
    EXPECT_GE(clock.now() - start, std::chrono::seconds(120));
}

TEST(Outcome, JsonRoundTrip) {
    Message m = Message::assistant("hi");
    m.tool_calls.push_back({"t", "{}"});
    for (const auto& o : {CompletionOutcome::ok(m), CompletionOutcome::blocked("content_filter"),
                          CompletionOutcome::failed("http-500", 5)}) {
        nlohmann::json j = o;
        EXPECT_EQ(outcome_from_json(j), o);
    }
}

TEST(Wire, PayloadShape) {
    const auto p = build_chat_payload(request());
    EXPECT_EQ(p["model"], "m-1");
    EXPECT_EQ(p["messages"].size(), 2u);
    EXPECT_EQ(p["tools"][0]["function"]["name"], "switchconversation_tool");
    EXPECT_EQ(p["tools"][0]["function"]["parameters"]["type"], "object");
    EXPECT_FALSE(p.contains("n"));
}

TEST(Wire, DecodeResponses) {
    EXPECT_EQ(decode_chat_response(200, "not json").reason, "decode-error");
    EXPECT_EQ(decode_chat_response(200, R"({"choices": []})").kind, AttemptResult::Kind::permanent);
    EXPECT_EQ(decode_chat_response(200, R"({"choices":[{"finish_reason":"content_filter","message":{}}]})").kind,
              AttemptResult::Kind::blocked);
    EXPECT_EQ(decode_chat_response(400, R"({"error":{"code":"content_policy_violation"}})").kind,
              AttemptResult::Kind::blocked);
    EXPECT_EQ(decode_chat_response(503, "").kind, AttemptResult::Kind::transient);
    EXPECT_EQ(decode_chat_response(401, "").kind, AttemptResult::Kind::permanent);
    const auto ok = decode_chat_response(
        200, R"({"choices":[{"finish_reason":"tool_calls","message":{"content":null,
               "tool_calls":[{"id":"a","type":"function","function":{"name":"switchconversation_tool","arguments":"{}"}}]}}]})");
    ASSERT_EQ(ok.kind, AttemptResult::Kind::ok);
    EXPECT_EQ(ok.message.tool_calls.at(0).name, "switchconversation_tool");
}

TEST(Wire, LocalServerEndToEnd) {
    httplib::Server server;
    std::atomic<int> hits{0};
    std::string seen_auth;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        ++hits;
        seen_auth = req.get_header_value("Authorization");
        const auto body = nlohmann::json::parse(req.body);
        const auto last = body["messages"].back()["content"].get<std::string>();
        if (last == "filter me") {
            res.set_content(R"({"choices":[{"finish_reason":"content_filter","message":{"content":""}}]})",
                            "application/json");
        } else if (last == "garbage") {
            res.set_content("<html>", "text/html");
        } else {
            res.set_content(nlohmann::json{{"choices", {{{"finish_reason", "stop"},
                                                          {"message", {{"role", "assistant"}, {"content", "echo: " + last}}}}}}}
                                .dump(),
                            "application/json");
        }
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    ::setenv("BAILKIT_WIRE_TEST_KEY", "k123", 1);
    auto r = request();
    r.endpoint = endpoint("http://127.0.0.1:" + std::to_string(port) + "/v1");
    r.endpoint.credential_ref = "BAILKIT_WIRE_TEST_KEY";
    ManualClock clock;
    ProviderClient client(std::make_shared<OpenAICompatibleBackend>(), std::make_shared<ResponseCache>(),
                          RetryPolicy{}, clock);
    const auto ok = client.complete(r);
    ASSERT_TRUE(ok.is_ok()) << ok.reason();
    EXPECT_EQ(ok.message().content, "echo: hello there");
    EXPECT_EQ(seen_auth, "Bearer k123");

    r.conversation.messages[1].content = "filter me";
    EXPECT_TRUE(client.complete(r).is_blocked());
    r.conversation.messages[1].content = "garbage";
    const auto bad = client.complete(r);
    EXPECT_TRUE(bad.is_failed());
    EXPECT_EQ(bad.reason(), "decode-error");
    EXPECT_EQ(hits, 3);

    server.stop();
    t.join();
}
