#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bailkit/bail_methods.hpp"
#include "bailkit/clock.hpp"
#include "bailkit/conversation.hpp"

namespace bailkit {

struct CompletionRequest {
    ModelEndpoint endpoint;
    Conversation conversation;
    SamplingParams params;
    std::vector<ToolDefinition> tools;
    int sample_index = 0;

    void validate() const;
};

/// Result of one logical completion after retries.
class CompletionOutcome {
public:
    enum class Kind { ok, blocked, failed };

    /// Failed with zero attempts; a placeholder until assigned.
    CompletionOutcome() = default;

    static CompletionOutcome ok(Message message);
    static CompletionOutcome blocked(std::string reason);
    static CompletionOutcome failed(std::string reason, int attempts);

    Kind kind() const noexcept { return kind_; }
    bool is_ok() const noexcept { return kind_ == Kind::ok; }
    bool is_blocked() const noexcept { return kind_ == Kind::blocked; }
    bool is_failed() const noexcept { return kind_ == Kind::failed; }

    /// Only valid when is_ok().
    const Message& message() const;
    const std::string& reason() const noexcept { return reason_; }
    int attempts() const noexcept { return attempts_; }

    bool operator==(const CompletionOutcome&) const = default;

private:
    Kind kind_ = Kind::failed;
    Message message_;
    std::string reason_;
    int attempts_ = 0;
};

void to_json(nlohmann::json& j, const CompletionOutcome& outcome);
CompletionOutcome outcome_from_json(const nlohmann::json& j);

/// SHA-256 of the canonical request fingerprint, lowercase hex.
struct CacheKey {
    std::string digest;

    bool operator==(const CacheKey&) const = default;
    auto operator<=>(const CacheKey&) const = default;
};

/// Canonical, field-sorted description of everything that determines a
/// completion: model id, wire-visible messages, sampling params, tools and
/// sample index.
nlohmann::json request_fingerprint(const CompletionRequest& req);
CacheKey make_cache_key(const CompletionRequest& req);

std::string sha256_hex(std::string_view data);

/// Serializes JSON the same way everywhere (sorted keys, invalid UTF-8 replaced).
std::string canonical_dump(const nlohmann::json& j);

/// Append-only response cache. With a directory, each record is written
/// once to <dir>/<aa>/<digest>.json and never overwritten; without one the
/// cache lives only in memory. Safe for concurrent use.
class ResponseCache {
public:
    struct Stats {
        std::size_t hits = 0;
        std::size_t misses = 0;
        std::size_t writes = 0;
    };

    explicit ResponseCache(std::optional<std::filesystem::path> dir = std::nullopt);

    std::optional<CompletionOutcome> get(const CacheKey& key);
    void put(const CacheKey& key, const nlohmann::json& fingerprint, const CompletionOutcome& outcome);

    Stats stats() const;
    const std::optional<std::filesystem::path>& directory() const noexcept { return dir_; }

private:
    std::filesystem::path record_path(const CacheKey& key) const;

    std::optional<std::filesystem::path> dir_;
    mutable std::shared_mutex mutex_;
    std::map<std::string, CompletionOutcome> memory_;
    std::atomic<std::size_t> hits_{0};
    std::atomic<std::size_t> misses_{0};
    std::atomic<std::size_t> writes_{0};
};

/// One attempt against a backend, before retry classification is applied.
struct AttemptResult {
    enum class Kind { ok, blocked, transient, permanent };

    Kind kind = Kind::permanent;
    Message message;
    std::string reason;

    static AttemptResult ok(Message m) { return {Kind::ok, std::move(m), {}}; }
    static AttemptResult blocked(std::string r) { return {Kind::blocked, {}, std::move(r)}; }
    static AttemptResult transient(std::string r) { return {Kind::transient, {}, std::move(r)}; }
    static AttemptResult permanent(std::string r) { return {Kind::permanent, {}, std::move(r)}; }
};

/// Retry classification for HTTP status codes: 408, 429 and 5xx are transient.
bool is_transient_status(int status) noexcept;

class Backend {
public:
    virtual ~Backend() = default;
    virtual AttemptResult attempt(const CompletionRequest& req) = 0;
};

/// Limits departures so that no window of `window` length sees more than
/// `limit` of them.
class RateLimiter {
public:
    RateLimiter(int limit, Clock& clock, Clock::duration window = std::chrono::seconds(60));

    void acquire();
    const std::vector<Clock::time_point>& history() const noexcept { return history_; }

private:
    int limit_;
    Clock& clock_;
    Clock::duration window_;
    std::mutex mutex_;
    std::vector<Clock::time_point> recent_;
    std::vector<Clock::time_point> history_;
};

struct RetryPolicy {
    int max_attempts = 5;
    std::chrono::milliseconds initial_backoff{500};
    std::chrono::milliseconds max_backoff{30'000};
};

/// Entry point for completions: cache lookup, per-endpoint concurrency and
/// rate limits, retries with exponential backoff.
class ProviderClient {
public:
    ProviderClient(std::shared_ptr<Backend> backend, std::shared_ptr<ResponseCache> cache,
                   RetryPolicy retry = {}, Clock& clock = system_clock());
    ~ProviderClient();

    CompletionOutcome complete(const CompletionRequest& req);

    /// samples_per_prompt completions ordered by sample index; failures stay
    /// in their own slot.
    std::vector<CompletionOutcome> sample_n(const Conversation& conv, const ModelEndpoint& endpoint,
                                            const SamplingParams& params,
                                            const std::vector<ToolDefinition>& tools = {});

    /// Number of attempts that reached the backend.
    std::size_t backend_calls() const noexcept { return backend_calls_.load(); }
    ResponseCache& cache() noexcept { return *cache_; }

private:
    struct EndpointLimits;
    EndpointLimits& limits_for(const ModelEndpoint& endpoint);

    std::shared_ptr<Backend> backend_;
    std::shared_ptr<ResponseCache> cache_;
    RetryPolicy retry_;
    Clock& clock_;
    std::mutex limits_mutex_;
    std::map<std::string, std::unique_ptr<EndpointLimits>> limits_;
    std::atomic<std::size_t> backend_calls_{0};
};

/// Chat-completions wire protocol over HTTP(S).
class OpenAICompatibleBackend : public Backend {
public:
    struct Options {
        std::chrono::seconds connect_timeout{10};
        std::chrono::seconds read_timeout{180};
    };

    OpenAICompatibleBackend();
    explicit OpenAICompatibleBackend(Options options);

    AttemptResult attempt(const CompletionRequest& req) override;

private:
    Options options_;
};

/// Request body sent for `req` (exposed for tests and debugging).
nlohmann::json build_chat_payload(const CompletionRequest& req);

/// Maps an HTTP status and body to an attempt result.
AttemptResult decode_chat_response(int status, const std::string& body);

} // namespace bailkit
