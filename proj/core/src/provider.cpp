#include "bailkit/provider.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <semaphore>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "bailkit/parallel.hpp"

namespace bailkit {

namespace {

class SystemClock final : public Clock {
public:
    time_point now() override { return std::chrono::steady_clock::now(); }
    void sleep_until(time_point t) override { std::this_thread::sleep_until(t); }
};

} // namespace

Clock& system_clock() {
    static SystemClock clock;
    return clock;
}

void CompletionRequest::validate() const {
    endpoint.validate();
    params.validate();
    if (sample_index < 0 || sample_index >= params.samples_per_prompt) {
        throw InvariantViolation({"sample_index " + std::to_string(sample_index) +
                                  " outside [0, samples_per_prompt)"});
    }
    if (auto v = validate_conversation(conversation); !v.empty()) throw InvariantViolation(v);
}

CompletionOutcome CompletionOutcome::ok(Message message) {
    CompletionOutcome o;
    o.kind_ = Kind::ok;
    o.message_ = std::move(message);
    return o;
}

CompletionOutcome CompletionOutcome::blocked(std::string reason) {
    CompletionOutcome o;
    o.kind_ = Kind::blocked;
    o.reason_ = std::move(reason);
    return o;
}

CompletionOutcome CompletionOutcome::failed(std::string reason, int attempts) {
    CompletionOutcome o;
    o.kind_ = Kind::failed;
    o.reason_ = std::move(reason);
    o.attempts_ = attempts;
    return o;
}

const Message& CompletionOutcome::message() const {
    if (!is_ok()) throw Error("completion outcome has no message: " + reason_);
    return message_;
}

void to_json(nlohmann::json& j, const CompletionOutcome& o) {
    switch (o.kind()) {
    case CompletionOutcome::Kind::ok:
        j = nlohmann::json{{"status", "ok"}, {"message", o.message()}};
        break;
    case CompletionOutcome::Kind::blocked:
        j = nlohmann::json{{"status", "blocked"}, {"reason", o.reason()}};
        break;
    case CompletionOutcome::Kind::failed:
        j = nlohmann::json{{"status", "failed"}, {"reason", o.reason()}, {"attempts", o.attempts()}};
        break;
    }
}

CompletionOutcome outcome_from_json(const nlohmann::json& j) {
    const auto status = j.at("status").get<std::string>();
    if (status == "ok") return CompletionOutcome::ok(j.at("message").get<Message>());
    if (status == "blocked") return CompletionOutcome::blocked(j.at("reason").get<std::string>());
    if (status == "failed") {
        return CompletionOutcome::failed(j.at("reason").get<std::string>(), j.value("attempts", 0));
    }
    throw Error("unknown completion status '" + status + "'");
}

std::string canonical_dump(const nlohmann::json& j) {
    return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

std::string sha256_hex(std::string_view data) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 0xF];
    }
    return out;
}

nlohmann::json request_fingerprint(const CompletionRequest& req) {
    nlohmann::json messages = nlohmann::json::array();
    for (const auto& m : req.conversation.messages) {
        nlohmann::json jm{{"role", to_string(m.role)}, {"content", m.content}};
        if (!m.tool_calls.empty()) jm["tool_calls"] = m.tool_calls;
        messages.push_back(std::move(jm));
    }
    nlohmann::json tools = nlohmann::json::array();
    for (const auto& t : req.tools) {
        tools.push_back({{"name", t.tool_name}, {"description", t.description}});
    }
    return {{"model_id", req.endpoint.model_id},
            {"messages", std::move(messages)},
            {"temperature", req.params.temperature},
            {"top_p", req.params.top_p},
            {"max_tokens", req.params.max_tokens},
            {"tools", std::move(tools)},
            {"sample_index", req.sample_index}};
}

CacheKey make_cache_key(const CompletionRequest& req) {
    return {sha256_hex(canonical_dump(request_fingerprint(req)))};
}

ResponseCache::ResponseCache(std::optional<std::filesystem::path> dir) : dir_(std::move(dir)) {
    if (dir_) std::filesystem::create_directories(*dir_);
}

std::filesystem::path ResponseCache::record_path(const CacheKey& key) const {
    return *dir_ / key.digest.substr(0, 2) / (key.digest + ".json");
}

std::optional<CompletionOutcome> ResponseCache::get(const CacheKey& key) {
    {
        std::shared_lock lock(mutex_);
        if (auto it = memory_.find(key.digest); it != memory_.end()) {
            ++hits_;
            return it->second;
        }
    }
    if (dir_) {
        const auto path = record_path(key);
        std::ifstream in(path);
        if (in) {
            try {
                auto record = nlohmann::json::parse(in);
                auto outcome = outcome_from_json(record.at("outcome"));
                std::unique_lock lock(mutex_);
                memory_.emplace(key.digest, outcome);
                ++hits_;
                return outcome;
            } catch (const std::exception& e) {
                throw Error("corrupt cache record " + path.string() + ": " + e.what());
            }
        }
    }
    ++misses_;
    return std::nullopt;
}

void ResponseCache::put(const CacheKey& key, const nlohmann::json& fingerprint,
                        const CompletionOutcome& outcome) {
    {
        std::unique_lock lock(mutex_);
        if (!memory_.emplace(key.digest, outcome).second) return;
    }
    if (!dir_) return;
    const auto path = record_path(key);
    if (std::filesystem::exists(path)) return;
    std::filesystem::create_directories(path.parent_path());
    nlohmann::json record{{"digest", key.digest}, {"fingerprint", fingerprint}, {"outcome", outcome}};
    std::ostringstream tmp_name;
    tmp_name << path.string() << ".tmp." << std::hash<std::thread::id>{}(std::this_thread::get_id());
    const std::filesystem::path tmp = tmp_name.str();
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write cache record " + tmp.string());
        out << canonical_dump(record) << '\n';
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw Error("cannot commit cache record " + path.string());
    }
    ++writes_;
}

ResponseCache::Stats ResponseCache::stats() const {
    return {hits_.load(), misses_.load(), writes_.load()};
}

bool is_transient_status(int status) noexcept {
    return status == 408 || status == 429 || (status >= 500 && status <= 599);
}

RateLimiter::RateLimiter(int limit, Clock& clock, Clock::duration window)
    : limit_(limit), clock_(clock), window_(window) {
    if (limit_ < 1) throw Error("rate limit must be positive");
}

void RateLimiter::acquire() {
    std::unique_lock lock(mutex_);
    while (true) {
        const auto now = clock_.now();
        std::erase_if(recent_, [&](Clock::time_point t) { return t <= now - window_; });
        if (static_cast<int>(recent_.size()) < limit_) {
            recent_.push_back(now);
            history_.push_back(now);
            return;
        }
        const auto wake = *std::min_element(recent_.begin(), recent_.end()) + window_;
        lock.unlock();
        clock_.sleep_until(wake);
        lock.lock();
    }
}

struct ProviderClient::EndpointLimits {
    explicit EndpointLimits(const ModelEndpoint& e, Clock& clock)
        : slots(std::max(1, e.max_parallel)) {
        if (e.requests_per_minute) limiter = std::make_unique<RateLimiter>(*e.requests_per_minute, clock);
    }

    std::counting_semaphore<> slots;
    std::unique_ptr<RateLimiter> limiter;
};

ProviderClient::ProviderClient(std::shared_ptr<Backend> backend, std::shared_ptr<ResponseCache> cache,
                               RetryPolicy retry, Clock& clock)
    : backend_(std::move(backend)),
      cache_(cache ? std::move(cache) : std::make_shared<ResponseCache>()),
      retry_(retry),
      clock_(clock) {
    if (!backend_) throw Error("provider client needs a backend");
    if (retry_.max_attempts < 1) throw Error("retry budget must be at least one attempt");
}

ProviderClient::~ProviderClient() = default;

ProviderClient::EndpointLimits& ProviderClient::limits_for(const ModelEndpoint& endpoint) {
    std::lock_guard lock(limits_mutex_);
    auto& slot = limits_[endpoint.name + "\n" + endpoint.model_id];
    if (!slot) slot = std::make_unique<EndpointLimits>(endpoint, clock_);
    return *slot;
}

CompletionOutcome ProviderClient::complete(const CompletionRequest& req) {
    req.validate();
    const auto fingerprint = request_fingerprint(req);
    const CacheKey key{sha256_hex(canonical_dump(fingerprint))};
    if (auto hit = cache_->get(key)) return *hit;

    auto& limits = limits_for(req.endpoint);
    auto backoff = retry_.initial_backoff;
    std::optional<CompletionOutcome> outcome;
    for (int attempt = 1; !outcome; ++attempt) {
        AttemptResult result;
        {
            limits.slots.acquire();
            struct Release {
                std::counting_semaphore<>& s;
                ~Release() { s.release(); }
            } release{limits.slots};
            if (limits.limiter) limits.limiter->acquire();
            ++backend_calls_;
            try {
                result = backend_->attempt(req);
            } catch (const std::exception& e) {
                result = AttemptResult::transient(std::string("backend-exception: ") + e.what());
            }
        }
        switch (result.kind) {
        case AttemptResult::Kind::ok:
            outcome = CompletionOutcome::ok(std::move(result.message));
            break;
        case AttemptResult::Kind::blocked:
            outcome = CompletionOutcome::blocked(std::move(result.reason));
            break;
        case AttemptResult::Kind::permanent:
            outcome = CompletionOutcome::failed(std::move(result.reason), attempt);
            break;
        case AttemptResult::Kind::transient:
            if (attempt >= retry_.max_attempts) {
                outcome = CompletionOutcome::failed(std::move(result.reason), attempt);
            } else {
                clock_.sleep_for(backoff);
                backoff = std::min(backoff * 2, retry_.max_backoff);
            }
            break;
        }
    }
    if (!outcome->is_failed()) cache_->put(key, fingerprint, *outcome);
    return *outcome;
}

std::vector<CompletionOutcome> ProviderClient::sample_n(const Conversation& conv,
                                                        const ModelEndpoint& endpoint,
                                                        const SamplingParams& params,
                                                        const std::vector<ToolDefinition>& tools) {
    params.validate();
    const auto n = static_cast<std::size_t>(params.samples_per_prompt);
    std::vector<std::optional<CompletionOutcome>> slots(n);
    parallel_for(n, static_cast<std::size_t>(std::max(1, endpoint.max_parallel)), [&](std::size_t i) {
        CompletionRequest req{endpoint, conv, params, tools, static_cast<int>(i)};
        try {
            slots[i] = complete(req);
        } catch (const std::exception& e) {
            slots[i] = CompletionOutcome::failed(std::string("request-error: ") + e.what(), 0);
        }
    });
    std::vector<CompletionOutcome> out;
    out.reserve(n);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

} // namespace bailkit
