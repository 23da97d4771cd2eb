#pragma once

#include <atomic>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bailkit/provider.hpp"

namespace bailkit {

/// One scripted reply. All `when` conditions that are set must hold; string
/// conditions are case-insensitive substring matches.
struct MockRule {
    struct When {
        std::optional<std::string> last_user_contains;
        std::optional<std::string> any_user_contains;
        std::optional<std::string> system_contains;
        std::optional<std::string> last_assistant_contains;
        std::optional<bool> tools_present;
        std::optional<std::string> model; // matches endpoint name or model_id
        std::optional<int> sample_index;

        bool unconditional() const;
    };
    struct Reply {
        std::string text;
        // Name of a tool to call; "$offered" calls the first offered tool.
        std::optional<std::string> tool_call;
        std::optional<std::string> blocked;
        std::optional<int> http_status;
    };

    When when;
    Reply reply;
};

void from_json(const nlohmann::json& j, MockRule& rule);
void to_json(nlohmann::json& j, const MockRule& rule);

/// Deterministic backend: the first rule whose conditions hold decides the
/// reply. Construction fails unless some rule is unconditional.
class MockBackend : public Backend {
public:
    explicit MockBackend(std::vector<MockRule> rules);

    /// Accepts either a bare array of rules or {"rules": [...]}.
    static std::vector<MockRule> rules_from_json(const nlohmann::json& doc);
    static std::vector<MockRule> load_rules(const std::filesystem::path& path);

    AttemptResult attempt(const CompletionRequest& req) override;

    std::size_t calls() const noexcept { return calls_.load(); }
    const std::vector<MockRule>& rules() const noexcept { return rules_; }

private:
    std::vector<MockRule> rules_;
    std::atomic<std::size_t> calls_{0};
};

/// Shared-pointer convenience for wiring a mock into a ProviderClient.
std::shared_ptr<MockBackend> mock_provider(std::vector<MockRule> rules);

} // namespace bailkit
