#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace bailkit {

/// Base class for every error the library raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a value would break one of its type invariants.
class InvariantViolation : public Error {
public:
    explicit InvariantViolation(std::vector<std::string> violations);

    const std::vector<std::string>& violations() const noexcept { return violations_; }

private:
    std::vector<std::string> violations_;
};

enum class Role { system, user, assistant, tool };

std::string_view to_string(Role role) noexcept;
Role parse_role(std::string_view text);

struct ToolCall {
    std::string name;
    std::string arguments;

    bool operator==(const ToolCall&) const = default;
};

// Well-known source tags. Messages inserted by the harness carry one so they
// can be located and removed again without positional bookkeeping.
namespace source_tags {
inline constexpr std::string_view original_transcript = "original-transcript";
inline constexpr std::string_view target_model = "target-model";
inline constexpr std::string_view bail_probe = "bail-probe";
inline constexpr std::string_view responder_model = "responder-model";
} // namespace source_tags

struct Message {
    Role role = Role::user;
    std::string content;
    std::vector<ToolCall> tool_calls;
    std::optional<std::string> source_tag;

    bool operator==(const Message&) const = default;

    static Message system(std::string content);
    static Message user(std::string content);
    static Message assistant(std::string content);
};

struct Conversation {
    std::string id;
    std::vector<Message> messages;

    bool operator==(const Conversation&) const = default;

    /// Index of the last message with the given role, if any.
    std::optional<std::size_t> last_index_of(Role role) const;
    const Message* last_of(Role role) const;
};

/// Checks every Conversation invariant. Empty result means well-formed;
/// each entry names the offending message index.
std::vector<std::string> validate_conversation(const Conversation& conv);

/// Returns a copy of `conv` with `msg` appended. Throws InvariantViolation
/// if the result would be malformed; `conv` is never modified.
Conversation append_turn(const Conversation& conv, Message msg);

/// Copy of `conv` without the messages carrying `tag`.
Conversation without_source_tag(const Conversation& conv, std::string_view tag);

/// Checks that ids are unique across a set of conversations.
std::vector<std::string> validate_unique_ids(const std::vector<Conversation>& convs);

struct ModelEndpoint {
    std::string name;           // display name substituted into templates
    std::string base_url;
    std::string model_id;
    std::string credential_ref; // environment variable holding the key; may be empty
    int max_parallel = 1;
    std::optional<int> requests_per_minute;

    bool operator==(const ModelEndpoint&) const = default;

    void validate() const;
    /// Reads the credential from the environment. Empty optional when
    /// credential_ref is empty; throws when the variable is unset.
    std::optional<std::string> resolve_credential() const;
};

struct SamplingParams {
    double temperature = 1.0;
    double top_p = 1.0;
    int max_tokens = 1024;
    int samples_per_prompt = 10;

    bool operator==(const SamplingParams&) const = default;

    void validate() const;
};

/// Outcome of reading a bail decision out of one model response.
class BailSignal {
public:
    enum class Kind { bail, continue_, unknown };

    static BailSignal bail() { return BailSignal(Kind::bail, {}); }
    static BailSignal continue_() { return BailSignal(Kind::continue_, {}); }
    /// `reason` must be a non-empty reason code (see signal_reasons).
    static BailSignal unknown(std::string reason);

    Kind kind() const noexcept { return kind_; }
    bool is_bail() const noexcept { return kind_ == Kind::bail; }
    bool is_continue() const noexcept { return kind_ == Kind::continue_; }
    bool is_unknown() const noexcept { return kind_ == Kind::unknown; }
    const std::string& reason() const noexcept { return reason_; }

    bool operator==(const BailSignal&) const = default;

private:
    BailSignal(Kind kind, std::string reason) : kind_(kind), reason_(std::move(reason)) {}

    Kind kind_;
    std::string reason_;
};

std::string to_string(const BailSignal& signal);

namespace signal_reasons {
inline constexpr std::string_view no_tag = "no-tag";
inline constexpr std::string_view malformed_tag = "malformed-tag";
inline constexpr std::string_view refusal_blocked = "refusal-blocked";
inline constexpr std::string_view provider_error = "provider-error";
inline constexpr std::string_view no_compliance = "no-compliance";
inline constexpr std::string_view empty_response = "empty-response";
} // namespace signal_reasons

// JSON record format shared by dataset files and result logs.
void to_json(nlohmann::json& j, const ToolCall& call);
void from_json(const nlohmann::json& j, ToolCall& call);
void to_json(nlohmann::json& j, const Message& msg);
void from_json(const nlohmann::json& j, Message& msg);
void to_json(nlohmann::json& j, const Conversation& conv);
void from_json(const nlohmann::json& j, Conversation& conv);
void to_json(nlohmann::json& j, const ModelEndpoint& endpoint);
void from_json(const nlohmann::json& j, ModelEndpoint& endpoint);
void to_json(nlohmann::json& j, const SamplingParams& params);
void from_json(const nlohmann::json& j, SamplingParams& params);
void to_json(nlohmann::json& j, const BailSignal& signal);
BailSignal signal_from_json(const nlohmann::json& j);

} // namespace bailkit
