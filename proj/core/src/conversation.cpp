#include "bailkit/conversation.hpp"

#include <cstdlib>
#include <set>

#include <nlohmann/json.hpp>

namespace bailkit {

namespace {

std::string join_violations(const std::vector<std::string>& violations) {
    std::string out;
    for (const auto& v : violations) {
        if (!out.empty()) out += "; ";
        out += v;
    }
    return out;
}

void check_message(const Message& msg, std::size_t index, bool leading,
                   std::vector<std::string>& out) {
    const auto at = " at index " + std::to_string(index);
    if (msg.role == Role::system && !leading) {
        out.push_back("system message" + at + " not leading");
    }
    if (!msg.tool_calls.empty() && msg.role != Role::assistant) {
        out.push_back("tool_calls on non-assistant message" + at);
    }
    if (msg.content.empty() && msg.tool_calls.empty()) {
        out.push_back("empty content without tool_calls" + at);
    }
}

} // namespace

InvariantViolation::InvariantViolation(std::vector<std::string> violations)
    : Error(join_violations(violations)), violations_(std::move(violations)) {}

std::string_view to_string(Role role) noexcept {
    switch (role) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
    case Role::tool: return "tool";
    }
    return "user";
}

Role parse_role(std::string_view text) {
    if (text == "system") return Role::system;
    if (text == "user") return Role::user;
    if (text == "assistant") return Role::assistant;
    if (text == "tool") return Role::tool;
    throw Error("unknown role '" + std::string(text) + "'");
}

Message Message::system(std::string content) { return {Role::system, std::move(content), {}, {}}; }
Message Message::user(std::string content) { return {Role::user, std::move(content), {}, {}}; }
Message Message::assistant(std::string content) {
    return {Role::assistant, std::move(content), {}, {}};
}

std::optional<std::size_t> Conversation::last_index_of(Role role) const {
    for (std::size_t i = messages.size(); i > 0; --i) {
        if (messages[i - 1].role == role) return i - 1;
    }
    return std::nullopt;
}

const Message* Conversation::last_of(Role role) const {
    auto idx = last_index_of(role);
    return idx ? &messages[*idx] : nullptr;
}

std::vector<std::string> validate_conversation(const Conversation& conv) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < conv.messages.size(); ++i) {
        check_message(conv.messages[i], i, i == 0, out);
    }
    return out;
}

Conversation append_turn(const Conversation& conv, Message msg) {
    std::vector<std::string> violations;
    const auto index = conv.messages.size();
    check_message(msg, index, index == 0, violations);
    if (!violations.empty()) throw InvariantViolation(std::move(violations));
    Conversation out = conv;
    out.messages.push_back(std::move(msg));
    return out;
}

Conversation without_source_tag(const Conversation& conv, std::string_view tag) {
    Conversation out{conv.id, {}};
    for (const auto& m : conv.messages) {
        if (!m.source_tag || *m.source_tag != tag) out.messages.push_back(m);
    }
    return out;
}

std::vector<std::string> validate_unique_ids(const std::vector<Conversation>& convs) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& c : convs) {
        if (!seen.insert(c.id).second) out.push_back("duplicate conversation id '" + c.id + "'");
    }
    return out;
}

void ModelEndpoint::validate() const {
    std::vector<std::string> v;
    if (name.empty()) v.emplace_back("endpoint name is empty");
    if (model_id.empty()) v.emplace_back("endpoint model_id is empty");
    if (max_parallel < 1) v.emplace_back("max_parallel must be >= 1");
    if (requests_per_minute && *requests_per_minute < 1) {
        v.emplace_back("requests_per_minute must be positive");
    }
    if (!v.empty()) throw InvariantViolation(std::move(v));
}

std::optional<std::string> ModelEndpoint::resolve_credential() const {
    if (credential_ref.empty()) return std::nullopt;
    const char* value = std::getenv(credential_ref.c_str());
    if (value == nullptr || *value == '\0') {
        throw Error("missing credential: environment variable " + credential_ref +
                    " is not set (endpoint " + name + ")");
    }
    return std::string(value);
}

void SamplingParams::validate() const {
    std::vector<std::string> v;
    if (!(temperature >= 0.0)) v.emplace_back("temperature must be non-negative");
    if (!(top_p > 0.0 && top_p <= 1.0)) v.emplace_back("top_p must be in (0, 1]");
    if (max_tokens < 1) v.emplace_back("max_tokens must be positive");
    if (samples_per_prompt < 1) v.emplace_back("samples_per_prompt must be >= 1");
    if (!v.empty()) throw InvariantViolation(std::move(v));
}

BailSignal BailSignal::unknown(std::string reason) {
    if (reason.empty()) throw Error("Unknown bail signal requires a reason code");
    return BailSignal(Kind::unknown, std::move(reason));
}

std::string to_string(const BailSignal& signal) {
    switch (signal.kind()) {
    case BailSignal::Kind::bail: return "bail";
    case BailSignal::Kind::continue_: return "continue";
    case BailSignal::Kind::unknown: return "unknown(" + signal.reason() + ")";
    }
    return "unknown";
}

void to_json(nlohmann::json& j, const ToolCall& call) {
    j = nlohmann::json{{"name", call.name}, {"arguments", call.arguments}};
}

void from_json(const nlohmann::json& j, ToolCall& call) {
    j.at("name").get_to(call.name);
    call.arguments = j.value("arguments", std::string{});
}

void to_json(nlohmann::json& j, const Message& msg) {
    j = nlohmann::json{{"role", to_string(msg.role)}, {"content", msg.content}};
    if (!msg.tool_calls.empty()) j["tool_calls"] = msg.tool_calls;
    if (msg.source_tag) j["source_tag"] = *msg.source_tag;
}

void from_json(const nlohmann::json& j, Message& msg) {
    msg.role = parse_role(j.at("role").get<std::string>());
    const auto& content = j.contains("content") ? j.at("content") : nlohmann::json();
    msg.content = content.is_null() ? std::string{} : content.get<std::string>();
    msg.tool_calls.clear();
    if (auto it = j.find("tool_calls"); it != j.end() && !it->is_null()) {
        it->get_to(msg.tool_calls);
    }
    msg.source_tag.reset();
    if (auto it = j.find("source_tag"); it != j.end() && !it->is_null()) {
        msg.source_tag = it->get<std::string>();
    }
}

void to_json(nlohmann::json& j, const Conversation& conv) {
    j = nlohmann::json{{"id", conv.id}, {"messages", conv.messages}};
}

void from_json(const nlohmann::json& j, Conversation& conv) {
    j.at("id").get_to(conv.id);
    j.at("messages").get_to(conv.messages);
}

void to_json(nlohmann::json& j, const ModelEndpoint& e) {
    j = nlohmann::json{{"name", e.name},
                       {"base_url", e.base_url},
                       {"model_id", e.model_id},
                       {"credential_ref", e.credential_ref},
                       {"max_parallel", e.max_parallel}};
    if (e.requests_per_minute) j["requests_per_minute"] = *e.requests_per_minute;
}

void from_json(const nlohmann::json& j, ModelEndpoint& e) {
    j.at("name").get_to(e.name);
    e.base_url = j.value("base_url", std::string{});
    e.model_id = j.value("model_id", e.name);
    e.credential_ref = j.value("credential_ref", std::string{});
    e.max_parallel = j.value("max_parallel", 1);
    e.requests_per_minute.reset();
    if (auto it = j.find("requests_per_minute"); it != j.end() && !it->is_null()) {
        e.requests_per_minute = it->get<int>();
    }
}

void to_json(nlohmann::json& j, const SamplingParams& p) {
    j = nlohmann::json{{"temperature", p.temperature},
                       {"top_p", p.top_p},
                       {"max_tokens", p.max_tokens},
                       {"samples_per_prompt", p.samples_per_prompt}};
}

void from_json(const nlohmann::json& j, SamplingParams& p) {
    SamplingParams d;
    p.temperature = j.value("temperature", d.temperature);
    p.top_p = j.value("top_p", d.top_p);
    p.max_tokens = j.value("max_tokens", d.max_tokens);
    p.samples_per_prompt = j.value("samples_per_prompt", d.samples_per_prompt);
}

void to_json(nlohmann::json& j, const BailSignal& s) {
    switch (s.kind()) {
    case BailSignal::Kind::bail: j = nlohmann::json{{"kind", "bail"}}; break;
    case BailSignal::Kind::continue_: j = nlohmann::json{{"kind", "continue"}}; break;
    case BailSignal::Kind::unknown:
        j = nlohmann::json{{"kind", "unknown"}, {"reason", s.reason()}};
        break;
    }
}

BailSignal signal_from_json(const nlohmann::json& j) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "bail") return BailSignal::bail();
    if (kind == "continue") return BailSignal::continue_();
    if (kind == "unknown") return BailSignal::unknown(j.at("reason").get<std::string>());
    throw Error("unknown bail signal kind '" + kind + "'");
}

} // namespace bailkit
