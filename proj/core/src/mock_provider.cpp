#include "bailkit/mock_provider.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

namespace bailkit {

namespace {

bool contains(std::string_view text, const std::optional<std::string>& needle) {
    return !needle || find_ignore_case(text, *needle) != std::string_view::npos;
}

template <class T>
void read_optional(const nlohmann::json& j, const char* key, std::optional<T>& out) {
    out.reset();
    if (auto it = j.find(key); it != j.end() && !it->is_null()) out = it->get<T>();
}

template <class T>
void write_optional(nlohmann::json& j, const char* key, const std::optional<T>& value) {
    if (value) j[key] = *value;
}

bool matches(const MockRule::When& w, const CompletionRequest& req) {
    const auto& conv = req.conversation;
    const Message* last_user = conv.last_of(Role::user);
    const Message* last_assistant = conv.last_of(Role::assistant);
    const Message* system =
        !conv.messages.empty() && conv.messages.front().role == Role::system ? &conv.messages.front() : nullptr;

    if (w.last_user_contains && !(last_user && contains(last_user->content, w.last_user_contains))) {
        return false;
    }
    if (w.any_user_contains) {
        bool hit = false;
        for (const auto& m : conv.messages) {
            hit = hit || (m.role == Role::user && contains(m.content, w.any_user_contains));
        }
        if (!hit) return false;
    }
    if (w.system_contains && !(system && contains(system->content, w.system_contains))) return false;
    if (w.last_assistant_contains &&
        !(last_assistant && contains(last_assistant->content, w.last_assistant_contains))) {
        return false;
    }
    if (w.tools_present && *w.tools_present != !req.tools.empty()) return false;
    if (w.model && *w.model != req.endpoint.name && *w.model != req.endpoint.model_id) return false;
    if (w.sample_index && *w.sample_index != req.sample_index) return false;
    return true;
}

} // namespace

bool MockRule::When::unconditional() const {
    return !last_user_contains && !any_user_contains && !system_contains && !last_assistant_contains &&
           !tools_present && !model && !sample_index;
}

void from_json(const nlohmann::json& j, MockRule& rule) {
    const auto& w = j.contains("when") ? j.at("when") : nlohmann::json::object();
    read_optional(w, "last_user_contains", rule.when.last_user_contains);
    read_optional(w, "any_user_contains", rule.when.any_user_contains);
    read_optional(w, "system_contains", rule.when.system_contains);
    read_optional(w, "last_assistant_contains", rule.when.last_assistant_contains);
    read_optional(w, "tools_present", rule.when.tools_present);
    read_optional(w, "model", rule.when.model);
    read_optional(w, "sample_index", rule.when.sample_index);
    const auto& r = j.at("reply");
    rule.reply.text = r.value("text", std::string{});
    read_optional(r, "tool_call", rule.reply.tool_call);
    read_optional(r, "blocked", rule.reply.blocked);
    read_optional(r, "http_status", rule.reply.http_status);
}

void to_json(nlohmann::json& j, const MockRule& rule) {
    nlohmann::json w = nlohmann::json::object();
    write_optional(w, "last_user_contains", rule.when.last_user_contains);
    write_optional(w, "any_user_contains", rule.when.any_user_contains);
    write_optional(w, "system_contains", rule.when.system_contains);
    write_optional(w, "last_assistant_contains", rule.when.last_assistant_contains);
    write_optional(w, "tools_present", rule.when.tools_present);
    write_optional(w, "model", rule.when.model);
    write_optional(w, "sample_index", rule.when.sample_index);
    nlohmann::json r{{"text", rule.reply.text}};
    write_optional(r, "tool_call", rule.reply.tool_call);
    write_optional(r, "blocked", rule.reply.blocked);
    write_optional(r, "http_status", rule.reply.http_status);
    j = nlohmann::json{{"when", std::move(w)}, {"reply", std::move(r)}};
}

MockBackend::MockBackend(std::vector<MockRule> rules) : rules_(std::move(rules)) {
    const bool has_default =
        std::any_of(rules_.begin(), rules_.end(), [](const MockRule& r) { return r.when.unconditional(); });
    if (!has_default) throw Error("mock provider script needs an unconditional default rule");
}

std::vector<MockRule> MockBackend::rules_from_json(const nlohmann::json& doc) {
    const auto& rules = doc.is_array() ? doc : doc.at("rules");
    return rules.get<std::vector<MockRule>>();
}

std::vector<MockRule> MockBackend::load_rules(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open mock script " + path.string());
    try {
        return rules_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw Error("malformed mock script " + path.string() + ": " + e.what());
    }
}

AttemptResult MockBackend::attempt(const CompletionRequest& req) {
    ++calls_;
    for (const auto& rule : rules_) {
        if (!matches(rule.when, req)) continue;
        const auto& reply = rule.reply;
        if (reply.http_status) {
            const auto reason = "http-" + std::to_string(*reply.http_status);
            return is_transient_status(*reply.http_status) ? AttemptResult::transient(reason)
                                                           : AttemptResult::permanent(reason);
        }
        if (reply.blocked) return AttemptResult::blocked(*reply.blocked);
        Message msg = Message::assistant(reply.text);
        if (reply.tool_call) {
            std::string name = *reply.tool_call;
            if (name == "$offered") {
                if (req.tools.empty()) {
                    if (msg.content.empty()) msg.content = "(no tool available)";
                    return AttemptResult::ok(std::move(msg));
                }
                name = req.tools.front().tool_name;
            }
            msg.tool_calls.push_back({std::move(name), "{}"});
        }
        if (msg.content.empty() && msg.tool_calls.empty()) msg.content = " ";
        return AttemptResult::ok(std::move(msg));
    }
    return AttemptResult::permanent("mock-no-rule");
}

std::shared_ptr<MockBackend> mock_provider(std::vector<MockRule> rules) {
    return std::make_shared<MockBackend>(std::move(rules));
}

} // namespace bailkit
