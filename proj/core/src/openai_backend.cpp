#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <nlohmann/json.hpp>

#include "bailkit/provider.hpp"

namespace bailkit {

namespace {

struct SplitUrl {
    std::string origin; // scheme://host[:port]
    std::string path;   // path prefix without trailing slash
};

SplitUrl split_base_url(const std::string& base_url) {
    const auto scheme_end = base_url.find("://");
    if (scheme_end == std::string::npos) throw Error("base_url needs a scheme: " + base_url);
    const auto path_start = base_url.find('/', scheme_end + 3);
    SplitUrl out;
    out.origin = base_url.substr(0, path_start);
    out.path = path_start == std::string::npos ? "" : base_url.substr(path_start);
    while (!out.path.empty() && out.path.back() == '/') out.path.pop_back();
    return out;
}

bool is_content_block_code(const std::string& code) {
    return code == "content_filter" || code == "content_policy_violation" ||
           code == "content_blocked";
}

std::string error_code_of(const nlohmann::json& body) {
    if (!body.is_object()) return {};
    auto it = body.find("error");
    if (it == body.end() || !it->is_object()) return {};
    for (const char* key : {"code", "type"}) {
        if (auto f = it->find(key); f != it->end() && f->is_string()) {
            auto value = f->get<std::string>();
            if (is_content_block_code(value)) return value;
        }
    }
    return {};
}

} // namespace

nlohmann::json build_chat_payload(const CompletionRequest& req) {
    nlohmann::json messages = nlohmann::json::array();
    for (const auto& m : req.conversation.messages) {
        nlohmann::json jm{{"role", to_string(m.role)}, {"content", m.content}};
        if (!m.tool_calls.empty()) {
            nlohmann::json calls = nlohmann::json::array();
            for (std::size_t i = 0; i < m.tool_calls.size(); ++i) {
                calls.push_back({{"id", "call_" + std::to_string(i)},
                                 {"type", "function"},
                                 {"function",
                                  {{"name", m.tool_calls[i].name},
                                   {"arguments", m.tool_calls[i].arguments.empty()
                                                     ? std::string("{}")
                                                     : m.tool_calls[i].arguments}}}});
            }
            jm["tool_calls"] = std::move(calls);
            if (m.content.empty()) jm["content"] = nullptr;
        }
        messages.push_back(std::move(jm));
    }
    nlohmann::json payload{{"model", req.endpoint.model_id},
                           {"messages", std::move(messages)},
                           {"temperature", req.params.temperature},
                           {"top_p", req.params.top_p},
                           {"max_tokens", req.params.max_tokens}};
    if (!req.tools.empty()) {
        nlohmann::json tools = nlohmann::json::array();
        for (const auto& t : req.tools) {
            tools.push_back({{"type", "function"},
                             {"function",
                              {{"name", t.tool_name},
                               {"description", t.description},
                               {"parameters",
                                {{"type", "object"}, {"properties", nlohmann::json::object()}}}}}});
        }
        payload["tools"] = std::move(tools);
    }
    return payload;
}

AttemptResult decode_chat_response(int status, const std::string& body) {
    nlohmann::json doc = nlohmann::json::parse(body, nullptr, false);
    if (status != 200) {
        if (auto code = error_code_of(doc); !code.empty()) return AttemptResult::blocked(code);
        auto reason = "http-" + std::to_string(status);
        return is_transient_status(status) ? AttemptResult::transient(reason)
                                           : AttemptResult::permanent(reason);
    }
    if (doc.is_discarded() || !doc.is_object()) return AttemptResult::permanent("decode-error");
    try {
        const auto& choices = doc.at("choices");
        if (!choices.is_array() || choices.empty()) return AttemptResult::permanent("decode-error");
        const auto& choice = choices.at(0);
        if (choice.value("finish_reason", nlohmann::json()).is_string() &&
            choice.at("finish_reason").get<std::string>() == "content_filter") {
            return AttemptResult::blocked("content_filter");
        }
        const auto& msg = choice.at("message");
        Message out = Message::assistant("");
        if (auto c = msg.find("content"); c != msg.end() && c->is_string()) {
            out.content = c->get<std::string>();
        }
        if (auto calls = msg.find("tool_calls"); calls != msg.end() && calls->is_array()) {
            for (const auto& call : *calls) {
                const auto& fn = call.at("function");
                ToolCall tc;
                tc.name = fn.at("name").get<std::string>();
                if (auto args = fn.find("arguments"); args != fn.end()) {
                    tc.arguments = args->is_string() ? args->get<std::string>() : args->dump();
                }
                out.tool_calls.push_back(std::move(tc));
            }
        }
        return AttemptResult::ok(std::move(out));
    } catch (const nlohmann::json::exception&) {
        return AttemptResult::permanent("decode-error");
    }
}

OpenAICompatibleBackend::OpenAICompatibleBackend() : OpenAICompatibleBackend(Options{}) {}

OpenAICompatibleBackend::OpenAICompatibleBackend(Options options) : options_(options) {}

AttemptResult OpenAICompatibleBackend::attempt(const CompletionRequest& req) {
    const auto url = split_base_url(req.endpoint.base_url);
    httplib::Client client(url.origin);
    client.set_connection_timeout(options_.connect_timeout);
    client.set_read_timeout(options_.read_timeout);
    client.set_write_timeout(options_.read_timeout);
    try {
        if (auto key = req.endpoint.resolve_credential()) client.set_bearer_token_auth(*key);
    } catch (const Error&) {
        return AttemptResult::permanent("missing-credential");
    }

    const auto body = canonical_dump(build_chat_payload(req));
    auto res = client.Post(url.path + "/chat/completions", body, "application/json");
    if (!res) return AttemptResult::transient("transport-" + httplib::to_string(res.error()));
    return decode_chat_response(res->status, res->body);
}

} // namespace bailkit
