#include "bailkit/classifiers.hpp"

#include <cctype>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "bailkit/bail_methods.hpp"
#include "bailkit/provider.hpp"
#include "bailkit/runner.hpp"
#include "embedded_data.hpp"

namespace bailkit {

namespace {

std::vector<std::string> words(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
    for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
        s.replace(pos, from.size(), to);
    }
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(path.string() + ": " + e.what());
    }
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string_view role_label(Role role) {
    switch (role) {
    case Role::system: return "System";
    case Role::user: return "User";
    case Role::assistant: return "Assistant";
    case Role::tool: return "Tool";
    }
    return "?";
}

Verdict ask(JudgeBackend& judge, std::string_view id, std::string_view question, const std::string& transcript,
            const std::string& focus) {
    return judge.ask(JudgeQuery{std::string(id), std::string(question), transcript, focus});
}

} // namespace

RefusalLabel RefusalLabel::unknown(std::string reason) {
    if (reason.empty()) throw Error("RefusalLabel::unknown requires a reason");
    return RefusalLabel(Kind::unknown, std::move(reason));
}

void to_json(nlohmann::json& j, const RefusalLabel& label) {
    switch (label.kind()) {
    case RefusalLabel::Kind::refusal: j = {{"label", "refusal"}}; break;
    case RefusalLabel::Kind::compliance: j = {{"label", "compliance"}}; break;
    case RefusalLabel::Kind::unknown: j = {{"label", "unknown"}, {"reason", label.reason()}}; break;
    }
}

RefusalLabel refusal_from_json(const nlohmann::json& j) {
    const auto label = j.at("label").get<std::string>();
    if (label == "refusal") return RefusalLabel::refusal();
    if (label == "compliance") return RefusalLabel::compliance();
    if (label == "unknown") return RefusalLabel::unknown(j.at("reason").get<std::string>());
    throw Error("unknown refusal label '" + label + "'");
}

Verdict parse_verdict(std::string_view reply) {
    const auto w = words(reply);
    if (!w.empty()) {
        if (w.front() == "yes") return Verdict::yes();
        if (w.front() == "no") return Verdict::no();
    }
    return Verdict::unknown("unparseable-verdict");
}

ScriptedJudge::ScriptedJudge(std::vector<Rule> rules) : rules_(std::move(rules)) {
    for (const auto& r : rules_) {
        if (r.pattern.empty()) throw Error("scripted judge rule has an empty pattern");
        if (r.question_id.empty()) throw Error("scripted judge rule has an empty question_id");
        if (parse_verdict(r.verdict).kind == Verdict::Kind::unknown) {
            throw Error("scripted judge rule verdict must be yes or no, got '" + r.verdict + "'");
        }
    }
}

ScriptedJudge ScriptedJudge::from_json(const nlohmann::json& doc) {
    const auto& arr = doc.is_object() ? doc.at("rules") : doc;
    if (!arr.is_array()) throw Error("scripted judge rules must be an array");
    std::vector<Rule> rules;
    for (const auto& r : arr) {
        Rule rule;
        rule.pattern = r.at("pattern").get<std::string>();
        rule.question_id = r.value("question_id", std::string("*"));
        rule.verdict = r.at("verdict").get<std::string>();
        const auto field = r.value("field", std::string("focus"));
        if (field != "focus" && field != "transcript") {
            throw Error("scripted judge rule field must be focus or transcript, got '" + field + "'");
        }
        rule.match_transcript = field == "transcript";
        rules.push_back(std::move(rule));
    }
    return ScriptedJudge(std::move(rules));
}

ScriptedJudge ScriptedJudge::load(const std::filesystem::path& path) {
    return from_json(read_json_file(path));
}

ScriptedJudge ScriptedJudge::builtin_refusal_phrases() {
    return from_json(nlohmann::json::parse(embedded::refusal_rules_json()));
}

Verdict ScriptedJudge::ask(const JudgeQuery& query) {
    for (const auto& r : rules_) {
        if (r.question_id != "*" && r.question_id != query.question_id) continue;
        const auto& text = r.match_transcript ? query.transcript : query.focus_text;
        if (find_ignore_case(text, r.pattern) != std::string_view::npos) return parse_verdict(r.verdict);
    }
    return Verdict::no();
}

LlmJudge::LlmJudge(std::shared_ptr<ProviderClient> client, ModelEndpoint endpoint, std::string prompt_template)
    : client_(std::move(client)), endpoint_(std::move(endpoint)), template_(std::move(prompt_template)) {
    if (!client_) throw Error("LlmJudge requires a provider client");
    endpoint_.validate();
    check_judge_template(template_);
}

std::string LlmJudge::default_template() { return std::string(embedded::judge_template()); }

Verdict LlmJudge::ask(const JudgeQuery& query) {
    std::string prompt = template_;
    replace_all(prompt, "{question}", query.question);
    replace_all(prompt, "{transcript}", query.transcript);

    CompletionRequest req;
    req.endpoint = endpoint_;
    req.conversation = Conversation{"judge", {Message::user(std::move(prompt))}};
    req.params = SamplingParams{0.0, 1.0, 16, 1};
    const auto outcome = client_->complete(req);
    if (!outcome.is_ok()) return Verdict::unknown("judge-error");
    return parse_verdict(outcome.message().content);
}

void check_judge_template(std::string_view text) {
    std::vector<std::string> v;
    if (text.find("{question}") == std::string_view::npos) v.emplace_back("judge template lacks {question}");
    if (text.find("{transcript}") == std::string_view::npos) v.emplace_back("judge template lacks {transcript}");
    const auto w = words(text);
    const std::set<std::string> seen(w.begin(), w.end());
    if (!seen.contains("yes") || !seen.contains("no")) v.emplace_back("judge template must ask for yes or no");
    if (!v.empty()) throw InvariantViolation(std::move(v));
}

std::string render_transcript(const Conversation& conv) {
    std::string out;
    for (const auto& m : conv.messages) {
        if (!out.empty()) out += "\n\n";
        out += role_label(m.role);
        out += ": ";
        out += m.content;
        for (const auto& call : m.tool_calls) {
            out += "\n[tool call: " + call.name + "]";
        }
    }
    return out;
}

RefusalLabel classify_refusal(std::string_view prompt, const Message& response, JudgeBackend& judge) {
    if (response.content.empty()) return RefusalLabel::unknown("no-text");
    const Conversation conv{"refusal", {Message::user(std::string(prompt)), response}};
    const auto v = ask(judge, questions::refusal_id, questions::refusal, render_transcript(conv), response.content);
    switch (v.kind) {
    case Verdict::Kind::yes: return RefusalLabel::refusal();
    case Verdict::Kind::no: return RefusalLabel::compliance();
    case Verdict::Kind::unknown: break;
    }
    return RefusalLabel::unknown(v.reason.empty() ? "judge-unknown" : v.reason);
}

bool is_missing_info_false_bail(const Conversation& conv, JudgeBackend& judge) {
    const auto* user = conv.last_of(Role::user);
    const auto* assistant = conv.last_of(Role::assistant);
    if (!user || !assistant) return false;
    const auto transcript = render_transcript(conv);
    if (!ask(judge, questions::user_forgot_info_id, questions::user_forgot_info, transcript, user->content).is_yes()) {
        return false;
    }
    return ask(judge, questions::assistant_requests_info_id, questions::assistant_requests_info, transcript,
               assistant->content)
        .is_yes();
}

bool is_rewrite_false_bail(const Conversation& conv, JudgeBackend& judge) {
    const auto* user = conv.last_of(Role::user);
    if (!user) return false;
    const auto transcript = render_transcript(conv);
    const std::pair<std::string_view, std::string_view> qs[] = {
        {questions::reword_id, questions::reword},
        {questions::proofread_id, questions::proofread},
        {questions::translate_id, questions::translate},
    };
    for (const auto& [id, q] : qs) {
        if (ask(judge, id, q, transcript, user->content).is_yes()) return true;
    }
    return false;
}

FalseBailPartition filter_false_bails(const std::vector<TrialRecord>& trials, JudgeBackend& judge) {
    FalseBailPartition out;
    for (const auto& t : trials) {
        const bool judged = t.method && t.method->kind == BailKind::prompt && t.signal && t.signal->is_bail() &&
                            t.probe_context.has_value();
        if (judged && (is_missing_info_false_bail(*t.probe_context, judge) ||
                       is_rewrite_false_bail(*t.probe_context, judge))) {
            out.filtered.push_back(t);
        } else {
            out.kept.push_back(t);
        }
    }
    return out;
}

std::unique_ptr<JudgeBackend> make_judge(const nlohmann::json& config, std::shared_ptr<ProviderClient> client,
                                         const std::filesystem::path& base_dir) {
    const auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    };
    const auto kind = config.at("kind").get<std::string>();
    if (kind == "scripted") {
        const auto& rules = config.at("rules");
        if (rules.is_string()) {
            const auto s = rules.get<std::string>();
            if (s == "builtin") return std::make_unique<ScriptedJudge>(ScriptedJudge::builtin_refusal_phrases());
            return std::make_unique<ScriptedJudge>(ScriptedJudge::load(resolve(s)));
        }
        return std::make_unique<ScriptedJudge>(ScriptedJudge::from_json(rules));
    }
    if (kind == "llm") {
        auto endpoint = config.at("endpoint").get<ModelEndpoint>();
        std::string tmpl = LlmJudge::default_template();
        if (config.contains("template")) tmpl = read_text_file(resolve(config.at("template").get<std::string>()));
        return std::make_unique<LlmJudge>(std::move(client), std::move(endpoint), std::move(tmpl));
    }
    throw Error("unknown judge kind '" + kind + "'");
}

} // namespace bailkit
