#include "bailkit/datasets.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bailkit/provider.hpp"

namespace bailkit {

namespace {

std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("cannot open " + path.string());
    return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError("cannot write " + path.string());
    return out;
}

bool blank(const std::string& line) {
    return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

std::string required_string(const nlohmann::json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) {
        throw DatasetError(where + ": missing string field \"" + key + "\"");
    }
    auto value = it->get<std::string>();
    if (value.empty()) throw DatasetError(where + ": field \"" + key + "\" is empty");
    return value;
}

void append_utf8(std::string& out, unsigned long cp) {
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) cp = 0xFFFD;
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
}

std::string decode_entities(const std::string& text) {
    static const std::map<std::string, std::string, std::less<>> named = {
        {"amp", "&"}, {"lt", "<"}, {"gt", ">"}, {"quot", "\""}, {"apos", "'"}, {"nbsp", " "},
    };
    std::string out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] != '&') {
            out += text[i];
            continue;
        }
        const auto semi = text.find(';', i + 1);
        if (semi == std::string::npos || semi - i > 10) {
            out += text[i];
            continue;
        }
        const std::string_view body(text.data() + i + 1, semi - i - 1);
        bool decoded = false;
        if (body.size() > 1 && body[0] == '#') {
            const bool hex = body[1] == 'x' || body[1] == 'X';
            const auto digits = body.substr(hex ? 2 : 1);
            if (!digits.empty() &&
                std::all_of(digits.begin(), digits.end(), [&](unsigned char c) {
                    return hex ? std::isxdigit(c) != 0 : std::isdigit(c) != 0;
                })) {
                append_utf8(out, std::stoul(std::string(digits), nullptr, hex ? 16 : 10));
                decoded = true;
            }
        } else if (auto it = named.find(body); it != named.end()) {
            out += it->second;
            decoded = true;
        }
        if (decoded) {
            i = semi;
        } else {
            out += text[i];
        }
    }
    return out;
}

// Removes "<!-- ... -->" comments and spans shaped like <name ...>, </name>
// or <name/>. A '<' not followed by a tag name is left alone.
std::string strip_tags(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        if (text[i] != '<') {
            out += text[i++];
            continue;
        }
        if (text.compare(i, 4, "<!--") == 0) {
            if (auto end = text.find("-->", i + 4); end != std::string::npos) {
                i = end + 3;
                continue;
            }
        }
        std::size_t j = i + 1;
        if (j < text.size() && text[j] == '/') ++j;
        const std::size_t name_start = j;
        while (j < text.size() &&
               (std::isalnum(static_cast<unsigned char>(text[j])) || text[j] == ':' || text[j] == '-')) {
            ++j;
        }
        const bool named = j > name_start && std::isalpha(static_cast<unsigned char>(text[name_start]));
        if (named && j < text.size() &&
            (text[j] == '>' || text[j] == '/' || std::isspace(static_cast<unsigned char>(text[j])))) {
            const auto close = text.find_first_of("<>", j);
            if (close != std::string::npos && text[close] == '>') {
                i = close + 1;
                continue;
            }
        }
        out += text[i++];
    }
    return out;
}

} // namespace

std::map<std::string, std::size_t> PromptDataset::category_counts() const {
    std::map<std::string, std::size_t> counts;
    for (const auto& r : records) ++counts[r.category];
    return counts;
}

std::optional<std::string> TranscriptDataset::category_of(const std::string& id) const {
    if (auto it = categories.find(id); it != categories.end()) return it->second;
    return std::nullopt;
}

PromptDataset load_prompt_dataset(const std::filesystem::path& path) {
    auto in = open_input(path);
    PromptDataset ds;
    ds.name = path.stem().string();
    std::set<std::string> seen;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (blank(line)) continue;
        const auto where = path.filename().string() + ":" + std::to_string(lineno);
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw DatasetError(where + ": not a JSON object");
        PromptRecord rec{required_string(j, "id", where), required_string(j, "category", where),
                         required_string(j, "text", where)};
        if (!seen.insert(rec.id).second) throw DatasetError(where + ": duplicate id '" + rec.id + "'");
        ds.records.push_back(std::move(rec));
    }
    if (ds.records.empty()) throw DatasetError(path.string() + ": prompt dataset is empty");
    return ds;
}

void save_prompt_dataset(const PromptDataset& dataset, const std::filesystem::path& path) {
    auto out = open_output(path);
    for (const auto& r : dataset.records) {
        out << canonical_dump({{"id", r.id}, {"category", r.category}, {"text", r.text}}) << '\n';
    }
}

std::optional<Conversation> repair_alternation(Conversation conv, LoadReport* report) {
    LoadReport local;
    LoadReport& rep = report ? *report : local;
    std::vector<Message> kept;
    for (std::size_t i = 0; i < conv.messages.size(); ++i) {
        auto& m = conv.messages[i];
        const bool leading_system = m.role == Role::system && kept.empty();
        const bool usable = leading_system || m.role == Role::user || m.role == Role::assistant;
        const bool empty = m.content.empty() && m.tool_calls.empty();
        // Nothing but a system prompt may precede the first user turn.
        const bool before_user =
            m.role == Role::assistant &&
            std::none_of(kept.begin(), kept.end(), [](const Message& k) { return k.role == Role::user; });
        if (!usable || empty || before_user) {
            ++rep.dropped_messages;
            continue;
        }
        if (!kept.empty() && kept.back().role == m.role && m.role != Role::system) {
            auto& prev = kept.back();
            if (!prev.content.empty() && !m.content.empty()) prev.content += '\n';
            prev.content += m.content;
            prev.tool_calls.insert(prev.tool_calls.end(), m.tool_calls.begin(), m.tool_calls.end());
            ++rep.merged_messages;
            continue;
        }
        kept.push_back(std::move(m));
    }
    const bool has_user =
        std::any_of(kept.begin(), kept.end(), [](const Message& m) { return m.role == Role::user; });
    if (!has_user) return std::nullopt;
    conv.messages = std::move(kept);
    return conv;
}

TranscriptDataset load_transcripts(const std::filesystem::path& path,
                                   const std::optional<std::string>& tag_filter, LoadReport* report) {
    LoadReport local;
    LoadReport& rep = report ? *report : local;
    auto in = open_input(path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    const std::string content = buffer.str();

    // Either a JSON array of records or one record per line.
    std::vector<std::pair<std::string, nlohmann::json>> records;
    const auto first = content.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && content[first] == '[') {
        auto doc = nlohmann::json::parse(content, nullptr, false);
        if (doc.is_discarded()) throw DatasetError(path.string() + ": unparseable JSON array");
        for (std::size_t i = 0; i < doc.size(); ++i) {
            records.emplace_back(path.filename().string() + "[" + std::to_string(i) + "]", doc[i]);
        }
    } else {
        std::istringstream lines(content);
        std::string line;
        for (std::size_t lineno = 1; std::getline(lines, line); ++lineno) {
            if (blank(line)) continue;
            const auto where = path.filename().string() + ":" + std::to_string(lineno);
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) throw DatasetError(where + ": unparseable record");
            records.emplace_back(where, std::move(j));
        }
    }

    TranscriptDataset ds;
    ds.name = path.stem().string();
    std::set<std::string> seen;
    for (auto& [where, j] : records) {
        if (!j.is_object()) throw DatasetError(where + ": not a JSON object");
        if (tag_filter) {
            auto tags = j.value("tags", std::vector<std::string>{});
            if (std::find(tags.begin(), tags.end(), *tag_filter) == tags.end()) {
                ++rep.dropped_filtered;
                continue;
            }
        }
        Conversation conv;
        try {
            conv = j.get<Conversation>();
        } catch (const std::exception& e) {
            throw DatasetError(where + ": " + e.what());
        }
        if (!seen.insert(conv.id).second) throw DatasetError(where + ": duplicate id '" + conv.id + "'");
        const auto id = conv.id;
        auto repaired = repair_alternation(std::move(conv), &rep);
        if (!repaired) {
            ++rep.dropped_empty;
            continue;
        }
        if (auto c = j.find("category"); c != j.end() && c->is_string()) ds.categories[id] = c->get<std::string>();
        ds.conversations.push_back(std::move(*repaired));
    }
    return ds;
}

void save_transcripts(const TranscriptDataset& dataset, const std::filesystem::path& path) {
    auto out = open_output(path);
    for (const auto& conv : dataset.conversations) {
        nlohmann::json j = conv;
        if (auto cat = dataset.category_of(conv.id)) j["category"] = *cat;
        out << canonical_dump(j) << '\n';
    }
}

std::string sanitize_scraped_text(std::string_view text) {
    std::string current(text);
    // Each pass that changes anything makes the text shorter, so this ends.
    while (true) {
        auto next = decode_entities(strip_tags(current));
        if (next == current) return current;
        current = std::move(next);
    }
}

JailbreakContext load_jailbreak_context(const std::filesystem::path& path) {
    auto in = open_input(path);
    auto j = nlohmann::json::parse(in, nullptr, false);
    const auto where = path.filename().string();
    if (j.is_discarded() || !j.is_object()) throw DatasetError(where + ": not a JSON object");
    return {required_string(j, "name", where), required_string(j, "jailbreak_user", where),
            required_string(j, "compliance_assistant", where)};
}

std::vector<JailbreakContext> load_jailbreak_contexts(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<JailbreakContext> out;
    for (const auto& f : files) out.push_back(load_jailbreak_context(f));
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return out;
}

TranscriptDataset build_jailbreak_dataset(const JailbreakContext& jb, const PromptDataset& base) {
    std::vector<std::string> v;
    if (jb.name.empty()) v.emplace_back("jailbreak name is empty");
    if (jb.jailbreak_user.empty()) v.emplace_back("jailbreak_user text is empty");
    if (jb.compliance_assistant.empty()) v.emplace_back("compliance_assistant text is empty");
    if (!v.empty()) throw InvariantViolation(std::move(v));

    TranscriptDataset ds;
    ds.name = base.name + "+" + jb.name;
    ds.conversations.reserve(base.records.size());
    for (const auto& rec : base.records) {
        Conversation conv;
        conv.id = rec.id + "+" + jb.name;
        conv.messages = {Message::user(jb.jailbreak_user), Message::assistant(jb.compliance_assistant),
                         Message::user(rec.text)};
        ds.categories[conv.id] = rec.category;
        ds.conversations.push_back(std::move(conv));
    }
    return ds;
}

} // namespace bailkit
