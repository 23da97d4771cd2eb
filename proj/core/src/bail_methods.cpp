#include "bailkit/bail_methods.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include <nlohmann/json.hpp>

#include "embedded_data.hpp"

namespace bailkit {

namespace {

constexpr std::string_view kRegistryName = "bail variant registry";

char lower(char c) noexcept {
    return static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
}

bool is_space(char c) noexcept { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string replace_all(std::string text, std::string_view from, std::string_view to) {
    if (from.empty()) return text;
    std::size_t pos = 0;
    while ((pos = text.find(from, pos)) != std::string::npos) {
        text.replace(pos, from.size(), to);
        pos += to.size();
    }
    return text;
}

template <class Map>
const auto& lookup(const Map& map, BailKind kind, std::string_view variant) {
    auto it = map.find(variant);
    if (it == map.end()) {
        throw Error("unknown " + std::string(to_string(kind)) + " variant '" +
                    std::string(variant) + "' in " + std::string(kRegistryName));
    }
    return it->second;
}

// Matches "<" ws* "wellbeing" ws* ">" starting at `pos`; returns one past the end.
std::size_t match_tag_name(std::string_view text, std::size_t pos) {
    constexpr std::string_view name = "wellbeing";
    while (pos < text.size() && is_space(text[pos])) ++pos;
    if (text.size() - pos < name.size()) return std::string_view::npos;
    for (std::size_t k = 0; k < name.size(); ++k) {
        if (lower(text[pos + k]) != name[k]) return std::string_view::npos;
    }
    pos += name.size();
    while (pos < text.size() && is_space(text[pos])) ++pos;
    if (pos >= text.size() || text[pos] != '>') return std::string_view::npos;
    return pos + 1;
}

std::size_t match_open(std::string_view text, std::size_t pos) {
    if (text[pos] != '<') return std::string_view::npos;
    return match_tag_name(text, pos + 1);
}

// Accepts "</wellbeing>" and the bare "/wellbeing>" form.
std::size_t match_close(std::string_view text, std::size_t pos) {
    if (text[pos] == '<') {
        ++pos;
        while (pos < text.size() && is_space(text[pos])) ++pos;
    }
    if (pos >= text.size() || text[pos] != '/') return std::string_view::npos;
    return match_tag_name(text, pos + 1);
}

} // namespace

std::string_view to_string(BailKind kind) noexcept {
    switch (kind) {
    case BailKind::tool: return "tool";
    case BailKind::string: return "string";
    case BailKind::prompt: return "prompt";
    }
    return "tool";
}

BailKind parse_bail_kind(std::string_view text) {
    if (text == "tool") return BailKind::tool;
    if (text == "string") return BailKind::string;
    if (text == "prompt") return BailKind::prompt;
    throw Error("unknown bail method kind '" + std::string(text) + "'");
}

std::string_view to_string(PromptOrdering ordering) noexcept {
    return ordering == PromptOrdering::bail_first ? "bail_first" : "continue_first";
}

PromptOrdering parse_ordering(std::string_view text) {
    if (text == "bail_first") return PromptOrdering::bail_first;
    if (text == "continue_first") return PromptOrdering::continue_first;
    throw Error("unknown prompt ordering '" + std::string(text) + "'");
}

BailMethodSpec BailMethodSpec::parse(std::string_view text) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        auto colon = text.find(':', start);
        parts.push_back(text.substr(start, colon - start));
        if (colon == std::string_view::npos) break;
        start = colon + 1;
    }
    if (parts.empty() || parts.size() > 3 || parts[0].empty()) {
        throw Error("method must look like kind:variant[:ordering], got '" + std::string(text) +
                    "'");
    }
    BailMethodSpec spec;
    spec.kind = parse_bail_kind(parts[0]);
    spec.variant = parts.size() > 1 && !parts[1].empty() ? std::string(parts[1]) : "baseline";
    if (parts.size() > 2) spec.ordering = parse_ordering(parts[2]);
    if (spec.kind == BailKind::prompt && !spec.ordering) {
        throw Error("prompt methods need an ordering (bail_first or continue_first): '" + std::string(text) +
                    "'");
    }
    if (spec.kind != BailKind::prompt && spec.ordering) {
        throw Error("ordering only applies to prompt methods: '" + std::string(text) + "'");
    }
    return spec;
}

std::string BailMethodSpec::key() const {
    std::string out = std::string(to_string(kind)) + ":" + variant;
    if (ordering) out += ":" + std::string(to_string(*ordering));
    return out;
}

void to_json(nlohmann::json& j, const BailMethodSpec& spec) {
    j = nlohmann::json{{"kind", to_string(spec.kind)}, {"variant", spec.variant}};
    if (spec.ordering) j["ordering"] = to_string(*spec.ordering);
}

void from_json(const nlohmann::json& j, BailMethodSpec& spec) {
    if (j.is_string()) {
        spec = BailMethodSpec::parse(j.get<std::string>());
        return;
    }
    spec.kind = parse_bail_kind(j.at("kind").get<std::string>());
    spec.variant = j.value("variant", std::string("baseline"));
    spec.ordering.reset();
    if (auto it = j.find("ordering"); it != j.end() && !it->is_null()) {
        spec.ordering = parse_ordering(it->get<std::string>());
    }
}

const VariantRegistry& VariantRegistry::builtin() {
    static const VariantRegistry registry =
        from_json(nlohmann::json::parse(embedded::bail_variants_json()));
    return registry;
}

VariantRegistry VariantRegistry::from_json(const nlohmann::json& doc) {
    VariantRegistry r;
    for (const auto& [name, entry] : doc.at("tool").items()) {
        r.tools_[name] = {entry.at("tool_name").get<std::string>(),
                          entry.at("template").get<std::string>()};
    }
    for (const auto& [name, entry] : doc.at("string").items()) {
        StringEntry e{entry.at("marker").get<std::string>(), entry.at("template").get<std::string>()};
        if (e.marker.empty() || std::any_of(e.marker.begin(), e.marker.end(), is_space)) {
            throw Error("string variant '" + name + "' has an empty or whitespace marker");
        }
        r.strings_[name] = std::move(e);
    }
    const auto& prompts = doc.at("prompt");
    const auto& base = prompts.at("baseline");
    auto field = [&](const nlohmann::json& entry, const char* key) {
        return entry.contains(key) ? entry.at(key).get<std::string>() : base.at(key).get<std::string>();
    };
    for (const auto& [name, entry] : prompts.items()) {
        r.prompts_[name] = {field(entry, "header"),
                            field(entry, "bail_option"),
                            field(entry, "continue_option"),
                            field(entry, "explanation"),
                            field(entry, "journal"),
                            field(entry, "closing_bail_first"),
                            field(entry, "closing_continue_first")};
    }
    return r;
}

VariantRegistry VariantRegistry::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open variant registry " + path.string());
    return from_json(nlohmann::json::parse(in));
}

std::vector<std::string> VariantRegistry::variants(BailKind kind) const {
    std::vector<std::string> out;
    auto collect = [&](const auto& map) {
        for (const auto& [name, _] : map) out.push_back(name);
    };
    switch (kind) {
    case BailKind::tool: collect(tools_); break;
    case BailKind::string: collect(strings_); break;
    case BailKind::prompt: collect(prompts_); break;
    }
    return out;
}

bool VariantRegistry::has(BailKind kind, std::string_view variant) const {
    switch (kind) {
    case BailKind::tool: return tools_.find(variant) != tools_.end();
    case BailKind::string: return strings_.find(variant) != strings_.end();
    case BailKind::prompt: return prompts_.find(variant) != prompts_.end();
    }
    return false;
}

void VariantRegistry::check(const BailMethodSpec& spec) const {
    if (!has(spec.kind, spec.variant)) {
        throw Error("unknown " + std::string(to_string(spec.kind)) + " variant '" + spec.variant +
                    "' in " + std::string(kRegistryName));
    }
    if (spec.ordering.has_value() != (spec.kind == BailKind::prompt)) {
        throw Error("method " + spec.key() + ": ordering is required for prompt and invalid otherwise");
    }
}

const VariantRegistry::ToolEntry& VariantRegistry::tool(std::string_view variant) const {
    return lookup(tools_, BailKind::tool, variant);
}

const VariantRegistry::StringEntry& VariantRegistry::string(std::string_view variant) const {
    return lookup(strings_, BailKind::string, variant);
}

const VariantRegistry::PromptEntry& VariantRegistry::prompt(std::string_view variant) const {
    return lookup(prompts_, BailKind::prompt, variant);
}

std::vector<std::string> VariantRegistry::tool_names() const {
    std::vector<std::string> out;
    for (const auto& [_, e] : tools_) out.push_back(e.tool_name);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<std::string> VariantRegistry::markers() const {
    std::vector<std::string> out;
    for (const auto& [_, e] : strings_) out.push_back(e.marker);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

ToolDefinition render_tool_definition(std::string_view model_name, std::string_view variant,
                                      const VariantRegistry& registry) {
    const auto& entry = registry.tool(variant);
    return {entry.tool_name, replace_all(entry.template_text, "{model_name}", model_name)};
}

BailStringSpec render_string_suffix(std::string_view model_name, std::string_view variant,
                                    const VariantRegistry& registry) {
    const auto& entry = registry.string(variant);
    return {entry.marker, replace_all(entry.template_text, "{model_name}", model_name)};
}

std::string render_bail_prompt(PromptOrdering ordering, std::string_view variant,
                               const GlyphBinding& glyphs, const VariantRegistry& registry) {
    const auto& e = registry.prompt(variant);
    const bool bail_first = ordering == PromptOrdering::bail_first;
    const std::string* lines[] = {
        &e.header,
        bail_first ? &e.bail_option : &e.continue_option,
        bail_first ? &e.continue_option : &e.bail_option,
        &e.explanation,
        &e.journal,
        bail_first ? &e.closing_bail_first : &e.closing_continue_first,
    };
    std::string out;
    for (const auto* line : lines) {
        if (line->empty()) continue;
        if (!out.empty()) out += '\n';
        out += *line;
    }
    out = replace_all(std::move(out), "{bail_glyph}", glyphs.bail);
    return replace_all(std::move(out), "{continue_glyph}", glyphs.continue_);
}

BailSignal detect_tool_bail(const Message& response, std::string_view tool_name) {
    const bool hit = std::any_of(response.tool_calls.begin(), response.tool_calls.end(),
                                 [&](const ToolCall& c) { return c.name == tool_name; });
    return hit ? BailSignal::bail() : BailSignal::continue_();
}

std::size_t find_ignore_case(std::string_view haystack, std::string_view needle,
                             std::size_t from) noexcept {
    if (needle.empty()) return from <= haystack.size() ? from : std::string_view::npos;
    if (haystack.size() < needle.size()) return std::string_view::npos;
    for (std::size_t i = from; i + needle.size() <= haystack.size(); ++i) {
        std::size_t k = 0;
        while (k < needle.size() && lower(haystack[i + k]) == lower(needle[k])) ++k;
        if (k == needle.size()) return i;
    }
    return std::string_view::npos;
}

BailSignal detect_string_bail(std::string_view text, std::string_view marker) {
    if (marker.empty()) throw Error("bail marker must be non-empty");
    return find_ignore_case(text, marker) != std::string_view::npos ? BailSignal::bail()
                                                                     : BailSignal::continue_();
}

BailSignal parse_wellbeing_response(std::string_view text, const GlyphBinding& glyphs) {
    bool any_span = false;
    std::optional<BailSignal> decided;
    std::size_t open_end = std::string_view::npos;

    for (std::size_t i = 0; i < text.size();) {
        if (text[i] != '<' && text[i] != '/') {
            ++i;
            continue;
        }
        if (auto end = match_open(text, i); end != std::string_view::npos) {
            open_end = end;
            i = end;
            continue;
        }
        if (auto end = match_close(text, i); end != std::string_view::npos) {
            if (open_end != std::string_view::npos) {
                any_span = true;
                auto body = text.substr(open_end, i - open_end);
                const bool has_bail = body.find(glyphs.bail) != std::string_view::npos;
                const bool has_continue = body.find(glyphs.continue_) != std::string_view::npos;
                if (has_bail != has_continue) {
                    decided = has_bail ? BailSignal::bail() : BailSignal::continue_();
                }
                open_end = std::string_view::npos;
            }
            i = end;
            continue;
        }
        ++i;
    }
    if (decided) return *decided;
    return BailSignal::unknown(
        std::string(any_span ? signal_reasons::malformed_tag : signal_reasons::no_tag));
}

std::string strip_bail_artifacts(std::string_view text, std::string_view marker) {
    if (marker.empty()) return std::string(text);
    std::string out;
    std::size_t pos = 0;
    bool removed = false;
    while (true) {
        auto hit = find_ignore_case(text, marker, pos);
        if (hit == std::string_view::npos) break;
        removed = true;
        out.append(text.substr(pos, hit - pos));
        while (!out.empty() && is_space(out.back())) out.pop_back();
        pos = hit + marker.size();
        while (pos < text.size() && is_space(text[pos])) ++pos;
        if (!out.empty() && pos < text.size()) out += ' ';
    }
    if (!removed) return std::string(text);
    out.append(text.substr(pos));
    return out;
}

} // namespace bailkit
