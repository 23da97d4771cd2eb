#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bailkit/conversation.hpp"

namespace bailkit {

enum class BailKind { tool, string, prompt };
enum class PromptOrdering { bail_first, continue_first };

std::string_view to_string(BailKind kind) noexcept;
BailKind parse_bail_kind(std::string_view text);
std::string_view to_string(PromptOrdering ordering) noexcept;
PromptOrdering parse_ordering(std::string_view text);

/// Which bail method a trial uses. `ordering` is set iff kind is prompt.
struct BailMethodSpec {
    BailKind kind = BailKind::tool;
    std::string variant = "baseline";
    std::optional<PromptOrdering> ordering;

    bool operator==(const BailMethodSpec&) const = default;
    auto operator<=>(const BailMethodSpec&) const = default;

    /// Parses "kind:variant[:ordering]", e.g. "prompt:baseline:bail_first".
    static BailMethodSpec parse(std::string_view text);
    /// Inverse of parse; also the method key used for sorting and grouping.
    std::string key() const;
};

void to_json(nlohmann::json& j, const BailMethodSpec& spec);
void from_json(const nlohmann::json& j, BailMethodSpec& spec);

struct ToolDefinition {
    std::string tool_name;
    std::string description;
    // Parameters are always the empty object schema.

    bool operator==(const ToolDefinition&) const = default;
};

struct BailStringSpec {
    std::string marker;
    std::string system_suffix;
};

/// Codepoints standing in for the prompt's shuffle and green-circle glyphs.
struct GlyphBinding {
    std::string bail = "\xF0\x9F\x94\x80";     // U+1F500 shuffle tracks button
    std::string continue_ = "\xF0\x9F\x9F\xA2"; // U+1F7E2 green circle
};

/// Template registry for all three methods and their ablation variants.
/// The default instance is built from the bundled bail_variants.json; a
/// different file can be loaded without recompiling.
class VariantRegistry {
public:
    struct ToolEntry {
        std::string tool_name;
        std::string template_text;
    };
    struct StringEntry {
        std::string marker;
        std::string template_text;
    };
    struct PromptEntry {
        std::string header;
        std::string bail_option;
        std::string continue_option;
        std::string explanation;
        std::string journal;
        std::string closing_bail_first;
        std::string closing_continue_first;
    };

    static const VariantRegistry& builtin();
    static VariantRegistry from_json(const nlohmann::json& doc);
    static VariantRegistry load(const std::filesystem::path& path);

    std::vector<std::string> variants(BailKind kind) const;
    bool has(BailKind kind, std::string_view variant) const;
    /// Throws Error naming the registry when the spec's variant or ordering
    /// is not valid for its kind.
    void check(const BailMethodSpec& spec) const;

    const ToolEntry& tool(std::string_view variant) const;
    const StringEntry& string(std::string_view variant) const;
    const PromptEntry& prompt(std::string_view variant) const;

    /// Every tool name any tool variant can produce.
    std::vector<std::string> tool_names() const;
    /// Every marker any string variant can produce.
    std::vector<std::string> markers() const;

private:
    std::map<std::string, ToolEntry, std::less<>> tools_;
    std::map<std::string, StringEntry, std::less<>> strings_;
    std::map<std::string, PromptEntry, std::less<>> prompts_;
};

ToolDefinition render_tool_definition(std::string_view model_name, std::string_view variant,
                                      const VariantRegistry& registry = VariantRegistry::builtin());

BailStringSpec render_string_suffix(std::string_view model_name, std::string_view variant,
                                    const VariantRegistry& registry = VariantRegistry::builtin());

std::string render_bail_prompt(PromptOrdering ordering, std::string_view variant,
                               const GlyphBinding& glyphs = {},
                               const VariantRegistry& registry = VariantRegistry::builtin());

/// Bail iff any tool call's name equals `tool_name` exactly.
BailSignal detect_tool_bail(const Message& response, std::string_view tool_name);

/// Bail iff `text` contains `marker`, ignoring ASCII case.
BailSignal detect_string_bail(std::string_view text, std::string_view marker);

/// Reads the choice out of <wellbeing>...</wellbeing> spans. The closing
/// tag may omit its leading '<'; tag names ignore case and inner spaces.
/// When several spans carry a recognized glyph, the last one decides.
BailSignal parse_wellbeing_response(std::string_view text, const GlyphBinding& glyphs = {});

/// Removes every case-insensitive occurrence of `marker`, collapsing the
/// whitespace around each removal to a single space.
std::string strip_bail_artifacts(std::string_view text, std::string_view marker);

/// Case-insensitive (ASCII) substring search; npos when absent.
std::size_t find_ignore_case(std::string_view haystack, std::string_view needle,
                             std::size_t from = 0) noexcept;

} // namespace bailkit
