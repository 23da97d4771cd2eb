#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bailkit/conversation.hpp"

namespace bailkit {

/// Raised for malformed dataset files; the message carries a line or record locator.
class DatasetError : public Error {
public:
    using Error::Error;
};

struct PromptRecord {
    std::string id;
    std::string category;
    std::string text;

    bool operator==(const PromptRecord&) const = default;
};

struct PromptDataset {
    std::string name;
    std::vector<PromptRecord> records;

    bool operator==(const PromptDataset&) const = default;

    std::map<std::string, std::size_t> category_counts() const;
};

struct TranscriptDataset {
    std::string name;
    std::vector<Conversation> conversations;
    std::map<std::string, std::string> categories; // conversation id -> category, when known

    bool operator==(const TranscriptDataset&) const = default;

    std::optional<std::string> category_of(const std::string& id) const;
};

struct LoadReport {
    std::size_t dropped_empty = 0;     // no messages, or no user message after repair
    std::size_t dropped_filtered = 0;  // removed by the tag filter
    std::size_t merged_messages = 0;   // same-role neighbours folded together
    std::size_t dropped_messages = 0;  // leading assistant or tool messages removed
};

struct JailbreakContext {
    std::string name;
    std::string jailbreak_user;
    std::string compliance_assistant;
};

/// One JSON object per line: {"id", "category", "text"}. Blank lines are skipped.
PromptDataset load_prompt_dataset(const std::filesystem::path& path);
void save_prompt_dataset(const PromptDataset& dataset, const std::filesystem::path& path);

/// Conversation records, one per line. Non-alternating turns are repaired by
/// merging same-role neighbours; conversations left without a user message
/// are dropped and counted. When `tag_filter` is set, only records whose
/// "tags" array contains it are kept.
TranscriptDataset load_transcripts(const std::filesystem::path& path,
                                   const std::optional<std::string>& tag_filter = std::nullopt,
                                   LoadReport* report = nullptr);
void save_transcripts(const TranscriptDataset& dataset, const std::filesystem::path& path);

/// Applies the alternation repair to a single conversation. Returns nullopt
/// when nothing usable remains.
std::optional<Conversation> repair_alternation(Conversation conv, LoadReport* report = nullptr);

/// Strips markup tags and decodes character entities until nothing changes.
std::string sanitize_scraped_text(std::string_view text);

JailbreakContext load_jailbreak_context(const std::filesystem::path& path);
/// Every *.json record in `dir`, sorted by name.
std::vector<JailbreakContext> load_jailbreak_contexts(const std::filesystem::path& dir);

/// [user: jailbreak, assistant: compliance, user: prompt] for each prompt.
TranscriptDataset build_jailbreak_dataset(const JailbreakContext& jb, const PromptDataset& base);

} // namespace bailkit
