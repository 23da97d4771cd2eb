#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bailkit/bail_methods.hpp"
#include "bailkit/classifiers.hpp"
#include "bailkit/conversation.hpp"
#include "bailkit/datasets.hpp"
#include "bailkit/provider.hpp"

namespace bailkit {

/// One (item, method, sample[, turn]) outcome.
struct TrialRecord {
    std::string dataset_id;
    std::string item_id;
    std::optional<std::string> category;
    std::string model; // display name of the model whose bail decision this is
    std::optional<BailMethodSpec> method;
    int sample_index = 0;
    std::optional<int> turn_index; // set for transcript replay
    CompletionOutcome outcome;
    std::optional<BailSignal> signal; // set iff method is set
    std::optional<RefusalLabel> refusal;
    std::optional<std::string> cross_model;     // responder that wrote the assistant turn
    std::optional<std::string> response_source; // replay: "original" or "fresh"
    std::optional<Conversation> probe_context;  // prompt methods: conversation before the probe

    bool operator==(const TrialRecord&) const = default;

    bool is_replay() const noexcept { return turn_index.has_value(); }
    std::string method_key() const { return method ? method->key() : std::string("none"); }
};

void to_json(nlohmann::json& j, const TrialRecord& t);
TrialRecord trial_from_json(const nlohmann::json& j);

/// Deterministic log order: dataset, item, method, sample index, turn index.
void sort_trials(std::vector<TrialRecord>& trials);

/// One record per line, sorted, no timestamps.
void write_trial_log(const std::vector<TrialRecord>& trials, const std::filesystem::path& path);
std::string format_trial_log(const std::vector<TrialRecord>& trials);
std::vector<TrialRecord> read_trial_log(const std::filesystem::path& path);

/// Signal for a method trial: `detect` reads Ok responses; Blocked and
/// Failed map to their Unknown reasons.
BailSignal signal_for_outcome(const CompletionOutcome& outcome,
                              const std::function<BailSignal(const Message&)>& detect);

/// A single evaluation context ending in a user message.
struct EvalItem {
    std::string id;
    std::optional<std::string> category;
    Conversation context;
};

std::vector<EvalItem> items_from(const PromptDataset& dataset);
/// Requires every conversation to end with a user message.
std::vector<EvalItem> items_from(const TranscriptDataset& dataset);

enum class ResponseSource { original, fresh };
enum class ReplaySemantics { measurement, intervention };

std::string_view to_string(ResponseSource source) noexcept;
ResponseSource parse_response_source(std::string_view text);

struct RunPlan {
    std::string dataset_id;
    ModelEndpoint endpoint;
    std::vector<BailMethodSpec> methods;
    SamplingParams params;
    ResponseSource response_source = ResponseSource::original;
    ReplaySemantics semantics = ReplaySemantics::measurement;
    std::uint64_t seed = 0;
    GlyphBinding glyphs;

    void validate(const VariantRegistry& registry, bool refusal_only = false) const;
};

void to_json(nlohmann::json& j, const RunPlan& plan);
/// Fields: dataset_id, endpoint, methods, params, response_source,
/// semantics, seed, glyphs. Only endpoint is required.
RunPlan plan_from_json(const nlohmann::json& j);

struct ProbeResult {
    CompletionOutcome outcome;
    BailSignal signal;
    Conversation continuation; // the context with every bail-probe message removed
};

/// Per (conversation, sample index) flag: did any turn bail.
struct ConversationFlag {
    std::string dataset_id;
    std::string conversation_id;
    std::string model;
    std::string method;
    std::optional<std::string> response_source;
    int sample_index = 0;
    bool bailed = false;
    int turns = 0;
    int resolved_turns = 0; // turns whose signal was Bail or Continue

    bool operator==(const ConversationFlag&) const = default;
};

/// Folds replay trials into conversation flags (OR over turns).
std::vector<ConversationFlag> conversation_flags(const std::vector<TrialRecord>& trials);

struct ReplayResult {
    std::vector<TrialRecord> trials;
    std::vector<ConversationFlag> flags;
};

/// Drives experiments through a ProviderClient. Work fans out up to the
/// endpoint's max_parallel; results are sorted before they are returned,
/// so scheduling never changes the output.
class Runner {
public:
    explicit Runner(std::shared_ptr<ProviderClient> client, JudgeBackend* judge = nullptr,
                    const VariantRegistry& registry = VariantRegistry::builtin());

    std::vector<TrialRecord> run_single_turn(const RunPlan& plan, const std::vector<EvalItem>& items);

    /// Appends the rendered bail prompt as a temporary user message, samples
    /// one reply and parses it. `context` must end with an assistant message.
    ProbeResult run_bail_prompt_probe(const Conversation& context, PromptOrdering ordering,
                                      std::string_view variant, const ModelEndpoint& endpoint,
                                      const SamplingParams& params, int sample_index = 0,
                                      const GlyphBinding& glyphs = {});

    /// No bail apparatus; every completion is labelled by the refusal judge.
    std::vector<TrialRecord> run_baseline_responses(const RunPlan& plan, const std::vector<EvalItem>& items);

    ReplayResult replay_transcripts(const RunPlan& plan, const TranscriptDataset& dataset);

    /// `responder` writes the assistant turn; plan.endpoint answers the probe.
    std::vector<TrialRecord> run_cross_model(const RunPlan& plan, const ModelEndpoint& responder,
                                             const std::vector<EvalItem>& items);

private:
    struct MethodTrial;
    MethodTrial run_method_once(const RunPlan& plan, const BailMethodSpec& method,
                                const Conversation& context, int sample_index);

    std::shared_ptr<ProviderClient> client_;
    JudgeBackend* judge_;
    const VariantRegistry& registry_;
};

/// Adds the string-method suffix to the leading system message, creating one
/// if needed.
Conversation with_system_suffix(const Conversation& conv, std::string_view suffix);

} // namespace bailkit
