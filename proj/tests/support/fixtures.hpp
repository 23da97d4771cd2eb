#pragma once

// Synthetic datasets and scripted providers shared by unit and acceptance tests.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bailkit/datasets.hpp"
#include "bailkit/mock_provider.hpp"
#include "bailkit/random.hpp"

namespace bailkit::fixtures {

inline constexpr const char* bail_token = "[bail-here]";

/// 20 prompts over 5 categories; "abusive" holds exactly one prompt.
inline PromptDataset twenty_prompts() {
    PromptDataset ds;
    ds.name = "synthetic20";
    const char* categories[] = {"coding", "trivia", "writing", "advice"};
    for (int i = 0; i < 19; ++i) {
        const std::string cat = categories[i % 4];
        ds.records.push_back({"p" + std::to_string(i + 1), cat, "[" + cat + "] request number " + std::to_string(i + 1)});
    }
    ds.records.push_back({"p20", "abusive", "[abusive] you are worthless and I will keep insulting you"});
    return ds;
}

/// Bails through every method on prompts tagged "[abusive]", continues otherwise.
inline std::vector<MockRule> category_bail_rules() {
    return MockBackend::rules_from_json(nlohmann::json::parse(R"([
      {"when": {"last_user_contains": "wellbeing", "any_user_contains": "[abusive]"},
       "reply": {"text": "<wellbeing>🔀</wellbeing>"}},
      {"when": {"last_user_contains": "wellbeing"},
       "reply": {"text": "<wellbeing>🟢</wellbeing>"}},
      {"when": {"tools_present": true, "last_user_contains": "[abusive]"},
       "reply": {"text": "", "tool_call": "$offered"}},
      {"when": {"system_contains": "output the string", "last_user_contains": "[abusive]"},
       "reply": {"text": "SWITCHCONVERSATION TERMINATE ENDCHAT DISCONNECT"}},
      {"when": {}, "reply": {"text": "Happy to help with that."}}
    ])"));
}

/// Bails whenever the turn under test carries the bail token: tool calls
/// and bail strings key on the last user message, the bail prompt keys on
/// the assistant reply it follows (which repeats the token).
inline std::vector<MockRule> replay_rules() {
    return MockBackend::rules_from_json(nlohmann::json::parse(R"([
      {"when": {"last_user_contains": "wellbeing", "last_assistant_contains": "[bail-here]"},
       "reply": {"text": "<wellbeing>🔀</wellbeing>"}},
      {"when": {"last_user_contains": "wellbeing"},
       "reply": {"text": "<wellbeing>🟢</wellbeing>"}},
      {"when": {"tools_present": true, "last_user_contains": "[bail-here]"},
       "reply": {"text": "", "tool_call": "$offered"}},
      {"when": {"system_contains": "output the string", "last_user_contains": "[bail-here]"},
       "reply": {"text": "SWITCHCONVERSATION"}},
      {"when": {"last_user_contains": "[bail-here]"}, "reply": {"text": "noted [bail-here]"}},
      {"when": {}, "reply": {"text": "fresh reply"}}
    ])"));
}

struct ReplayFixture {
    TranscriptDataset dataset;
    std::vector<bool> expected; // per conversation: does any user turn carry the token
};

/// `n` conversations of 1 to 5 user turns; about one turn in six carries the
/// bail token. Some conversations end on a user turn with no reply.
inline ReplayFixture replay_fixture(std::size_t n, std::uint64_t seed) {
    ReplayFixture fx;
    fx.dataset.name = "replay" + std::to_string(n);
    SplitMix64 rng(seed);
    for (std::size_t c = 0; c < n; ++c) {
        Conversation conv;
        conv.id = "conv" + std::to_string(c);
        if (rng.below(3) == 0) conv.messages.push_back(Message::system("You are a helpful assistant."));
        const auto turns = 1 + rng.below(5);
        const bool ends_on_user = rng.below(4) == 0;
        bool any = false;
        for (std::uint64_t t = 0; t < turns; ++t) {
            const bool bail = rng.below(6) == 0;
            any = any || bail;
            std::string user = "conversation " + std::to_string(c) + " turn " + std::to_string(t);
            if (bail) user += std::string(" ") + bail_token;
            conv.messages.push_back(Message::user(user));
            if (t + 1 < turns || !ends_on_user) {
                conv.messages.push_back(Message::assistant(bail ? std::string("original reply ") + bail_token
                                                                : std::string("original reply")));
            }
        }
        fx.expected.push_back(any);
        fx.dataset.categories[conv.id] = any ? "has-bail" : "clean";
        fx.dataset.conversations.push_back(std::move(conv));
    }
    return fx;
}

} // namespace bailkit::fixtures
