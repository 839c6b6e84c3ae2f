#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "conretrieve/backend.hpp"
#include "conretrieve/corpus.hpp"

namespace conretrieve {

struct Summary {
    std::string conversation_id;  // dialogue id; turn_index selects the user turn
    int turn_index = 1;           // 1-based
    std::string text;             // non-empty, single line
};

// Rule-based stand-in for the remote summarizer: closing phrases map to
// "The user wants nothing more"; otherwise a domain keyword in the latest
// user utterance picks a verb and the remaining content words are listed as
// constraints, so distinct utterances get distinct summaries.
class MockSummarizer : public ChatBackend {
   public:
    std::string complete(const std::string& prompt) override;
    std::string describe() const override { return "mock"; }
    int calls() const { return calls_.load(); }

   private:
    std::atomic<int> calls_{0};
};

// The mock's summary rule applied to a latest user utterance. Pure.
std::string mock_summary_for(const std::string& latest_user_utterance);

// Append-only JSONL store of summaries keyed by (conversation_id,
// turn_index). A default-constructed cache is memory-only; a path-backed one
// loads existing lines at construction and appends on every insert.
class SummaryCache {
   public:
    SummaryCache() = default;
    explicit SummaryCache(std::filesystem::path file);

    bool contains(const std::string& conversation_id, int turn_index) const;
    const Summary* find(const std::string& conversation_id, int turn_index) const;
    void put(const Summary& summary);

    size_t size() const { return order_.size(); }
    const std::vector<Summary>& entries() const { return order_; }
    const std::filesystem::path& path() const { return file_; }

   private:
    std::filesystem::path file_;
    std::vector<Summary> order_;                      // file order
    std::map<std::pair<std::string, int>, size_t> by_key_;  // key -> index into order_
    std::mutex write_mutex_;
};

// The full instruction-plus-exemplars summarization prompt with the given
// conversation serialized into the test slot as USER:/SYSTEM: lines. Pure
// and byte-stable across runs.
std::string render_prompt(const Conversation& conversation);

// One prompt round-trip through the backend, collapsed to a single trimmed
// line. Throws EmptyCompletion when the model returns nothing usable.
std::string summarize_text(const Conversation& conversation, ChatBackend& backend);
Summary summarize(const AnnotatedExample& example, ChatBackend& backend);

// Fills the cache for every example that is not already covered, issuing up
// to `jobs` concurrent backend requests. Completed summaries are persisted
// in example order as soon as their contiguous prefix is ready, so a failure
// part-way leaves a valid cache covering a prefix of the missing examples.
// Returns the number of newly generated summaries.
size_t summarize_corpus(const std::vector<AnnotatedExample>& examples, ChatBackend& backend,
                        SummaryCache& cache, int jobs = 4, RetryPolicy retry = {});

}  // namespace conretrieve
