#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "conretrieve/backend.hpp"
#include "conretrieve/corpus.hpp"
#include "conretrieve/index.hpp"
#include "conretrieve/summarizer.hpp"

namespace conretrieve {

// Sorted "domain-slot=value" pairs joined by "; "; the exact inverse of
// parse_state on well-formed states.
std::string canonical_state(const DialogueState& state);

struct ParsedState {
    DialogueState state;
    int warnings = 0;  // unparseable fragments dropped
};

// Total: reads "domain-slot=value" pairs separated by ";" up to the first
// newline; anything unparseable is dropped and counted, never thrown.
ParsedState parse_state(const std::string& completion);

// Fraction of turns whose predicted state equals the gold state exactly.
double jga(const std::vector<DialogueState>& predicted, const std::vector<DialogueState>& gold);

// Micro-averaged F1 over slot-value pairs pooled across turns; 1.0 when both
// sides are empty everywhere.
double slot_f1(const std::vector<DialogueState>& predicted, const std::vector<DialogueState>& gold);

// Uniform sample without replacement, a pure function of (id multiset, seed):
// the candidates are id-sorted, shuffled once, and the prefix taken, so the
// sample for a smaller size nests inside the sample for a larger one.
std::vector<AnnotatedExample> sample_support(const std::vector<AnnotatedExample>& examples,
                                             size_t size, uint64_t seed);

struct PromptSpec {
    std::string instruction =
        "Below are example conversations, each followed by its dialogue state written as "
        "domain-slot=value pairs separated by \"; \". Complete the state line for the final "
        "conversation.";
    size_t max_exemplars = 5;
};

// Renders the instruction, then up to max_exemplars exemplar blocks in
// reverse retrieval order (least similar first, best one adjacent to the
// test conversation), then the test conversation with a bare trailing
// "state:" cue. `exemplars` arrive most-similar first, as retrieved.
std::string assemble_prompt(const PromptSpec& spec, const std::vector<const IndexEntry*>& exemplars,
                            const Conversation& test_conversation);

// DST stand-in that answers with the state line of the exemplar nearest the
// test block, i.e. the top-1 retrieval's gold state.
class EchoMockBackend : public ChatBackend {
   public:
    std::string complete(const std::string& prompt) override;
    std::string describe() const override { return "echo-mock"; }
};

struct ExperimentConfig {
    std::vector<size_t> support_sizes = {100};
    std::vector<uint64_t> seeds = {0};
    size_t k = 5;
    bool rerank = false;
    size_t rerank_pool = 20;
    std::string holdout_domain;  // empty: test on the full pool (test = support pool)
    size_t jobs = 1;
    std::string model_name = "echo-mock";
    RetryPolicy retry;
};

struct TurnRecord {
    std::string conversation_id;
    DialogueState predicted;
    DialogueState gold;
    std::vector<std::string> retrieved_ids;  // most similar first
    int parse_warnings = 0;
    std::string error;  // empty on success
};

struct EvalRun {
    uint64_t seed = 0;
    size_t support_size = 0;
    double jga = 0.0;
    double slot_f1 = 0.0;
    std::vector<std::string> support_ids;
    std::vector<TurnRecord> turns;
};

struct Aggregate {
    size_t support_size = 0;
    size_t runs = 0;
    double jga_mean = 0.0, jga_stddev = 0.0;
    double f1_mean = 0.0, f1_stddev = 0.0;
};

struct ExperimentResult {
    std::vector<EvalRun> runs;
    std::vector<Aggregate> aggregates;  // one per support size, over seeds
};

// For every (support size x seed): sample a support set, build an index, and
// score every test conversation through retrieve -> prompt -> backend ->
// parse. Without a holdout domain the test set is the full pool; with one,
// support comes from the other domains and the heldout examples are the test
// set. Per-turn backend failures are recorded in the run; only a failure of
// every single turn aborts.
ExperimentResult run_experiment(const std::vector<AnnotatedExample>& examples,
                                const SummaryCache& cache, const ModelContext& model,
                                const ExperimentConfig& config, ChatBackend& dst_backend,
                                const PromptSpec& spec = {});

// Report JSON holding runs, per-turn records, and aggregates; deterministic
// for fixed inputs (no timestamps or timings).
nlohmann::json report_json(const ExperimentResult& result, const ExperimentConfig& config);

// Fixed-format aggregate table, one row per support size.
std::string aggregate_table(const ExperimentResult& result, const std::string& model_name);

}  // namespace conretrieve
