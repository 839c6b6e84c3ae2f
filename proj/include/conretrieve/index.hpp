#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "conretrieve/corpus.hpp"
#include "conretrieve/encoder.hpp"
#include "conretrieve/summarizer.hpp"

namespace conretrieve {

struct IndexEntry {
    AnnotatedExample example;
    Summary summary;
    Mat key_embedding;     // summary rows under f_theta, f32-quantized
    Mat latest_embedding;  // the example's latest utterance alone, f32-quantized
};

struct IndexHeader {
    std::string checkpoint_fingerprint;
    std::string vocab_hash;
    EncoderConfig config;
    uint64_t entry_count = 0;
};

struct SupportIndex {
    IndexHeader header;
    std::vector<IndexEntry> entries;
};

// The parameters a query must present to use an index. The fingerprint is
// the content hash of the parameters' serialized form, so it is identical
// whether the params live in memory or were round-tripped through a file.
struct ModelContext {
    EncoderParams params;
    Vocabulary vocab;
    std::string checkpoint_fingerprint;
    std::string vocab_hash;
};

ModelContext make_context(const EncoderParams& params, const Vocabulary& vocab);
ModelContext make_context(LoadedCheckpoint checkpoint, Vocabulary vocab);  // validates the pair

// Content fingerprint of parameters as they would serialize.
std::string params_fingerprint(const EncoderParams& params, const std::string& vocab_hash);

struct ScoredEntry {
    size_t entry_index;
    double score;
};

struct RetrievalResult {
    std::string query_id;
    std::vector<ScoredEntry> ranked;  // scores non-increasing, ties by entry order
};

// One entry per support example, keyed by its cached summary's embedding.
// Throws MissingSummary (naming the example) on a cache gap and EmptyIndex
// on an empty support set.
SupportIndex build_index(const std::vector<AnnotatedExample>& support, const SummaryCache& cache,
                         const ModelContext& model);

// Exhaustive late-interaction scoring of every entry against the weighted
// conversation embedding; top-k by score, ties by insertion order. Entry
// scoring fans out over `jobs` threads; results do not depend on the thread
// count. Throws FingerprintMismatch when the model is not the one the index
// was built with.
RetrievalResult query(const SupportIndex& index, const Conversation& conversation,
                      const ModelContext& model, size_t k, size_t jobs = 1);

// Two-stage retrieval: a pool of pool_size candidates via query, re-scored
// by the similarity of the bare latest utterances, top-k of that.
RetrievalResult rerank_latest(const SupportIndex& index, const Conversation& conversation,
                              const ModelContext& model, size_t pool_size, size_t k,
                              size_t jobs = 1);

// Versioned binary persistence with a whole-file checksum trailer; load
// verifies the checksum before anything else, so truncation or corruption
// surfaces as ChecksumError rather than garbage.
void save_index(const SupportIndex& index, const std::filesystem::path& path);
SupportIndex load_index(const std::filesystem::path& path);

}  // namespace conretrieve
