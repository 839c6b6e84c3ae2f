#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "conretrieve/corpus.hpp"
#include "conretrieve/linalg.hpp"

namespace conretrieve {

// Word-level vocabulary. Specials occupy the lowest ids; kept tokens follow
// in frequency-descending, then lexicographic order, so the id assignment is
// a pure function of the token multiset.
class Vocabulary {
   public:
    static constexpr int kUsr = 0;
    static constexpr int kSys = 1;
    static constexpr int kPad = 2;
    static constexpr int kUnk = 3;
    static constexpr int kNumSpecials = 4;

    Vocabulary() = default;
    Vocabulary(std::vector<std::string> kept_tokens, int min_count);

    int id_of(const std::string& word) const;  // kUnk for OOV
    const std::string& token_of(int id) const;
    size_t size() const { return kNumSpecials + tokens_.size(); }
    int min_count() const { return min_count_; }

    // The exact bytes save() writes; hash() fingerprints them, independent of
    // any incidental file formatting.
    std::string canonical_json() const;
    std::string hash() const;

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

   private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;
    int min_count_ = 1;
};

Vocabulary build_vocab(const std::vector<std::string>& texts, int min_count);

struct TokenizedText {
    std::vector<int> ids;
    std::vector<int> utterance_index;   // original utterance ordinal, non-decreasing
    std::vector<uint8_t> latest_mask;   // true on the final utterance's tokens
    std::vector<int> speaker;           // 0 user, 1 system
    std::vector<std::string> surface;   // token strings, specials as [USR]/[SYS]

    size_t size() const { return ids.size(); }
};

// Serializes a conversation as speaker-marker-prefixed word ids. Truncation
// drops the oldest tokens, possibly mid-utterance, but never touches the
// latest utterance (it anchors the relevance weighting downstream).
TokenizedText tokenize(const Conversation& conversation, const Vocabulary& vocab, size_t max_len);

// A summary is a single user-voiced segment; every token counts as "latest".
// Overlong summaries keep their first max_len tokens.
TokenizedText tokenize_summary(const std::string& text, const Vocabulary& vocab, size_t max_len);

struct EncoderConfig {
    int dim = 64;
    int layers = 2;
    int heads = 4;
    int max_len = 128;
    int ffn_mult = 4;
    bool normalize_rows = true;
    // When set, the latest-utterance mean feeding the relevance scorer is
    // taken from pre-normalization hidden rows instead of the output rows.
    bool latest_mean_from_raw = false;
};

struct LayerParams {
    Mat ln1_g, ln1_b;        // 1 x d
    Mat wq, wk, wv, wo;      // d x d
    Mat bq, bk, bv, bo;      // 1 x d
    Mat ln2_g, ln2_b;        // 1 x d
    Mat w1, b1;              // d x 4d, 1 x 4d
    Mat w2, b2;              // 4d x d, 1 x d
};

struct EncoderParams {
    EncoderConfig config;
    size_t vocab_size = 0;
    Mat tok_emb;  // V x d
    Mat pos_emb;  // max_len x d
    Mat spk_emb;  // 2 x d
    std::vector<LayerParams> layers;
    Mat gphi_m;  // d x d bilinear relevance scorer
    Mat gphi_b;  // 1 x 1
};

// Named view over every parameter tensor in serialization order. `decay`
// marks tensors subject to weight decay (embeddings and weight matrices;
// never layer-norm scales or biases).
template <typename MatPtr>
struct BasicTensorRef {
    std::string name;
    MatPtr tensor;
    bool decay;
};
using TensorRef = BasicTensorRef<Mat*>;
using ConstTensorRef = BasicTensorRef<const Mat*>;

std::vector<TensorRef> tensor_refs(EncoderParams& params);
std::vector<ConstTensorRef> tensor_refs(const EncoderParams& params);

EncoderParams init_params(const EncoderConfig& config, size_t vocab_size, uint64_t seed);
EncoderParams zero_clone(const EncoderParams& params);

// Everything the backward pass needs from a forward pass.
struct LayerCache {
    Mat x_in;
    std::vector<double> ln1_mean, ln1_rstd;
    Mat xn1;
    Mat q, k, v;
    std::vector<Mat> attn;  // per-head T x T softmax rows
    Mat attn_cat;
    Mat x_res1;
    std::vector<double> ln2_mean, ln2_rstd;
    Mat xn2;
    Mat ffn_pre, ffn_act;
};

struct EncodeCache {
    Mat x0;
    std::vector<LayerCache> layers;
    Mat h;                         // pre-normalization output rows
    std::vector<double> row_norm;  // per-row L2 norms when normalization is on
    Mat e;                         // returned rows
};

// Token + position + speaker embeddings through `layers` pre-norm
// transformer blocks (bidirectional attention, GELU feed-forward); rows are
// L2-normalized when the config says so. Throws ShapeError on out-of-range
// ids or overlength input.
Mat encode_tokens(const TokenizedText& tokens, const EncoderParams& params);
Mat encode_tokens(const TokenizedText& tokens, const EncoderParams& params, EncodeCache& cache);

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output rows).
// `d_hidden_extra`, when non-null, is added to the pre-normalization rows'
// gradient (the relevance scorer may read those rows directly).
void encode_backward(const TokenizedText& tokens, const EncoderParams& params,
                     const EncodeCache& cache, const Mat& d_out, const Mat* d_hidden_extra,
                     EncoderParams& grads);

// Mean of the latest-utterance rows. Throws NoLatestTokens when the mask is
// all false.
std::vector<double> latest_mean(const Mat& rows, const std::vector<uint8_t>& latest_mask);

// sigmoid(row . M s + b) for history rows, exactly 1 for latest rows. The
// sigmoid argument is clamped to +/-30 so history weights stay strictly
// inside (0, 1). `s_override` substitutes a precomputed latest mean.
std::vector<double> relevance_weights(const Mat& rows, const std::vector<uint8_t>& latest_mask,
                                      const EncoderParams& params,
                                      const std::vector<double>* s_override = nullptr);

struct WeightedEmbedding {
    Mat rows;                     // weighted rows: w_t * f(x)_t for history, f(x)_t for latest
    Mat unweighted;               // f(x) rows as returned by encode_tokens
    std::vector<double> weights;  // aligned with the tokenization
    std::vector<double> s;        // the latest-utterance mean the scorer saw
};

WeightedEmbedding weighted_conversation_embedding(const TokenizedText& tokens,
                                                  const EncoderParams& params);

// Per-token (token, utterance, weight) report for external heat-map
// rendering.
nlohmann::json dump_weights(const Conversation& conversation, const Vocabulary& vocab,
                            const EncoderParams& params);

struct LoadedCheckpoint {
    EncoderParams params;
    std::string fingerprint;  // content hash of the checkpoint file bytes
    std::string vocab_hash;   // hash of the vocabulary the params were trained with
};

// The exact bytes save_checkpoint writes: magic, format version, dims,
// tensors as little-endian f32 in tensor_refs order, content checksum
// trailer. Exposed so in-memory parameters can be fingerprinted without
// touching disk.
std::string checkpoint_bytes(const EncoderParams& params, const std::string& vocab_hash);

// Writes checkpoint_bytes atomically plus a human-readable JSON sidecar at
// <path>.json. Returns the file fingerprint.
std::string save_checkpoint(const EncoderParams& params, const std::string& vocab_hash,
                            const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace conretrieve
