#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "conretrieve/corpus.hpp"
#include "conretrieve/encoder.hpp"
#include "conretrieve/linalg.hpp"
#include "conretrieve/summarizer.hpp"

namespace conretrieve {

struct TrainingPair {
    Conversation conversation;
    Summary summary;
};

struct TrainConfig {
    int batch_size = 32;
    double learning_rate = 5e-5;
    int epochs = 20;
    double weight_decay = 0.01;
    uint64_t seed = 0;
    double clip_norm = 1.0;    // global gradient norm; <= 0 disables clipping
    double temperature = 1.0;  // softmax temperature over in-batch similarities
};

struct TrainReport {
    std::vector<double> epoch_loss;      // mean per-example loss per epoch
    std::vector<double> epoch_accuracy;  // in-batch retrieval accuracy per epoch
    double wall_seconds = 0.0;           // informational; never serialized
    std::string checkpoint_path;
};

// Late-interaction similarity: mean over conversation rows of the maximum
// dot product against any summary row. Zero rows contribute zero to the sum
// but still count in the mean's denominator. Ties go to the lowest summary
// row, which also fixes the subgradient routing.
double similarity(const Mat& conversation_rows, const Mat& summary_rows);
double similarity(const Mat& conversation_rows, const Mat& summary_rows,
                  std::vector<size_t>& argmax_rows);

// In-batch contrastive loss over a square similarity matrix: each row's
// diagonal entry against that row's softmax (stable log-sum-exp). Throws
// NonFiniteLoss when any entry is non-finite.
double loss_from_sims(const Mat& sims, double temperature = 1.0);

// Fraction of rows whose diagonal strictly dominates the row.
double batch_accuracy(const Mat& sims);

struct TokenizedPair {
    TokenizedText conversation;
    TokenizedText summary;
};

TokenizedPair tokenize_pair(const TrainingPair& pair, const Vocabulary& vocab, size_t max_len);

struct BatchResult {
    double loss = 0.0;
    Mat sims;  // sims(i, j) = similarity(conversation i, summary j)
};

BatchResult batch_loss(const std::vector<TokenizedPair>& batch, const EncoderParams& params,
                       double temperature = 1.0);

struct BatchGradients {
    double loss = 0.0;
    Mat sims;
    EncoderParams grads;  // congruent with params; accumulated in pair order
};

// Reverse-mode gradients of batch_loss through the similarity argmax, the
// relevance weighting, the latest-utterance mean, row normalization, and the
// encoder stack.
BatchGradients batch_gradients(const std::vector<TokenizedPair>& batch,
                               const EncoderParams& params, double temperature = 1.0);

struct AdamWConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct AdamWState {
    std::vector<Mat> m;
    std::vector<Mat> v;
    long step = 0;
};

AdamWState make_adamw_state(const EncoderParams& params);

// One bias-corrected update on a flat array; decay applies decoupled weight
// decay against the pre-update value.
void adamw_update(double* p, const double* g, double* m, double* v, size_t n, long step,
                  const AdamWConfig& config, bool decay);

// Full-model step. Weight decay is skipped for layer-norm and bias tensors.
void adamw_step(EncoderParams& params, const EncoderParams& grads, AdamWState& state,
                const AdamWConfig& config);

// Scales gradients so their global L2 norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(EncoderParams& grads, double max_norm);

struct TrainOutcome {
    EncoderParams params;
    TrainReport report;
};

// Seeded-shuffle epochs over the pairs; a trailing batch of one is dropped
// when other batches exist. When checkpoint_path is non-empty, the initial
// parameters and every epoch's parameters are written there in turn, so the
// file always holds the last finite state even if training aborts on
// NonFiniteLoss.
TrainOutcome train(const std::vector<TrainingPair>& pairs, const Vocabulary& vocab,
                   const TrainConfig& config, const EncoderParams& initial,
                   const std::filesystem::path& checkpoint_path);

// Convenience: parameters initialized from config.seed.
TrainOutcome train(const std::vector<TrainingPair>& pairs, const Vocabulary& vocab,
                   const TrainConfig& config, const EncoderConfig& encoder_config,
                   const std::filesystem::path& checkpoint_path);

}  // namespace conretrieve
