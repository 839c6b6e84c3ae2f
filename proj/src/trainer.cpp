#include "conretrieve/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "conretrieve/errors.hpp"
#include "conretrieve/rng.hpp"

namespace conretrieve {

double similarity(const Mat& conversation_rows, const Mat& summary_rows,
                  std::vector<size_t>& argmax_rows) {
    if (conversation_rows.cols != summary_rows.cols)
        throw DimensionMismatch("conversation dim " + std::to_string(conversation_rows.cols) +
                                " vs summary dim " + std::to_string(summary_rows.cols));
    if (conversation_rows.rows == 0 || summary_rows.rows == 0)
        throw DimensionMismatch("similarity of an empty embedding");
    const size_t d = conversation_rows.cols;
    argmax_rows.resize(conversation_rows.rows);
    double total = 0.0;
    for (size_t t = 0; t < conversation_rows.rows; ++t) {
        const double* ct = conversation_rows.row(t);
        double best = -1e300;
        size_t arg = 0;
        for (size_t a = 0; a < summary_rows.rows; ++a) {
            const double s = dot(ct, summary_rows.row(a), d);
            if (s > best) {
                best = s;
                arg = a;
            }
        }
        argmax_rows[t] = arg;
        total += best;
    }
    return total / static_cast<double>(conversation_rows.rows);
}

double similarity(const Mat& conversation_rows, const Mat& summary_rows) {
    std::vector<size_t> argmax_rows;
    return similarity(conversation_rows, summary_rows, argmax_rows);
}

double loss_from_sims(const Mat& sims, double temperature) {
    if (sims.rows != sims.cols || sims.rows == 0)
        throw DimensionMismatch("similarity matrix must be square and non-empty");
    for (double v : sims.data)
        if (!std::isfinite(v)) throw NonFiniteLoss("non-finite similarity in batch");
    const size_t B = sims.rows;
    double loss = 0.0;
    for (size_t i = 0; i < B; ++i) {
        const double* row = sims.row(i);
        double mx = -1e300;
        for (size_t j = 0; j < B; ++j) mx = std::max(mx, row[j] / temperature);
        double denom = 0.0;
        for (size_t j = 0; j < B; ++j) denom += std::exp(row[j] / temperature - mx);
        loss += mx + std::log(denom) - row[i] / temperature;
    }
    loss /= static_cast<double>(B);
    if (!std::isfinite(loss)) throw NonFiniteLoss("contrastive loss is non-finite");
    return loss;
}

double batch_accuracy(const Mat& sims) {
    const size_t B = sims.rows;
    if (B == 0) return 0.0;
    size_t hits = 0;
    for (size_t i = 0; i < B; ++i) {
        bool dominant = true;
        for (size_t j = 0; j < B; ++j)
            if (j != i && sims.at(i, j) >= sims.at(i, i)) {
                dominant = false;
                break;
            }
        if (dominant) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(B);
}

TokenizedPair tokenize_pair(const TrainingPair& pair, const Vocabulary& vocab, size_t max_len) {
    return TokenizedPair{tokenize(pair.conversation, vocab, max_len),
                         tokenize_summary(pair.summary.text, vocab, max_len)};
}

namespace {

// Everything the backward pass needs per conversation in a batch.
struct ConvForward {
    EncodeCache cache;
    Mat e;                        // encoder output rows
    std::vector<double> s;        // latest mean feeding the relevance scorer
    std::vector<double> weights;  // per-token relevance weights
    Mat weighted;                 // rows entering the similarity
    size_t latest_count = 0;
};

ConvForward forward_conversation(const TokenizedText& tokens, const EncoderParams& params) {
    ConvForward f;
    f.e = encode_tokens(tokens, params, f.cache);
    f.s = params.config.latest_mean_from_raw ? latest_mean(f.cache.h, tokens.latest_mask)
                                             : latest_mean(f.e, tokens.latest_mask);
    f.weights = relevance_weights(f.e, tokens.latest_mask, params, &f.s);
    f.weighted = f.e;
    for (size_t t = 0; t < f.weighted.rows; ++t) {
        double* rt = f.weighted.row(t);
        for (size_t j = 0; j < f.weighted.cols; ++j) rt[j] *= f.weights[t];
    }
    for (uint8_t m : tokens.latest_mask) f.latest_count += m ? 1 : 0;
    return f;
}

}  // namespace

BatchResult batch_loss(const std::vector<TokenizedPair>& batch, const EncoderParams& params,
                       double temperature) {
    if (batch.empty()) throw DimensionMismatch("empty batch");
    const size_t B = batch.size();
    std::vector<Mat> conv(B), summ(B);
    for (size_t i = 0; i < B; ++i) {
        conv[i] = weighted_conversation_embedding(batch[i].conversation, params).rows;
        summ[i] = encode_tokens(batch[i].summary, params);
    }
    BatchResult result;
    result.sims = Mat(B, B);
    for (size_t i = 0; i < B; ++i)
        for (size_t j = 0; j < B; ++j) result.sims.at(i, j) = similarity(conv[i], summ[j]);
    result.loss = loss_from_sims(result.sims, temperature);
    return result;
}

BatchGradients batch_gradients(const std::vector<TokenizedPair>& batch,
                               const EncoderParams& params, double temperature) {
    if (batch.empty()) throw DimensionMismatch("empty batch");
    const size_t B = batch.size();
    const size_t d = static_cast<size_t>(params.config.dim);

    std::vector<ConvForward> conv(B);
    std::vector<EncodeCache> summ_cache(B);
    std::vector<Mat> summ(B);
    for (size_t i = 0; i < B; ++i) {
        conv[i] = forward_conversation(batch[i].conversation, params);
        summ[i] = encode_tokens(batch[i].summary, params, summ_cache[i]);
    }

    BatchGradients out;
    out.sims = Mat(B, B);
    // argmax[i][j][t] = summary-j row that wins for conversation-i token t
    std::vector<std::vector<std::vector<size_t>>> argmax(B,
                                                         std::vector<std::vector<size_t>>(B));
    for (size_t i = 0; i < B; ++i)
        for (size_t j = 0; j < B; ++j)
            out.sims.at(i, j) = similarity(conv[i].weighted, summ[j], argmax[i][j]);
    out.loss = loss_from_sims(out.sims, temperature);

    // dL/dsims: softmax rows minus the diagonal indicator, averaged over B.
    Mat dsims(B, B);
    for (size_t i = 0; i < B; ++i) {
        double mx = -1e300;
        for (size_t j = 0; j < B; ++j) mx = std::max(mx, out.sims.at(i, j) / temperature);
        double denom = 0.0;
        for (size_t j = 0; j < B; ++j) denom += std::exp(out.sims.at(i, j) / temperature - mx);
        for (size_t j = 0; j < B; ++j) {
            const double p = std::exp(out.sims.at(i, j) / temperature - mx) / denom;
            dsims.at(i, j) = (p - (i == j ? 1.0 : 0.0)) / (static_cast<double>(B) * temperature);
        }
    }

    // Route similarity gradients through the recorded argmax rows.
    std::vector<Mat> d_weighted(B), d_summ(B);
    for (size_t i = 0; i < B; ++i) d_weighted[i] = Mat(conv[i].weighted.rows, d);
    for (size_t j = 0; j < B; ++j) d_summ[j] = Mat(summ[j].rows, d);
    for (size_t i = 0; i < B; ++i) {
        const double inv_t = 1.0 / static_cast<double>(conv[i].weighted.rows);
        for (size_t j = 0; j < B; ++j) {
            const double g = dsims.at(i, j) * inv_t;
            for (size_t t = 0; t < conv[i].weighted.rows; ++t) {
                const size_t a = argmax[i][j][t];
                const double* zr = summ[j].row(a);
                const double* hr = conv[i].weighted.row(t);
                double* dhr = d_weighted[i].row(t);
                double* dzr = d_summ[j].row(a);
                for (size_t c = 0; c < d; ++c) {
                    dhr[c] += g * zr[c];
                    dzr[c] += g * hr[c];
                }
            }
        }
    }

    out.grads = zero_clone(params);

    // Conversation path: product rule through the per-token weights, the
    // bilinear scorer, and the latest-utterance mean, then the encoder.
    for (size_t i = 0; i < B; ++i) {
        const TokenizedText& tokens = batch[i].conversation;
        const ConvForward& f = conv[i];
        const size_t T = f.e.rows;
        Mat de(T, d);
        std::vector<double> ds(d, 0.0);
        std::vector<double> ms(d, 0.0);  // M.s, reused for every history row
        for (size_t r = 0; r < d; ++r) ms[r] = dot(params.gphi_m.row(r), f.s.data(), d);
        for (size_t t = 0; t < T; ++t) {
            const double* dwt = d_weighted[i].row(t);
            double* det = de.row(t);
            if (tokens.latest_mask[t]) {
                for (size_t c = 0; c < d; ++c) det[c] += dwt[c];
                continue;
            }
            const double w = f.weights[t];
            const double* et = f.e.row(t);
            double dw = 0.0;
            for (size_t c = 0; c < d; ++c) {
                det[c] += w * dwt[c];
                dw += dwt[c] * et[c];
            }
            const double da = dw * w * (1.0 - w);
            for (size_t c = 0; c < d; ++c) det[c] += da * ms[c];
            for (size_t r = 0; r < d; ++r) {
                double* gm = out.grads.gphi_m.row(r);
                const double er = et[r] * da;
                for (size_t c = 0; c < d; ++c) gm[c] += er * f.s[c];
            }
            out.grads.gphi_b.at(0, 0) += da;
            for (size_t r = 0; r < d; ++r) {
                const double* mr = params.gphi_m.row(r);
                for (size_t c = 0; c < d; ++c) ds[c] += da * et[r] * mr[c];
            }
        }
        // Latest mean: distribute ds evenly over the latest rows, either into
        // the output rows or the pre-normalization rows per config.
        const double inv_latest = 1.0 / static_cast<double>(f.latest_count);
        if (params.config.latest_mean_from_raw) {
            Mat d_hidden(T, d);
            for (size_t t = 0; t < T; ++t) {
                if (!tokens.latest_mask[t]) continue;
                double* dht = d_hidden.row(t);
                for (size_t c = 0; c < d; ++c) dht[c] += ds[c] * inv_latest;
            }
            encode_backward(tokens, params, f.cache, de, &d_hidden, out.grads);
        } else {
            for (size_t t = 0; t < T; ++t) {
                if (!tokens.latest_mask[t]) continue;
                double* det = de.row(t);
                for (size_t c = 0; c < d; ++c) det[c] += ds[c] * inv_latest;
            }
            encode_backward(tokens, params, f.cache, de, nullptr, out.grads);
        }
    }

    for (size_t j = 0; j < B; ++j)
        encode_backward(batch[j].summary, params, summ_cache[j], d_summ[j], nullptr, out.grads);

    return out;
}

AdamWState make_adamw_state(const EncoderParams& params) {
    AdamWState state;
    for (const auto& ref : tensor_refs(params)) {
        state.m.emplace_back(ref.tensor->rows, ref.tensor->cols);
        state.v.emplace_back(ref.tensor->rows, ref.tensor->cols);
    }
    return state;
}

void adamw_update(double* p, const double* g, double* m, double* v, size_t n, long step,
                  const AdamWConfig& config, bool decay) {
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
    for (size_t i = 0; i < n; ++i) {
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        const double prev = p[i];
        p[i] = prev - config.lr * (mhat / (std::sqrt(vhat) + config.eps) +
                                   (decay ? config.weight_decay * prev : 0.0));
    }
}

void adamw_step(EncoderParams& params, const EncoderParams& grads, AdamWState& state,
                const AdamWConfig& config) {
    auto prefs = tensor_refs(params);
    auto grefs = tensor_refs(grads);
    if (prefs.size() != grefs.size() || prefs.size() != state.m.size())
        throw DimensionMismatch("optimizer state does not match the parameter set");
    state.step += 1;
    for (size_t k = 0; k < prefs.size(); ++k) {
        if (prefs[k].tensor->size() != grefs[k].tensor->size())
            throw DimensionMismatch("gradient tensor '" + grefs[k].name + "' has the wrong shape");
        adamw_update(prefs[k].tensor->data.data(), grefs[k].tensor->data.data(),
                     state.m[k].data.data(), state.v[k].data.data(), prefs[k].tensor->size(),
                     state.step, config, prefs[k].decay);
    }
}

double clip_gradients(EncoderParams& grads, double max_norm) {
    double sq = 0.0;
    auto refs = tensor_refs(grads);
    for (const auto& ref : refs)
        for (double v : ref.tensor->data) sq += v * v;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& ref : refs)
            for (double& v : ref.tensor->data) v *= scale;
    }
    return norm;
}

TrainOutcome train(const std::vector<TrainingPair>& pairs, const Vocabulary& vocab,
                   const TrainConfig& config, const EncoderParams& initial,
                   const std::filesystem::path& checkpoint_path) {
    if (config.batch_size < 1) throw DimensionMismatch("batch size must be at least 1");
    if (config.learning_rate <= 0.0) throw DimensionMismatch("learning rate must be positive");
    if (pairs.empty() || (pairs.size() < 2 && config.batch_size != 1))
        throw InsufficientExamples("training needs at least 2 pairs (or an explicit batch size of 1)");

    const auto started = std::chrono::steady_clock::now();
    const size_t max_len = static_cast<size_t>(initial.config.max_len);
    std::vector<TokenizedPair> tokenized;
    tokenized.reserve(pairs.size());
    for (const TrainingPair& pair : pairs) tokenized.push_back(tokenize_pair(pair, vocab, max_len));

    TrainOutcome outcome;
    outcome.params = initial;
    outcome.report.checkpoint_path = checkpoint_path.string();
    const std::string vocab_hash = vocab.hash();
    if (!checkpoint_path.empty()) save_checkpoint(outcome.params, vocab_hash, checkpoint_path);

    AdamWState state = make_adamw_state(outcome.params);
    AdamWConfig adamw;
    adamw.lr = config.learning_rate;
    adamw.weight_decay = config.weight_decay;

    Rng rng(config.seed);
    std::vector<size_t> order(tokenized.size());
    std::iota(order.begin(), order.end(), 0);

    const size_t batch_size = static_cast<size_t>(config.batch_size);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        double hit_sum = 0.0;
        size_t row_count = 0;
        for (size_t start = 0; start < order.size(); start += batch_size) {
            const size_t count = std::min(batch_size, order.size() - start);
            if (count == 1 && order.size() > 1) break;  // a lone pair has no in-batch negatives
            std::vector<TokenizedPair> batch;
            batch.reserve(count);
            for (size_t i = 0; i < count; ++i) batch.push_back(tokenized[order[start + i]]);
            BatchGradients bg = batch_gradients(batch, outcome.params, config.temperature);
            loss_sum += bg.loss * static_cast<double>(count);
            hit_sum += batch_accuracy(bg.sims) * static_cast<double>(count);
            row_count += count;
            clip_gradients(bg.grads, config.clip_norm);
            adamw_step(outcome.params, bg.grads, state, adamw);
        }
        outcome.report.epoch_loss.push_back(loss_sum / static_cast<double>(row_count));
        outcome.report.epoch_accuracy.push_back(hit_sum / static_cast<double>(row_count));
        if (!checkpoint_path.empty()) save_checkpoint(outcome.params, vocab_hash, checkpoint_path);
    }

    outcome.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return outcome;
}

TrainOutcome train(const std::vector<TrainingPair>& pairs, const Vocabulary& vocab,
                   const TrainConfig& config, const EncoderConfig& encoder_config,
                   const std::filesystem::path& checkpoint_path) {
    return train(pairs, vocab, config, init_params(encoder_config, vocab.size(), config.seed),
                 checkpoint_path);
}

}  // namespace conretrieve
