#include "conretrieve/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "conretrieve/errors.hpp"
#include "conretrieve/hash.hpp"
#include "conretrieve/io.hpp"
#include "conretrieve/rng.hpp"
#include "conretrieve/text.hpp"

namespace conretrieve {

using nlohmann::json;

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kNormEps = 1e-12;
constexpr double kSqrt1_2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

const char* const kSpecialNames[Vocabulary::kNumSpecials] = {"[USR]", "[SYS]", "[PAD]", "[UNK]"};

double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u * kSqrt1_2)); }

double gelu_grad(double u) {
    return 0.5 * (1.0 + std::erf(u * kSqrt1_2)) + u * std::exp(-0.5 * u * u) * kInvSqrt2Pi;
}

double sigmoid_clamped(double a) {
    if (a > 30.0) a = 30.0;
    if (a < -30.0) a = -30.0;
    return 1.0 / (1.0 + std::exp(-a));
}

// y = x.w + b with x: T x a, w: a x b, b: 1 x b.
Mat linear(const Mat& x, const Mat& w, const Mat& b) {
    Mat y(x.rows, w.cols);
    for (size_t t = 0; t < x.rows; ++t) {
        double* yt = y.row(t);
        for (size_t j = 0; j < w.cols; ++j) yt[j] = b.at(0, j);
        const double* xt = x.row(t);
        for (size_t i = 0; i < x.cols; ++i) {
            const double xi = xt[i];
            const double* wi = w.row(i);
            for (size_t j = 0; j < w.cols; ++j) yt[j] += xi * wi[j];
        }
    }
    return y;
}

// Accumulates the gradients of y = x.w + b: dx += dy.w^T, dw += x^T.dy,
// db += column sums of dy.
void linear_backward(const Mat& x, const Mat& w, const Mat& dy, Mat& dx, Mat& dw, Mat& db) {
    for (size_t t = 0; t < x.rows; ++t) {
        const double* dyt = dy.row(t);
        const double* xt = x.row(t);
        double* dxt = dx.row(t);
        for (size_t i = 0; i < x.cols; ++i) {
            const double* wi = w.row(i);
            double* dwi = dw.row(i);
            double acc = 0.0;
            for (size_t j = 0; j < w.cols; ++j) {
                acc += dyt[j] * wi[j];
                dwi[j] += xt[i] * dyt[j];
            }
            dxt[i] += acc;
        }
        for (size_t j = 0; j < w.cols; ++j) db.at(0, j) += dyt[j];
    }
}

void layer_norm_forward(const Mat& x, const Mat& g, const Mat& b, Mat& out,
                        std::vector<double>& mean, std::vector<double>& rstd) {
    const size_t d = x.cols;
    out = Mat(x.rows, d);
    mean.resize(x.rows);
    rstd.resize(x.rows);
    for (size_t t = 0; t < x.rows; ++t) {
        const double* xt = x.row(t);
        double mu = 0.0;
        for (size_t j = 0; j < d; ++j) mu += xt[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) {
            const double c = xt[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        mean[t] = mu;
        rstd[t] = rs;
        double* ot = out.row(t);
        for (size_t j = 0; j < d; ++j) ot[j] = g.at(0, j) * (xt[j] - mu) * rs + b.at(0, j);
    }
}

// Returns dx and accumulates dg/db.
Mat layer_norm_backward(const Mat& dy, const Mat& x, const Mat& g, const std::vector<double>& mean,
                        const std::vector<double>& rstd, Mat& dg, Mat& db) {
    const size_t d = x.cols;
    Mat dx(x.rows, d);
    std::vector<double> xhat(d), dxhat(d);
    for (size_t t = 0; t < x.rows; ++t) {
        const double* xt = x.row(t);
        const double* dyt = dy.row(t);
        double m1 = 0.0, m2 = 0.0;
        for (size_t j = 0; j < d; ++j) {
            xhat[j] = (xt[j] - mean[t]) * rstd[t];
            dg.at(0, j) += dyt[j] * xhat[j];
            db.at(0, j) += dyt[j];
            dxhat[j] = dyt[j] * g.at(0, j);
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        double* dxt = dx.row(t);
        for (size_t j = 0; j < d; ++j) dxt[j] = rstd[t] * (dxhat[j] - m1 - xhat[j] * m2);
    }
    return dx;
}

EncoderParams make_shaped(const EncoderConfig& config, size_t vocab_size) {
    if (config.dim <= 0 || config.heads <= 0 || config.dim % config.heads != 0 ||
        config.layers < 0 || config.max_len <= 0 || config.ffn_mult <= 0)
        throw ShapeError("inconsistent encoder dims (dim " + std::to_string(config.dim) +
                         ", heads " + std::to_string(config.heads) + ")");
    if (vocab_size < Vocabulary::kNumSpecials) throw ShapeError("vocabulary smaller than specials");
    const size_t d = static_cast<size_t>(config.dim);
    const size_t f = d * static_cast<size_t>(config.ffn_mult);
    EncoderParams p;
    p.config = config;
    p.vocab_size = vocab_size;
    p.tok_emb = Mat(vocab_size, d);
    p.pos_emb = Mat(static_cast<size_t>(config.max_len), d);
    p.spk_emb = Mat(2, d);
    p.layers.resize(static_cast<size_t>(config.layers));
    for (LayerParams& L : p.layers) {
        L.ln1_g = Mat(1, d);
        L.ln1_b = Mat(1, d);
        L.wq = Mat(d, d);
        L.bq = Mat(1, d);
        L.wk = Mat(d, d);
        L.bk = Mat(1, d);
        L.wv = Mat(d, d);
        L.bv = Mat(1, d);
        L.wo = Mat(d, d);
        L.bo = Mat(1, d);
        L.ln2_g = Mat(1, d);
        L.ln2_b = Mat(1, d);
        L.w1 = Mat(d, f);
        L.b1 = Mat(1, f);
        L.w2 = Mat(f, d);
        L.b2 = Mat(1, d);
    }
    p.gphi_m = Mat(d, d);
    p.gphi_b = Mat(1, 1);
    return p;
}

template <typename Params, typename Ref>
std::vector<Ref> collect_refs(Params& p) {
    std::vector<Ref> refs;
    refs.push_back({"tok_emb", &p.tok_emb, true});
    refs.push_back({"pos_emb", &p.pos_emb, true});
    refs.push_back({"spk_emb", &p.spk_emb, true});
    for (size_t l = 0; l < p.layers.size(); ++l) {
        auto& L = p.layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        refs.push_back({pre + "ln1_g", &L.ln1_g, false});
        refs.push_back({pre + "ln1_b", &L.ln1_b, false});
        refs.push_back({pre + "wq", &L.wq, true});
        refs.push_back({pre + "bq", &L.bq, false});
        refs.push_back({pre + "wk", &L.wk, true});
        refs.push_back({pre + "bk", &L.bk, false});
        refs.push_back({pre + "wv", &L.wv, true});
        refs.push_back({pre + "bv", &L.bv, false});
        refs.push_back({pre + "wo", &L.wo, true});
        refs.push_back({pre + "bo", &L.bo, false});
        refs.push_back({pre + "ln2_g", &L.ln2_g, false});
        refs.push_back({pre + "ln2_b", &L.ln2_b, false});
        refs.push_back({pre + "w1", &L.w1, true});
        refs.push_back({pre + "b1", &L.b1, false});
        refs.push_back({pre + "w2", &L.w2, true});
        refs.push_back({pre + "b2", &L.b2, false});
    }
    refs.push_back({"gphi_m", &p.gphi_m, true});
    refs.push_back({"gphi_b", &p.gphi_b, false});
    return refs;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> kept_tokens, int min_count)
    : tokens_(std::move(kept_tokens)), min_count_(min_count < 1 ? 1 : min_count) {
    for (size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].empty()) throw SchemaError("vocabulary contains an empty token");
        if (!ids_.emplace(tokens_[i], kNumSpecials + static_cast<int>(i)).second)
            throw SchemaError("vocabulary contains duplicate token '" + tokens_[i] + "'");
    }
}

int Vocabulary::id_of(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
    if (id >= 0 && id < kNumSpecials) {
        static const std::string specials[kNumSpecials] = {kSpecialNames[0], kSpecialNames[1],
                                                           kSpecialNames[2], kSpecialNames[3]};
        return specials[id];
    }
    const size_t slot = static_cast<size_t>(id) - kNumSpecials;
    if (id < 0 || slot >= tokens_.size())
        throw ShapeError("token id " + std::to_string(id) + " out of range");
    return tokens_[slot];
}

std::string Vocabulary::canonical_json() const {
    json doc = {{"min_count", min_count_},
                {"specials", {kSpecialNames[0], kSpecialNames[1], kSpecialNames[2], kSpecialNames[3]}},
                {"tokens", tokens_}};
    return doc.dump();
}

std::string Vocabulary::hash() const { return hex64(fnv1a64(canonical_json())); }

void Vocabulary::save(const std::filesystem::path& path) const {
    write_file_bytes(path, canonical_json());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    json doc;
    try {
        doc = json::parse(read_file_bytes(path));
    } catch (const json::parse_error& e) {
        throw ParseError("vocabulary " + path.string() + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("tokens") || !doc["tokens"].is_array() ||
        !doc.contains("min_count") || !doc["min_count"].is_number_integer() ||
        !doc.contains("specials") || !doc["specials"].is_array())
        throw SchemaError("vocabulary " + path.string() + ": missing tokens/min_count/specials");
    const json& specials = doc["specials"];
    if (specials.size() != kNumSpecials)
        throw SchemaError("vocabulary " + path.string() + ": wrong special count");
    for (int i = 0; i < kNumSpecials; ++i)
        if (!specials[i].is_string() || specials[i].get<std::string>() != kSpecialNames[i])
            throw SchemaError("vocabulary " + path.string() + ": specials must be [USR],[SYS],[PAD],[UNK]");
    std::vector<std::string> tokens;
    tokens.reserve(doc["tokens"].size());
    for (const auto& t : doc["tokens"]) {
        if (!t.is_string()) throw SchemaError("vocabulary " + path.string() + ": non-string token");
        tokens.push_back(t.get<std::string>());
    }
    return Vocabulary(std::move(tokens), doc["min_count"].get<int>());
}

Vocabulary build_vocab(const std::vector<std::string>& texts, int min_count) {
    if (texts.empty()) throw EmptyCorpus("no texts to build a vocabulary from");
    if (min_count < 1) min_count = 1;
    std::map<std::string, long> counts;
    for (const std::string& text : texts)
        for (const std::string& w : word_tokens(text)) ++counts[w];
    if (counts.empty()) throw EmptyCorpus("the corpus contains no words");
    std::vector<std::pair<std::string, long>> kept;
    for (const auto& [word, count] : counts)
        if (count >= min_count) kept.emplace_back(word, count);
    if (kept.empty())
        throw EmptyCorpus("no word reaches the frequency floor of " + std::to_string(min_count));
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> tokens;
    tokens.reserve(kept.size());
    for (auto& [word, count] : kept) tokens.push_back(std::move(word));
    return Vocabulary(std::move(tokens), min_count);
}

namespace {

void push_token(TokenizedText& out, int id, std::string surface, int utterance, bool latest,
                int speaker) {
    out.ids.push_back(id);
    out.surface.push_back(std::move(surface));
    out.utterance_index.push_back(utterance);
    out.latest_mask.push_back(latest ? 1 : 0);
    out.speaker.push_back(speaker);
}

void drop_prefix(TokenizedText& t, size_t n) {
    t.ids.erase(t.ids.begin(), t.ids.begin() + static_cast<long>(n));
    t.utterance_index.erase(t.utterance_index.begin(), t.utterance_index.begin() + static_cast<long>(n));
    t.latest_mask.erase(t.latest_mask.begin(), t.latest_mask.begin() + static_cast<long>(n));
    t.speaker.erase(t.speaker.begin(), t.speaker.begin() + static_cast<long>(n));
    t.surface.erase(t.surface.begin(), t.surface.begin() + static_cast<long>(n));
}

}  // namespace

TokenizedText tokenize(const Conversation& conversation, const Vocabulary& vocab, size_t max_len) {
    if (conversation.utterances.empty() || conversation.latest().speaker != Speaker::User)
        throw SchemaError("conversation '" + conversation.id + "' must end with a user utterance");
    TokenizedText out;
    const size_t last = conversation.utterances.size() - 1;
    size_t latest_count = 0;
    for (size_t j = 0; j <= last; ++j) {
        const Utterance& u = conversation.utterances[j];
        const bool is_latest = j == last;
        const int spk = u.speaker == Speaker::User ? 0 : 1;
        push_token(out, spk == 0 ? Vocabulary::kUsr : Vocabulary::kSys,
                   spk == 0 ? "[USR]" : "[SYS]", static_cast<int>(j), is_latest, spk);
        if (is_latest) ++latest_count;
        for (const std::string& w : word_tokens(u.text)) {
            push_token(out, vocab.id_of(w), w, static_cast<int>(j), is_latest, spk);
            if (is_latest) ++latest_count;
        }
    }
    if (latest_count > max_len)
        throw LatestUtteranceTooLong("conversation '" + conversation.id + "': latest utterance has " +
                                     std::to_string(latest_count) + " tokens, limit " +
                                     std::to_string(max_len));
    if (out.ids.size() > max_len) drop_prefix(out, out.ids.size() - max_len);
    return out;
}

TokenizedText tokenize_summary(const std::string& text, const Vocabulary& vocab, size_t max_len) {
    TokenizedText out;
    push_token(out, Vocabulary::kUsr, "[USR]", 0, true, 0);
    for (const std::string& w : word_tokens(text)) {
        if (out.ids.size() >= max_len) break;
        push_token(out, vocab.id_of(w), w, 0, true, 0);
    }
    return out;
}

std::vector<TensorRef> tensor_refs(EncoderParams& params) {
    return collect_refs<EncoderParams, TensorRef>(params);
}

std::vector<ConstTensorRef> tensor_refs(const EncoderParams& params) {
    return collect_refs<const EncoderParams, ConstTensorRef>(params);
}

EncoderParams init_params(const EncoderConfig& config, size_t vocab_size, uint64_t seed) {
    EncoderParams p = make_shaped(config, vocab_size);
    Rng rng(seed);
    auto fill_normal = [&rng](Mat& m, double std) {
        for (double& x : m.data) x = rng.normal() * std;
    };
    // Token embeddings dominate at init so lexical overlap drives early
    // similarity; layer weights start near zero and learn on top of that.
    fill_normal(p.tok_emb, 0.1);
    fill_normal(p.pos_emb, 0.02);
    fill_normal(p.spk_emb, 0.02);
    for (LayerParams& L : p.layers) {
        L.ln1_g.fill(1.0);
        fill_normal(L.wq, 0.02);
        fill_normal(L.wk, 0.02);
        fill_normal(L.wv, 0.02);
        fill_normal(L.wo, 0.02);
        L.ln2_g.fill(1.0);
        fill_normal(L.w1, 0.02);
        fill_normal(L.w2, 0.02);
    }
    fill_normal(p.gphi_m, 0.02);
    return p;
}

EncoderParams zero_clone(const EncoderParams& params) {
    return make_shaped(params.config, params.vocab_size);
}

Mat encode_tokens(const TokenizedText& tokens, const EncoderParams& params, EncodeCache& cache) {
    const EncoderConfig& cfg = params.config;
    const size_t T = tokens.size();
    const size_t d = static_cast<size_t>(cfg.dim);
    if (T == 0) throw ShapeError("cannot encode an empty token sequence");
    if (T > static_cast<size_t>(cfg.max_len))
        throw ShapeError("sequence of " + std::to_string(T) + " tokens exceeds max_len " +
                         std::to_string(cfg.max_len));
    if (tokens.utterance_index.size() != T || tokens.latest_mask.size() != T ||
        tokens.speaker.size() != T)
        throw ShapeError("tokenization fields disagree on length");

    cache.x0 = Mat(T, d);
    for (size_t t = 0; t < T; ++t) {
        const int id = tokens.ids[t];
        if (id < 0 || static_cast<size_t>(id) >= params.vocab_size)
            throw ShapeError("token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(params.vocab_size));
        const int spk = tokens.speaker[t];
        if (spk != 0 && spk != 1) throw ShapeError("speaker index must be 0 or 1");
        double* xt = cache.x0.row(t);
        const double* tok = params.tok_emb.row(static_cast<size_t>(id));
        const double* pos = params.pos_emb.row(t);
        const double* sp = params.spk_emb.row(static_cast<size_t>(spk));
        for (size_t j = 0; j < d; ++j) xt[j] = tok[j] + pos[j] + sp[j];
    }

    const size_t heads = static_cast<size_t>(cfg.heads);
    const size_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Mat x = cache.x0;
    cache.layers.assign(params.layers.size(), LayerCache{});
    for (size_t l = 0; l < params.layers.size(); ++l) {
        const LayerParams& L = params.layers[l];
        LayerCache& lc = cache.layers[l];
        lc.x_in = x;
        layer_norm_forward(x, L.ln1_g, L.ln1_b, lc.xn1, lc.ln1_mean, lc.ln1_rstd);
        lc.q = linear(lc.xn1, L.wq, L.bq);
        lc.k = linear(lc.xn1, L.wk, L.bk);
        lc.v = linear(lc.xn1, L.wv, L.bv);

        lc.attn.assign(heads, Mat(T, T));
        lc.attn_cat = Mat(T, d);
        std::vector<double> scores(T);
        for (size_t h = 0; h < heads; ++h) {
            const size_t off = h * hd;
            Mat& p = lc.attn[h];
            for (size_t t = 0; t < T; ++t) {
                double mx = -1e300;
                for (size_t u = 0; u < T; ++u) {
                    scores[u] = dot(lc.q.row(t) + off, lc.k.row(u) + off, hd) * scale;
                    mx = std::max(mx, scores[u]);
                }
                double denom = 0.0;
                for (size_t u = 0; u < T; ++u) {
                    const double e = std::exp(scores[u] - mx);
                    p.at(t, u) = e;
                    denom += e;
                }
                double* cat = lc.attn_cat.row(t);
                for (size_t u = 0; u < T; ++u) {
                    const double pr = p.at(t, u) / denom;
                    p.at(t, u) = pr;
                    const double* vu = lc.v.row(u) + off;
                    for (size_t j = 0; j < hd; ++j) cat[off + j] += pr * vu[j];
                }
            }
        }

        Mat attn_proj = linear(lc.attn_cat, L.wo, L.bo);
        lc.x_res1 = Mat(T, d);
        for (size_t i = 0; i < lc.x_res1.size(); ++i)
            lc.x_res1.data[i] = x.data[i] + attn_proj.data[i];

        layer_norm_forward(lc.x_res1, L.ln2_g, L.ln2_b, lc.xn2, lc.ln2_mean, lc.ln2_rstd);
        lc.ffn_pre = linear(lc.xn2, L.w1, L.b1);
        lc.ffn_act = Mat(lc.ffn_pre.rows, lc.ffn_pre.cols);
        for (size_t i = 0; i < lc.ffn_pre.size(); ++i) lc.ffn_act.data[i] = gelu(lc.ffn_pre.data[i]);
        Mat ffn_out = linear(lc.ffn_act, L.w2, L.b2);
        x = Mat(T, d);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] = lc.x_res1.data[i] + ffn_out.data[i];
    }

    cache.h = x;
    if (cfg.normalize_rows) {
        cache.row_norm.resize(T);
        cache.e = Mat(T, d);
        for (size_t t = 0; t < T; ++t) {
            const double* ht = cache.h.row(t);
            const double r = std::sqrt(dot(ht, ht, d) + kNormEps);
            cache.row_norm[t] = r;
            double* et = cache.e.row(t);
            for (size_t j = 0; j < d; ++j) et[j] = ht[j] / r;
        }
    } else {
        cache.e = cache.h;
    }
    return cache.e;
}

Mat encode_tokens(const TokenizedText& tokens, const EncoderParams& params) {
    EncodeCache cache;
    return encode_tokens(tokens, params, cache);
}

void encode_backward(const TokenizedText& tokens, const EncoderParams& params,
                     const EncodeCache& cache, const Mat& d_out, const Mat* d_hidden_extra,
                     EncoderParams& grads) {
    const EncoderConfig& cfg = params.config;
    const size_t T = tokens.size();
    const size_t d = static_cast<size_t>(cfg.dim);
    if (d_out.rows != T || d_out.cols != d) throw ShapeError("output gradient shape mismatch");

    Mat dh(T, d);
    if (cfg.normalize_rows) {
        for (size_t t = 0; t < T; ++t) {
            const double* et = cache.e.row(t);
            const double* dt = d_out.row(t);
            const double r = cache.row_norm[t];
            const double ed = dot(et, dt, d);
            double* dht = dh.row(t);
            for (size_t j = 0; j < d; ++j) dht[j] = (dt[j] - et[j] * ed) / r;
        }
    } else {
        dh = d_out;
    }
    if (d_hidden_extra) {
        if (d_hidden_extra->rows != T || d_hidden_extra->cols != d)
            throw ShapeError("hidden gradient shape mismatch");
        for (size_t i = 0; i < dh.size(); ++i) dh.data[i] += d_hidden_extra->data[i];
    }

    const size_t heads = static_cast<size_t>(cfg.heads);
    const size_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Mat dx = dh;
    for (size_t l = params.layers.size(); l-- > 0;) {
        const LayerParams& L = params.layers[l];
        const LayerCache& lc = cache.layers[l];
        LayerParams& G = grads.layers[l];

        // x_out = x_res1 + ffn_act.w2 + b2
        Mat d_ffn_act(T, lc.ffn_act.cols);
        linear_backward(lc.ffn_act, L.w2, dx, d_ffn_act, G.w2, G.b2);
        Mat d_ffn_pre(T, lc.ffn_pre.cols);
        for (size_t i = 0; i < d_ffn_pre.size(); ++i)
            d_ffn_pre.data[i] = d_ffn_act.data[i] * gelu_grad(lc.ffn_pre.data[i]);
        Mat d_xn2(T, d);
        linear_backward(lc.xn2, L.w1, d_ffn_pre, d_xn2, G.w1, G.b1);
        Mat d_res1 =
            layer_norm_backward(d_xn2, lc.x_res1, L.ln2_g, lc.ln2_mean, lc.ln2_rstd, G.ln2_g, G.ln2_b);
        for (size_t i = 0; i < d_res1.size(); ++i) d_res1.data[i] += dx.data[i];

        // x_res1 = x_in + attn_cat.wo + bo
        Mat d_attn_cat(T, d);
        linear_backward(lc.attn_cat, L.wo, d_res1, d_attn_cat, G.wo, G.bo);

        Mat dq(T, d), dk(T, d), dv(T, d);
        std::vector<double> dp(T);
        for (size_t h = 0; h < heads; ++h) {
            const size_t off = h * hd;
            const Mat& p = lc.attn[h];
            for (size_t t = 0; t < T; ++t) {
                const double* dcat = d_attn_cat.row(t) + off;
                double pdp = 0.0;
                for (size_t u = 0; u < T; ++u) {
                    dp[u] = dot(dcat, lc.v.row(u) + off, hd);
                    pdp += p.at(t, u) * dp[u];
                }
                for (size_t u = 0; u < T; ++u) {
                    const double pr = p.at(t, u);
                    const double ds = pr * (dp[u] - pdp) * scale;
                    const double* ku = lc.k.row(u) + off;
                    const double* qt = lc.q.row(t) + off;
                    double* dqt = dq.row(t) + off;
                    double* dku = dk.row(u) + off;
                    double* dvu = dv.row(u) + off;
                    for (size_t j = 0; j < hd; ++j) {
                        dqt[j] += ds * ku[j];
                        dku[j] += ds * qt[j];
                        dvu[j] += pr * dcat[j];
                    }
                }
            }
        }

        Mat d_xn1(T, d);
        linear_backward(lc.xn1, L.wq, dq, d_xn1, G.wq, G.bq);
        linear_backward(lc.xn1, L.wk, dk, d_xn1, G.wk, G.bk);
        linear_backward(lc.xn1, L.wv, dv, d_xn1, G.wv, G.bv);
        Mat d_x_in =
            layer_norm_backward(d_xn1, lc.x_in, L.ln1_g, lc.ln1_mean, lc.ln1_rstd, G.ln1_g, G.ln1_b);
        for (size_t i = 0; i < d_x_in.size(); ++i) d_x_in.data[i] += d_res1.data[i];
        dx = std::move(d_x_in);
    }

    for (size_t t = 0; t < T; ++t) {
        const double* dxt = dx.row(t);
        double* dtok = grads.tok_emb.row(static_cast<size_t>(tokens.ids[t]));
        double* dpos = grads.pos_emb.row(t);
        double* dspk = grads.spk_emb.row(static_cast<size_t>(tokens.speaker[t]));
        for (size_t j = 0; j < d; ++j) {
            dtok[j] += dxt[j];
            dpos[j] += dxt[j];
            dspk[j] += dxt[j];
        }
    }
}

std::vector<double> latest_mean(const Mat& rows, const std::vector<uint8_t>& latest_mask) {
    if (rows.rows != latest_mask.size()) throw ShapeError("mask length does not match row count");
    std::vector<double> s(rows.cols, 0.0);
    size_t count = 0;
    for (size_t t = 0; t < rows.rows; ++t) {
        if (!latest_mask[t]) continue;
        const double* rt = rows.row(t);
        for (size_t j = 0; j < rows.cols; ++j) s[j] += rt[j];
        ++count;
    }
    if (count == 0) throw NoLatestTokens("no latest-utterance tokens to average");
    for (double& v : s) v /= static_cast<double>(count);
    return s;
}

std::vector<double> relevance_weights(const Mat& rows, const std::vector<uint8_t>& latest_mask,
                                      const EncoderParams& params,
                                      const std::vector<double>* s_override) {
    const size_t d = static_cast<size_t>(params.config.dim);
    if (rows.cols != d) throw ShapeError("row width does not match encoder dim");
    const std::vector<double> s = s_override ? *s_override : latest_mean(rows, latest_mask);
    if (s.size() != d) throw ShapeError("latest mean width does not match encoder dim");
    std::vector<double> ms(d, 0.0);
    for (size_t i = 0; i < d; ++i) ms[i] = dot(params.gphi_m.row(i), s.data(), d);
    const double b = params.gphi_b.at(0, 0);
    std::vector<double> w(rows.rows);
    for (size_t t = 0; t < rows.rows; ++t)
        w[t] = latest_mask[t] ? 1.0 : sigmoid_clamped(dot(rows.row(t), ms.data(), d) + b);
    return w;
}

WeightedEmbedding weighted_conversation_embedding(const TokenizedText& tokens,
                                                  const EncoderParams& params) {
    EncodeCache cache;
    WeightedEmbedding we;
    we.unweighted = encode_tokens(tokens, params, cache);
    we.s = params.config.latest_mean_from_raw ? latest_mean(cache.h, tokens.latest_mask)
                                              : latest_mean(we.unweighted, tokens.latest_mask);
    we.weights = relevance_weights(we.unweighted, tokens.latest_mask, params, &we.s);
    we.rows = we.unweighted;
    for (size_t t = 0; t < we.rows.rows; ++t) {
        double* rt = we.rows.row(t);
        for (size_t j = 0; j < we.rows.cols; ++j) rt[j] *= we.weights[t];
    }
    return we;
}

json dump_weights(const Conversation& conversation, const Vocabulary& vocab,
                  const EncoderParams& params) {
    const TokenizedText tokens =
        tokenize(conversation, vocab, static_cast<size_t>(params.config.max_len));
    const WeightedEmbedding we = weighted_conversation_embedding(tokens, params);
    json rows = json::array();
    for (size_t t = 0; t < tokens.size(); ++t) {
        rows.push_back({{"token", tokens.surface[t]},
                        {"utterance", tokens.utterance_index[t]},
                        {"speaker", tokens.speaker[t] == 0 ? "user" : "system"},
                        {"weight", we.weights[t]}});
    }
    return json{{"conversation_id", conversation.id}, {"tokens", rows}};
}

namespace {
constexpr char kCheckpointMagic[4] = {'C', 'N', 'V', 'S'};
constexpr uint32_t kCheckpointVersion = 1;
}  // namespace

std::string checkpoint_bytes(const EncoderParams& params, const std::string& vocab_hash) {
    if (vocab_hash.size() != 16)
        throw ShapeError("vocab hash must be 16 hex characters, got '" + vocab_hash + "'");
    ByteWriter w;
    w.bytes(std::string_view(kCheckpointMagic, 4));
    w.u32(kCheckpointVersion);
    w.u32(static_cast<uint32_t>(params.config.dim));
    w.u32(static_cast<uint32_t>(params.config.layers));
    w.u32(static_cast<uint32_t>(params.config.heads));
    w.u32(static_cast<uint32_t>(params.config.max_len));
    w.u32(static_cast<uint32_t>(params.config.ffn_mult));
    w.u64(params.vocab_size);
    w.u8(params.config.normalize_rows ? 1 : 0);
    w.u8(params.config.latest_mean_from_raw ? 1 : 0);
    w.bytes(vocab_hash);

    const auto refs = tensor_refs(params);
    uint64_t total = 0;
    for (const auto& r : refs) total += r.tensor->size();
    w.u64(total);
    for (const auto& r : refs)
        for (double v : r.tensor->data) w.f32(static_cast<float>(v));
    w.u64(fnv1a64(w.buf));
    return std::move(w.buf);
}

std::string save_checkpoint(const EncoderParams& params, const std::string& vocab_hash,
                            const std::filesystem::path& path) {
    const std::string bytes = checkpoint_bytes(params, vocab_hash);
    const std::filesystem::path tmp = path.string() + ".tmp";
    write_file_bytes(tmp, bytes);
    std::filesystem::rename(tmp, path);

    uint64_t total = 0;
    for (const auto& r : tensor_refs(params)) total += r.tensor->size();
    const std::string fingerprint = hex64(fnv1a64(bytes));
    json sidecar = {{"format_version", kCheckpointVersion},
                    {"dim", params.config.dim},
                    {"layers", params.config.layers},
                    {"heads", params.config.heads},
                    {"max_len", params.config.max_len},
                    {"ffn_mult", params.config.ffn_mult},
                    {"vocab_size", params.vocab_size},
                    {"normalize_rows", params.config.normalize_rows},
                    {"latest_mean_from_raw", params.config.latest_mean_from_raw},
                    {"vocab_hash", vocab_hash},
                    {"parameter_count", total},
                    {"fingerprint", fingerprint}};
    write_file_bytes(path.string() + ".json", sidecar.dump(2) + "\n");
    return fingerprint;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 12) throw ChecksumError("checkpoint " + path.string() + " is truncated");
    const uint64_t stored = [&] {
        ByteReader tail{std::string_view(bytes).substr(bytes.size() - 8)};
        return tail.u64();
    }();
    const uint64_t computed = fnv1a64(std::string_view(bytes).substr(0, bytes.size() - 8));
    if (stored != computed)
        throw ChecksumError("checkpoint " + path.string() + " failed its checksum");

    ByteReader r{std::string_view(bytes).substr(0, bytes.size() - 8)};
    if (r.bytes(4) != std::string_view(kCheckpointMagic, 4))
        throw VersionMismatch("checkpoint " + path.string() + " has the wrong magic bytes");
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw VersionMismatch("checkpoint " + path.string() + " is format version " +
                              std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    EncoderConfig cfg;
    cfg.dim = static_cast<int>(r.u32());
    cfg.layers = static_cast<int>(r.u32());
    cfg.heads = static_cast<int>(r.u32());
    cfg.max_len = static_cast<int>(r.u32());
    cfg.ffn_mult = static_cast<int>(r.u32());
    const uint64_t vocab_size = r.u64();
    cfg.normalize_rows = r.u8() != 0;
    cfg.latest_mean_from_raw = r.u8() != 0;
    const std::string vocab_hash(r.bytes(16));

    LoadedCheckpoint loaded;
    try {
        loaded.params = make_shaped(cfg, vocab_size);
    } catch (const ShapeError& e) {
        throw VersionMismatch("checkpoint " + path.string() + " header is inconsistent: " + e.what());
    }
    const uint64_t total = r.u64();
    auto refs = tensor_refs(loaded.params);
    uint64_t expected = 0;
    for (const auto& ref : refs) expected += ref.tensor->size();
    if (total != expected)
        throw VersionMismatch("checkpoint " + path.string() + " carries " + std::to_string(total) +
                              " parameters, expected " + std::to_string(expected));
    for (auto& ref : refs)
        for (double& v : ref.tensor->data) v = static_cast<double>(r.f32());
    if (r.pos != r.buf.size())
        throw VersionMismatch("checkpoint " + path.string() + " has trailing bytes");

    loaded.fingerprint = hex64(fnv1a64(bytes));
    loaded.vocab_hash = vocab_hash;
    return loaded;
}

}  // namespace conretrieve
