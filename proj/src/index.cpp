#include "conretrieve/index.hpp"

#include <algorithm>

#include <json.hpp>

#include "conretrieve/errors.hpp"
#include "conretrieve/hash.hpp"
#include "conretrieve/io.hpp"
#include "conretrieve/parallel.hpp"
#include "conretrieve/trainer.hpp"

namespace conretrieve {

using nlohmann::json;

namespace {

constexpr char kIndexMagic[4] = {'C', 'I', 'D', 'X'};
constexpr uint32_t kIndexVersion = 1;

void quantize_f32(Mat& m) {
    for (double& v : m.data) v = static_cast<double>(static_cast<float>(v));
}

Conversation latest_only(const Conversation& conversation) {
    Conversation c;
    c.id = conversation.id;
    c.utterances.push_back(conversation.latest());
    return c;
}

json example_to_json(const AnnotatedExample& ex) {
    json utterances = json::array();
    for (const Utterance& u : ex.conversation.utterances)
        utterances.push_back(
            {{"speaker", u.speaker == Speaker::User ? "user" : "system"}, {"text", u.text}});
    return json{{"dialogue_id", ex.dialogue_id},
                {"turn_index", ex.turn_index},
                {"conversation_id", ex.conversation.id},
                {"utterances", utterances},
                {"state", ex.state},
                {"state_delta", ex.state_delta},
                {"domains", ex.domain_tags}};
}

AnnotatedExample example_from_json(const json& node) {
    AnnotatedExample ex;
    ex.dialogue_id = node.at("dialogue_id").get<std::string>();
    ex.turn_index = node.at("turn_index").get<int>();
    ex.conversation.id = node.at("conversation_id").get<std::string>();
    for (const auto& u : node.at("utterances")) {
        const std::string role = u.at("speaker").get<std::string>();
        if (role != "user" && role != "system")
            throw SchemaError("index entry utterance speaker '" + role + "' is not user|system");
        ex.conversation.utterances.push_back(
            {role == "user" ? Speaker::User : Speaker::System, u.at("text").get<std::string>()});
    }
    ex.state = node.at("state").get<DialogueState>();
    ex.state_delta = node.at("state_delta").get<DialogueState>();
    for (const auto& d : node.at("domains")) ex.domain_tags.insert(d.get<std::string>());
    return ex;
}

void check_model(const SupportIndex& index, const ModelContext& model) {
    if (index.header.checkpoint_fingerprint != model.checkpoint_fingerprint)
        throw FingerprintMismatch("index was built with checkpoint " +
                                  index.header.checkpoint_fingerprint + " but the active one is " +
                                  model.checkpoint_fingerprint);
    if (index.header.vocab_hash != model.vocab_hash)
        throw FingerprintMismatch("index was built with vocabulary " + index.header.vocab_hash +
                                  " but the active one is " + model.vocab_hash);
}

}  // namespace

std::string params_fingerprint(const EncoderParams& params, const std::string& vocab_hash) {
    return hex64(fnv1a64(checkpoint_bytes(params, vocab_hash)));
}

ModelContext make_context(const EncoderParams& params, const Vocabulary& vocab) {
    ModelContext ctx;
    ctx.params = params;
    ctx.vocab = vocab;
    ctx.vocab_hash = vocab.hash();
    ctx.checkpoint_fingerprint = params_fingerprint(params, ctx.vocab_hash);
    return ctx;
}

ModelContext make_context(LoadedCheckpoint checkpoint, Vocabulary vocab) {
    if (vocab.hash() != checkpoint.vocab_hash)
        throw FingerprintMismatch("checkpoint was trained with vocabulary " +
                                  checkpoint.vocab_hash + " but the loaded one hashes to " +
                                  vocab.hash());
    ModelContext ctx;
    ctx.params = std::move(checkpoint.params);
    ctx.vocab = std::move(vocab);
    ctx.vocab_hash = checkpoint.vocab_hash;
    ctx.checkpoint_fingerprint = checkpoint.fingerprint;
    return ctx;
}

SupportIndex build_index(const std::vector<AnnotatedExample>& support, const SummaryCache& cache,
                         const ModelContext& model) {
    if (support.empty()) throw EmptyIndex("cannot build an index from zero support examples");
    SupportIndex index;
    index.header.checkpoint_fingerprint = model.checkpoint_fingerprint;
    index.header.vocab_hash = model.vocab_hash;
    index.header.config = model.params.config;
    index.header.entry_count = support.size();

    const size_t max_len = static_cast<size_t>(model.params.config.max_len);
    index.entries.reserve(support.size());
    for (const AnnotatedExample& ex : support) {
        const Summary* summary = cache.find(ex.dialogue_id, ex.turn_index);
        if (!summary)
            throw MissingSummary("support example '" + ex.conversation.id +
                                 "' has no cached summary");
        IndexEntry entry;
        entry.example = ex;
        entry.summary = *summary;
        entry.key_embedding =
            encode_tokens(tokenize_summary(summary->text, model.vocab, max_len), model.params);
        entry.latest_embedding =
            encode_tokens(tokenize(latest_only(ex.conversation), model.vocab, max_len), model.params);
        quantize_f32(entry.key_embedding);
        quantize_f32(entry.latest_embedding);
        index.entries.push_back(std::move(entry));
    }
    return index;
}

namespace {

RetrievalResult rank_top_k(const std::string& query_id, const std::vector<double>& scores,
                           size_t k) {
    std::vector<size_t> order(scores.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    RetrievalResult result;
    result.query_id = query_id;
    const size_t take = std::min(k, order.size());
    result.ranked.reserve(take);
    for (size_t i = 0; i < take; ++i) result.ranked.push_back({order[i], scores[order[i]]});
    return result;
}

}  // namespace

RetrievalResult query(const SupportIndex& index, const Conversation& conversation,
                      const ModelContext& model, size_t k, size_t jobs) {
    if (index.entries.empty()) throw EmptyIndex("cannot query an empty index");
    if (k < 1) throw ShapeError("retrieval depth k must be at least 1");
    check_model(index, model);

    const size_t max_len = static_cast<size_t>(model.params.config.max_len);
    const WeightedEmbedding query_emb =
        weighted_conversation_embedding(tokenize(conversation, model.vocab, max_len), model.params);

    std::vector<double> scores(index.entries.size());
    parallel_for(index.entries.size(), jobs, [&](size_t i) {
        scores[i] = similarity(query_emb.rows, index.entries[i].key_embedding);
    });
    return rank_top_k(conversation.id, scores, k);
}

RetrievalResult rerank_latest(const SupportIndex& index, const Conversation& conversation,
                              const ModelContext& model, size_t pool_size, size_t k, size_t jobs) {
    if (pool_size < k) throw ShapeError("rerank pool smaller than k");
    RetrievalResult pool = query(index, conversation, model, pool_size, jobs);

    const size_t max_len = static_cast<size_t>(model.params.config.max_len);
    const Mat query_latest =
        encode_tokens(tokenize(latest_only(conversation), model.vocab, max_len), model.params);

    std::vector<double> scores(pool.ranked.size());
    parallel_for(pool.ranked.size(), jobs, [&](size_t i) {
        scores[i] =
            similarity(query_latest, index.entries[pool.ranked[i].entry_index].latest_embedding);
    });

    std::vector<size_t> order(pool.ranked.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return pool.ranked[a].entry_index < pool.ranked[b].entry_index;
    });

    RetrievalResult result;
    result.query_id = conversation.id;
    const size_t take = std::min(k, order.size());
    result.ranked.reserve(take);
    for (size_t i = 0; i < take; ++i)
        result.ranked.push_back({pool.ranked[order[i]].entry_index, scores[order[i]]});
    return result;
}

void save_index(const SupportIndex& index, const std::filesystem::path& path) {
    ByteWriter w;
    w.bytes(std::string_view(kIndexMagic, 4));
    w.u32(kIndexVersion);

    const EncoderConfig& cfg = index.header.config;
    json header = {{"checkpoint_fingerprint", index.header.checkpoint_fingerprint},
                   {"vocab_hash", index.header.vocab_hash},
                   {"dim", cfg.dim},
                   {"layers", cfg.layers},
                   {"heads", cfg.heads},
                   {"max_len", cfg.max_len},
                   {"ffn_mult", cfg.ffn_mult},
                   {"normalize_rows", cfg.normalize_rows},
                   {"latest_mean_from_raw", cfg.latest_mean_from_raw},
                   {"entry_count", index.entries.size()}};
    const std::string header_bytes = header.dump();
    w.u32(static_cast<uint32_t>(header_bytes.size()));
    w.bytes(header_bytes);

    for (const IndexEntry& entry : index.entries) {
        json record = example_to_json(entry.example);
        record["summary"] = entry.summary.text;
        record["summary_conversation_id"] = entry.summary.conversation_id;
        record["summary_turn_index"] = entry.summary.turn_index;
        const std::string record_bytes = record.dump();
        w.u32(static_cast<uint32_t>(record_bytes.size()));
        w.bytes(record_bytes);
        for (const Mat* m : {&entry.key_embedding, &entry.latest_embedding}) {
            w.u32(static_cast<uint32_t>(m->rows));
            w.u32(static_cast<uint32_t>(m->cols));
            for (double v : m->data) w.f32(static_cast<float>(v));
        }
    }
    w.u64(fnv1a64(w.buf));

    const std::filesystem::path tmp = path.string() + ".tmp";
    write_file_bytes(tmp, w.buf);
    std::filesystem::rename(tmp, path);
}

SupportIndex load_index(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 12) throw ChecksumError("index " + path.string() + " is truncated");
    const uint64_t stored = [&] {
        ByteReader tail{std::string_view(bytes).substr(bytes.size() - 8)};
        return tail.u64();
    }();
    if (stored != fnv1a64(std::string_view(bytes).substr(0, bytes.size() - 8)))
        throw ChecksumError("index " + path.string() + " failed its checksum");

    ByteReader r{std::string_view(bytes).substr(0, bytes.size() - 8)};
    if (r.bytes(4) != std::string_view(kIndexMagic, 4))
        throw VersionMismatch("index " + path.string() + " has the wrong magic bytes");
    const uint32_t version = r.u32();
    if (version != kIndexVersion)
        throw VersionMismatch("index " + path.string() + " is format version " +
                              std::to_string(version) + ", expected " +
                              std::to_string(kIndexVersion));

    SupportIndex index;
    try {
        const json header = json::parse(r.bytes(r.u32()));
        index.header.checkpoint_fingerprint = header.at("checkpoint_fingerprint").get<std::string>();
        index.header.vocab_hash = header.at("vocab_hash").get<std::string>();
        index.header.config.dim = header.at("dim").get<int>();
        index.header.config.layers = header.at("layers").get<int>();
        index.header.config.heads = header.at("heads").get<int>();
        index.header.config.max_len = header.at("max_len").get<int>();
        index.header.config.ffn_mult = header.at("ffn_mult").get<int>();
        index.header.config.normalize_rows = header.at("normalize_rows").get<bool>();
        index.header.config.latest_mean_from_raw = header.at("latest_mean_from_raw").get<bool>();
        index.header.entry_count = header.at("entry_count").get<uint64_t>();

        index.entries.reserve(index.header.entry_count);
        for (uint64_t i = 0; i < index.header.entry_count; ++i) {
            const json record = json::parse(r.bytes(r.u32()));
            IndexEntry entry;
            entry.example = example_from_json(record);
            entry.summary = Summary{record.at("summary_conversation_id").get<std::string>(),
                                    record.at("summary_turn_index").get<int>(),
                                    record.at("summary").get<std::string>()};
            for (Mat* m : {&entry.key_embedding, &entry.latest_embedding}) {
                const size_t rows = r.u32();
                const size_t cols = r.u32();
                *m = Mat(rows, cols);
                for (double& v : m->data) v = static_cast<double>(r.f32());
            }
            index.entries.push_back(std::move(entry));
        }
    } catch (const json::exception& e) {
        throw VersionMismatch("index " + path.string() + " has an inconsistent layout: " + e.what());
    }
    if (r.pos != r.buf.size())
        throw VersionMismatch("index " + path.string() + " has trailing bytes");
    return index;
}

}  // namespace conretrieve
