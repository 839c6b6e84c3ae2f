#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>

#include "conretrieve/encoder.hpp"
#include "conretrieve/errors.hpp"
#include "conretrieve/hash.hpp"
#include "conretrieve/io.hpp"
#include "conretrieve/rng.hpp"
#include "doctest.h"
#include "support/fixtures.hpp"

using namespace conretrieve;
using testsupport::TempDir;

namespace {

Conversation two_turn_conversation() {
    Conversation conv;
    conv.id = "c1";
    conv.utterances.push_back({Speaker::User, "i want a hotel"});
    conv.utterances.push_back({Speaker::System, "which area"});
    conv.utterances.push_back({Speaker::User, "the north please"});
    return conv;
}

Vocabulary small_vocab() {
    return build_vocab({"i want a hotel", "which area", "the north please", "train friday"}, 1);
}

double row_norm(const Mat& m, size_t r) {
    double ss = 0.0;
    for (size_t c = 0; c < m.cols; ++c) ss += m.at(r, c) * m.at(r, c);
    return std::sqrt(ss);
}

// Rewrites the trailing checksum so structural tampering survives the
// checksum gate and reaches the format checks.
void patch_trailer(std::string& bytes) {
    REQUIRE(bytes.size() > 8);
    const uint64_t h = fnv1a64(std::string_view(bytes.data(), bytes.size() - 8));
    for (int i = 0; i < 8; ++i)
        bytes[bytes.size() - 8 + i] = static_cast<char>((h >> (8 * i)) & 0xff);
}

}  // namespace

TEST_CASE("build_vocab keeps thresholded tokens in frequency order") {
    const Vocabulary v1 = build_vocab({"a b a"}, 1);
    CHECK(v1.size() == Vocabulary::kNumSpecials + 2);
    CHECK(v1.id_of("a") == Vocabulary::kNumSpecials);  // count 2 sorts first
    CHECK(v1.id_of("b") == Vocabulary::kNumSpecials + 1);
    CHECK(v1.id_of("missing") == Vocabulary::kUnk);

    SUBCASE("min_count filters") {
        const Vocabulary v2 = build_vocab({"a b a"}, 2);
        CHECK(v2.size() == Vocabulary::kNumSpecials + 1);
        CHECK(v2.id_of("a") == Vocabulary::kNumSpecials);
        CHECK(v2.id_of("b") == Vocabulary::kUnk);
    }
    SUBCASE("order of texts does not matter") {
        const Vocabulary p1 = build_vocab({"x y", "z z y"}, 1);
        const Vocabulary p2 = build_vocab({"z z y", "x y"}, 1);
        CHECK(p1.canonical_json() == p2.canonical_json());
        CHECK(p1.hash() == p2.hash());
    }
    SUBCASE("ties break lexicographically") {
        const Vocabulary v = build_vocab({"beta alpha"}, 1);
        CHECK(v.id_of("alpha") == Vocabulary::kNumSpecials);
        CHECK(v.id_of("beta") == Vocabulary::kNumSpecials + 1);
    }
    SUBCASE("empty corpus is rejected") {
        CHECK_THROWS_AS(build_vocab({}, 1), EmptyCorpus);
        CHECK_THROWS_AS(build_vocab({"  "}, 1), EmptyCorpus);
    }
}

TEST_CASE("vocabulary persists and fingerprints stably") {
    TempDir dir;
    const Vocabulary vocab = small_vocab();
    const auto path = dir.file("vocab.json");
    vocab.save(path);
    const Vocabulary loaded = Vocabulary::load(path);
    CHECK(loaded.canonical_json() == vocab.canonical_json());
    CHECK(loaded.hash() == vocab.hash());
    CHECK(loaded.size() == vocab.size());
    CHECK(loaded.id_of("hotel") == vocab.id_of("hotel"));
    CHECK(loaded.token_of(Vocabulary::kNumSpecials) == vocab.token_of(Vocabulary::kNumSpecials));
}

TEST_CASE("tokenize marks speakers, utterances, and the latest segment") {
    const Vocabulary vocab = small_vocab();
    const Conversation conv = two_turn_conversation();
    const TokenizedText tokens = tokenize(conv, vocab, 32);

    // [USR] i want a hotel [SYS] which area [USR] the north please
    REQUIRE(tokens.size() == 12);
    CHECK(tokens.ids[0] == Vocabulary::kUsr);
    CHECK(tokens.ids[5] == Vocabulary::kSys);
    CHECK(tokens.ids[8] == Vocabulary::kUsr);
    CHECK(tokens.surface[0] == "[USR]");
    CHECK(tokens.surface[3] == "a");

    SUBCASE("latest mask covers exactly the final utterance") {
        for (size_t t = 0; t < tokens.size(); ++t)
            CHECK(static_cast<bool>(tokens.latest_mask[t]) == (t >= 8));
    }
    SUBCASE("utterance index is non-decreasing and speaker-aligned") {
        for (size_t t = 1; t < tokens.size(); ++t)
            CHECK(tokens.utterance_index[t] >= tokens.utterance_index[t - 1]);
        CHECK(tokens.utterance_index[0] == 0);
        CHECK(tokens.utterance_index[6] == 1);
        CHECK(tokens.utterance_index[11] == 2);
        CHECK(tokens.speaker[2] == 0);
        CHECK(tokens.speaker[6] == 1);
    }
    SUBCASE("oov words map to the unknown id") {
        Conversation odd = conv;
        odd.utterances.back().text = "zebra north";
        const TokenizedText t = tokenize(odd, vocab, 32);
        CHECK(t.ids[t.size() - 2] == Vocabulary::kUnk);
        CHECK(t.ids[t.size() - 1] == vocab.id_of("north"));
    }
}

TEST_CASE("tokenize truncation drops the oldest tokens only") {
    const Vocabulary vocab = small_vocab();
    Conversation conv;
    conv.id = "long";
    for (int u = 0; u < 30; ++u) {
        const Speaker speaker = (u % 2 == 0) ? Speaker::User : Speaker::System;
        conv.utterances.push_back({speaker, "i want a hotel the north please which area"});
    }
    if (conv.utterances.back().speaker == Speaker::System)
        conv.utterances.push_back({Speaker::User, "the north please"});

    const TokenizedText full = tokenize(conv, vocab, 4096);
    const TokenizedText cut = tokenize(conv, vocab, 128);
    REQUIRE(full.size() > 128);
    REQUIRE(cut.size() == 128);

    SUBCASE("kept tokens are the exact suffix") {
        const size_t offset = full.size() - cut.size();
        for (size_t t = 0; t < cut.size(); ++t) {
            CHECK(cut.ids[t] == full.ids[t + offset]);
            CHECK(cut.utterance_index[t] == full.utterance_index[t + offset]);
            CHECK(cut.latest_mask[t] == full.latest_mask[t + offset]);
        }
    }
    SUBCASE("utterance index still non-decreasing") {
        for (size_t t = 1; t < cut.size(); ++t)
            CHECK(cut.utterance_index[t] >= cut.utterance_index[t - 1]);
    }
    SUBCASE("latest utterance survives intact") {
        size_t latest = 0;
        for (uint8_t m : cut.latest_mask) latest += m;
        CHECK(latest == 4);  // [USR] the north please
    }
    SUBCASE("an overlong latest utterance is an error") {
        Conversation mono;
        mono.id = "mono";
        std::string text = "hotel";
        for (int i = 0; i < 200; ++i) text += " hotel";
        mono.utterances.push_back({Speaker::User, text});
        CHECK_THROWS_AS(tokenize(mono, vocab, 128), LatestUtteranceTooLong);
    }
}

TEST_CASE("tokenize_summary is a single all-latest user segment") {
    const Vocabulary vocab = small_vocab();
    const TokenizedText tokens = tokenize_summary("the north hotel", vocab, 32);
    REQUIRE(tokens.size() == 4);
    CHECK(tokens.ids[0] == Vocabulary::kUsr);
    for (uint8_t m : tokens.latest_mask) CHECK(m == 1);
    for (int u : tokens.utterance_index) CHECK(u == 0);

    std::string long_text = "north";
    for (int i = 0; i < 100; ++i) long_text += " north";
    CHECK(tokenize_summary(long_text, vocab, 16).size() == 16);
}

TEST_CASE("zero-layer encoding equals the normalized embedding sum") {
    const Vocabulary vocab = small_vocab();
    EncoderConfig config = testsupport::tiny_config();
    config.layers = 0;
    const EncoderParams params = init_params(config, vocab.size(), 11);

    Conversation conv;
    conv.id = "c";
    conv.utterances.push_back({Speaker::User, "hotel north"});
    const TokenizedText tokens = tokenize(conv, vocab, config.max_len);
    const Mat rows = encode_tokens(tokens, params);
    REQUIRE(rows.rows == tokens.size());
    REQUIRE(rows.cols == static_cast<size_t>(config.dim));

    for (size_t t = 0; t < tokens.size(); ++t) {
        std::vector<double> expect(config.dim);
        double ss = 0.0;
        for (int c = 0; c < config.dim; ++c) {
            expect[c] = params.tok_emb.at(tokens.ids[t], c) + params.pos_emb.at(t, c) +
                        params.spk_emb.at(tokens.speaker[t], c);
            ss += expect[c] * expect[c];
        }
        const double norm = std::sqrt(ss + 1e-12);
        for (int c = 0; c < config.dim; ++c)
            CHECK(rows.at(t, c) == doctest::Approx(expect[c] / norm).epsilon(1e-12));
    }
}

TEST_CASE("encoding is deterministic with unit rows and bounded dots") {
    const Vocabulary vocab = small_vocab();
    const EncoderParams params = init_params(testsupport::tiny_config(), vocab.size(), 3);
    const TokenizedText tokens = tokenize(two_turn_conversation(), vocab, 32);

    const Mat a = encode_tokens(tokens, params);
    const Mat b = encode_tokens(tokens, params);
    CHECK(a.data == b.data);

    for (size_t r = 0; r < a.rows; ++r) CHECK(row_norm(a, r) == doctest::Approx(1.0).epsilon(1e-6));
    for (size_t r = 0; r < a.rows; ++r)
        for (size_t q = 0; q < a.rows; ++q) {
            const double d = dot(a.row(r), a.row(q), a.cols);
            CHECK(d <= 1.0 + 1e-6);
            CHECK(d >= -1.0 - 1e-6);
        }

    SUBCASE("normalization can be disabled") {
        EncoderConfig raw_config = testsupport::tiny_config();
        raw_config.normalize_rows = false;
        const EncoderParams raw = init_params(raw_config, vocab.size(), 3);
        const Mat rows = encode_tokens(tokens, raw);
        bool any_off_unit = false;
        for (size_t r = 0; r < rows.rows; ++r)
            if (std::abs(row_norm(rows, r) - 1.0) > 1e-3) any_off_unit = true;
        CHECK(any_off_unit);
    }
    SUBCASE("out-of-range ids are rejected") {
        TokenizedText bogus = tokens;
        bogus.ids[1] = static_cast<int>(vocab.size()) + 7;
        CHECK_THROWS_AS(encode_tokens(bogus, params), ShapeError);
    }
    SUBCASE("overlength input is rejected") {
        const TokenizedText longer = tokenize(two_turn_conversation(), vocab, 32);
        EncoderConfig short_config = testsupport::tiny_config();
        short_config.max_len = 4;
        const EncoderParams short_params = init_params(short_config, vocab.size(), 3);
        CHECK_THROWS_AS(encode_tokens(longer, short_params), ShapeError);
    }
}

TEST_CASE("latest_mean averages exactly the masked rows") {
    Mat rows;
    rows.rows = 2;
    rows.cols = 2;
    rows.data = {1.0, 0.0, 0.0, 1.0};

    SUBCASE("two masked rows") {
        const auto mean = latest_mean(rows, {1, 1});
        CHECK(mean == std::vector<double>{0.5, 0.5});
    }
    SUBCASE("single masked row is that row") {
        const auto mean = latest_mean(rows, {0, 1});
        CHECK(mean == std::vector<double>{0.0, 1.0});
    }
    SUBCASE("no masked rows is an error") {
        CHECK_THROWS_AS(latest_mean(rows, {0, 0}), NoLatestTokens);
    }
    SUBCASE("three-row mean matches an independent recomputation") {
        Mat wide;
        wide.rows = 3;
        wide.cols = 4;
        Rng rng(5);
        wide.data.resize(12);
        for (double& x : wide.data) x = rng.normal();
        const auto mean = latest_mean(wide, {0, 1, 1});
        for (size_t c = 0; c < 4; ++c)
            CHECK(mean[c] == doctest::Approx((wide.at(1, c) + wide.at(2, c)) / 2.0).epsilon(1e-12));
    }
}

TEST_CASE("relevance weights honor the latest-one history-sigmoid contract") {
    const Vocabulary vocab = small_vocab();
    EncoderParams params = init_params(testsupport::tiny_config(), vocab.size(), 17);
    const TokenizedText tokens = tokenize(two_turn_conversation(), vocab, 32);
    const Mat rows = encode_tokens(tokens, params);

    const auto weights = relevance_weights(rows, tokens.latest_mask, params);
    REQUIRE(weights.size() == tokens.size());
    for (size_t t = 0; t < tokens.size(); ++t) {
        if (tokens.latest_mask[t]) {
            CHECK(weights[t] == 1.0);
        } else {
            CHECK(weights[t] > 0.0);
            CHECK(weights[t] < 1.0);
        }
    }

    SUBCASE("zero scorer gives exactly one half") {
        params.gphi_m.fill(0.0);
        params.gphi_b.fill(0.0);
        const auto flat = relevance_weights(rows, tokens.latest_mask, params);
        for (size_t t = 0; t < tokens.size(); ++t)
            if (!tokens.latest_mask[t]) CHECK(flat[t] == 0.5);
    }
    SUBCASE("weights match an independent sigmoid recomputation") {
        const auto s = latest_mean(rows, tokens.latest_mask);
        for (size_t t = 0; t < tokens.size(); ++t) {
            if (tokens.latest_mask[t]) continue;
            double arg = params.gphi_b.at(0, 0);
            for (size_t a = 0; a < rows.cols; ++a)
                for (size_t b = 0; b < rows.cols; ++b)
                    arg += rows.at(t, a) * params.gphi_m.at(a, b) * s[b];
            CHECK(weights[t] == doctest::Approx(1.0 / (1.0 + std::exp(-arg))).epsilon(1e-9));
        }
    }
}

TEST_CASE("weighted embedding scales history rows and passes latest rows through") {
    const Vocabulary vocab = small_vocab();
    const EncoderParams params = init_params(testsupport::tiny_config(), vocab.size(), 23);
    const TokenizedText tokens = tokenize(two_turn_conversation(), vocab, 32);
    const WeightedEmbedding emb = weighted_conversation_embedding(tokens, params);

    REQUIRE(emb.rows.rows == tokens.size());
    REQUIRE(emb.unweighted.rows == tokens.size());
    REQUIRE(emb.weights.size() == tokens.size());
    for (size_t t = 0; t < tokens.size(); ++t)
        for (size_t c = 0; c < emb.rows.cols; ++c) {
            if (tokens.latest_mask[t])
                CHECK(emb.rows.at(t, c) == emb.unweighted.at(t, c));
            else
                CHECK(emb.rows.at(t, c) == emb.weights[t] * emb.unweighted.at(t, c));
        }
}

TEST_CASE("weighting contract holds over randomized conversations") {
    const Vocabulary vocab = small_vocab();
    const EncoderParams params = init_params(testsupport::tiny_config(), vocab.size(), 29);
    const std::vector<std::string> lines = {"i want a hotel", "which area", "the north please",
                                            "train friday", "hotel area north"};
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        Conversation conv;
        conv.id = "r" + std::to_string(trial);
        const size_t n = 1 + rng.uniform_int(4);
        for (size_t u = 0; u < n; ++u) {
            const Speaker speaker =
                (n - u) % 2 == 1 ? Speaker::User : Speaker::System;  // ends with the user
            conv.utterances.push_back({speaker, lines[rng.uniform_int(lines.size())]});
        }
        const TokenizedText tokens = tokenize(conv, vocab, 32);
        const WeightedEmbedding emb = weighted_conversation_embedding(tokens, params);
        for (size_t t = 0; t < tokens.size(); ++t) {
            if (tokens.latest_mask[t]) {
                REQUIRE(emb.weights[t] == 1.0);
            } else {
                REQUIRE(emb.weights[t] > 0.0);
                REQUIRE(emb.weights[t] < 1.0);
            }
            for (size_t c = 0; c < emb.rows.cols; ++c)
                REQUIRE(emb.rows.at(t, c) ==
                        doctest::Approx(emb.weights[t] * emb.unweighted.at(t, c)).epsilon(1e-9));
        }
    }
}

TEST_CASE("dump_weights mirrors the relevance weights token by token") {
    const Vocabulary vocab = small_vocab();
    const EncoderParams params = init_params(testsupport::tiny_config(), vocab.size(), 37);
    const Conversation conv = two_turn_conversation();
    const TokenizedText tokens = tokenize(conv, vocab, 32);
    const WeightedEmbedding emb = weighted_conversation_embedding(tokens, params);

    const nlohmann::json report = dump_weights(conv, vocab, params);
    REQUIRE(report["tokens"].size() == tokens.size());
    for (size_t t = 0; t < tokens.size(); ++t) {
        const auto& row = report["tokens"][t];
        CHECK(row["token"] == tokens.surface[t]);
        CHECK(row["utterance"] == tokens.utterance_index[t]);
        const double w = row["weight"].get<double>();
        CHECK(w >= 0.0);
        CHECK(w <= 1.0);
        CHECK(w == emb.weights[t]);
        if (tokens.latest_mask[t]) CHECK(w == 1.0);
    }
}

TEST_CASE("checkpoints round-trip bit-exactly and reject tampering") {
    const Vocabulary vocab = small_vocab();
    const EncoderParams params = init_params(testsupport::tiny_config(), vocab.size(), 41);
    TempDir dir;
    const auto path = dir.file("model.ckpt");
    const std::string fingerprint = save_checkpoint(params, vocab.hash(), path);

    const LoadedCheckpoint loaded = load_checkpoint(path);
    CHECK(loaded.fingerprint == fingerprint);
    CHECK(loaded.vocab_hash == vocab.hash());
    CHECK(loaded.params.vocab_size == params.vocab_size);
    CHECK(loaded.params.config.dim == params.config.dim);
    CHECK(loaded.params.config.normalize_rows == params.config.normalize_rows);

    SUBCASE("resaving the loaded params reproduces the file") {
        const auto path2 = dir.file("model2.ckpt");
        save_checkpoint(loaded.params, loaded.vocab_hash, path2);
        CHECK(read_file_bytes(path2) == read_file_bytes(path));
    }
    SUBCASE("tensor payloads survive the f32 round-trip") {
        const LoadedCheckpoint again = load_checkpoint(path);
        const auto refs_a = tensor_refs(loaded.params);
        const auto refs_b = tensor_refs(again.params);
        REQUIRE(refs_a.size() == refs_b.size());
        for (size_t i = 0; i < refs_a.size(); ++i)
            CHECK(refs_a[i].tensor->data == refs_b[i].tensor->data);
    }
    SUBCASE("a json sidecar records the fingerprint") {
        const auto sidecar = nlohmann::json::parse(
            read_file_bytes(dir.file("model.ckpt.json")));
        CHECK(sidecar["fingerprint"] == fingerprint);
        CHECK(sidecar["dim"] == params.config.dim);
    }
    SUBCASE("flipped byte means ChecksumError") {
        std::string bytes = read_file_bytes(path);
        bytes[bytes.size() / 2] ^= 0x40;
        write_file_bytes(dir.file("bad.ckpt"), bytes);
        CHECK_THROWS_AS(load_checkpoint(dir.file("bad.ckpt")), ChecksumError);
    }
    SUBCASE("truncation means ChecksumError") {
        const std::string bytes = read_file_bytes(path);
        write_file_bytes(dir.file("short.ckpt"), bytes.substr(0, bytes.size() - 9));
        CHECK_THROWS_AS(load_checkpoint(dir.file("short.ckpt")), ChecksumError);
    }
    SUBCASE("foreign magic with a valid checksum means VersionMismatch") {
        std::string bytes = read_file_bytes(path);
        bytes[0] = 'X';
        patch_trailer(bytes);
        write_file_bytes(dir.file("magic.ckpt"), bytes);
        CHECK_THROWS_AS(load_checkpoint(dir.file("magic.ckpt")), VersionMismatch);
    }
    SUBCASE("future format version means VersionMismatch") {
        std::string bytes = read_file_bytes(path);
        bytes[4] = 9;  // version field follows the magic
        patch_trailer(bytes);
        write_file_bytes(dir.file("future.ckpt"), bytes);
        CHECK_THROWS_AS(load_checkpoint(dir.file("future.ckpt")), VersionMismatch);
    }
}

TEST_CASE("tensor_refs exposes every tensor with decay flags") {
    EncoderParams params = init_params(testsupport::tiny_config(), 10, 1);
    const auto refs = tensor_refs(params);
    // embeddings + 16 per layer + 2 scorer tensors
    CHECK(refs.size() == 3 + 16 * params.layers.size() + 2);
    size_t total = 0;
    for (const auto& ref : refs) {
        total += ref.tensor->size();
        // Exactly the embeddings, attention/ffn weight matrices, and the
        // bilinear scorer decay; layer norms and biases never do.
        const std::string leaf = ref.name.substr(ref.name.find('.') + 1);
        const bool is_embedding =
            ref.name.size() > 4 && ref.name.compare(ref.name.size() - 4, 4, "_emb") == 0;
        const bool expect_decay = is_embedding || leaf[0] == 'w' || ref.name == "gphi_m";
        CAPTURE(ref.name);
        CHECK(ref.decay == expect_decay);
    }
    CHECK(total > 0);

    EncoderParams zeros = zero_clone(params);
    for (const auto& ref : tensor_refs(zeros))
        for (double x : ref.tensor->data) CHECK(x == 0.0);
}
