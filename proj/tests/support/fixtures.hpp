#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "conretrieve/corpus.hpp"
#include "conretrieve/encoder.hpp"
#include "conretrieve/trainer.hpp"
#include "json.hpp"

namespace testsupport {

struct TempDir {
    std::filesystem::path path;

    TempDir() {
        std::string tmpl = (std::filesystem::temp_directory_path() / "conretrieve_XXXXXX").string();
        if (mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
        path = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path file(const std::string& name) const { return path / name; }
};

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

// Corpus of single-user-turn dialogues where every dialogue carries a unique
// signature word and a unique state value, cycling through five domains. The
// signature makes mock summaries pairwise distinct; the unique values make
// exact-match accuracy sharp.
inline nlohmann::json signature_corpus(size_t count) {
    static const char* domains[] = {"hotel", "taxi", "restaurant", "train", "attraction"};
    static const char* slots[] = {"hotel-area", "taxi-destination", "restaurant-food", "train-day",
                                  "attraction-type"};
    nlohmann::json corpus = nlohmann::json::array();
    for (size_t i = 0; i < count; ++i) {
        const size_t d = i % 5;
        char id[32];
        std::snprintf(id, sizeof(id), "dlg%03zu", i);
        const std::string sig = "s" + std::to_string(i) + "p";
        const std::string value = "v" + std::to_string(i) + "x";
        nlohmann::json state;
        state[slots[d]] = value;
        corpus.push_back({{"id", id},
                          {"domains", nlohmann::json::array({domains[d]})},
                          {"turns", nlohmann::json::array(
                                        {{{"speaker", "user"},
                                          {"text", std::string("i need a ") + domains[d] + " " +
                                                       value + " " + sig},
                                          {"state", state}}})}});
    }
    return corpus;
}

inline std::filesystem::path write_signature_corpus(const TempDir& dir, size_t count,
                                                    const std::string& name = "corpus.json") {
    const auto path = dir.file(name);
    write_text_file(path, signature_corpus(count).dump(1));
    return path;
}

// Multi-turn dialogues across three domains, one of them multi-domain, for
// turn expansion and holdout partition tests.
inline nlohmann::json mixed_corpus() {
    return nlohmann::json::parse(R"([
      {"id": "mw01", "domains": ["hotel"], "turns": [
        {"speaker": "user", "text": "i want a hotel in the north", "state": {"hotel-area": "north"}},
        {"speaker": "system", "text": "sure, any star rating?"},
        {"speaker": "user", "text": "four stars please", "state": {"hotel-area": "north", "hotel-stars": "4"}}
      ]},
      {"id": "mw02", "domains": ["taxi", "restaurant"], "turns": [
        {"speaker": "user", "text": "book me an italian restaurant", "state": {"restaurant-food": "italian"}},
        {"speaker": "system", "text": "done, anything else?"},
        {"speaker": "user", "text": "a taxi to the restaurant", "state": {"restaurant-food": "italian", "taxi-destination": "restaurant"}}
      ]},
      {"id": "mw03", "domains": ["train"], "turns": [
        {"speaker": "user", "text": "a train on friday", "state": {"train-day": "friday"}}
      ]}
    ])");
}

// Conversation-summary pairs with disjoint per-pair keyword signatures, so a
// trained encoder can separate every pair from every other.
inline std::vector<conretrieve::TrainingPair> separable_pairs(size_t count) {
    std::vector<conretrieve::TrainingPair> pairs;
    pairs.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        const std::string a = "kw" + std::to_string(i) + "a";
        const std::string b = "kw" + std::to_string(i) + "b";
        const std::string c = "kw" + std::to_string(i) + "c";
        conretrieve::Conversation conv;
        conv.id = "pair" + std::to_string(i);
        conv.utterances.push_back({conretrieve::Speaker::User, "i am looking for " + a + " and " + b});
        conv.utterances.push_back({conretrieve::Speaker::System, "sure one moment"});
        conv.utterances.push_back({conretrieve::Speaker::User, "please include " + c});
        conretrieve::Summary summary{conv.id, 2, "The user wants " + a + " " + b + " with " + c + "."};
        pairs.push_back({std::move(conv), std::move(summary)});
    }
    return pairs;
}

inline conretrieve::Vocabulary vocab_for(const std::vector<conretrieve::TrainingPair>& pairs,
                                         int min_count = 1) {
    std::vector<std::string> texts;
    for (const auto& pair : pairs) {
        for (const auto& utterance : pair.conversation.utterances) texts.push_back(utterance.text);
        texts.push_back(pair.summary.text);
    }
    return conretrieve::build_vocab(texts, min_count);
}

inline conretrieve::EncoderConfig tiny_config() {
    conretrieve::EncoderConfig config;
    config.dim = 8;
    config.layers = 1;
    config.heads = 2;
    config.max_len = 32;
    return config;
}

struct CommandResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr interleaved
};

inline CommandResult run_command(const std::string& command) {
    CommandResult result;
    FILE* pipe = popen((command + " 2>&1").c_str(), "r");
    if (pipe == nullptr) return result;
    char buf[4096];
    size_t got;
    while ((got = fread(buf, 1, sizeof(buf), pipe)) > 0) result.output.append(buf, got);
    const int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

inline std::string cli_binary() {
    const char* env = std::getenv("CONRETRIEVE_BIN");
    if (env == nullptr || *env == '\0')
        throw std::runtime_error("CONRETRIEVE_BIN must point at the conretrieve binary");
    return env;
}

}  // namespace testsupport
