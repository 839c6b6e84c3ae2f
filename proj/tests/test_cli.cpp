#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <string>
#include <vector>

#include <json.hpp>

#include "conretrieve/encoder.hpp"
#include "conretrieve/hash.hpp"
#include "conretrieve/index.hpp"
#include "conretrieve/io.hpp"
#include "doctest.h"
#include "support/fixtures.hpp"

using namespace conretrieve;
using nlohmann::json;
using testsupport::CommandResult;
using testsupport::cli_binary;
using testsupport::run_command;

namespace {

std::string golden(const std::string& name) {
    return read_file_bytes(std::string(TESTS_GOLDEN_DIR) + "/" + name);
}

// Corpus, cache, checkpoint, vocabulary, and index built through the binary
// exactly once per test process.
struct PipelineArtifacts {
    testsupport::TempDir dir;
    std::string corpus, cache, checkpoint, vocab, index;

    PipelineArtifacts() {
        corpus = testsupport::write_signature_corpus(dir, 30).string();
        cache = dir.file("cache.jsonl").string();
        checkpoint = dir.file("model.ckpt").string();
        vocab = dir.file("vocab.json").string();
        index = dir.file("support.idx").string();

        run_step(cli_binary() + " summarize --corpus " + corpus + " --cache " + cache);
        run_step(cli_binary() + " train --corpus " + corpus + " --cache " + cache + " --out " +
                 checkpoint + " --vocab " + vocab + train_args());
        run_step(cli_binary() + " index --corpus " + corpus + " --cache " + cache +
                 " --checkpoint " + checkpoint + " --vocab " + vocab + " --out " + index);
    }

    static std::string train_args() {
        return " --dim 8 --layers 1 --heads 2 --max-len 32 --epochs 2 --batch-size 8 --seed 3";
    }

    std::string retrieve_args() const {
        return " --index " + index + " --checkpoint " + checkpoint + " --vocab " + vocab +
               " --corpus " + corpus;
    }
    std::string eval_args() const {
        return " --corpus " + corpus + " --cache " + cache + " --checkpoint " + checkpoint +
               " --vocab " + vocab;
    }

   private:
    static void run_step(const std::string& cmd) {
        const CommandResult result = run_command(cmd);
        if (result.exit_code != 0)
            throw std::runtime_error("pipeline step failed: " + cmd + "\n" + result.output);
    }
};

PipelineArtifacts& artifacts() {
    static PipelineArtifacts instance;
    return instance;
}

}  // namespace

TEST_CASE("help output is frozen") {
    const CommandResult main_help = run_command(cli_binary() + " --help");
    CHECK(main_help.exit_code == 0);
    CHECK(main_help.output == golden("help_main.txt"));

    for (const std::string sub :
         {"summarize", "train", "index", "retrieve", "eval", "inspect"}) {
        CAPTURE(sub);
        const CommandResult help = run_command(cli_binary() + " " + sub + " --help");
        CHECK(help.exit_code == 0);
        CHECK(help.output == golden("help_" + sub + ".txt"));
    }

    SUBCASE("the contract flags are all advertised") {
        CHECK(golden("help_summarize.txt").find("--backend") != std::string::npos);
        CHECK(golden("help_summarize.txt").find("--token-env") != std::string::npos);
        for (const std::string flag :
             {"--epochs", "--batch-size", "--lr", "--dim", "--layers", "--max-len", "--seed",
              "--no-normalize"})
            CHECK(golden("help_train.txt").find(flag) != std::string::npos);
        for (const std::string flag : {"--k", "--pool", "--rerank"})
            CHECK(golden("help_retrieve.txt").find(flag) != std::string::npos);
        for (const std::string flag :
             {"--support-sizes", "--seeds", "--holdout-domain", "--out", "--jobs"})
            CHECK(golden("help_eval.txt").find(flag) != std::string::npos);
    }
}

TEST_CASE("usage errors exit with code 2") {
    CHECK(run_command(cli_binary()).exit_code == 2);
    CHECK(run_command(cli_binary() + " frobnicate").exit_code == 2);
    CHECK(run_command(cli_binary() + " summarize --cache /tmp/x.jsonl").exit_code == 2);
    CHECK(run_command(cli_binary() + " retrieve --no-such-flag").exit_code == 2);

    const CommandResult missing =
        run_command(cli_binary() + " summarize --cache /tmp/x.jsonl");
    CHECK(missing.output.find("--corpus") != std::string::npos);

    SUBCASE("a nonexistent input file fails at parse time") {
        const CommandResult gone = run_command(cli_binary() +
                                               " summarize --corpus /nonexistent/corpus.json "
                                               "--cache /tmp/x.jsonl");
        CHECK(gone.exit_code == 2);
    }
}

TEST_CASE("the pipeline runs end to end") {
    PipelineArtifacts& art = artifacts();

    SUBCASE("summarize is idempotent over a warm cache") {
        const CommandResult rerun =
            run_command(cli_binary() + " summarize --corpus " + art.corpus + " --cache " + art.cache);
        CHECK(rerun.exit_code == 0);
        CHECK(rerun.output.find(" 0 new") != std::string::npos);
    }

    SUBCASE("retrieve emits ranked JSON lines consistent with the library") {
        const CommandResult result = run_command(cli_binary() + " retrieve" + art.retrieve_args() +
                                                 " --query-id dlg007#1 --k 5");
        REQUIRE(result.exit_code == 0);

        std::vector<json> lines;
        size_t pos = 0;
        while (pos < result.output.size()) {
            size_t end = result.output.find('\n', pos);
            if (end == std::string::npos) end = result.output.size();
            const std::string line = result.output.substr(pos, end - pos);
            pos = end + 1;
            if (!line.empty()) lines.push_back(json::parse(line));
        }
        REQUIRE(lines.size() == 5);

        const SupportIndex index = load_index(art.index);
        const ModelContext model =
            make_context(load_checkpoint(art.checkpoint), Vocabulary::load(art.vocab));
        const auto examples = load_examples(art.corpus);
        const Conversation* probe = nullptr;
        for (const auto& ex : examples)
            if (ex.conversation.id == "dlg007#1") probe = &ex.conversation;
        REQUIRE(probe != nullptr);
        const RetrievalResult oracle = query(index, *probe, model, 5);

        for (size_t i = 0; i < lines.size(); ++i) {
            CHECK(lines[i].at("query_id") == "dlg007#1");
            CHECK(lines[i].at("rank").get<size_t>() == i + 1);
            CHECK(lines[i].at("id") ==
                  index.entries[oracle.ranked[i].entry_index].example.conversation.id);
            CHECK(lines[i].at("score").get<double>() ==
                  doctest::Approx(oracle.ranked[i].score).epsilon(1e-9));
            CHECK(lines[i].at("summary").is_string());
            if (i > 0)
                CHECK(lines[i - 1].at("score").get<double>() >=
                      lines[i].at("score").get<double>());
        }
    }

    SUBCASE("an unknown query id is a runtime error") {
        const CommandResult result =
            run_command(cli_binary() + " retrieve" + art.retrieve_args() + " --query-id ghost#9");
        CHECK(result.exit_code == 1);
    }

    SUBCASE("eval sweeps support sizes and writes a parseable report") {
        const std::string report_path = art.dir.file("report.json").string();
        const CommandResult result =
            run_command(cli_binary() + " eval" + art.eval_args() +
                        " --support-sizes 10,20,30 --seeds 0,1 --out " + report_path);
        REQUIRE(result.exit_code == 0);

        size_t lines = 0, mentions = 0;
        for (size_t pos = 0; pos < result.output.size(); ++pos)
            if (result.output[pos] == '\n') ++lines;
        for (size_t pos = result.output.find("echo-mock"); pos != std::string::npos;
             pos = result.output.find("echo-mock", pos + 1))
            ++mentions;
        CHECK(lines == 4);
        CHECK(mentions == 3);

        const json report = json::parse(read_file_bytes(report_path));
        CHECK(report.at("model") == "echo-mock");
        CHECK(report.at("aggregates").size() == 3);
        CHECK(report.at("runs").size() == 6);
        CHECK(report.at("seeds") == json::array({0, 1}));
        for (const auto& agg : report.at("aggregates")) {
            CHECK(agg.at("jga_mean").get<double>() >= 0.0);
            CHECK(agg.at("jga_mean").get<double>() <= 1.0);
        }
    }

    SUBCASE("full-support rerank hits the echo ceiling") {
        const CommandResult result =
            run_command(cli_binary() + " eval" + art.eval_args() +
                        " --rerank --pool 1000 --support-sizes 30 --seeds 0");
        REQUIRE(result.exit_code == 0);
        CHECK(result.output.find("1.000 +/- 0.000") != std::string::npos);
    }

    SUBCASE("holdout evaluation works and unknown domains fail") {
        const CommandResult ok = run_command(cli_binary() + " eval" + art.eval_args() +
                                             " --holdout-domain hotel --support-sizes 12 --seeds 0");
        CHECK(ok.exit_code == 0);
        const CommandResult bad =
            run_command(cli_binary() + " eval" + art.eval_args() +
                        " --holdout-domain spaceport --support-sizes 5 --seeds 0");
        CHECK(bad.exit_code == 1);
    }

    SUBCASE("inspect reports weights in the unit interval") {
        const CommandResult result = run_command(cli_binary() + " inspect --checkpoint " +
                                                 art.checkpoint + " --vocab " + art.vocab +
                                                 " --corpus " + art.corpus + " --query-id dlg004#1");
        REQUIRE(result.exit_code == 0);
        const json dump = json::parse(result.output);
        CHECK(dump.at("conversation_id") == "dlg004#1");
        const json& tokens = dump.at("tokens");
        REQUIRE(tokens.is_array());
        REQUIRE(!tokens.empty());
        for (const auto& row : tokens) {
            const double w = row.at("weight").get<double>();
            CHECK(w >= 0.0);
            CHECK(w <= 1.0);
        }
        CHECK(tokens.back().at("weight").get<double>() == 1.0);
    }
}

TEST_CASE("artifact integrity failures map to the documented exit codes") {
    PipelineArtifacts& art = artifacts();

    SUBCASE("a checkpoint from another training run is refused with code 3") {
        const std::string other = art.dir.file("other.ckpt").string();
        const std::string other_vocab = art.dir.file("other_vocab.json").string();
        const CommandResult trained = run_command(
            cli_binary() + " train --corpus " + art.corpus + " --cache " + art.cache + " --out " +
            other + " --vocab " + other_vocab +
            " --dim 8 --layers 1 --heads 2 --max-len 32 --epochs 2 --batch-size 8 --seed 99");
        REQUIRE(trained.exit_code == 0);

        const CommandResult result =
            run_command(cli_binary() + " retrieve --index " + art.index + " --checkpoint " + other +
                        " --vocab " + other_vocab + " --corpus " + art.corpus);
        CHECK(result.exit_code == 3);
    }

    SUBCASE("a vocabulary from another corpus is refused with code 3") {
        const std::string foreign = art.dir.file("foreign_vocab.json").string();
        build_vocab({"completely unrelated words"}, 1).save(foreign);
        const CommandResult result =
            run_command(cli_binary() + " retrieve --index " + art.index + " --checkpoint " +
                        art.checkpoint + " --vocab " + foreign + " --corpus " + art.corpus);
        CHECK(result.exit_code == 3);
    }

    SUBCASE("a corrupted checkpoint is a runtime failure, code 1") {
        std::string bytes = read_file_bytes(art.checkpoint);
        bytes[bytes.size() / 2] ^= 0x01;
        const std::string corrupt = art.dir.file("corrupt.ckpt").string();
        write_file_bytes(corrupt, bytes);
        const CommandResult result =
            run_command(cli_binary() + " retrieve --index " + art.index + " --checkpoint " +
                        corrupt + " --vocab " + art.vocab + " --corpus " + art.corpus);
        CHECK(result.exit_code == 1);
    }

    SUBCASE("an index with foreign magic is refused with code 3") {
        std::string bytes = read_file_bytes(art.index);
        bytes[0] = 'Z';
        const uint64_t h = fnv1a64(std::string_view(bytes.data(), bytes.size() - 8));
        for (int i = 0; i < 8; ++i)
            bytes[bytes.size() - 8 + i] = static_cast<char>((h >> (8 * i)) & 0xff);
        const std::string tampered = art.dir.file("tampered.idx").string();
        write_file_bytes(tampered, bytes);
        const CommandResult result =
            run_command(cli_binary() + " retrieve --index " + tampered + " --checkpoint " +
                        art.checkpoint + " --vocab " + art.vocab + " --corpus " + art.corpus);
        CHECK(result.exit_code == 3);
    }
}

TEST_CASE("an unreachable remote backend fails cleanly") {
    PipelineArtifacts& art = artifacts();
    const std::string fresh_cache = art.dir.file("remote_cache.jsonl").string();
    const CommandResult result =
        run_command(cli_binary() + " summarize --corpus " + art.corpus + " --cache " + fresh_cache +
                    " --backend remote --endpoint http://127.0.0.1:1/v1/chat/completions --jobs 1");
    CHECK(result.exit_code == 1);
    CHECK(result.output.find("partial cache") != std::string::npos);
}

TEST_CASE("training and indexing are bit-reproducible") {
    PipelineArtifacts& art = artifacts();

    const std::string ckpt_a = art.dir.file("repro_a.ckpt").string();
    const std::string ckpt_b = art.dir.file("repro_b.ckpt").string();
    const std::string vocab_a = art.dir.file("repro_a_vocab.json").string();
    const std::string vocab_b = art.dir.file("repro_b_vocab.json").string();
    for (const auto& [out, vocab] : {std::pair{ckpt_a, vocab_a}, std::pair{ckpt_b, vocab_b}}) {
        const CommandResult result =
            run_command(cli_binary() + " train --corpus " + art.corpus + " --cache " + art.cache +
                        " --out " + out + " --vocab " + vocab + PipelineArtifacts::train_args());
        REQUIRE(result.exit_code == 0);
    }
    CHECK(read_file_bytes(ckpt_a) == read_file_bytes(ckpt_b));
    CHECK(read_file_bytes(vocab_a) == read_file_bytes(vocab_b));
    CHECK(read_file_bytes(ckpt_a) == read_file_bytes(art.checkpoint));

    const std::string idx_b = art.dir.file("repro_b.idx").string();
    const CommandResult indexed =
        run_command(cli_binary() + " index --corpus " + art.corpus + " --cache " + art.cache +
                    " --checkpoint " + ckpt_b + " --vocab " + vocab_b + " --out " + idx_b);
    REQUIRE(indexed.exit_code == 0);
    CHECK(read_file_bytes(idx_b) == read_file_bytes(art.index));
}
