#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "conretrieve/corpus.hpp"
#include "conretrieve/encoder.hpp"
#include "conretrieve/errors.hpp"
#include "conretrieve/harness.hpp"
#include "conretrieve/index.hpp"
#include "conretrieve/summarizer.hpp"
#include "conretrieve/trainer.hpp"
#include "json.hpp"

namespace {

using namespace conretrieve;
using nlohmann::json;

struct Options {
    std::string corpus;
    std::string cache;
    std::string vocab;
    std::string checkpoint;
    std::string index;
    std::string out;
    std::string backend = "mock";
    std::string endpoint;
    std::string model;
    std::string token_env = "CONRETRIEVE_API_TOKEN";
    std::string holdout_domain;
    std::string query_id;
    size_t k = 5;
    size_t pool = 20;
    bool rerank = false;
    std::vector<size_t> support_sizes;
    std::vector<uint64_t> seeds;
    uint64_t seed = 0;
    int epochs = 20;
    int batch_size = 32;
    double lr = 5e-5;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    double temperature = 1.0;
    int dim = 64;
    int layers = 2;
    int heads = 4;
    int max_len = 128;
    int min_count = 1;
    int jobs = 4;
    bool no_normalize = false;
};

std::unique_ptr<ChatBackend> make_backend(const Options& opt, bool for_dst) {
    if (opt.backend == "mock") {
        if (for_dst) return std::make_unique<EchoMockBackend>();
        return std::make_unique<MockSummarizer>();
    }
    if (opt.endpoint.empty())
        throw BackendUnavailable("--backend remote needs --endpoint");
    RemoteEndpoint endpoint;
    endpoint.url = opt.endpoint;
    endpoint.model = opt.model;
    endpoint.token_env = opt.token_env;
    return std::make_unique<RemoteChatBackend>(endpoint);
}

std::vector<AnnotatedExample> load_corpus_examples(const std::string& path) {
    return load_examples(path);
}

ModelContext load_context(const Options& opt) {
    return make_context(load_checkpoint(opt.checkpoint), Vocabulary::load(opt.vocab));
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
    if (!out.flush()) throw IoError("write to '" + path + "' failed");
}

int cmd_summarize(const Options& opt) {
    const auto examples = load_corpus_examples(opt.corpus);
    SummaryCache cache{std::filesystem::path(opt.cache)};
    auto backend = make_backend(opt, false);
    const size_t before = cache.size();
    try {
        const size_t fresh = summarize_corpus(examples, *backend, cache, opt.jobs);
        std::cout << "summaries: " << fresh << " new, " << before << " cached -> " << opt.cache
                  << "\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n"
                  << "partial cache retained at " << opt.cache << " (" << cache.size()
                  << " entries)\n";
        return 1;
    }
}

int cmd_train(const Options& opt) {
    const auto examples = load_corpus_examples(opt.corpus);
    SummaryCache cache{std::filesystem::path(opt.cache)};

    std::vector<TrainingPair> pairs;
    std::vector<std::string> texts;
    pairs.reserve(examples.size());
    for (const AnnotatedExample& ex : examples) {
        const Summary* summary = cache.find(ex.dialogue_id, ex.turn_index);
        if (summary == nullptr)
            throw MissingSummary("no cached summary for '" + ex.conversation.id + "'");
        pairs.push_back({ex.conversation, *summary});
        for (const Utterance& u : ex.conversation.utterances) texts.push_back(u.text);
        texts.push_back(summary->text);
    }

    const Vocabulary vocab = build_vocab(texts, opt.min_count);
    vocab.save(opt.vocab);

    EncoderConfig encoder_config;
    encoder_config.dim = opt.dim;
    encoder_config.layers = opt.layers;
    encoder_config.heads = opt.heads;
    encoder_config.max_len = opt.max_len;
    encoder_config.normalize_rows = !opt.no_normalize;

    TrainConfig config;
    config.batch_size = opt.batch_size;
    config.learning_rate = opt.lr;
    config.epochs = opt.epochs;
    config.weight_decay = opt.weight_decay;
    config.seed = opt.seed;
    config.clip_norm = opt.clip_norm;
    config.temperature = opt.temperature;

    const TrainOutcome outcome = train(pairs, vocab, config, encoder_config, opt.out);
    for (size_t e = 0; e < outcome.report.epoch_loss.size(); ++e) {
        char line[128];
        std::snprintf(line, sizeof(line), "epoch %zu  loss %.6f  accuracy %.4f\n", e + 1,
                      outcome.report.epoch_loss[e], outcome.report.epoch_accuracy[e]);
        std::cout << line;
    }
    std::cout << "checkpoint: " << outcome.report.checkpoint_path << "\n"
              << "vocab: " << opt.vocab << " (" << vocab.size() << " tokens)\n";
    return 0;
}

int cmd_index(const Options& opt) {
    const auto examples = load_corpus_examples(opt.corpus);
    SummaryCache cache{std::filesystem::path(opt.cache)};
    const ModelContext model = load_context(opt);
    const SupportIndex index = build_index(examples, cache, model);
    save_index(index, opt.out);
    std::cout << "indexed " << index.entries.size() << " entries -> " << opt.out << "\n"
              << "checkpoint fingerprint: " << index.header.checkpoint_fingerprint << "\n";
    return 0;
}

int cmd_retrieve(const Options& opt) {
    const SupportIndex index = load_index(opt.index);
    const ModelContext model = load_context(opt);
    const auto examples = load_corpus_examples(opt.corpus);

    std::vector<const AnnotatedExample*> queries;
    for (const AnnotatedExample& ex : examples)
        if (opt.query_id.empty() || ex.conversation.id == opt.query_id) queries.push_back(&ex);
    if (queries.empty())
        throw SchemaError("no conversation matches query id '" + opt.query_id + "'");

    for (const AnnotatedExample* ex : queries) {
        const RetrievalResult result =
            opt.rerank
                ? rerank_latest(index, ex->conversation, model, opt.pool, opt.k,
                                static_cast<size_t>(opt.jobs))
                : query(index, ex->conversation, model, opt.k, static_cast<size_t>(opt.jobs));
        for (size_t rank = 0; rank < result.ranked.size(); ++rank) {
            const ScoredEntry& scored = result.ranked[rank];
            const IndexEntry& entry = index.entries[scored.entry_index];
            const json line = {{"query_id", result.query_id},
                               {"rank", rank + 1},
                               {"id", entry.example.conversation.id},
                               {"score", scored.score},
                               {"summary", entry.summary.text}};
            std::cout << line.dump() << "\n";
        }
    }
    return 0;
}

int cmd_eval(const Options& opt) {
    const auto examples = load_corpus_examples(opt.corpus);
    SummaryCache cache{std::filesystem::path(opt.cache)};
    const ModelContext model = load_context(opt);

    ExperimentConfig config;
    if (!opt.support_sizes.empty()) config.support_sizes = opt.support_sizes;
    if (!opt.seeds.empty()) config.seeds = opt.seeds;
    config.k = opt.k;
    config.rerank = opt.rerank;
    config.rerank_pool = opt.pool;
    config.holdout_domain = opt.holdout_domain;
    config.jobs = static_cast<size_t>(opt.jobs);
    config.model_name = opt.backend == "mock" ? "echo-mock" : opt.model;

    auto backend = make_backend(opt, true);
    const ExperimentResult result = run_experiment(examples, cache, model, config, *backend);
    if (!opt.out.empty()) write_text(opt.out, report_json(result, config).dump(2) + "\n");
    std::cout << aggregate_table(result, config.model_name);
    return 0;
}

int cmd_inspect(const Options& opt) {
    const ModelContext model = load_context(opt);
    const auto examples = load_corpus_examples(opt.corpus);

    const AnnotatedExample* chosen = nullptr;
    for (const AnnotatedExample& ex : examples)
        if (opt.query_id.empty() || ex.conversation.id == opt.query_id) {
            chosen = &ex;
            break;
        }
    if (chosen == nullptr)
        throw SchemaError("no conversation matches query id '" + opt.query_id + "'");

    const json weights = dump_weights(chosen->conversation, model.vocab, model.params);
    if (opt.out.empty())
        std::cout << weights.dump(2) << "\n";
    else
        write_text(opt.out, weights.dump(2) + "\n");
    return 0;
}

void add_backend_flags(CLI::App* sub, Options& opt) {
    sub->add_option("--backend", opt.backend, "completion backend")
        ->check(CLI::IsMember({"mock", "remote"}))
        ->capture_default_str();
    sub->add_option("--endpoint", opt.endpoint, "remote completion URL");
    sub->add_option("--model", opt.model, "remote model name");
    sub->add_option("--token-env", opt.token_env, "env var holding the bearer token")
        ->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conversation retrieval engine for few-shot dialogue state tracking",
                 "conretrieve"};
    app.require_subcommand(1);
    Options opt;

    CLI::App* summarize = app.add_subcommand("summarize", "fill the summary cache for a corpus");
    summarize->add_option("--corpus", opt.corpus, "corpus JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    summarize->add_option("--cache", opt.cache, "summary cache JSONL file")->required();
    add_backend_flags(summarize, opt);
    summarize->add_option("--jobs", opt.jobs, "concurrent backend requests")
        ->capture_default_str();

    CLI::App* train_cmd = app.add_subcommand("train", "distill an encoder from cached summaries");
    train_cmd->add_option("--corpus", opt.corpus, "corpus JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    train_cmd->add_option("--cache", opt.cache, "summary cache JSONL file")
        ->required()
        ->check(CLI::ExistingFile);
    train_cmd->add_option("--out", opt.out, "checkpoint output path")->required();
    train_cmd->add_option("--vocab", opt.vocab, "vocabulary output path")->required();
    train_cmd->add_option("--epochs", opt.epochs, "training epochs")->capture_default_str();
    train_cmd->add_option("--batch-size", opt.batch_size, "contrastive batch size")
        ->capture_default_str();
    train_cmd->add_option("--lr", opt.lr, "learning rate")->capture_default_str();
    train_cmd->add_option("--weight-decay", opt.weight_decay, "decoupled weight decay")
        ->capture_default_str();
    train_cmd->add_option("--clip-norm", opt.clip_norm, "global gradient norm cap; <= 0 disables")
        ->capture_default_str();
    train_cmd->add_option("--temperature", opt.temperature, "contrastive softmax temperature")
        ->capture_default_str();
    train_cmd->add_option("--dim", opt.dim, "embedding width")->capture_default_str();
    train_cmd->add_option("--layers", opt.layers, "encoder blocks")->capture_default_str();
    train_cmd->add_option("--heads", opt.heads, "attention heads")->capture_default_str();
    train_cmd->add_option("--max-len", opt.max_len, "token window")->capture_default_str();
    train_cmd->add_option("--min-count", opt.min_count, "vocabulary frequency floor")
        ->capture_default_str();
    train_cmd->add_option("--seed", opt.seed, "init and shuffle seed")->capture_default_str();
    train_cmd->add_flag("--no-normalize", opt.no_normalize, "skip embedding row normalization");

    CLI::App* index_cmd = app.add_subcommand("index", "embed a support set into an index file");
    index_cmd->add_option("--corpus", opt.corpus, "support corpus JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    index_cmd->add_option("--cache", opt.cache, "summary cache JSONL file")
        ->required()
        ->check(CLI::ExistingFile);
    index_cmd->add_option("--checkpoint", opt.checkpoint, "encoder checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    index_cmd->add_option("--vocab", opt.vocab, "vocabulary JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    index_cmd->add_option("--out", opt.out, "index output path")->required();

    CLI::App* retrieve = app.add_subcommand("retrieve", "query an index with conversations");
    retrieve->add_option("--index", opt.index, "index file")
        ->required()
        ->check(CLI::ExistingFile);
    retrieve->add_option("--checkpoint", opt.checkpoint, "encoder checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    retrieve->add_option("--vocab", opt.vocab, "vocabulary JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    retrieve->add_option("--corpus", opt.corpus, "query corpus JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    retrieve->add_option("--query-id", opt.query_id, "restrict to one conversation id");
    retrieve->add_option("--k", opt.k, "results per query")->capture_default_str();
    retrieve->add_option("--pool", opt.pool, "rerank candidate pool")->capture_default_str();
    retrieve->add_flag("--rerank", opt.rerank, "second-stage latest-utterance rerank");
    retrieve->add_option("--jobs", opt.jobs, "scoring threads")->capture_default_str();

    CLI::App* eval_cmd = app.add_subcommand("eval", "run the few-shot state tracking experiment");
    eval_cmd->add_option("--corpus", opt.corpus, "corpus JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--cache", opt.cache, "summary cache JSONL file")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--checkpoint", opt.checkpoint, "encoder checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--vocab", opt.vocab, "vocabulary JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--out", opt.out, "evaluation report JSON path");
    add_backend_flags(eval_cmd, opt);
    eval_cmd->add_option("--k", opt.k, "exemplars per prompt")->capture_default_str();
    eval_cmd->add_option("--pool", opt.pool, "rerank candidate pool")->capture_default_str();
    eval_cmd->add_flag("--rerank", opt.rerank, "second-stage latest-utterance rerank");
    eval_cmd
        ->add_option("--support-sizes,--support-size", opt.support_sizes,
                     "support set sizes to sweep")
        ->delimiter(',');
    eval_cmd->add_option("--seeds,--seed", opt.seeds, "sampling seeds")->delimiter(',');
    eval_cmd->add_option("--holdout-domain", opt.holdout_domain,
                         "train on other domains, test on this one");
    eval_cmd->add_option("--jobs", opt.jobs, "concurrent test turns")->capture_default_str();

    CLI::App* inspect = app.add_subcommand("inspect", "dump per-token relevance weights");
    inspect->add_option("--checkpoint", opt.checkpoint, "encoder checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    inspect->add_option("--vocab", opt.vocab, "vocabulary JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    inspect->add_option("--corpus", opt.corpus, "corpus JSON file")
        ->required()
        ->check(CLI::ExistingFile);
    inspect->add_option("--query-id", opt.query_id, "conversation to inspect (default: first)");
    inspect->add_option("--out", opt.out, "weight JSON output path (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(summarize)) return cmd_summarize(opt);
        if (app.got_subcommand(train_cmd)) return cmd_train(opt);
        if (app.got_subcommand(index_cmd)) return cmd_index(opt);
        if (app.got_subcommand(retrieve)) return cmd_retrieve(opt);
        if (app.got_subcommand(eval_cmd)) return cmd_eval(opt);
        if (app.got_subcommand(inspect)) return cmd_inspect(opt);
    } catch (const FingerprintMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const VersionMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
