#include "conretrieve/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>

#include "conretrieve/errors.hpp"
#include "conretrieve/parallel.hpp"
#include "conretrieve/rng.hpp"

namespace conretrieve {

using nlohmann::json;

std::string canonical_state(const DialogueState& state) {
    std::string out;
    for (const auto& [key, value] : state) {
        if (!out.empty()) out += "; ";
        out += key + "=" + value;
    }
    return out;
}

ParsedState parse_state(const std::string& completion) {
    ParsedState result;
    std::string line = completion.substr(0, completion.find('\n'));
    size_t pos = 0;
    while (pos <= line.size()) {
        size_t end = line.find(';', pos);
        if (end == std::string::npos) end = line.size();
        const std::string fragment = normalize_text(line.substr(pos, end - pos));
        pos = end + 1;
        if (fragment.empty()) continue;
        const size_t eq = fragment.find('=');
        if (eq == std::string::npos) {
            ++result.warnings;
            continue;
        }
        const std::string key = normalize_text(fragment.substr(0, eq));
        const std::string value = normalize_text(fragment.substr(eq + 1));
        const size_t hyphen = key.find('-');
        if (key.empty() || value.empty() || hyphen == 0 || hyphen == std::string::npos ||
            hyphen + 1 == key.size()) {
            ++result.warnings;
            continue;
        }
        result.state[key] = value;
    }
    return result;
}

namespace {

void check_lengths(size_t predicted, size_t gold) {
    if (predicted != gold)
        throw LengthMismatch(std::to_string(predicted) + " predictions vs " + std::to_string(gold) +
                             " gold states");
    if (gold == 0) throw LengthMismatch("metrics need at least one turn");
}

}  // namespace

double jga(const std::vector<DialogueState>& predicted, const std::vector<DialogueState>& gold) {
    check_lengths(predicted.size(), gold.size());
    size_t hits = 0;
    for (size_t i = 0; i < gold.size(); ++i)
        if (predicted[i] == gold[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(gold.size());
}

double slot_f1(const std::vector<DialogueState>& predicted, const std::vector<DialogueState>& gold) {
    check_lengths(predicted.size(), gold.size());
    size_t correct = 0, predicted_total = 0, gold_total = 0;
    for (size_t i = 0; i < gold.size(); ++i) {
        predicted_total += predicted[i].size();
        gold_total += gold[i].size();
        for (const auto& [key, value] : predicted[i]) {
            auto it = gold[i].find(key);
            if (it != gold[i].end() && it->second == value) ++correct;
        }
    }
    if (predicted_total == 0 && gold_total == 0) return 1.0;
    if (correct == 0) return 0.0;
    const double precision = static_cast<double>(correct) / static_cast<double>(predicted_total);
    const double recall = static_cast<double>(correct) / static_cast<double>(gold_total);
    return 2.0 * precision * recall / (precision + recall);
}

std::vector<AnnotatedExample> sample_support(const std::vector<AnnotatedExample>& examples,
                                             size_t size, uint64_t seed) {
    if (size > examples.size())
        throw InsufficientExamples("requested a support set of " + std::to_string(size) +
                                   " from " + std::to_string(examples.size()) + " examples");
    std::vector<const AnnotatedExample*> pool;
    pool.reserve(examples.size());
    for (const AnnotatedExample& ex : examples) pool.push_back(&ex);
    std::sort(pool.begin(), pool.end(), [](const AnnotatedExample* a, const AnnotatedExample* b) {
        return a->conversation.id < b->conversation.id;
    });
    Rng rng(seed);
    rng.shuffle(pool);
    std::vector<AnnotatedExample> sample;
    sample.reserve(size);
    for (size_t i = 0; i < size; ++i) sample.push_back(*pool[i]);
    return sample;
}

namespace {

void render_conversation_lines(const Conversation& conversation, std::string& out) {
    for (const Utterance& u : conversation.utterances) {
        out += u.speaker == Speaker::User ? "USER: " : "SYSTEM: ";
        out += u.text;
        out += '\n';
    }
}

std::string render_state_line(const DialogueState& state) {
    const std::string canonical = canonical_state(state);
    return canonical.empty() ? "state:" : "state: " + canonical;
}

}  // namespace

std::string assemble_prompt(const PromptSpec& spec, const std::vector<const IndexEntry*>& exemplars,
                            const Conversation& test_conversation) {
    if (exemplars.empty()) throw EmptyIndex("prompt assembly needs at least one exemplar");
    const size_t take = std::min(spec.max_exemplars, exemplars.size());
    std::string out = spec.instruction;
    out += "\n";
    for (size_t i = take; i-- > 0;) {  // least similar first
        out += "\n";
        render_conversation_lines(exemplars[i]->example.conversation, out);
        out += render_state_line(exemplars[i]->example.state);
        out += "\n";
    }
    out += "\n";
    render_conversation_lines(test_conversation, out);
    out += "state:";
    return out;
}

std::string EchoMockBackend::complete(const std::string& prompt) {
    // State lines double as labels and, at the very end, as the completion
    // cue; the label nearest the cue belongs to the top-1 exemplar.
    std::vector<std::string> state_lines;
    size_t pos = 0;
    while (pos <= prompt.size()) {
        size_t end = prompt.find('\n', pos);
        if (end == std::string::npos) end = prompt.size();
        const std::string_view line(prompt.data() + pos, end - pos);
        if (line == "state:" || line.rfind("state: ", 0) == 0) state_lines.emplace_back(line);
        pos = end + 1;
    }
    if (state_lines.size() < 2) return "";  // no exemplar labels to echo
    const std::string& label = state_lines[state_lines.size() - 2];
    return label.size() > 6 ? label.substr(7) : "";
}

namespace {

double mean_of(const std::vector<double>& xs) {
    double sum = 0.0;
    for (double x : xs) sum += x;
    return sum / static_cast<double>(xs.size());
}

double stddev_of(const std::vector<double>& xs, double mean) {
    double sq = 0.0;
    for (double x : xs) sq += (x - mean) * (x - mean);
    return std::sqrt(sq / static_cast<double>(xs.size()));
}

}  // namespace

ExperimentResult run_experiment(const std::vector<AnnotatedExample>& examples,
                                const SummaryCache& cache, const ModelContext& model,
                                const ExperimentConfig& config, ChatBackend& dst_backend,
                                const PromptSpec& spec) {
    const std::vector<AnnotatedExample>* support_pool = &examples;
    const std::vector<AnnotatedExample>* test_set = &examples;
    HoldoutSplit split;
    if (!config.holdout_domain.empty()) {
        split = split_holdout(examples, config.holdout_domain);
        if (!split.domain_found)
            throw InsufficientExamples("no example carries the holdout domain '" +
                                       config.holdout_domain + "'");
        if (split.train.empty())
            throw InsufficientExamples("holding out '" + config.holdout_domain +
                                       "' leaves no support examples");
        support_pool = &split.train;
        test_set = &split.heldout;
    }
    if (test_set->empty()) throw InsufficientExamples("empty test set");

    PromptSpec effective_spec = spec;
    effective_spec.max_exemplars = config.k;

    ExperimentResult result;
    for (size_t support_size : config.support_sizes) {
        std::vector<double> jga_values, f1_values;
        for (uint64_t seed : config.seeds) {
            EvalRun run;
            run.seed = seed;
            run.support_size = support_size;

            const std::vector<AnnotatedExample> support =
                sample_support(*support_pool, support_size, seed);
            for (const AnnotatedExample& ex : support)
                run.support_ids.push_back(ex.conversation.id);
            const SupportIndex index = build_index(support, cache, model);

            const size_t entries = index.entries.size();
            const size_t k = std::min(config.k, entries);
            const size_t pool = std::max(std::min(config.rerank_pool, entries), k);

            run.turns.assign(test_set->size(), TurnRecord{});
            std::atomic<size_t> failures{0};
            std::mutex error_mutex;
            std::string first_error;
            parallel_for(test_set->size(), config.jobs, [&](size_t i) {
                const AnnotatedExample& test = (*test_set)[i];
                TurnRecord& record = run.turns[i];
                record.conversation_id = test.conversation.id;
                record.gold = test.state;
                try {
                    const RetrievalResult retrieved =
                        config.rerank ? rerank_latest(index, test.conversation, model, pool, k, 1)
                                      : query(index, test.conversation, model, k, 1);
                    std::vector<const IndexEntry*> exemplars;
                    exemplars.reserve(retrieved.ranked.size());
                    for (const ScoredEntry& s : retrieved.ranked) {
                        exemplars.push_back(&index.entries[s.entry_index]);
                        record.retrieved_ids.push_back(
                            index.entries[s.entry_index].example.conversation.id);
                    }
                    const std::string prompt =
                        assemble_prompt(effective_spec, exemplars, test.conversation);
                    const std::string completion =
                        complete_with_retry(dst_backend, prompt, config.retry);
                    ParsedState parsed = parse_state(completion);
                    record.predicted = std::move(parsed.state);
                    record.parse_warnings = parsed.warnings;
                } catch (const std::exception& e) {
                    record.error = e.what();
                    failures.fetch_add(1);
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (first_error.empty()) first_error = e.what();
                }
            });
            if (failures.load() == test_set->size())
                throw BackendUnavailable("every test turn failed; first error: " + first_error);

            std::vector<DialogueState> predicted, gold;
            predicted.reserve(run.turns.size());
            gold.reserve(run.turns.size());
            for (const TurnRecord& record : run.turns) {
                predicted.push_back(record.predicted);
                gold.push_back(record.gold);
            }
            run.jga = jga(predicted, gold);
            run.slot_f1 = slot_f1(predicted, gold);
            jga_values.push_back(run.jga);
            f1_values.push_back(run.slot_f1);
            result.runs.push_back(std::move(run));
        }
        Aggregate agg;
        agg.support_size = support_size;
        agg.runs = config.seeds.size();
        agg.jga_mean = mean_of(jga_values);
        agg.jga_stddev = stddev_of(jga_values, agg.jga_mean);
        agg.f1_mean = mean_of(f1_values);
        agg.f1_stddev = stddev_of(f1_values, agg.f1_mean);
        result.aggregates.push_back(agg);
    }
    return result;
}

json report_json(const ExperimentResult& result, const ExperimentConfig& config) {
    json runs = json::array();
    for (const EvalRun& run : result.runs) {
        json turns = json::array();
        for (const TurnRecord& t : run.turns) {
            json turn = {{"conversation_id", t.conversation_id},
                         {"gold", t.gold},
                         {"predicted", t.predicted},
                         {"retrieved", t.retrieved_ids},
                         {"parse_warnings", t.parse_warnings}};
            if (!t.error.empty()) turn["error"] = t.error;
            turns.push_back(std::move(turn));
        }
        runs.push_back({{"seed", run.seed},
                        {"support_size", run.support_size},
                        {"jga", run.jga},
                        {"slot_f1", run.slot_f1},
                        {"support_ids", run.support_ids},
                        {"turns", std::move(turns)}});
    }
    json aggregates = json::array();
    for (const Aggregate& a : result.aggregates)
        aggregates.push_back({{"support_size", a.support_size},
                              {"runs", a.runs},
                              {"jga_mean", a.jga_mean},
                              {"jga_stddev", a.jga_stddev},
                              {"f1_mean", a.f1_mean},
                              {"f1_stddev", a.f1_stddev}});
    json seeds = json::array();
    for (uint64_t s : config.seeds) seeds.push_back(s);
    return json{{"model", config.model_name},
                {"k", config.k},
                {"rerank", config.rerank},
                {"rerank_pool", config.rerank_pool},
                {"holdout_domain", config.holdout_domain},
                {"support_sizes", config.support_sizes},
                {"seeds", std::move(seeds)},
                {"runs", std::move(runs)},
                {"aggregates", std::move(aggregates)}};
}

std::string aggregate_table(const ExperimentResult& result, const std::string& model_name) {
    std::string out;
    char line[160];
    std::snprintf(line, sizeof(line), "%-16s %-8s %-5s %-15s %-15s\n", "model", "support", "runs",
                  "jga", "slot_f1");
    out += line;
    for (const Aggregate& a : result.aggregates) {
        std::snprintf(line, sizeof(line), "%-16s %-8zu %-5zu %.3f +/- %.3f %.3f +/- %.3f\n",
                      model_name.c_str(), a.support_size, a.runs, a.jga_mean, a.jga_stddev,
                      a.f1_mean, a.f1_stddev);
        out += line;
    }
    return out;
}

}  // namespace conretrieve
