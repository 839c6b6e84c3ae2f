#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace conretrieve {

enum class Speaker { User, System };

struct Utterance {
    Speaker speaker;
    std::string text;
};

// A conversation prefix ending at a user utterance; the final utterance is
// the "latest user input" that drives relevance weighting downstream.
struct Conversation {
    std::string id;
    std::vector<Utterance> utterances;

    const Utterance& latest() const { return utterances.back(); }
};

// Accumulated dialogue state: "domain-slot" -> value, all lowercase.
using DialogueState = std::map<std::string, std::string>;

struct AnnotatedExample {
    Conversation conversation;
    DialogueState state;
    DialogueState state_delta;
    std::set<std::string> domain_tags;
    std::string dialogue_id;
    int turn_index = 1;  // ordinal of the user turn within its dialogue, 1-based
};

struct RawTurn {
    Speaker speaker;
    std::string text;
    std::optional<DialogueState> state;  // required on user turns, absent on system turns
};

struct RawDialogue {
    std::string id;
    std::set<std::string> domains;
    std::vector<RawTurn> turns;
};

enum class CorpusFormat { MultiWozJson };

// Lowercase, collapse internal whitespace runs to single spaces, trim ends.
std::string normalize_text(std::string_view text);

// Parses and validates a corpus file: a JSON list of
// {id, domains: [string], turns: [{speaker, text, state?}]} objects with
// alternating speaker roles. Throws ParseError on malformed JSON and
// SchemaError (naming the dialogue id and field path) on contract breaks.
std::vector<RawDialogue> load_corpus(const std::filesystem::path& path,
                                     CorpusFormat format = CorpusFormat::MultiWozJson);

// One example per user turn: the conversation prefix ending at that turn,
// the accumulated state annotated on it, and the delta against the previous
// user turn's state (added or changed slots; removals are out of scope).
std::vector<AnnotatedExample> expand_turns(const RawDialogue& dialogue);

// load_corpus + expand_turns over every dialogue, in file order.
std::vector<AnnotatedExample> load_examples(const std::filesystem::path& path);

DialogueState state_delta(const DialogueState& previous, const DialogueState& current);
DialogueState accumulate(const DialogueState& previous, const DialogueState& delta);

struct HoldoutSplit {
    std::vector<AnnotatedExample> train;
    std::vector<AnnotatedExample> heldout;
    bool domain_found = false;
};

// Exact partition by domain tag membership. An unknown domain is not an
// error: the heldout side comes back empty and domain_found is false.
HoldoutSplit split_holdout(const std::vector<AnnotatedExample>& examples,
                           const std::string& holdout_domain);

}  // namespace conretrieve
