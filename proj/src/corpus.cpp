#include "conretrieve/corpus.hpp"

#include <cctype>
#include <fstream>
#include <unordered_set>

#include <json.hpp>

#include "conretrieve/errors.hpp"

namespace conretrieve {

using nlohmann::json;

std::string normalize_text(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char c : text) {
        unsigned char uc = static_cast<unsigned char>(c);
        if (std::isspace(uc)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(uc)));
    }
    return out;
}

namespace {

std::string field_path(const std::string& dialogue_id, const std::string& path) {
    return "dialogue '" + dialogue_id + "': " + path;
}

DialogueState parse_state(const json& node, const std::string& dialogue_id, size_t turn) {
    const std::string where = "turns[" + std::to_string(turn) + "].state";
    if (!node.is_object()) throw SchemaError(field_path(dialogue_id, where + " must be an object"));
    DialogueState state;
    for (auto it = node.begin(); it != node.end(); ++it) {
        if (!it.value().is_string())
            throw SchemaError(field_path(dialogue_id, where + "['" + it.key() + "'] must be a string"));
        std::string key = normalize_text(it.key());
        std::string value = normalize_text(it.value().get<std::string>());
        size_t hyphen = key.find('-');
        if (hyphen == 0 || hyphen == std::string::npos || hyphen + 1 == key.size())
            throw SchemaError(field_path(dialogue_id, where + " key '" + it.key() + "' is not domain-slot"));
        if (value.empty())
            throw SchemaError(field_path(dialogue_id, where + "['" + it.key() + "'] is empty"));
        state[key] = value;
    }
    return state;
}

RawDialogue parse_dialogue(const json& node, size_t ordinal) {
    if (!node.is_object()) throw SchemaError("corpus[" + std::to_string(ordinal) + "] must be an object");
    if (!node.contains("id") || !node["id"].is_string() || node["id"].get<std::string>().empty())
        throw SchemaError("corpus[" + std::to_string(ordinal) + "].id missing or empty");
    RawDialogue dlg;
    dlg.id = node["id"].get<std::string>();

    if (!node.contains("domains") || !node["domains"].is_array())
        throw SchemaError(field_path(dlg.id, "domains missing or not a list"));
    for (const auto& d : node["domains"]) {
        if (!d.is_string()) throw SchemaError(field_path(dlg.id, "domains entries must be strings"));
        std::string domain = normalize_text(d.get<std::string>());
        if (domain.empty()) throw SchemaError(field_path(dlg.id, "domains entry is empty"));
        dlg.domains.insert(domain);
    }

    if (!node.contains("turns") || !node["turns"].is_array() || node["turns"].empty())
        throw SchemaError(field_path(dlg.id, "turns missing or empty"));
    const auto& turns = node["turns"];
    for (size_t t = 0; t < turns.size(); ++t) {
        const auto& tn = turns[t];
        const std::string where = "turns[" + std::to_string(t) + "]";
        if (!tn.is_object()) throw SchemaError(field_path(dlg.id, where + " must be an object"));
        if (!tn.contains("speaker") || !tn["speaker"].is_string())
            throw SchemaError(field_path(dlg.id, where + ".speaker missing"));
        std::string role = tn["speaker"].get<std::string>();
        RawTurn turn;
        if (role == "user")
            turn.speaker = Speaker::User;
        else if (role == "system")
            turn.speaker = Speaker::System;
        else
            throw SchemaError(field_path(dlg.id, where + ".speaker '" + role + "' is not user|system"));
        if (!tn.contains("text") || !tn["text"].is_string())
            throw SchemaError(field_path(dlg.id, where + ".text missing"));
        turn.text = normalize_text(tn["text"].get<std::string>());
        if (turn.text.empty()) throw SchemaError(field_path(dlg.id, where + ".text is empty"));
        if (turn.speaker == Speaker::User) {
            if (!tn.contains("state")) throw SchemaError(field_path(dlg.id, where + ".state missing on user turn"));
            turn.state = parse_state(tn["state"], dlg.id, t);
        } else if (tn.contains("state")) {
            throw SchemaError(field_path(dlg.id, where + ".state not allowed on system turn"));
        }
        if (!dlg.turns.empty() && dlg.turns.back().speaker == turn.speaker)
            throw SchemaError(field_path(dlg.id, where + " repeats the previous speaker"));
        dlg.turns.push_back(std::move(turn));
    }
    return dlg;
}

}  // namespace

std::vector<RawDialogue> load_corpus(const std::filesystem::path& path, CorpusFormat format) {
    (void)format;  // single supported format for now
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus file: " + path.string());
    json root;
    try {
        root = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("corpus " + path.string() + ": " + e.what());
    }
    if (!root.is_array()) throw SchemaError("corpus " + path.string() + ": top level must be a list");

    std::vector<RawDialogue> dialogues;
    dialogues.reserve(root.size());
    std::unordered_set<std::string> seen_ids;
    for (size_t i = 0; i < root.size(); ++i) {
        RawDialogue dlg = parse_dialogue(root[i], i);
        if (!seen_ids.insert(dlg.id).second)
            throw SchemaError("duplicate dialogue id '" + dlg.id + "'");
        dialogues.push_back(std::move(dlg));
    }
    return dialogues;
}

DialogueState state_delta(const DialogueState& previous, const DialogueState& current) {
    DialogueState delta;
    for (const auto& [key, value] : current) {
        auto it = previous.find(key);
        if (it == previous.end() || it->second != value) delta[key] = value;
    }
    return delta;
}

DialogueState accumulate(const DialogueState& previous, const DialogueState& delta) {
    DialogueState merged = previous;
    for (const auto& [key, value] : delta) merged[key] = value;
    return merged;
}

std::vector<AnnotatedExample> expand_turns(const RawDialogue& dialogue) {
    std::vector<AnnotatedExample> examples;
    DialogueState previous;
    int user_ordinal = 1;
    for (size_t t = 0; t < dialogue.turns.size(); ++t) {
        const RawTurn& turn = dialogue.turns[t];
        if (turn.speaker != Speaker::User) continue;
        if (!turn.state)
            throw MissingAnnotation("dialogue '" + dialogue.id + "': user turn " +
                                    std::to_string(user_ordinal) + " has no state");
        AnnotatedExample ex;
        ex.dialogue_id = dialogue.id;
        ex.turn_index = user_ordinal;
        ex.conversation.id = dialogue.id + "#" + std::to_string(user_ordinal);
        for (size_t p = 0; p <= t; ++p)
            ex.conversation.utterances.push_back({dialogue.turns[p].speaker, dialogue.turns[p].text});
        ex.state = *turn.state;
        ex.state_delta = state_delta(previous, ex.state);
        ex.domain_tags = dialogue.domains;
        previous = ex.state;
        examples.push_back(std::move(ex));
        ++user_ordinal;
    }
    return examples;
}

std::vector<AnnotatedExample> load_examples(const std::filesystem::path& path) {
    std::vector<AnnotatedExample> examples;
    for (const RawDialogue& dlg : load_corpus(path)) {
        std::vector<AnnotatedExample> per_dialogue = expand_turns(dlg);
        examples.insert(examples.end(), per_dialogue.begin(), per_dialogue.end());
    }
    return examples;
}

HoldoutSplit split_holdout(const std::vector<AnnotatedExample>& examples,
                           const std::string& holdout_domain) {
    HoldoutSplit split;
    const std::string domain = normalize_text(holdout_domain);
    for (const AnnotatedExample& ex : examples) {
        if (ex.domain_tags.count(domain)) {
            split.heldout.push_back(ex);
            split.domain_found = true;
        } else {
            split.train.push_back(ex);
        }
    }
    return split;
}

}  // namespace conretrieve
