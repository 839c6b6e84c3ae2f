#include "conretrieve/summarizer.hpp"

#include <fstream>
#include <optional>
#include <set>

#include <json.hpp>

#include "conretrieve/errors.hpp"
#include "conretrieve/parallel.hpp"
#include "conretrieve/text.hpp"

namespace conretrieve {

using nlohmann::json;

namespace {

constexpr const char* kPromptHeader =
    "You are shown a conversation between a virtual assistant on a phone and a user. "
    "You have to summarise what the user wants at this particular point of the conversation. "
    "You summary should contain the user intent and the slots he mentioned. "
    "However, the summary should be a delexicalized abstrast sentence, "
    "which means it should not contain actual slot values. "
    "Note that it is possible that not all conversation history is relevant "
    "and you need to summarise based on what is relevant to the most recent user turn. "
    "If the user does not have a goal at this point or his goal gets completed by the system, "
    "just summarize that \"The user wants nothing more\".\n"
    "\n"
    "<fictional_example>\n"
    "USER: make an alarm for 6\n"
    "SYSTEM: I have created an alarm at 6\n"
    "USER: Also, send a message to my wife\n"
    "SYSTEM: What would you like the message to say?\n"
    "USER: ehm... happy birthday\n"
    "SYSTEM: I can do that. What message service do you want to use\n"
    "USER: whatsapp\n"
    "\n"
    "What does the user want at this point in the conversation?\n"
    "The user wants to send a message to a recipient with a given text using a specified app\n"
    "</fictional_example>\n"
    "\n"
    "<fictional_example>\n"
    "USER: make an alarm for 6\n"
    "SYSTEM: I have created an alarm at 6\n"
    "USER: thanks you and goodbye\n"
    "\n"
    "What does the user want at this point in the conversation?\n"
    "The user wants nothing more\n"
    "</fictional_example>\n"
    "\n"
    "Now it's your turn.\n"
    "\n";

constexpr const char* kPromptQuestion = "What does the user want at this point in the conversation?";

const std::set<std::string>& stopwords() {
    static const std::set<std::string> words = {
        "a",    "an",   "and",  "are",   "am",    "at",     "be",   "can",  "could", "do",
        "for",  "get",  "i",    "in",    "is",    "it",     "like", "make", "me",    "my",
        "need", "of",   "on",   "or",    "our",   "please", "that", "the",  "there", "this",
        "to",   "want", "we",   "will",  "with",  "would",  "you",  "your", "book",  "find",
        "visit"};
    return words;
}

struct DomainVerb {
    const char* domain;
    const char* verb;
};

constexpr DomainVerb kDomainVerbs[] = {
    {"taxi", "book"}, {"hotel", "book"}, {"restaurant", "find"},
    {"train", "find"}, {"attraction", "visit"},
};

}  // namespace

std::string mock_summary_for(const std::string& latest_user_utterance) {
    std::vector<std::string> words = word_tokens(latest_user_utterance);
    for (const std::string& w : words)
        if (w == "goodbye" || w == "bye") return "The user wants nothing more";

    const DomainVerb* match = nullptr;
    for (const DomainVerb& dv : kDomainVerbs) {
        for (const std::string& w : words)
            if (w == dv.domain) {
                match = &dv;
                break;
            }
        if (match) break;
    }

    std::vector<std::string> content;
    std::set<std::string> seen;
    for (const std::string& w : words) {
        if (stopwords().count(w)) continue;
        if (match && w == match->domain) continue;
        if (seen.insert(w).second) content.push_back(w);
    }

    std::string out = match ? std::string("The user wants to ") + match->verb + " a " + match->domain
                            : std::string("The user wants to make a request");
    out += " with " + std::to_string(content.size()) + " specified constraints";
    if (!content.empty()) {
        out += " (";
        for (size_t i = 0; i < content.size(); ++i) {
            if (i) out += ", ";
            out += content[i];
        }
        out += ")";
    }
    out += ".";
    return out;
}

std::string MockSummarizer::complete(const std::string& prompt) {
    calls_.fetch_add(1);
    // The test conversation sits at the bottom of the prompt, so its final
    // utterance is the last USER: line overall.
    std::optional<std::string> latest;
    size_t pos = 0;
    while (pos <= prompt.size()) {
        size_t end = prompt.find('\n', pos);
        if (end == std::string::npos) end = prompt.size();
        std::string_view line(prompt.data() + pos, end - pos);
        if (line.rfind("USER: ", 0) == 0) latest = std::string(line.substr(6));
        pos = end + 1;
    }
    if (!latest) throw EmptyCompletion("prompt has no USER: line to summarize");
    return mock_summary_for(*latest);
}

std::string render_prompt(const Conversation& conversation) {
    if (conversation.utterances.empty()) throw SchemaError("cannot render an empty conversation");
    std::string out = kPromptHeader;
    for (const Utterance& u : conversation.utterances) {
        out += u.speaker == Speaker::User ? "USER: " : "SYSTEM: ";
        out += u.text;
        out += '\n';
    }
    out += kPromptQuestion;
    return out;
}

std::string summarize_text(const Conversation& conversation, ChatBackend& backend) {
    if (conversation.utterances.empty() || conversation.latest().speaker != Speaker::User)
        throw SchemaError("conversation must end with a user utterance");
    std::string completion = single_line(backend.complete(render_prompt(conversation)));
    if (completion.empty())
        throw EmptyCompletion("backend returned a blank summary for '" + conversation.id + "'");
    return completion;
}

Summary summarize(const AnnotatedExample& example, ChatBackend& backend) {
    return Summary{example.dialogue_id, example.turn_index,
                   summarize_text(example.conversation, backend)};
}

SummaryCache::SummaryCache(std::filesystem::path file) : file_(std::move(file)) {
    std::ifstream in(file_);
    if (!in) return;  // no cache yet; first put creates the file
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json node;
        try {
            node = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError("cache " + file_.string() + " line " + std::to_string(line_no) +
                             ": " + e.what());
        }
        if (!node.contains("conversation_id") || !node.contains("turn_index") ||
            !node.contains("summary"))
            throw SchemaError("cache " + file_.string() + " line " + std::to_string(line_no) +
                              ": missing field");
        Summary s{node["conversation_id"].get<std::string>(), node["turn_index"].get<int>(),
                  node["summary"].get<std::string>()};
        auto key = std::make_pair(s.conversation_id, s.turn_index);
        auto it = by_key_.find(key);
        if (it == by_key_.end()) {
            by_key_[key] = order_.size();
            order_.push_back(std::move(s));
        } else {
            order_[it->second] = std::move(s);  // later lines win
        }
    }
}

bool SummaryCache::contains(const std::string& conversation_id, int turn_index) const {
    return by_key_.count({conversation_id, turn_index}) > 0;
}

const Summary* SummaryCache::find(const std::string& conversation_id, int turn_index) const {
    auto it = by_key_.find({conversation_id, turn_index});
    return it == by_key_.end() ? nullptr : &order_[it->second];
}

void SummaryCache::put(const Summary& summary) {
    std::lock_guard<std::mutex> lock(write_mutex_);
    auto key = std::make_pair(summary.conversation_id, summary.turn_index);
    auto it = by_key_.find(key);
    if (it != by_key_.end() && order_[it->second].text == summary.text) return;
    if (it == by_key_.end()) {
        by_key_[key] = order_.size();
        order_.push_back(summary);
    } else {
        order_[it->second] = summary;
    }
    if (file_.empty()) return;
    std::ofstream out(file_, std::ios::app);
    if (!out) throw IoError("cannot append to cache file: " + file_.string());
    json node = {{"conversation_id", summary.conversation_id},
                 {"turn_index", summary.turn_index},
                 {"summary", summary.text}};
    out << node.dump() << '\n';
    out.flush();
    if (!out) throw IoError("write failed on cache file: " + file_.string());
}

size_t summarize_corpus(const std::vector<AnnotatedExample>& examples, ChatBackend& backend,
                        SummaryCache& cache, int jobs, RetryPolicy retry) {
    std::vector<const AnnotatedExample*> pending;
    for (const AnnotatedExample& ex : examples)
        if (!cache.contains(ex.dialogue_id, ex.turn_index)) pending.push_back(&ex);
    if (pending.empty()) return 0;

    std::vector<std::optional<Summary>> results(pending.size());
    std::atomic<bool> failed{false};
    std::mutex state_mutex;  // guards flush_cursor and the error record
    size_t flush_cursor = 0;
    size_t error_slot = pending.size();
    std::exception_ptr error;

    auto flush_ready = [&](std::lock_guard<std::mutex>&) {
        while (flush_cursor < results.size() && results[flush_cursor].has_value()) {
            cache.put(*results[flush_cursor]);
            ++flush_cursor;
        }
    };

    parallel_for(pending.size(), static_cast<size_t>(jobs < 1 ? 1 : jobs), [&](size_t i) {
        if (failed.load()) return;
        try {
            const AnnotatedExample& ex = *pending[i];
            std::string text =
                single_line(complete_with_retry(backend, render_prompt(ex.conversation), retry));
            if (text.empty())
                throw EmptyCompletion("backend returned a blank summary for '" +
                                      ex.conversation.id + "'");
            results[i] = Summary{ex.dialogue_id, ex.turn_index, std::move(text)};
            std::lock_guard<std::mutex> lock(state_mutex);
            flush_ready(lock);
        } catch (...) {
            failed.store(true);
            std::lock_guard<std::mutex> lock(state_mutex);
            if (i < error_slot) {
                error_slot = i;
                error = std::current_exception();
            }
        }
    });

    std::lock_guard<std::mutex> lock(state_mutex);
    flush_ready(lock);
    if (error) {
        const std::string id = pending[error_slot]->conversation.id;
        try {
            std::rethrow_exception(error);
        } catch (const BackendUnavailable& e) {
            throw BackendUnavailable("summarization failed at '" + id + "': " + e.what());
        } catch (const EmptyCompletion& e) {
            throw EmptyCompletion("summarization failed at '" + id + "': " + e.what());
        }
    }
    return flush_cursor;
}

}  // namespace conretrieve
