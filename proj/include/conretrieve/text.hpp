#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace conretrieve {

// Maximal alphanumeric runs, lowercased; punctuation and whitespace delimit.
inline std::vector<std::string> word_tokens(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    for (char c : text) {
        unsigned char uc = static_cast<unsigned char>(c);
        if (std::isalnum(uc)) {
            current.push_back(static_cast<char>(std::tolower(uc)));
        } else if (!current.empty()) {
            words.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) words.push_back(std::move(current));
    return words;
}

// Collapse all whitespace (including newlines) to single spaces and trim,
// preserving case.
inline std::string single_line(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(c);
    }
    return out;
}

}  // namespace conretrieve
