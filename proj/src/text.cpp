#include "memguard/text.hpp"

#include "memguard/errors.hpp"

#include <sstream>

namespace memguard {

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
    words_ = {"<bot>", "<eot>", "<pad>"};
    for (const auto& w : words) {
        if (w.empty() || w.find(' ') != std::string::npos)
            throw ArgumentError("Vocabulary: invalid word '" + w + "'");
        words_.push_back(w);
    }
    for (int i = 0; i < size(); ++i) {
        if (!index_.emplace(words_[i], i).second)
            throw ArgumentError("Vocabulary: duplicate word '" + words_[i] + "'");
    }
}

int Vocabulary::id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw TokenizationError("out-of-vocabulary word '" + w + "'");
    return it->second;
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= size()) throw TokenizationError("token id out of range: " + std::to_string(id));
    return words_[id];
}

std::vector<std::string> Vocabulary::content_words() const {
    return {words_.begin() + 3, words_.end()};
}

std::vector<int> PromptTokens::pad_positions() const {
    std::vector<int> out;
    for (int i = eot_pos + 1; i < kMaxTokens; ++i) out.push_back(i);
    return out;
}

void PromptTokens::validate(const Vocabulary& vocab) const {
    if (static_cast<int>(ids.size()) != kMaxTokens) throw ArgumentError("PromptTokens: wrong length");
    if (eot_pos <= 0 || eot_pos >= kMaxTokens) throw ArgumentError("PromptTokens: eot position out of range");
    if (ids[0] != kBot || ids[eot_pos] != kEot) throw ArgumentError("PromptTokens: misplaced BOT/EOT");
    for (int i = 1; i < eot_pos; ++i)
        if (vocab.is_special(ids[i]) || ids[i] >= vocab.size())
            throw ArgumentError("PromptTokens: invalid word id at position " + std::to_string(i));
    for (int p : pad_positions())
        if (ids[p] != kPad) throw ArgumentError("PromptTokens: expected padding after EOT");
}

std::vector<std::string> split_words(const std::string& prompt) {
    std::istringstream is(prompt);
    std::vector<std::string> out;
    for (std::string w; is >> w;) out.push_back(w);
    return out;
}

PromptTokens tokens_from_ids(const std::vector<int>& word_ids, const Vocabulary& vocab) {
    if (static_cast<int>(word_ids.size()) > kMaxTokens - 2)
        throw TokenizationError("prompt longer than " + std::to_string(kMaxTokens - 2) + " words");
    PromptTokens t;
    t.ids.assign(kMaxTokens, kPad);
    t.ids[0] = kBot;
    for (std::size_t i = 0; i < word_ids.size(); ++i) t.ids[i + 1] = word_ids[i];
    t.eot_pos = static_cast<int>(word_ids.size()) + 1;
    t.ids[t.eot_pos] = kEot;
    t.validate(vocab);
    return t;
}

PromptTokens tokenize(const std::string& prompt, const Vocabulary& vocab) {
    std::vector<int> ids;
    for (const auto& w : split_words(prompt)) {
        const int id = vocab.id(w);
        if (vocab.is_special(id)) throw TokenizationError("special token '" + w + "' inside prompt");
        ids.push_back(id);
    }
    return tokens_from_ids(ids, vocab);
}

std::string detokenize(const PromptTokens& tokens, const Vocabulary& vocab) {
    std::string out;
    for (int i = 1; i < tokens.eot_pos; ++i) {
        if (!out.empty()) out += ' ';
        out += vocab.word(tokens.ids[i]);
    }
    return out;
}

}  // namespace memguard
