#pragma once

#include <map>
#include <string>
#include <vector>

namespace memguard {

inline constexpr int kMaxTokens = 8;  // L_max, shared with every attention shape
inline constexpr int kBot = 0;
inline constexpr int kEot = 1;
inline constexpr int kPad = 2;

class Vocabulary {
public:
    // Specials <bot>, <eot>, <pad> are prepended automatically.
    explicit Vocabulary(const std::vector<std::string>& words);

    int size() const noexcept { return static_cast<int>(words_.size()); }
    const std::vector<std::string>& words() const noexcept { return words_; }
    bool contains(const std::string& w) const { return index_.count(w) != 0; }
    int id(const std::string& w) const;  // throws TokenizationError
    const std::string& word(int id) const;
    bool is_special(int id) const noexcept { return id == kBot || id == kEot || id == kPad; }

    // Content words, i.e. everything except the specials.
    std::vector<std::string> content_words() const;

private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
};

struct PromptTokens {
    std::vector<int> ids;  // length kMaxTokens
    int eot_pos = 1;

    int bot_pos() const noexcept { return 0; }
    std::vector<int> pad_positions() const;
    int word_count() const noexcept { return eot_pos - 1; }
    // Validates bot/eot/pad layout and id range.
    void validate(const Vocabulary& vocab) const;

    bool operator==(const PromptTokens& o) const { return ids == o.ids && eot_pos == o.eot_pos; }
};

std::vector<std::string> split_words(const std::string& prompt);

// [BOT, words..., EOT, PAD...] padded to kMaxTokens.
PromptTokens tokenize(const std::string& prompt, const Vocabulary& vocab);
// Builds tokens from content ids (no specials).
PromptTokens tokens_from_ids(const std::vector<int>& word_ids, const Vocabulary& vocab);
std::string detokenize(const PromptTokens& tokens, const Vocabulary& vocab);

}  // namespace memguard
