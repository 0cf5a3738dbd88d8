#include "memguard/backbone.hpp"
#include "memguard/dataset.hpp"
#include "memguard/errors.hpp"
#include "memguard/text.hpp"

#include <gtest/gtest.h>

using namespace memguard;

namespace {

const Vocabulary& vocab() {
    static const Vocabulary v = ToyLexicon::standard().vocabulary();
    return v;
}

DenoiserParams params() {
    Geometry g;
    g.vocab_size = vocab().size();
    return init_params(g, 17);
}

}  // namespace

TEST(Vocabulary, SpecialsComeFirst) {
    EXPECT_EQ(vocab().word(kBot), "<bot>");
    EXPECT_EQ(vocab().word(kEot), "<eot>");
    EXPECT_EQ(vocab().word(kPad), "<pad>");
    EXPECT_EQ(vocab().size(), 3 + 6 + 3 + 9 + 8 + 2 + 8);
}

TEST(Tokenize, EmptyPromptIsBotEotPadding) {
    const auto t = tokenize("", vocab());
    EXPECT_EQ(t.ids, (std::vector<int>{kBot, kEot, kPad, kPad, kPad, kPad, kPad, kPad}));
    EXPECT_EQ(t.eot_pos, 1);
    EXPECT_EQ(t.pad_positions(), (std::vector<int>{2, 3, 4, 5, 6, 7}));
}

TEST(Tokenize, TwoWordPrompt) {
    const auto t = tokenize("red square", vocab());
    EXPECT_EQ(t.ids, (std::vector<int>{kBot, vocab().id("red"), vocab().id("square"), kEot, kPad, kPad, kPad, kPad}));
    EXPECT_EQ(t.eot_pos, 3);
    EXPECT_EQ(t.word_count(), 2);
    EXPECT_NO_THROW(t.validate(vocab()));
}

TEST(Tokenize, RoundTripOverVocabulary) {
    for (const auto& w : vocab().content_words()) {
        const std::string p = "red " + w + " alpha";
        EXPECT_EQ(detokenize(tokenize(p, vocab()), vocab()), p);
        EXPECT_EQ(tokenize(detokenize(tokenize(p, vocab()), vocab()), vocab()), tokenize(p, vocab()));
    }
}

TEST(Tokenize, OutOfVocabularyNamesTheWord) {
    try {
        tokenize("red dragon", vocab());
        FAIL() << "expected TokenizationError";
    } catch (const TokenizationError& e) {
        EXPECT_NE(std::string(e.what()).find("dragon"), std::string::npos);
    }
}

TEST(Tokenize, TooManyWordsAndSpecialsRejected) {
    EXPECT_THROW(tokenize("red red red red red red red", vocab()), TokenizationError);
    EXPECT_THROW(tokenize("red <eot>", vocab()), TokenizationError);
    EXPECT_NO_THROW(tokenize("red red red red red red", vocab()));
}

TEST(PromptTokens, ValidateCatchesBrokenLayouts) {
    auto t = tokenize("red square", vocab());
    t.ids[5] = vocab().id("red");
    EXPECT_THROW(t.validate(vocab()), ArgumentError);
    auto u = tokenize("red square", vocab());
    u.eot_pos = 2;
    EXPECT_THROW(u.validate(vocab()), ArgumentError);
}

TEST(Encode, DeterministicAndFinite) {
    const auto p = params();
    const auto a = encode(p, tokenize("green bar", vocab()));
    const auto b = encode(p, tokenize("green bar", vocab()));
    EXPECT_EQ(a.vectors.rows(), kMaxTokens);
    EXPECT_EQ(a.vectors.cols(), 32);
    EXPECT_TRUE(a.vectors.allFinite());
    EXPECT_TRUE(a.vectors == b.vectors);
}

TEST(Encode, DifferenceStartsAtTheChangedWord) {
    const auto p = params();
    const auto a = encode(p, tokenize("red square alpha", vocab()));
    const auto b = encode(p, tokenize("red bar alpha", vocab()));
    EXPECT_TRUE(a.vectors.row(0) == b.vectors.row(0));
    EXPECT_TRUE(a.vectors.row(1) == b.vectors.row(1));
    for (int i = 2; i < kMaxTokens; ++i) EXPECT_FALSE(a.vectors.row(i) == b.vectors.row(i)) << "position " << i;
}

TEST(Encode, EotSummarizesEveryPrecedingWord) {
    const auto p = params();
    const auto a = encode(p, tokenize("red square alpha", vocab()));
    const auto b = encode(p, tokenize("blue square alpha", vocab()));
    EXPECT_GT((a.vectors.row(4) - b.vectors.row(4)).norm(), 1e-6);
}

TEST(Encode, NullPromptIsAFixedConstant) {
    const auto p = params();
    const auto e1 = encode(p, tokenize("", vocab()));
    const auto e2 = encode(p, tokenize(" ", vocab()));
    EXPECT_TRUE(e1.vectors == e2.vectors);
}

TEST(Encode, PaddingDependsOnlyOnPrefixAndPosition) {
    const auto p = params();
    const auto a = encode(p, tokenize("cyan column", vocab()));
    const auto b = encode(p, tokens_from_ids({vocab().id("cyan"), vocab().id("column")}, vocab()));
    for (int i = 4; i < kMaxTokens; ++i) EXPECT_TRUE(a.vectors.row(i) == b.vectors.row(i));
    // Padding rows differ from each other through position.
    EXPECT_FALSE(a.vectors.row(4) == a.vectors.row(5));
}
