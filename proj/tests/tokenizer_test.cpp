#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <random>
#include <set>

#include "medeir/tokenizer.hpp"

using namespace medeir;

namespace {

const std::string kFixtures = MEDEIR_FIXTURES;

TokenizerModel fixture_base() { return TokenizerModel(Vocabulary::load(kFixtures + "/base_vocab.txt")); }

TokenizerModel fixture_merged() {
  return TokenizerModel(merge_vocabularies(Vocabulary::load(kFixtures + "/base_vocab.txt"),
                                           Vocabulary::load(kFixtures + "/domain_vocab.txt")));
}

std::vector<std::string> without_punctuation(std::vector<std::string> toks) {
  std::erase_if(toks, [](const std::string& t) { return is_punctuation_word(t); });
  return toks;
}

// Independent scorer: enumerate every adjacent symbol pair of the
// character-split corpus and score it as count(ab) / (count(a) count(b)).
std::map<std::string, double> brute_force_scores(const std::vector<std::string>& corpus) {
  std::map<std::string, double> sym, pair;
  std::map<std::string, std::string> merged_of;
  for (const auto& doc : corpus) {
    for (const auto& w : pretokenize(doc)) {
      std::vector<std::string> syms;
      for (std::size_t i = 0; i < w.size(); ++i) syms.push_back((i ? "##" : "") + w.substr(i, 1));
      for (const auto& s : syms) sym[s] += 1;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        const std::string key = syms[i] + "|" + syms[i + 1];
        pair[key] += 1;
        merged_of[key] = syms[i] + syms[i + 1].substr(2);
      }
    }
  }
  std::map<std::string, double> scores;
  for (const auto& [key, f] : pair) {
    const auto bar = key.find('|');
    scores[merged_of[key]] = std::max(scores[merged_of[key]],
                                      f / (sym[key.substr(0, bar)] * sym[key.substr(bar + 1)]));
  }
  return scores;
}

}  // namespace

TEST(Pretokenize, SplitsWhitespaceAndPunctuationAndLowercases) {
  EXPECT_EQ(pretokenize("Neuropathy, retinopathy"),
            (std::vector<std::string>{"neuropathy", ",", "retinopathy"}));
  EXPECT_EQ(pretokenize("  a b\tc\n"), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(pretokenize("ABC", PretokenizeOptions{false}), (std::vector<std::string>{"ABC"}));
  EXPECT_TRUE(pretokenize("").empty());
}

TEST(Vocabulary, RejectsDuplicatesAndMissingSpecials) {
  EXPECT_THROW(Vocabulary({"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "a"}),
               std::invalid_argument);
  EXPECT_THROW(Vocabulary({"[PAD]", "a"}), std::invalid_argument);
  const auto v = Vocabulary::with_specials({"a", "##b"});
  EXPECT_EQ(v.size(), 7u);
  EXPECT_EQ(v.id("a"), 5);
  EXPECT_TRUE(v.is_continuation(v.id("##b")));
  EXPECT_FALSE(v.is_continuation(v.id("a")));
  EXPECT_TRUE(v.is_special(v.id("[MASK]")));
}

TEST(Vocabulary, FileRoundTrip) {
  const auto v = Vocabulary::with_specials({"alpha", "##beta", "gamma"});
  const std::string path = testing::TempDir() + "/vocab_roundtrip.txt";
  v.save(path);
  EXPECT_EQ(Vocabulary::load(path), v);
}

TEST(TrainWordPiece, SingleMergeMatchesBruteForceBest) {
  const std::vector<std::string> corpus = {"aaab", "aaab", "aaab"};
  const auto alphabet = train_wordpiece(corpus, 0 + 5 + 3, 1);  // specials + {a, ##a, ##b}
  ASSERT_EQ(alphabet.size(), 8u);

  const auto scores = brute_force_scores(corpus);
  double best = 0;
  for (const auto& [tok, s] : scores) best = std::max(best, s);
  std::set<std::string> argmax;
  for (const auto& [tok, s] : scores) {
    if (s == best) argmax.insert(tok);
  }
  // Frozen from the oracle: "aa" and "##ab" tie at 1/6; "##aa" scores 1/12.
  ASSERT_EQ(argmax, (std::set<std::string>{"##ab", "aa"}));
  EXPECT_DOUBLE_EQ(best, 1.0 / 6.0);

  const auto v = train_wordpiece(corpus, alphabet.size() + 1, 1);
  ASSERT_EQ(v.size(), alphabet.size() + 1);
  EXPECT_EQ(v.tokens().back(), "aa");
}

TEST(TrainWordPiece, NothingToMerge) {
  const auto v = train_wordpiece({"x"}, 6, 1);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "x"}));
}

TEST(TrainWordPiece, Errors) {
  EXPECT_THROW(train_wordpiece({}, 100, 1), std::invalid_argument);
  EXPECT_THROW(train_wordpiece({"abc"}, 6, 1), std::invalid_argument);  // alphabet is 3
}

TEST(TrainWordPiece, MinFrequencyBlocksRarePairs) {
  const auto v = train_wordpiece({"ab", "cd", "cd"}, 100, 2);
  EXPECT_TRUE(v.contains("cd"));
  EXPECT_FALSE(v.contains("ab"));
}

TEST(TrainWordPiece, Deterministic) {
  const std::vector<std::string> corpus = {"the cat sat on the mat", "the dog sat on the log",
                                           "cats and dogs"};
  EXPECT_EQ(train_wordpiece(corpus, 40, 1), train_wordpiece(corpus, 40, 1));
}

TEST(MergeVocabularies, OverlapIsDeduplicated) {
  const auto base = Vocabulary::with_specials({"a", "b", "c"});
  const auto domain = Vocabulary::with_specials({"c", "d", "e"});
  const auto merged = merge_vocabularies(base, domain);
  EXPECT_EQ(merged.size() - merged.special_tokens().size(), 5u);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(merged.tokens()[i], base.tokens()[i]);
  EXPECT_EQ(merged.tokens()[8], "d");
  EXPECT_EQ(merged.tokens()[9], "e");
}

TEST(MergeVocabularies, SubsetIsIdempotent) {
  const auto base = Vocabulary::with_specials({"a", "b", "c"});
  EXPECT_EQ(merge_vocabularies(base, Vocabulary::with_specials({"b"})), base);
}

TEST(MergeVocabularies, ConflictingSpecialsRejected) {
  const auto base = Vocabulary::with_specials({"a"});
  const Vocabulary other({"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[X]", "a"},
                         {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[X]"});
  EXPECT_THROW(merge_vocabularies(base, other), std::invalid_argument);
}

TEST(Encode, AppendixExamples) {
  const auto base = fixture_base();
  const auto merged = fixture_merged();
  EXPECT_EQ(merged.tokenize("ibuprofen"), (std::vector<std::string>{"ibuprofen"}));
  EXPECT_EQ(base.tokenize("ibuprofen"), (std::vector<std::string>{"ib", "##up", "##ro", "##fen"}));
  EXPECT_EQ(merged.tokenize("endoscopy"), (std::vector<std::string>{"endoscopy"}));
  const auto empty = merged.encode("");
  EXPECT_TRUE(empty.ids.empty());
  EXPECT_TRUE(empty.word_groups.empty());
}

TEST(Encode, GoldenAppendixTable) {
  std::ifstream in(kFixtures + "/appendix_golden.json");
  const auto rows = json::parse(in);
  ASSERT_EQ(rows.size(), 16u);
  const auto base = fixture_base();
  const auto merged = fixture_merged();
  for (const auto& row : rows) {
    const auto text = row["text"].get<std::string>();
    EXPECT_EQ(without_punctuation(base.tokenize(text)), row["base"].get<std::vector<std::string>>())
        << text;
    EXPECT_EQ(without_punctuation(merged.tokenize(text)),
              row["merged"].get<std::vector<std::string>>())
        << text;
  }
}

TEST(Encode, UnknownAndOverlongWordsBecomeUnk) {
  const TokenizerModel tok(Vocabulary::with_specials({"ab", "##c"}), 5);
  EXPECT_EQ(tok.tokenize("abc abd"), (std::vector<std::string>{"ab", "##c", "[UNK]"}));
  EXPECT_EQ(tok.tokenize("abcccc"), (std::vector<std::string>{"[UNK]"}));
}

TEST(Encode, SpecialTokensAndGroups) {
  const auto tok = fixture_base();
  const auto seq = tok.encode("ibuprofen therapy", EncodeOptions{true});
  ASSERT_EQ(seq.ids.size(), 7u);
  EXPECT_EQ(seq.special_positions, (std::vector<std::size_t>{0, 6}));
  EXPECT_EQ(seq.word_groups, (std::vector<WordSpan>{{1, 5}, {5, 6}}));
  EXPECT_EQ(seq.attention_mask.size(), seq.ids.size());
}

TEST(Encode, MaskUnitSoundness) {
  const auto tok = fixture_base();
  std::mt19937_64 rng(7);
  const auto& toks = tok.vocab().tokens();
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    const int n = static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) {
      const auto& t = toks[rng() % toks.size()];
      text += std::string(tok.vocab().surface(t)) + (rng() % 3 ? " " : "");
    }
    const auto seq = tok.encode(text, EncodeOptions{trial % 2 == 0});
    std::vector<int> cover(seq.ids.size(), 0);
    std::size_t prev_end = 0;
    for (const auto& g : seq.word_groups) {
      ASSERT_LT(g.begin, g.end);
      ASSERT_GE(g.begin, prev_end);
      prev_end = g.end;
      for (std::size_t i = g.begin; i < g.end; ++i) ++cover[i];
    }
    for (std::size_t p : seq.special_positions) ++cover[p];
    for (int c : cover) ASSERT_EQ(c, 1) << text;
  }
}

TEST(Decode, Examples) {
  const auto tok = fixture_base();
  const auto& v = tok.vocab();
  EXPECT_EQ(tok.decode({v.id("ib"), v.id("##up"), v.id("##ro"), v.id("##fen")}), "ibuprofen");
  EXPECT_EQ(tok.decode({}), "");
  EXPECT_EQ(tok.decode({v.id("chronic"), v.id("[SEP]"), v.id("ob"), v.id("##st")}), "chronic obst");
  EXPECT_THROW(tok.decode({static_cast<TokenId>(v.size())}), std::out_of_range);
}

TEST(Decode, RoundTripInVocabularyText) {
  const auto tok = fixture_merged();
  std::vector<std::string> words;
  for (const auto& t : tok.vocab().tokens()) {
    if (!tok.vocab().is_special(tok.vocab().id(t)) && !tok.vocab().is_continuation(t) &&
        !is_punctuation_word(t)) {
      words.push_back(t);
    }
  }
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::string text, normalized;
    const int n = 1 + static_cast<int>(rng() % 8);
    for (int i = 0; i < n; ++i) {
      const auto& w = words[rng() % words.size()];
      text += "  " + w + "\t";
      normalized += (i ? " " : "") + w;
    }
    EXPECT_EQ(tok.decode(tok.encode(text).ids), normalized);
  }
}

TEST(WordGroupsFromIds, ContinuationsJoinPrecedingWord) {
  const auto tok = fixture_base();
  const auto& v = tok.vocab();
  const std::vector<TokenId> ids = {v.id("##up"), v.id("ib"), v.id("##up"), v.id("[SEP]"),
                                    v.id("therapy"), v.id("[UNK]")};
  const auto seq = sequence_from_ids(v, ids);
  EXPECT_EQ(seq.word_groups, (std::vector<WordSpan>{{0, 1}, {1, 3}, {4, 5}, {5, 6}}));
  EXPECT_EQ(seq.special_positions, (std::vector<std::size_t>{3}));
}

TEST(DomainFilter, KeepsOnlyFragmentedTerms) {
  const auto base = fixture_base();
  EXPECT_EQ(filter_domain_terms(base, {"ibuprofen", "therapy", "pain", "cirrhosis", "zzzq"}),
            (std::vector<std::string>{"ibuprofen", "cirrhosis", "zzzq"}));
}

TEST(TokenizerCompare, IdentityGivesZeroReduction) {
  const auto tok = fixture_base();
  const auto r = tokenizer_compare(tok, tok, {"ibuprofen therapy", "cirrhosis"});
  EXPECT_EQ(r.reduction_pct, 0.0);
  EXPECT_EQ(r.tokens_base, r.tokens_merged);
}

TEST(TokenizerCompare, MergedFixtureReducesTokensOnAppendixTerms) {
  std::ifstream in(kFixtures + "/appendix_golden.json");
  std::vector<std::string> corpus;
  std::size_t base_n = 0, merged_n = 0;
  for (const auto& row : json::parse(in)) {
    corpus.push_back(row["text"]);
    base_n += row["base"].size();
    merged_n += row["merged"].size();
  }
  const auto r = tokenizer_compare(fixture_base(), fixture_merged(), corpus);
  // The two commas are counted by both tokenizers.
  EXPECT_EQ(r.tokens_base, base_n + 2);
  EXPECT_EQ(r.tokens_merged, merged_n + 2);
  EXPECT_NEAR(r.reduction_pct,
              100.0 * (static_cast<double>(r.tokens_base) - static_cast<double>(r.tokens_merged)) /
                  static_cast<double>(r.tokens_base),
              1e-12);
  EXPECT_GT(r.reduction_pct, 0.0);
  EXPECT_THROW(tokenizer_compare(fixture_base(), fixture_merged(), {}), std::invalid_argument);
}
