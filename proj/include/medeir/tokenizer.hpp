#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "medeir/common.hpp"
#include "medeir/utf8.hpp"

namespace medeir {

using TokenId = std::int32_t;

inline const std::vector<std::string>& default_special_tokens() {
  static const std::vector<std::string> kSpecials = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                     "[MASK]"};
  return kSpecials;
}

// Ordered token inventory. Ids are positions in `tokens()`.
class Vocabulary {
 public:
  Vocabulary() : Vocabulary(default_special_tokens(), {}) {}

  // `tokens` must already contain every special token.
  explicit Vocabulary(std::vector<std::string> tokens,
                      std::vector<std::string> specials = default_special_tokens(),
                      std::string continuation_prefix = "##")
      : tokens_(std::move(tokens)),
        specials_(std::move(specials)),
        prefix_(std::move(continuation_prefix)) {
    if (prefix_.empty()) throw std::invalid_argument("continuation prefix must be non-empty");
    id_of_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) throw std::invalid_argument("empty token at id " + std::to_string(i));
      if (!id_of_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
        throw std::invalid_argument("duplicate token \"" + tokens_[i] + "\"");
      }
    }
    for (const auto& s : specials_) {
      auto it = id_of_.find(s);
      if (it == id_of_.end()) throw std::invalid_argument("vocabulary lacks special token " + s);
      special_ids_.insert(it->second);
    }
  }

  // Builds a vocabulary with the specials first, then `tokens` in order,
  // skipping any repeats.
  static Vocabulary with_specials(const std::vector<std::string>& tokens,
                                  const std::vector<std::string>& specials = default_special_tokens(),
                                  const std::string& prefix = "##") {
    std::vector<std::string> all = specials;
    std::unordered_set<std::string> seen(all.begin(), all.end());
    for (const auto& t : tokens) {
      if (seen.insert(t).second) all.push_back(t);
    }
    return Vocabulary(std::move(all), specials, prefix);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::string>& special_tokens() const { return specials_; }
  const std::string& continuation_prefix() const { return prefix_; }

  bool contains(std::string_view token) const { return id_of_.count(std::string(token)) != 0; }

  std::optional<TokenId> find(const std::string& token) const {
    auto it = id_of_.find(token);
    if (it == id_of_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(const std::string& token) const {
    auto it = id_of_.find(token);
    if (it == id_of_.end()) throw std::out_of_range("token not in vocabulary: " + token);
    return it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw std::out_of_range("token id out of range: " + std::to_string(id));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  bool is_special(TokenId id) const { return special_ids_.count(id) != 0; }

  bool is_continuation(TokenId id) const { return is_continuation(token(id)); }
  bool is_continuation(std::string_view token) const {
    return token.size() > prefix_.size() && token.substr(0, prefix_.size()) == prefix_;
  }

  // Token text without the continuation prefix.
  std::string_view surface(std::string_view token) const {
    return is_continuation(token) ? token.substr(prefix_.size()) : token;
  }

  bool operator==(const Vocabulary& o) const {
    return tokens_ == o.tokens_ && specials_ == o.specials_ && prefix_ == o.prefix_;
  }

  std::string to_text() const {
    std::string out;
    for (const auto& t : tokens_) {
      out += t;
      out += '\n';
    }
    return out;
  }

  std::string hash() const { return hex64(fnv1a64(to_text())); }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, to_text()); }

  // One token per line, line number is the id. All default specials must be
  // present somewhere in the file.
  static Vocabulary load(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    std::vector<std::string> tokens;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t nl = text.find('\n', pos);
      if (nl == std::string::npos) nl = text.size();
      std::string line = text.substr(pos, nl - pos);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      pos = nl + 1;
      if (line.empty()) {
        if (pos >= text.size()) break;
        throw IoError(path.string() + ": empty line at id " + std::to_string(tokens.size()));
      }
      tokens.push_back(std::move(line));
    }
    try {
      return Vocabulary(std::move(tokens));
    } catch (const std::invalid_argument& e) {
      throw IoError(path.string() + ": " + e.what());
    }
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::string> specials_;
  std::string prefix_;
  std::unordered_map<std::string, TokenId> id_of_;
  std::unordered_set<TokenId> special_ids_;
};

struct WordSpan {
  std::size_t begin = 0;  // index into ids
  std::size_t end = 0;    // one past the last id
  bool operator==(const WordSpan&) const = default;
};

struct EncodedSequence {
  std::vector<TokenId> ids;
  std::vector<WordSpan> word_groups;
  std::vector<std::uint8_t> attention_mask;
  std::vector<std::size_t> special_positions;  // ascending
};

struct PretokenizeOptions {
  bool lowercase = true;
};

// Splits on Unicode whitespace, then splits punctuation into single-char words.
inline std::vector<std::string> pretokenize(std::string_view text,
                                            PretokenizeOptions opts = {}) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  };
  for (char32_t c : utf8::decode(text)) {
    if (utf8::is_whitespace(c)) {
      flush();
    } else if (utf8::is_punctuation(c)) {
      flush();
      std::string p;
      utf8::append(p, c);
      words.push_back(std::move(p));
    } else {
      utf8::append(current, opts.lowercase ? utf8::ascii_lower(c) : c);
    }
  }
  flush();
  return words;
}

inline bool is_punctuation_word(std::string_view word) {
  const auto cps = utf8::decode(word);
  return !cps.empty() &&
         std::all_of(cps.begin(), cps.end(), [](char32_t c) { return utf8::is_punctuation(c); });
}

struct EncodeOptions {
  bool add_special_tokens = false;  // wrap in [CLS] ... [SEP]
};

// Greedy longest-match-first WordPiece segmenter. Immutable once built.
class TokenizerModel {
 public:
  explicit TokenizerModel(Vocabulary vocab, std::size_t max_chars_per_word = 100,
                          std::string unk_token = "[UNK]", bool lowercase = true)
      : vocab_(std::move(vocab)),
        max_chars_per_word_(max_chars_per_word),
        unk_token_(std::move(unk_token)),
        lowercase_(lowercase) {
    auto unk = vocab_.find(unk_token_);
    if (!unk) throw std::invalid_argument("unk token " + unk_token_ + " not in vocabulary");
    unk_id_ = *unk;
    for (const auto& t : vocab_.tokens()) {
      max_token_chars_ =
          std::max(max_token_chars_, utf8::decode(vocab_.surface(t)).size());
    }
  }

  const Vocabulary& vocab() const { return vocab_; }
  TokenId unk_id() const { return unk_id_; }
  std::size_t max_chars_per_word() const { return max_chars_per_word_; }
  bool lowercase() const { return lowercase_; }

  std::vector<std::string> pretokenize(std::string_view text) const {
    return medeir::pretokenize(text, PretokenizeOptions{lowercase_});
  }

  // Sub-token ids for one pre-tokenized word. Unmatchable words become a
  // single [UNK].
  std::vector<TokenId> segment_word(std::string_view word) const {
    const std::u32string cps = utf8::decode(word);
    if (cps.empty()) return {};
    if (cps.size() > max_chars_per_word_) return {unk_id_};
    std::vector<TokenId> out;
    std::size_t start = 0;
    std::string candidate;
    while (start < cps.size()) {
      std::size_t end = std::min(cps.size(), start + max_token_chars_);
      std::optional<TokenId> match;
      while (end > start) {
        candidate.clear();
        if (start > 0) candidate = vocab_.continuation_prefix();
        for (std::size_t i = start; i < end; ++i) utf8::append(candidate, cps[i]);
        match = vocab_.find(candidate);
        if (match) break;
        --end;
      }
      if (!match) return {unk_id_};
      out.push_back(*match);
      start = end;
    }
    return out;
  }

  EncodedSequence encode(std::string_view text, EncodeOptions opts = {}) const {
    EncodedSequence seq;
    auto push_special = [&](const std::string& tok) {
      seq.special_positions.push_back(seq.ids.size());
      seq.ids.push_back(vocab_.id(tok));
    };
    if (opts.add_special_tokens) push_special("[CLS]");
    for (const auto& word : pretokenize(text)) {
      const auto pieces = segment_word(word);
      if (pieces.empty()) continue;
      const std::size_t begin = seq.ids.size();
      seq.ids.insert(seq.ids.end(), pieces.begin(), pieces.end());
      seq.word_groups.push_back({begin, seq.ids.size()});
    }
    if (opts.add_special_tokens) push_special("[SEP]");
    seq.attention_mask.assign(seq.ids.size(), 1);
    return seq;
  }

  std::vector<std::string> tokenize(std::string_view text) const {
    std::vector<std::string> out;
    for (TokenId id : encode(text).ids) out.push_back(vocab_.token(id));
    return out;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
      const std::string& tok = vocab_.token(id);  // throws on unknown id
      if (vocab_.is_special(id)) continue;
      if (vocab_.is_continuation(tok)) {
        out += vocab_.surface(tok);
      } else {
        if (!out.empty()) out += ' ';
        out += tok;
      }
    }
    return out;
  }

 private:
  Vocabulary vocab_;
  std::size_t max_chars_per_word_;
  std::string unk_token_;
  bool lowercase_;
  TokenId unk_id_ = 0;
  std::size_t max_token_chars_ = 1;
};

// Recovers whole-word groups from a bare id sequence: a group starts at every
// non-special, non-continuation token and absorbs the continuations after it.
// Specials are reported separately.
inline void word_groups_from_ids(const Vocabulary& vocab, const std::vector<TokenId>& ids,
                                 std::vector<WordSpan>& groups,
                                 std::vector<std::size_t>& special_positions) {
  groups.clear();
  special_positions.clear();
  bool open = false;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (vocab.is_special(ids[i]) && vocab.token(ids[i]) != "[UNK]") {
      special_positions.push_back(i);
      open = false;
      continue;
    }
    if (open && vocab.is_continuation(ids[i])) {
      groups.back().end = i + 1;
    } else {
      groups.push_back({i, i + 1});
      open = true;
    }
  }
}

inline EncodedSequence sequence_from_ids(const Vocabulary& vocab, std::vector<TokenId> ids) {
  EncodedSequence seq;
  seq.ids = std::move(ids);
  word_groups_from_ids(vocab, seq.ids, seq.word_groups, seq.special_positions);
  seq.attention_mask.assign(seq.ids.size(), 1);
  return seq;
}

// ---------------------------------------------------------------------------
// WordPiece training

struct WordPieceTrainerOptions {
  std::size_t max_chars_per_word = 100;
  bool lowercase = true;
  std::vector<std::string> special_tokens = default_special_tokens();
  std::string continuation_prefix = "##";
};

using WordCounts = std::map<std::string, std::uint64_t>;

inline WordCounts count_words(const std::vector<std::string>& corpus, bool lowercase = true) {
  WordCounts counts;
  for (const auto& doc : corpus) {
    for (auto& w : pretokenize(doc, PretokenizeOptions{lowercase})) ++counts[w];
  }
  return counts;
}

namespace detail {

struct TrainWord {
  std::vector<int> symbols;
  std::uint64_t count = 0;
};

inline std::uint64_t pair_key(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

}  // namespace detail

// Learns a WordPiece vocabulary from word counts. Each round merges the
// adjacent symbol pair maximising count(ab) / (count(a) * count(b)) among
// pairs seen at least `min_frequency` times. Equal scores go to the merged
// token whose surface form sorts first, then to the smaller full token.
inline Vocabulary train_wordpiece_from_counts(const WordCounts& word_counts,
                                              std::size_t target_size,
                                              std::uint64_t min_frequency,
                                              const WordPieceTrainerOptions& opts = {}) {
  using detail::pair_key;
  const std::string& prefix = opts.continuation_prefix;

  std::vector<std::string> symbol_text;
  std::unordered_map<std::string, int> symbol_id;
  auto intern = [&](const std::string& s) {
    auto [it, inserted] = symbol_id.emplace(s, static_cast<int>(symbol_text.size()));
    if (inserted) symbol_text.push_back(s);
    return it->second;
  };
  auto surface = [&](const std::string& s) -> std::string_view {
    std::string_view v = s;
    if (v.size() > prefix.size() && v.substr(0, prefix.size()) == prefix) v.remove_prefix(prefix.size());
    return v;
  };

  std::vector<detail::TrainWord> words;
  std::set<std::string> alphabet;
  for (const auto& [word, count] : word_counts) {
    const auto cps = utf8::decode(word);
    if (cps.empty() || cps.size() > opts.max_chars_per_word) continue;
    detail::TrainWord tw;
    tw.count = count;
    for (std::size_t i = 0; i < cps.size(); ++i) {
      std::string s = i == 0 ? std::string() : prefix;
      utf8::append(s, cps[i]);
      alphabet.insert(s);
      tw.symbols.push_back(intern(s));
    }
    words.push_back(std::move(tw));
  }
  if (words.empty()) throw std::invalid_argument("train_wordpiece: corpus contains no words");

  std::vector<std::string> vocab_tokens = opts.special_tokens;
  std::unordered_set<std::string> in_vocab(vocab_tokens.begin(), vocab_tokens.end());
  for (const auto& a : alphabet) {
    if (in_vocab.insert(a).second) vocab_tokens.push_back(a);
  }
  if (target_size < vocab_tokens.size()) {
    throw std::invalid_argument("train_wordpiece: target_size " + std::to_string(target_size) +
                                " is below specials + alphabet (" +
                                std::to_string(vocab_tokens.size()) + ")");
  }

  std::vector<std::uint64_t> sym_freq(symbol_text.size(), 0);
  std::unordered_map<std::uint64_t, std::uint64_t> pair_freq;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> pair_words;

  auto account = [&](std::size_t wi, bool add) {
    const auto& w = words[wi];
    for (std::size_t i = 0; i < w.symbols.size(); ++i) {
      const auto s = static_cast<std::size_t>(w.symbols[i]);
      if (sym_freq.size() <= s) sym_freq.resize(s + 1, 0);
      if (add) {
        sym_freq[s] += w.count;
      } else {
        sym_freq[s] -= w.count;
      }
      if (i + 1 < w.symbols.size()) {
        const auto key = pair_key(w.symbols[i], w.symbols[i + 1]);
        if (add) {
          pair_freq[key] += w.count;
          pair_words[key].push_back(wi);
        } else {
          auto it = pair_freq.find(key);
          it->second -= w.count;
          if (it->second == 0) pair_freq.erase(it);
        }
      }
    }
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) account(wi, true);

  while (vocab_tokens.size() < target_size) {
    bool found = false;
    std::uint64_t best_key = 0, best_f = 0, best_denom = 1;
    std::string best_token;
    for (const auto& [key, f] : pair_freq) {
      if (f < min_frequency || f == 0) continue;
      const int a = static_cast<int>(key >> 32);
      const int b = static_cast<int>(key & 0xFFFFFFFFu);
      const std::uint64_t denom = sym_freq[static_cast<std::size_t>(a)] *
                                  sym_freq[static_cast<std::size_t>(b)];
      int cmp = 0;  // >0: candidate better
      if (!found) {
        cmp = 1;
      } else {
        const unsigned __int128 lhs = static_cast<unsigned __int128>(f) * best_denom;
        const unsigned __int128 rhs = static_cast<unsigned __int128>(best_f) * denom;
        cmp = lhs > rhs ? 1 : (lhs < rhs ? -1 : 0);
      }
      if (cmp < 0) continue;
      std::string merged =
          symbol_text[static_cast<std::size_t>(a)] +
          std::string(surface(symbol_text[static_cast<std::size_t>(b)]));
      if (cmp == 0) {
        const auto sa = surface(merged), sb = surface(best_token);
        if (sa > sb || (sa == sb && merged >= best_token)) continue;
      }
      found = true;
      best_key = key;
      best_f = f;
      best_denom = denom;
      best_token = std::move(merged);
    }
    if (!found) break;

    const int a = static_cast<int>(best_key >> 32);
    const int b = static_cast<int>(best_key & 0xFFFFFFFFu);
    const int merged_sym = intern(best_token);
    if (in_vocab.insert(best_token).second) vocab_tokens.push_back(best_token);

    std::vector<std::size_t> affected = std::move(pair_words[best_key]);
    pair_words.erase(best_key);
    std::sort(affected.begin(), affected.end());
    affected.erase(std::unique(affected.begin(), affected.end()), affected.end());
    for (std::size_t wi : affected) {
      auto& syms = words[wi].symbols;
      bool has_pair = false;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        if (syms[i] == a && syms[i + 1] == b) {
          has_pair = true;
          break;
        }
      }
      if (!has_pair) continue;
      account(wi, false);
      std::vector<int> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
          next.push_back(merged_sym);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
      account(wi, true);
    }
  }
  return Vocabulary(std::move(vocab_tokens), opts.special_tokens, prefix);
}

inline Vocabulary train_wordpiece(const std::vector<std::string>& corpus, std::size_t target_size,
                                  std::uint64_t min_frequency,
                                  const WordPieceTrainerOptions& opts = {}) {
  if (corpus.empty()) throw std::invalid_argument("train_wordpiece: empty corpus");
  return train_wordpiece_from_counts(count_words(corpus, opts.lowercase), target_size,
                                     min_frequency, opts);
}

// Base tokens first with their ids intact, then domain tokens not already in
// the base, in domain order.
inline Vocabulary merge_vocabularies(const Vocabulary& base, const Vocabulary& domain) {
  if (base.continuation_prefix() != domain.continuation_prefix()) {
    throw std::invalid_argument("merge_vocabularies: continuation prefixes differ");
  }
  const std::set<std::string> sa(base.special_tokens().begin(), base.special_tokens().end());
  const std::set<std::string> sb(domain.special_tokens().begin(), domain.special_tokens().end());
  if (sa != sb) throw std::invalid_argument("merge_vocabularies: special-token sets differ");
  std::vector<std::string> tokens = base.tokens();
  for (const auto& t : domain.tokens()) {
    if (!base.contains(t)) tokens.push_back(t);
  }
  return Vocabulary(std::move(tokens), base.special_tokens(), base.continuation_prefix());
}

// True when the tokenizer fragments `term`: more sub-tokens than words, or
// any word falling back to [UNK].
inline bool is_fragmented(const TokenizerModel& tok, std::string_view term) {
  const auto seq = tok.encode(term);
  if (seq.word_groups.empty()) return false;
  if (seq.ids.size() > seq.word_groups.size()) return true;
  return std::any_of(seq.ids.begin(), seq.ids.end(),
                     [&](TokenId id) { return id == tok.unk_id(); });
}

// Keeps only the candidate domain terms the base tokenizer fails to keep whole.
inline std::vector<std::string> filter_domain_terms(const TokenizerModel& base,
                                                    const std::vector<std::string>& terms) {
  std::vector<std::string> kept;
  for (const auto& t : terms) {
    if (is_fragmented(base, t)) kept.push_back(t);
  }
  return kept;
}

inline WordCounts filter_word_counts(const TokenizerModel& base, const WordCounts& counts) {
  WordCounts kept;
  for (const auto& [w, c] : counts) {
    if (is_fragmented(base, w)) kept.emplace(w, c);
  }
  return kept;
}

struct TokenizerReport {
  std::string corpus_id;
  std::uint64_t words = 0;
  std::uint64_t tokens_base = 0;
  std::uint64_t tokens_merged = 0;
  double reduction_pct = 0.0;
  double fertility_base = 0.0;
  double fertility_merged = 0.0;

  json to_json() const {
    return json{{"corpus_id", corpus_id},         {"words", words},
                {"tokens_base", tokens_base},     {"tokens_merged", tokens_merged},
                {"reduction_pct", reduction_pct}, {"fertility_base", fertility_base},
                {"fertility_merged", fertility_merged}};
  }
};

inline std::uint64_t count_tokens(const TokenizerModel& tok, const std::vector<std::string>& corpus,
                                  std::uint64_t* words = nullptr) {
  std::uint64_t n = 0, w = 0;
  for (const auto& doc : corpus) {
    const auto seq = tok.encode(doc);
    n += seq.ids.size() - seq.special_positions.size();
    w += seq.word_groups.size();
  }
  if (words) *words = w;
  return n;
}

// Sub-token counts of `a` (the reference) versus `b` over the same corpus.
inline TokenizerReport tokenizer_compare(const TokenizerModel& a, const TokenizerModel& b,
                                         const std::vector<std::string>& corpus,
                                         std::string corpus_id = "corpus") {
  if (corpus.empty()) throw std::invalid_argument("tokenizer_compare: empty corpus");
  TokenizerReport r;
  r.corpus_id = std::move(corpus_id);
  r.tokens_base = count_tokens(a, corpus, &r.words);
  r.tokens_merged = count_tokens(b, corpus);
  if (r.tokens_base == 0) throw std::invalid_argument("tokenizer_compare: corpus has no tokens");
  r.reduction_pct = 100.0 *
                    (static_cast<double>(r.tokens_base) - static_cast<double>(r.tokens_merged)) /
                    static_cast<double>(r.tokens_base);
  if (r.words > 0) {
    r.fertility_base = static_cast<double>(r.tokens_base) / static_cast<double>(r.words);
    r.fertility_merged = static_cast<double>(r.tokens_merged) / static_cast<double>(r.words);
  }
  return r;
}

// Reads the "text" field of a {"id","text"} JSON-lines corpus.
inline std::vector<std::string> load_corpus_texts(const std::filesystem::path& path) {
  std::vector<std::string> texts;
  for (const auto& row : read_jsonl(path)) texts.push_back(get_string(row, "text"));
  return texts;
}

}  // namespace medeir
