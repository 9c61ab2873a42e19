#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "medeir/common.hpp"
#include "medeir/similarity.hpp"
#include "medeir/tokenizer.hpp"
#include "medeir/utf8.hpp"

namespace medeir {

struct CorpusDocument {
  std::string id;
  std::string text;
  std::string source;

  json to_json() const { return json{{"id", id}, {"text", text}, {"source", source}}; }
};

struct SentencePair {
  std::string query;
  std::string positive;
  std::string source_id;
  std::optional<double> similarity;

  json to_json() const {
    json j{{"query", query}, {"positive", positive}, {"source_id", source_id}};
    if (similarity) j["similarity"] = *similarity;
    return j;
  }
};

struct HardNegativeRecord {
  std::string query;
  std::string positive;
  std::vector<std::string> negatives;
  std::string source_id;
  bool flagged = false;  // fewer than the requested negatives were found

  json to_json() const {
    return json{{"query", query}, {"positive", positive}, {"negatives", negatives}, {"source_id", source_id}};
  }
};

inline std::vector<CorpusDocument> documents_from_rows(const std::vector<json>& rows) {
  std::vector<CorpusDocument> docs;
  std::unordered_set<std::string> ids;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CorpusDocument d;
    d.id = rows[i].contains("id") ? rows[i].at("id").get<std::string>() : std::to_string(i);
    d.text = get_string(rows[i], "text");
    d.source = rows[i].value("source", std::string());
    if (!ids.insert(d.id).second) throw std::invalid_argument("duplicate document id \"" + d.id + "\"");
    docs.push_back(std::move(d));
  }
  return docs;
}

inline std::vector<SentencePair> pairs_from_rows(const std::vector<json>& rows) {
  std::vector<SentencePair> pairs;
  for (const auto& r : rows) {
    SentencePair p{get_string(r, "query"), get_string(r, "positive"), r.value("source_id", std::string("default")),
                   std::nullopt};
    if (p.query.empty() || p.positive.empty()) throw std::invalid_argument("pair with empty text");
    if (r.contains("similarity")) p.similarity = r.at("similarity").get<double>();
    pairs.push_back(std::move(p));
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Cleaning

namespace detail {

inline std::string decode_entities(const std::string& s) {
  static const std::map<std::string, std::string> named{
      {"amp", "&"}, {"lt", "<"}, {"gt", ">"}, {"quot", "\""}, {"apos", "'"}, {"nbsp", " "}};
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '&') {
      out += s[i];
      continue;
    }
    const auto semi = s.find(';', i);
    if (semi == std::string::npos || semi - i > 10) {
      out += s[i];
      continue;
    }
    const std::string name = s.substr(i + 1, semi - i - 1);
    std::optional<char32_t> cp;
    if (name.size() > 1 && name[0] == '#') {
      try {
        const bool hex = name[1] == 'x' || name[1] == 'X';
        std::size_t used = 0;
        const auto v = std::stoul(name.substr(hex ? 2 : 1), &used, hex ? 16 : 10);
        if (used == name.size() - (hex ? 2 : 1) && v > 0 && v <= 0x10FFFF) cp = static_cast<char32_t>(v);
      } catch (const std::exception&) {
      }
    }
    if (cp) {
      utf8::append(out, *cp);
      i = semi;
    } else if (auto it = named.find(name); it != named.end()) {
      out += it->second;
      i = semi;
    } else {
      out += s[i];
    }
  }
  return out;
}

inline std::string clean_once(const std::string& text) {
  static const std::regex block_tag(R"(<\s*/?\s*(p|div|br|li|ul|ol|h[1-6]|tr|table|section|article|blockquote)\b[^<>]*>)",
                                    std::regex::icase);
  static const std::regex any_tag(R"(<[^<>]*>)");
  static const std::regex url(R"((https?://|www\.)[^\s<>"]+)", std::regex::icase);
  std::string s = decode_entities(text);
  s = std::regex_replace(s, block_tag, "\n\n");
  s = std::regex_replace(s, any_tag, "");
  s = std::regex_replace(s, url, "");

  // Paragraphs are separated by blank lines; inside one, whitespace runs
  // collapse to a single space.
  std::vector<std::string> paragraphs;
  std::string cur;
  bool pending_space = false;
  int newlines = 0;
  const auto cps = utf8::decode(s);
  auto flush = [&] {
    if (!cur.empty() && (paragraphs.empty() || paragraphs.back() != cur)) paragraphs.push_back(cur);
    cur.clear();
    pending_space = false;
  };
  for (char32_t c : cps) {
    if (c == U'\n') {
      if (++newlines >= 2) flush();
      pending_space = !cur.empty();
      continue;
    }
    if (utf8::is_whitespace(c)) {
      pending_space = !cur.empty();
      continue;
    }
    newlines = 0;
    if (pending_space) cur += ' ';
    pending_space = false;
    utf8::append(cur, c);
  }
  flush();
  std::string out;
  for (std::size_t i = 0; i < paragraphs.size(); ++i) {
    if (i) out += "\n\n";
    out += paragraphs[i];
  }
  return out;
}

}  // namespace detail

// Strips HTML tags (keeping their text), decodes entities, removes URLs,
// normalises whitespace and collapses consecutive duplicate paragraphs.
// Repeated to a fixed point, so cleaning is idempotent.
inline std::string clean_document(const std::string& text) {
  std::string cur = text;
  for (int i = 0; i < 16; ++i) {
    std::string next = detail::clean_once(cur);
    if (next == cur) return next;
    cur = std::move(next);
  }
  return cur;
}

inline std::string normalize_for_dedup(const std::string& text) {
  std::string out;
  bool space = false;
  for (char32_t c : utf8::decode(text)) {
    if (utf8::is_whitespace(c)) {
      space = !out.empty();
      continue;
    }
    if (space) out += ' ';
    space = false;
    utf8::append(out, utf8::ascii_lower(c));
  }
  return out;
}

// Drops documents whose normalised text was already seen; first wins.
inline std::vector<CorpusDocument> dedup_corpus(const std::vector<CorpusDocument>& docs) {
  std::unordered_set<std::string> seen;
  std::vector<CorpusDocument> out;
  for (const auto& d : docs)
    if (seen.insert(normalize_for_dedup(d.text)).second) out.push_back(d);
  return out;
}

// ---------------------------------------------------------------------------
// Packing

// Concatenates document tokens with [SEP] between documents and slices the
// stream into chunk_len pieces. The final remainder survives only if it has
// at least min_tail tokens.
inline std::vector<std::vector<TokenId>> pack_chunks(const std::vector<std::string>& texts, const TokenizerModel& tok,
                                                     std::size_t chunk_len = 512, std::size_t min_tail = 16) {
  if (chunk_len == 0 || chunk_len < min_tail) throw std::invalid_argument("pack_chunks: need chunk_len >= min_tail > 0");
  const TokenId sep = tok.vocab().id("[SEP]");
  std::vector<std::vector<TokenId>> chunks;
  std::vector<TokenId> cur;
  bool first = true;
  auto push = [&](TokenId id) {
    cur.push_back(id);
    if (cur.size() == chunk_len) {
      chunks.push_back(std::move(cur));
      cur.clear();
    }
  };
  for (const auto& text : texts) {
    const auto ids = tok.encode(text).ids;
    if (ids.empty()) continue;
    if (!first) push(sep);
    first = false;
    for (TokenId id : ids) push(id);
  }
  if (!cur.empty() && cur.size() >= min_tail) chunks.push_back(std::move(cur));
  return chunks;
}

// ---------------------------------------------------------------------------
// Pair filtering and hard-negative mining

struct FilterMode {
  enum Kind { kThreshold, kDropFraction } kind = kDropFraction;
  double value = 0.10;

  static FilterMode threshold(double t) { return {kThreshold, t}; }
  static FilterMode drop_fraction(double f) { return {kDropFraction, f}; }
};

// Scores each pair by cosine(embed(query), embed(positive)) and keeps the
// survivors in input order, each annotated with its similarity.
inline std::vector<SentencePair> filter_pairs_by_similarity(const std::vector<SentencePair>& pairs,
                                                            const Embedder& embed, FilterMode mode,
                                                            unsigned threads = 1) {
  if (pairs.empty()) throw std::invalid_argument("filter_pairs_by_similarity: no pairs");
  if (mode.kind == FilterMode::kDropFraction && !(mode.value >= 0.0 && mode.value < 1.0))
    throw std::invalid_argument("drop_fraction must be in [0, 1)");
  std::vector<std::string> texts;
  for (const auto& p : pairs) {
    texts.push_back(p.query);
    texts.push_back(p.positive);
  }
  const auto embs = embed_texts(texts, embed, threads);
  std::vector<double> sim(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) sim[i] = cosine(embs[2 * i], embs[2 * i + 1]);

  std::vector<char> keep(pairs.size(), 1);
  if (mode.kind == FilterMode::kThreshold) {
    for (std::size_t i = 0; i < pairs.size(); ++i) keep[i] = sim[i] >= mode.value;
  } else {
    const auto n_drop =
        static_cast<std::size_t>(std::floor(mode.value * static_cast<double>(pairs.size()) + 1e-9));
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] < sim[b]; });
    for (std::size_t i = 0; i < n_drop; ++i) keep[order[i]] = 0;
  }
  std::vector<SentencePair> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!keep[i]) continue;
    out.push_back(pairs[i]);
    out.back().similarity = sim[i];
  }
  return out;
}

struct MiningOptions {
  std::size_t per_query = 4;
  double band_lo = 0.3;
  double band_hi = 0.9;
  unsigned threads = 1;
};

// For each pair, the per_query most similar corpus texts other than its
// positive whose cosine to the query lies in [band_lo, band_hi]. Ties go to
// the earlier corpus entry; duplicate corpus texts count once.
inline std::vector<HardNegativeRecord> mine_hard_negatives(const std::vector<SentencePair>& pairs,
                                                           const std::vector<std::string>& corpus,
                                                           const Embedder& embed, const MiningOptions& opts = {}) {
  if (opts.band_lo > opts.band_hi) throw std::invalid_argument("mining band is empty");
  std::vector<std::string> unique;
  {
    std::unordered_set<std::string> seen;
    for (const auto& t : corpus)
      if (seen.insert(t).second) unique.push_back(t);
  }
  std::vector<std::string> queries;
  for (const auto& p : pairs) queries.push_back(p.query);
  const auto doc_embs = embed_texts(unique, embed, opts.threads);
  const auto q_embs = embed_texts(queries, embed, opts.threads);

  std::vector<HardNegativeRecord> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::vector<std::pair<double, std::size_t>> cands;
    for (std::size_t j = 0; j < unique.size(); ++j) {
      if (unique[j] == pairs[i].positive) continue;
      const double s = cosine(q_embs[i], doc_embs[j]);
      if (s >= opts.band_lo && s <= opts.band_hi) cands.emplace_back(s, j);
    }
    std::stable_sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    HardNegativeRecord r{pairs[i].query, pairs[i].positive, {}, pairs[i].source_id, false};
    for (std::size_t k = 0; k < std::min(opts.per_query, cands.size()); ++k) r.negatives.push_back(unique[cands[k].second]);
    r.flagged = r.negatives.size() < opts.per_query;
    out.push_back(std::move(r));
  }
  return out;
}

// Seeded sample of at most `limit` items, keeping their original order.
template <typename Item>
std::vector<Item> sample_limit(const std::vector<Item>& items, std::size_t limit, std::uint64_t seed) {
  if (limit == 0 || limit >= items.size()) return items;
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  std::vector<Item> out;
  for (std::size_t i : idx) out.push_back(items[i]);
  return out;
}

}  // namespace medeir
