#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "medeir/common.hpp"
#include "medeir/similarity.hpp"

namespace medeir {

using Qrels = std::map<std::string, int>;  // doc id -> grade

struct RetrievalDataset {
  std::vector<std::pair<std::string, std::string>> queries;  // id, text
  std::vector<std::pair<std::string, std::string>> corpus;   // id, text
  std::map<std::string, Qrels> qrels;

  void validate() const {
    std::set<std::string> ids;
    for (const auto& [id, text] : corpus)
      if (!ids.insert(id).second) throw std::invalid_argument("duplicate corpus id \"" + id + "\"");
    for (const auto& [qid, rels] : qrels) {
      for (const auto& [did, grade] : rels) {
        if (!ids.count(did)) throw std::invalid_argument("qrels for " + qid + " name unknown doc \"" + did + "\"");
        if (grade < 0) throw std::invalid_argument("negative relevance grade");
      }
    }
  }
};

namespace detail {
inline std::string row_id(const json& row) {
  for (const char* k : {"id", "_id", "qid", "did"})
    if (row.contains(k)) return row.at(k).is_string() ? row.at(k).get<std::string>() : row.at(k).dump();
  throw std::invalid_argument("row without id");
}
}  // namespace detail

// Reads queries.jsonl, corpus.jsonl and qrels.jsonl ({qid, did, rel}).
inline RetrievalDataset load_dataset(const std::filesystem::path& dir) {
  RetrievalDataset ds;
  for (const auto& r : read_jsonl(dir / "queries.jsonl")) ds.queries.emplace_back(detail::row_id(r), get_string(r, "text"));
  for (const auto& r : read_jsonl(dir / "corpus.jsonl")) {
    std::string text = get_string(r, "text");
    if (r.contains("title") && !r.at("title").get<std::string>().empty()) text = r.at("title").get<std::string>() + " " + text;
    ds.corpus.emplace_back(detail::row_id(r), std::move(text));
  }
  for (const auto& r : read_jsonl(dir / "qrels.jsonl")) {
    ds.qrels[r.at("qid").get<std::string>()][r.at("did").get<std::string>()] = r.value("rel", 1);
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Metrics

// Graded nDCG with gain 2^rel - 1 and log2(rank + 1) discount.
inline double ndcg_at_k(const std::vector<std::string>& ranked, const Qrels& qrels, std::size_t k = 10) {
  if (k == 0) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  auto gain = [](int rel) { return std::exp2(static_cast<double>(rel)) - 1.0; };
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    auto it = qrels.find(ranked[i]);
    if (it != qrels.end()) dcg += gain(it->second) / std::log2(static_cast<double>(i) + 2.0);
  }
  std::vector<int> grades;
  for (const auto& [d, g] : qrels) grades.push_back(g);
  std::sort(grades.begin(), grades.end(), std::greater<>());
  double ideal = 0.0;
  for (std::size_t i = 0; i < std::min(k, grades.size()); ++i) ideal += gain(grades[i]) / std::log2(static_cast<double>(i) + 2.0);
  return ideal > 0.0 ? dcg / ideal : 0.0;
}

// |relevant in top k| / |relevant|; nullopt when nothing is relevant.
inline std::optional<double> recall_at_k(const std::vector<std::string>& ranked, const Qrels& qrels, std::size_t k) {
  if (k == 0) throw std::invalid_argument("recall_at_k: k must be >= 1");
  std::size_t relevant = 0, hit = 0;
  for (const auto& [d, g] : qrels) relevant += g > 0;
  if (relevant == 0) return std::nullopt;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    auto it = qrels.find(ranked[i]);
    if (it != qrels.end() && it->second > 0) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(relevant);
}

// ---------------------------------------------------------------------------
// Retrieval

// Top-k corpus ids for one query embedding: descending cosine, ties by id.
inline std::vector<std::string> rank_documents(const Embedding& q, const std::vector<Embedding>& docs,
                                               const std::vector<std::string>& ids, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) scored.emplace_back(cosine(q, docs[i]), i);
  const std::size_t top = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(top), scored.end(),
                    [&](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return ids[a.second] < ids[b.second];
                    });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < top; ++i) out.push_back(ids[scored[i].second]);
  return out;
}

// Corpus embeddings stored as raw floats under <dir>/<key>.f32.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  // Honours MEDEIR_CACHE; nullopt when unset or empty.
  static std::optional<EmbeddingCache> from_env() {
    const char* v = std::getenv("MEDEIR_CACHE");
    if (v == nullptr || *v == '\0') return std::nullopt;
    return EmbeddingCache(v);
  }

  static std::string key(const std::string& checkpoint_hash, const std::string& tokenizer_hash,
                         const std::vector<std::pair<std::string, std::string>>& corpus) {
    std::string blob;
    for (const auto& [id, text] : corpus) blob += id + '\x1f' + text + '\x1e';
    return hex64(fnv1a64(checkpoint_hash + "|" + tokenizer_hash + "|" + hex64(fnv1a64(blob))));
  }

  std::optional<std::vector<Embedding>> get(const std::string& key, std::size_t count) const {
    const auto path = dir_ / (key + ".f32");
    if (!std::filesystem::exists(path)) return std::nullopt;
    const std::string bytes = read_file(path);
    if (count == 0 || bytes.size() % (count * sizeof(float)) != 0) return std::nullopt;
    const std::size_t dim = bytes.size() / (count * sizeof(float));
    std::vector<Embedding> out(count, Embedding(dim));
    for (std::size_t i = 0; i < count; ++i)
      std::memcpy(out[i].data(), bytes.data() + i * dim * sizeof(float), dim * sizeof(float));
    return out;
  }

  void put(const std::string& key, const std::vector<Embedding>& embs) const {
    std::string bytes;
    for (const auto& e : embs) bytes.append(reinterpret_cast<const char*>(e.data()), e.size() * sizeof(float));
    write_file_atomic(dir_ / (key + ".f32"), bytes);
  }

 private:
  std::filesystem::path dir_;
};

struct RetrievalModel {
  std::string name;
  Embedder embed;
  std::string checkpoint_hash;
  std::string tokenizer_hash;
};

struct RetrievalOptions {
  std::size_t k = 10;
  unsigned threads = 1;
  const EmbeddingCache* cache = nullptr;
};

// Embeds every corpus document once and ranks the corpus for each query.
inline std::map<std::string, std::vector<std::string>> retrieval_run(const RetrievalModel& model,
                                                                     const RetrievalDataset& ds,
                                                                     const RetrievalOptions& opts = {}) {
  if (ds.corpus.empty()) throw std::invalid_argument("retrieval_run: empty corpus");
  if (opts.k == 0) throw std::invalid_argument("retrieval_run: k must be >= 1");
  std::vector<std::string> ids, texts;
  for (const auto& [id, text] : ds.corpus) {
    ids.push_back(id);
    texts.push_back(text);
  }
  std::vector<Embedding> docs;
  std::string key;
  if (opts.cache) {
    key = EmbeddingCache::key(model.checkpoint_hash, model.tokenizer_hash, ds.corpus);
    if (auto hit = opts.cache->get(key, texts.size())) docs = std::move(*hit);
  }
  if (docs.empty()) {
    docs = embed_texts(texts, model.embed, opts.threads);
    if (opts.cache) opts.cache->put(key, docs);
  }
  std::vector<std::string> qtexts;
  for (const auto& [id, text] : ds.queries) qtexts.push_back(text);
  const auto qembs = embed_texts(qtexts, model.embed, opts.threads);
  std::map<std::string, std::vector<std::string>> out;
  for (std::size_t i = 0; i < ds.queries.size(); ++i) out[ds.queries[i].first] = rank_documents(qembs[i], docs, ids, opts.k);
  return out;
}

struct MetricSummary {
  double ndcg = 0.0;    // mean over evaluated queries, in [0, 1]
  double recall = 0.0;  // mean over evaluated queries, in [0, 1]
  std::size_t evaluated = 0;
  std::size_t skipped = 0;  // queries without any relevant document
};

inline MetricSummary summarize(const std::map<std::string, std::vector<std::string>>& rankings,
                               const RetrievalDataset& ds, std::size_t k) {
  MetricSummary s;
  for (const auto& [qid, text] : ds.queries) {
    auto q = ds.qrels.find(qid);
    const Qrels empty;
    const Qrels& rels = q == ds.qrels.end() ? empty : q->second;
    const auto& ranked = rankings.at(qid);
    const auto r = recall_at_k(ranked, rels, k);
    if (!r) {
      ++s.skipped;
      continue;
    }
    s.recall += *r;
    s.ndcg += ndcg_at_k(ranked, rels, k);
    ++s.evaluated;
  }
  if (s.evaluated) {
    s.ndcg /= static_cast<double>(s.evaluated);
    s.recall /= static_cast<double>(s.evaluated);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string dataset;
  std::string model;
  std::string metric;
  double value = 0.0;  // percentage
};

struct EvalReport {
  std::size_t k = 10;
  std::vector<std::pair<std::string, json>> models;  // name -> metadata
  std::vector<ReportRow> rows;
  std::map<std::string, std::size_t> skipped_queries;  // per dataset

  void sort_rows() {
    std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
      return std::tie(a.dataset, a.model) < std::tie(b.dataset, b.model);
    });
  }

  json to_json() const {
    json j{{"k", k}, {"models", json::array()}, {"rows", json::array()}, {"skipped_queries", skipped_queries}};
    for (const auto& [name, meta] : models) {
      json m = meta;
      m["name"] = name;
      j["models"].push_back(m);
    }
    for (const auto& r : rows) {
      j["rows"].push_back(json{{"dataset", r.dataset}, {"model", r.model}, {"metric", r.metric},
                               {"value", std::round(r.value * 100.0) / 100.0}});
    }
    return j;
  }

  // One line per (dataset, metric), one column per model, best marked '*'.
  std::string render_table() const {
    std::vector<std::string> model_names;
    for (const auto& r : rows)
      if (std::find(model_names.begin(), model_names.end(), r.model) == model_names.end()) model_names.push_back(r.model);
    std::vector<std::pair<std::string, std::string>> keys;
    std::map<std::pair<std::string, std::string>, std::map<std::string, double>> cells;
    for (const auto& r : rows) {
      const auto key = std::make_pair(r.dataset, r.metric);
      if (!cells.count(key)) keys.push_back(key);
      cells[key][r.model] = r.value;
    }
    auto fmt = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.2f", v);
      return std::string(buf);
    };
    std::vector<std::vector<std::string>> table;
    std::vector<std::string> header{"Dataset", "Metric"};
    header.insert(header.end(), model_names.begin(), model_names.end());
    table.push_back(header);
    for (const auto& key : keys) {
      const auto& row = cells[key];
      double best = -1.0;
      for (const auto& [m, v] : row) best = std::max(best, std::round(v * 100.0));
      std::vector<std::string> line{key.first, key.second};
      for (const auto& m : model_names) {
        auto it = row.find(m);
        if (it == row.end()) {
          line.push_back("-");
          continue;
        }
        line.push_back(fmt(it->second) + (std::round(it->second * 100.0) == best ? "*" : ""));
      }
      table.push_back(line);
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& line : table)
      for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
    std::string out;
    for (std::size_t r = 0; r < table.size(); ++r) {
      for (std::size_t c = 0; c < table[r].size(); ++c) {
        const auto& cell = table[r][c];
        const std::string pad(width[c] - cell.size(), ' ');
        out += c < 2 ? cell + pad : pad + cell;
        if (c + 1 < table[r].size()) out += "  ";
      }
      while (!out.empty() && out.back() == ' ') out.pop_back();
      out += '\n';
      if (r == 0) {
        std::size_t total = 0;
        for (std::size_t w : width) total += w;
        out += std::string(total + 2 * (width.size() - 1), '-') + '\n';
      }
    }
    return out;
  }
};

struct NamedDataset {
  std::string name;
  RetrievalDataset data;
};

// nDCG@k and recall@k (as percentages) for every model on every dataset.
inline EvalReport compare_models(const std::vector<RetrievalModel>& models, const std::vector<NamedDataset>& datasets,
                                 const RetrievalOptions& opts = {}) {
  if (models.empty() || datasets.empty()) throw std::invalid_argument("compare_models needs models and datasets");
  EvalReport rep;
  rep.k = opts.k;
  for (const auto& m : models)
    rep.models.emplace_back(m.name, json{{"checkpoint_hash", m.checkpoint_hash}, {"tokenizer_hash", m.tokenizer_hash}});
  const std::string kk = std::to_string(opts.k);
  for (const auto& ds : datasets) {
    for (const auto& m : models) {
      const auto s = summarize(retrieval_run(m, ds.data, opts), ds.data, opts.k);
      rep.rows.push_back({ds.name, m.name, "nDCG@" + kk, 100.0 * s.ndcg});
      rep.rows.push_back({ds.name, m.name, "Recall@" + kk, 100.0 * s.recall});
      rep.skipped_queries[ds.name] = s.skipped;
    }
  }
  rep.sort_rows();
  return rep;
}

}  // namespace medeir
