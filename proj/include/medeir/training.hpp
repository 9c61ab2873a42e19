#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "medeir/common.hpp"
#include "medeir/model.hpp"
#include "medeir/tensor.hpp"
#include "medeir/tokenizer.hpp"

namespace medeir {

// ---------------------------------------------------------------------------
// Whole-word masking

// Picks word groups in random order until at least ceil(rate * n) non-special
// tokens are covered. Groups are never split; specials are never chosen.
inline std::vector<std::size_t> select_whole_word_mask(const EncodedSequence& seq, double rate,
                                                       std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("mask rate must be in [0, 1]");
  if (rate == 0.0 || seq.word_groups.empty()) return {};
  const std::size_t n = seq.ids.size() - seq.special_positions.size();
  const auto target = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> order(seq.word_groups.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> out;
  for (std::size_t g : order) {
    if (out.size() >= target) break;
    const auto& span = seq.word_groups[g];
    for (std::size_t p = span.begin; p < span.end; ++p) out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct MaskingOptions {
  // Probability a selected position becomes [MASK]; of the rest, random_prob
  // become a random non-special token and the others keep their id.
  double mask_prob = 1.0;
  double random_prob = 0.0;
};

struct MaskedExample {
  std::vector<TokenId> corrupted;
  std::vector<TokenId> targets;  // original ids
  std::vector<std::size_t> positions;
};

inline MaskedExample apply_mask(const EncodedSequence& seq, const std::vector<std::size_t>& positions,
                                TokenId mask_id, const MaskingOptions& opts = {},
                                std::mt19937_64* rng = nullptr, const Vocabulary* vocab = nullptr) {
  MaskedExample ex{seq.ids, seq.ids, positions};
  const bool mixed = opts.mask_prob < 1.0;
  if (mixed && (rng == nullptr || vocab == nullptr))
    throw std::invalid_argument("apply_mask: mixed corruption needs rng and vocabulary");
  std::vector<TokenId> random_pool;
  if (mixed) {
    for (std::size_t i = 0; i < vocab->size(); ++i)
      if (!vocab->is_special(static_cast<TokenId>(i))) random_pool.push_back(static_cast<TokenId>(i));
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t p : positions) {
    if (p >= seq.ids.size()) throw std::out_of_range("mask position " + std::to_string(p) + " out of range");
    if (std::find(seq.special_positions.begin(), seq.special_positions.end(), p) != seq.special_positions.end())
      throw std::invalid_argument("mask position " + std::to_string(p) + " is a special token");
    if (!mixed) {
      ex.corrupted[p] = mask_id;
      continue;
    }
    const double r = u(*rng);
    if (r < opts.mask_prob) {
      ex.corrupted[p] = mask_id;
    } else if (r < opts.mask_prob + opts.random_prob && !random_pool.empty()) {
      ex.corrupted[p] = random_pool[std::uniform_int_distribution<std::size_t>(0, random_pool.size() - 1)(*rng)];
    }
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Contrastive losses

// Cross-entropy over q·pᵀ/τ with the aligned pair as target. Inputs are unit
// rows, so the dot product is the cosine.
template <typename T>
Tensor<T> info_nce_loss(const Tensor<T>& q, const Tensor<T>& p, double tau, bool symmetric = false) {
  if (q.rank() != 2 || p.rank() != 2 || q.shape() != p.shape())
    throw std::invalid_argument("info_nce_loss: q and p must both be [B, d]");
  const std::size_t b = q.dim(0);
  if (b == 0) throw std::invalid_argument("info_nce_loss: empty batch");
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce_loss: temperature must be positive");
  std::vector<std::size_t> targets(b);
  std::iota(targets.begin(), targets.end(), 0);
  const auto logits = scale(matmul_nt(q, p), static_cast<T>(1.0 / tau));
  auto loss = cross_entropy(logits, targets);
  if (symmetric) loss = scale(add(loss, cross_entropy(transpose(logits), targets)), T(0.5));
  return loss;
}

// InfoNCE whose denominator for item i also holds that item's own hard
// negatives negs[i] ([H_i, d], may be undefined for H_i = 0). With
// in_batch = false only the item's own positive and negatives compete.
template <typename T>
Tensor<T> hard_negative_loss(const Tensor<T>& q, const Tensor<T>& p, const std::vector<Tensor<T>>& negs,
                             double tau, bool in_batch = true) {
  if (q.rank() != 2 || p.rank() != 2 || q.shape() != p.shape())
    throw std::invalid_argument("hard_negative_loss: q and p must both be [B, d]");
  const std::size_t b = q.dim(0);
  if (b == 0) throw std::invalid_argument("hard_negative_loss: empty batch");
  if (!(tau > 0.0)) throw std::invalid_argument("hard_negative_loss: temperature must be positive");
  if (negs.size() != b) throw std::invalid_argument("hard_negative_loss: one negative set per item");
  const bool any = std::any_of(negs.begin(), negs.end(), [](const Tensor<T>& n) { return n.defined() && n.numel() > 0; });
  if (!any && in_batch) return info_nce_loss(q, p, tau);

  const T inv_tau = static_cast<T>(1.0 / tau);
  const auto sims = in_batch ? matmul_nt(q, p) : Tensor<T>();
  Tensor<T> total;
  for (std::size_t i = 0; i < b; ++i) {
    const auto qi = slice(q, 0, i, i + 1);
    std::vector<Tensor<T>> parts;
    std::size_t target = 0;
    if (in_batch) {
      parts.push_back(slice(sims, 0, i, i + 1));
      target = i;
    } else {
      parts.push_back(matmul_nt(qi, slice(p, 0, i, i + 1)));
    }
    if (negs[i].defined() && negs[i].numel() > 0) {
      if (negs[i].rank() != 2 || negs[i].dim(1) != q.dim(1))
        throw std::invalid_argument("hard_negative_loss: negatives must be [H, d]");
      parts.push_back(matmul_nt(qi, negs[i]));
    }
    const auto row = scale(parts.size() == 1 ? parts[0] : concat(parts, 1), inv_tau);
    const auto term = cross_entropy(row, {target});
    total = i == 0 ? term : add(total, term);
  }
  return scale(total, T(1) / static_cast<T>(b));
}

// ---------------------------------------------------------------------------
// Optimiser and schedule

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct OptimizerState {
  AdamWConfig cfg;
  std::vector<std::vector<T>> m, v;
  std::uint64_t t = 0;

  OptimizerState() = default;
  OptimizerState(const std::vector<Tensor<T>>& params, AdamWConfig c) : cfg(c) {
    for (const auto& p : params) {
      m.emplace_back(p.numel(), T(0));
      v.emplace_back(p.numel(), T(0));
    }
  }
};

// One decoupled-weight-decay Adam update from the parameters' accumulated
// gradients (missing gradients count as zero):
//   w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)
// A non-finite gradient anywhere rejects the step before anything changes.
template <typename T>
void adamw_step(const std::vector<Tensor<T>>& params, OptimizerState<T>& st, double lr) {
  if (st.m.size() != params.size()) throw std::invalid_argument("optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (st.m[i].size() != params[i].numel()) throw std::invalid_argument("optimizer state shape mismatch");
    if (!params[i].has_grad()) continue;
    for (T g : params[i].grad())
      if (!std::isfinite(g)) throw std::domain_error("non-finite gradient; step rejected");
  }
  ++st.t;
  const double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto w = p.mutable_data();
    const bool has = p.has_grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = has ? static_cast<double>(p.grad()[j]) : 0.0;
      const double m = b1 * static_cast<double>(st.m[i][j]) + (1.0 - b1) * g;
      const double v = b2 * static_cast<double>(st.v[i][j]) + (1.0 - b2) * g * g;
      st.m[i][j] = static_cast<T>(m);
      st.v[i][j] = static_cast<T>(v);
      const double update = (m / c1) / (std::sqrt(v / c2) + st.cfg.eps) + st.cfg.weight_decay * static_cast<double>(w[j]);
      w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * update);
    }
  }
}

struct ScheduleConfig {
  std::size_t total_steps = 0;
  double warmup_fraction = 0.1;

  std::size_t warmup_steps() const {
    return std::min(total_steps, static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(total_steps))));
  }
};

// Linear warmup from 0 to peak, then linear decay to 0 at total_steps.
inline double lr_at(const ScheduleConfig& s, double peak, std::size_t step) {
  if (!(s.warmup_fraction > 0.0 && s.warmup_fraction < 1.0))
    throw std::invalid_argument("warmup_fraction must be in (0, 1)");
  if (step > s.total_steps)
    throw std::out_of_range("step " + std::to_string(step) + " beyond total_steps " + std::to_string(s.total_steps));
  const std::size_t w = s.warmup_steps();
  if (step < w) return peak * static_cast<double>(step) / static_cast<double>(w);
  if (s.total_steps == w) return step == w && w > 0 ? peak : 0.0;
  return peak * static_cast<double>(s.total_steps - step) / static_cast<double>(s.total_steps - w);
}

// ---------------------------------------------------------------------------
// Single-source batch sampling

struct SampledBatch {
  std::size_t source = 0;
  std::vector<std::size_t> indices;  // into that source
  std::size_t epoch = 0;
};

// Each batch comes wholly from one source; the source is chosen with
// probability proportional to its remaining items in the current epoch.
// Items are drawn without replacement within an epoch.
class SingleSourceSampler {
 public:
  SingleSourceSampler(std::vector<std::size_t> source_sizes, std::size_t batch_size, std::uint64_t seed)
      : sizes_(std::move(source_sizes)), batch_(batch_size), rng_(seed) {
    if (sizes_.empty()) throw std::invalid_argument("sampler needs at least one source");
    if (batch_ == 0) throw std::invalid_argument("batch size must be positive");
    for (std::size_t i = 0; i < sizes_.size(); ++i) {
      if (sizes_[i] < batch_)
        throw std::invalid_argument("source " + std::to_string(i) + " has " + std::to_string(sizes_[i]) +
                                    " items, fewer than batch size " + std::to_string(batch_));
    }
    start_epoch();
  }

  SampledBatch next() {
    std::size_t remaining = 0;
    for (const auto& q : queues_) remaining += q.size() / batch_ * batch_;
    if (remaining == 0) {
      ++epoch_;
      start_epoch();
      for (const auto& q : queues_) remaining += q.size() / batch_ * batch_;
    }
    std::uniform_int_distribution<std::size_t> pick(0, remaining - 1);
    std::size_t r = pick(rng_), s = 0;
    for (; s < queues_.size(); ++s) {
      const std::size_t usable = queues_[s].size() / batch_ * batch_;
      if (r < usable) break;
      r -= usable;
    }
    SampledBatch out{s, {}, epoch_};
    auto& q = queues_[s];
    out.indices.assign(q.end() - static_cast<std::ptrdiff_t>(batch_), q.end());
    q.resize(q.size() - batch_);
    return out;
  }

  std::size_t epoch() const { return epoch_; }

 private:
  void start_epoch() {
    queues_.assign(sizes_.size(), {});
    for (std::size_t s = 0; s < sizes_.size(); ++s) {
      queues_[s].resize(sizes_[s]);
      std::iota(queues_[s].begin(), queues_[s].end(), 0);
      std::shuffle(queues_[s].begin(), queues_[s].end(), rng_);
    }
  }

  std::vector<std::size_t> sizes_;
  std::size_t batch_;
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> queues_;
  std::size_t epoch_ = 0;
};

// ---------------------------------------------------------------------------
// Stage configuration

enum class StageKind { kMlm, kContrastive, kHardNegative };

inline std::string stage_name(StageKind k) {
  switch (k) {
    case StageKind::kMlm: return "mlm";
    case StageKind::kContrastive: return "contrastive";
    case StageKind::kHardNegative: return "hard_negative";
  }
  return "?";
}

inline StageKind parse_stage(const std::string& s) {
  if (s == "mlm") return StageKind::kMlm;
  if (s == "contrastive") return StageKind::kContrastive;
  if (s == "hard_negative" || s == "hardneg") return StageKind::kHardNegative;
  throw std::invalid_argument("unknown stage \"" + s + "\"");
}

struct StageConfig {
  StageKind stage = StageKind::kMlm;
  std::size_t global_batch = 16;
  std::size_t grad_accum = 2;
  std::size_t max_len = 512;
  double mask_rate = 0.30;
  double mask_prob = 1.0;
  double random_prob = 0.0;
  double temperature = 0.05;
  bool symmetric = false;
  bool in_batch_negatives = true;
  std::size_t max_negatives = 0;  // 0 keeps every negative of a record
  std::size_t total_steps = 100;
  double warmup_fraction = 0.10;
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t max_epochs = 0;  // 0 cycles the data indefinitely
  std::uint64_t seed = 0;

  static StageConfig defaults(StageKind k) {
    StageConfig c;
    c.stage = k;
    if (k != StageKind::kMlm) {
      c.global_batch = 1024;
      c.grad_accum = k == StageKind::kHardNegative ? 2 : 1;
      c.warmup_fraction = 0.06;
      c.lr = 5e-5;
      c.beta1 = 0.95;
    }
    return c;
  }

  std::size_t micro_batch() const { return global_batch / grad_accum; }
  ScheduleConfig schedule() const { return {total_steps, warmup_fraction}; }
  AdamWConfig adamw() const { return {beta1, beta2, eps, weight_decay}; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("StageConfig: " + m); };
    if (global_batch == 0 || grad_accum == 0) fail("global_batch and grad_accum must be positive");
    if (global_batch % grad_accum != 0) fail("global_batch must be divisible by grad_accum");
    if (max_len == 0) fail("max_len must be positive");
    if (!(mask_rate >= 0 && mask_rate <= 1)) fail("mask_rate must be in [0, 1]");
    if (!(mask_prob >= 0 && random_prob >= 0 && mask_prob + random_prob <= 1)) fail("bad corruption split");
    if (!(temperature > 0)) fail("temperature must be positive");
    if (total_steps == 0) fail("total_steps must be positive");
    if (!(warmup_fraction > 0 && warmup_fraction < 1)) fail("warmup_fraction must be in (0, 1)");
    if (!(lr > 0)) fail("lr must be positive");
  }

  json to_json() const {
    return json{{"stage", stage_name(stage)},           {"global_batch", global_batch},
                {"grad_accum", grad_accum},             {"max_len", max_len},
                {"mask_rate", mask_rate},               {"mask_prob", mask_prob},
                {"random_prob", random_prob},           {"temperature", temperature},
                {"symmetric", symmetric},               {"in_batch_negatives", in_batch_negatives},
                {"max_negatives", max_negatives},       {"total_steps", total_steps},
                {"warmup_fraction", warmup_fraction},   {"lr", lr},
                {"beta1", beta1},                       {"beta2", beta2},
                {"eps", eps},                           {"weight_decay", weight_decay},
                {"max_epochs", max_epochs},             {"seed", seed}};
  }

  // Starts from the stage's defaults; unknown keys are rejected.
  static StageConfig from_json(const json& j) {
    StageConfig c = defaults(parse_stage(j.at("stage").get<std::string>()));
    for (const auto& [key, value] : j.items()) {
      if (key == "stage") continue;
      else if (key == "global_batch") c.global_batch = value.get<std::size_t>();
      else if (key == "grad_accum") c.grad_accum = value.get<std::size_t>();
      else if (key == "max_len") c.max_len = value.get<std::size_t>();
      else if (key == "mask_rate") c.mask_rate = value.get<double>();
      else if (key == "mask_prob") c.mask_prob = value.get<double>();
      else if (key == "random_prob") c.random_prob = value.get<double>();
      else if (key == "temperature") c.temperature = value.get<double>();
      else if (key == "symmetric") c.symmetric = value.get<bool>();
      else if (key == "in_batch_negatives") c.in_batch_negatives = value.get<bool>();
      else if (key == "max_negatives") c.max_negatives = value.get<std::size_t>();
      else if (key == "total_steps") c.total_steps = value.get<std::size_t>();
      else if (key == "warmup_fraction") c.warmup_fraction = value.get<double>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "eps") c.eps = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "max_epochs") c.max_epochs = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw std::invalid_argument("StageConfig: unknown key \"" + key + "\"");
    }
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Stage data

struct PairExample {
  std::vector<TokenId> query, positive;
  std::vector<std::vector<TokenId>> negatives;
};

struct StageData {
  // Index 0..S-1 sources; MLM data uses a single source.
  std::vector<std::string> source_ids;
  std::vector<std::vector<EncodedSequence>> sequences;  // MLM
  std::vector<std::vector<PairExample>> pairs;           // contrastive / hard-negative

  std::size_t source_size(std::size_t s) const {
    return s < sequences.size() ? sequences[s].size() : pairs[s].size();
  }
};

inline std::vector<TokenId> truncate_ids(std::vector<TokenId> ids, std::size_t max_len) {
  if (ids.size() > max_len) ids.resize(max_len);
  return ids;
}

// MLM rows carry either packed "ids" or raw "text". Sequences are cut to
// max_len; word groups are rebuilt from the continuation prefix.
inline StageData mlm_data_from_rows(const std::vector<json>& rows, const TokenizerModel& tok, std::size_t max_len) {
  StageData d;
  d.source_ids = {"mlm"};
  d.sequences.emplace_back();
  for (const auto& row : rows) {
    std::vector<TokenId> ids;
    if (row.contains("ids")) {
      ids = row.at("ids").get<std::vector<TokenId>>();
    } else {
      ids = tok.encode(get_string(row, "text")).ids;
    }
    ids = truncate_ids(std::move(ids), max_len);
    if (ids.empty()) continue;
    d.sequences[0].push_back(sequence_from_ids(tok.vocab(), ids));
  }
  if (d.sequences[0].empty()) throw std::invalid_argument("MLM data is empty");
  return d;
}

// Pair rows {query, positive, source_id[, negatives]} grouped by source in
// first-seen order.
inline StageData pair_data_from_rows(const std::vector<json>& rows, const TokenizerModel& tok, std::size_t max_len,
                                     bool with_negatives, std::size_t max_negatives) {
  StageData d;
  std::map<std::string, std::size_t> index;
  for (const auto& row : rows) {
    const std::string src = row.contains("source_id") ? row.at("source_id").get<std::string>() : "default";
    PairExample ex;
    ex.query = truncate_ids(tok.encode(get_string(row, "query")).ids, max_len);
    ex.positive = truncate_ids(tok.encode(get_string(row, "positive")).ids, max_len);
    if (ex.query.empty() || ex.positive.empty()) throw std::invalid_argument("pair with empty text");
    if (with_negatives) {
      for (const auto& n : row.at("negatives")) {
        if (max_negatives != 0 && ex.negatives.size() >= max_negatives) break;
        auto ids = truncate_ids(tok.encode(n.get<std::string>()).ids, max_len);
        if (!ids.empty()) ex.negatives.push_back(std::move(ids));
      }
    }
    auto [it, fresh] = index.emplace(src, d.pairs.size());
    if (fresh) {
      d.source_ids.push_back(src);
      d.pairs.emplace_back();
    }
    d.pairs[it->second].push_back(std::move(ex));
  }
  if (d.pairs.empty()) throw std::invalid_argument("pair data is empty");
  return d;
}

// ---------------------------------------------------------------------------
// Stage loop

struct LossRecord {
  std::size_t step = 0;
  std::string stage;
  double lr = 0.0;
  double loss = 0.0;
  std::uint64_t tokens_seen = 0;

  json to_json() const {
    return json{{"step", step}, {"stage", stage}, {"lr", lr}, {"loss", loss}, {"tokens_seen", tokens_seen}};
  }
};

struct StageResult {
  std::vector<LossRecord> records;
  std::size_t steps_completed = 0;
  std::size_t dropped_micro_batches = 0;  // partial accumulation discarded on exhaustion
  std::vector<std::string> log;           // human-readable events

  std::string loss_log_jsonl() const {
    std::string out;
    for (const auto& r : records) out += r.to_json().dump() + "\n";
    return out;
  }
};

// Per-item mean MLM loss averaged over the micro-batch. Items whose mask
// selection is empty are skipped.
template <typename T>
std::optional<Tensor<T>> mlm_batch_loss(const EncoderModel<T>& model, const std::vector<const EncodedSequence*>& items,
                                        const StageConfig& cfg, TokenId mask_id, const Vocabulary& vocab,
                                        std::mt19937_64& rng, std::uint64_t* tokens) {
  const MaskingOptions mopts{cfg.mask_prob, cfg.random_prob};
  Tensor<T> total;
  std::size_t used = 0;
  for (const auto* seq : items) {
    const auto positions = select_whole_word_mask(*seq, cfg.mask_rate, rng);
    if (tokens) *tokens += seq->ids.size();
    if (positions.empty()) continue;
    const auto ex = apply_mask(*seq, positions, mask_id, mopts, &rng, &vocab);
    const auto l = model.mlm_loss(ex.corrupted, ex.positions, ex.targets, seq->attention_mask);
    total = used == 0 ? l : add(total, l);
    ++used;
  }
  if (used == 0) return std::nullopt;
  return scale(total, T(1) / static_cast<T>(used));
}

template <typename T>
Tensor<T> embed_batch(const EncoderModel<T>& model, const std::vector<const std::vector<TokenId>*>& seqs,
                      std::size_t max_len) {
  std::vector<Tensor<T>> rows;
  rows.reserve(seqs.size());
  for (const auto* s : seqs) rows.push_back(embed_ids(model, *s, max_len));
  return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

template <typename T>
Tensor<T> pair_batch_loss(const EncoderModel<T>& model, const std::vector<const PairExample*>& items,
                          const StageConfig& cfg, std::uint64_t* tokens) {
  std::vector<const std::vector<TokenId>*> qs, ps;
  for (const auto* ex : items) {
    qs.push_back(&ex->query);
    ps.push_back(&ex->positive);
    if (tokens) *tokens += ex->query.size() + ex->positive.size();
  }
  const auto q = embed_batch(model, qs, cfg.max_len);
  const auto p = embed_batch(model, ps, cfg.max_len);
  if (cfg.stage != StageKind::kHardNegative) return info_nce_loss(q, p, cfg.temperature, cfg.symmetric);
  std::vector<Tensor<T>> negs;
  for (const auto* ex : items) {
    if (ex->negatives.empty()) {
      negs.emplace_back();
      continue;
    }
    std::vector<const std::vector<TokenId>*> ns;
    for (const auto& n : ex->negatives) {
      ns.push_back(&n);
      if (tokens) *tokens += n.size();
    }
    negs.push_back(embed_batch(model, ns, cfg.max_len));
  }
  return hard_negative_loss(q, p, negs, cfg.temperature, cfg.in_batch_negatives);
}

// Runs one training stage in place on `model`. Each optimizer step averages
// grad_accum micro-batch losses; update s uses lr_at(s).
template <typename T>
StageResult run_stage(EncoderModel<T>& model, const TokenizerModel& tok, const StageData& data,
                      const StageConfig& cfg) {
  cfg.validate();
  if (model.config().vocab_size != tok.vocab().size())
    throw std::invalid_argument("model vocab_size does not match tokenizer vocabulary");
  const bool mlm = cfg.stage == StageKind::kMlm;
  if (mlm ? data.sequences.empty() : data.pairs.empty()) throw std::invalid_argument("stage data is empty");

  std::vector<std::size_t> sizes;
  const std::size_t n_sources = mlm ? data.sequences.size() : data.pairs.size();
  for (std::size_t s = 0; s < n_sources; ++s) sizes.push_back(mlm ? data.sequences[s].size() : data.pairs[s].size());
  SingleSourceSampler sampler(sizes, cfg.micro_batch(), cfg.seed);
  std::mt19937_64 mask_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  const auto params = model.parameter_tensors();
  OptimizerState<T> opt(params, cfg.adamw());
  const TokenId mask_id = tok.vocab().id("[MASK]");
  const T inv_accum = T(1) / static_cast<T>(cfg.grad_accum);

  StageResult res;
  std::uint64_t tokens = 0;
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    model.zero_grad();
    double step_loss = 0.0;
    std::size_t done = 0;
    bool exhausted = false;
    for (std::size_t a = 0; a < cfg.grad_accum; ++a) {
      auto batch = sampler.next();
      if (cfg.max_epochs != 0 && batch.epoch >= cfg.max_epochs) {
        exhausted = true;
        break;
      }
      std::optional<Tensor<T>> loss;
      if (mlm) {
        std::vector<const EncodedSequence*> items;
        for (std::size_t i : batch.indices) items.push_back(&data.sequences[batch.source][i]);
        loss = mlm_batch_loss(model, items, cfg, mask_id, tok.vocab(), mask_rng, &tokens);
      } else {
        std::vector<const PairExample*> items;
        for (std::size_t i : batch.indices) items.push_back(&data.pairs[batch.source][i]);
        loss = pair_batch_loss(model, items, cfg, &tokens);
      }
      ++done;
      if (!loss) continue;
      const auto scaled = scale(*loss, inv_accum);
      step_loss += static_cast<double>(scaled.item());
      scaled.backward();
    }
    if (exhausted) {
      if (done > 0) {
        res.dropped_micro_batches = done;
        res.log.push_back("data exhausted after step " + std::to_string(step) + "; dropped partial accumulation of " +
                          std::to_string(done) + " micro-batch(es)");
      } else {
        res.log.push_back("data exhausted after step " + std::to_string(step));
      }
      model.zero_grad();
      break;
    }
    const double lr = lr_at(cfg.schedule(), cfg.lr, step);
    adamw_step(params, opt, lr);
    res.records.push_back({step, stage_name(cfg.stage), lr, step_loss, tokens});
    res.steps_completed = step + 1;
  }
  model.zero_grad();
  return res;
}

}  // namespace medeir
