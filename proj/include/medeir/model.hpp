#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "medeir/checkpoint.hpp"
#include "medeir/common.hpp"
#include "medeir/tensor.hpp"
#include "medeir/tokenizer.hpp"

namespace medeir {

inline constexpr int kModelFormatVersion = 1;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden = 128;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 512;
  std::size_t num_projections = 4;
  std::size_t max_train_len = 512;
  std::size_t max_infer_len = 8192;
  // Ascending cluster boundaries over frequency ranks; the last equals
  // vocab_size. Empty means "derive the default split".
  std::vector<std::size_t> adaptive_cutoffs;
  std::size_t tail_reduction_factor = 4;
  double layer_norm_eps = 1e-12;

  // Head = top 20% of ranks, remaining ranks split evenly over two tails.
  static std::vector<std::size_t> default_cutoffs(std::size_t v) {
    if (v < 3) return {v};
    const std::size_t c0 = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(v))));
    const std::size_t c1 = std::min(v - 1, c0 + std::max<std::size_t>(1, (v - c0) / 2));
    if (c1 <= c0) return {c0, v};
    return {c0, c1, v};
  }

  const std::vector<std::size_t>& cutoffs() const { return adaptive_cutoffs; }

  // Fills derived defaults and checks every invariant.
  void finalize() {
    if (adaptive_cutoffs.empty()) adaptive_cutoffs = default_cutoffs(vocab_size);
    validate();
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
    if (vocab_size == 0) fail("vocab_size must be positive");
    if (hidden == 0 || heads == 0 || layers == 0 || ffn_dim == 0 || num_projections == 0)
      fail("dimensions must be positive");
    if (hidden % heads != 0) fail("hidden must be divisible by heads");
    if (max_infer_len < max_train_len) fail("max_infer_len must be >= max_train_len");
    if (adaptive_cutoffs.empty() || adaptive_cutoffs.back() != vocab_size)
      fail("last cutoff must equal vocab_size");
    for (std::size_t i = 0; i < adaptive_cutoffs.size(); ++i) {
      if (adaptive_cutoffs[i] == 0 || (i > 0 && adaptive_cutoffs[i] <= adaptive_cutoffs[i - 1]))
        fail("cutoffs must be strictly ascending and positive");
    }
    if (tail_reduction_factor == 0) fail("tail_reduction_factor must be positive");
    if (!(layer_norm_eps > 0)) fail("layer_norm_eps must be positive");
  }

  std::size_t tail_dim(std::size_t tail_index) const {  // 1-based
    std::size_t dim = hidden;
    for (std::size_t i = 0; i < tail_index; ++i) dim /= tail_reduction_factor;
    return std::max<std::size_t>(1, dim);
  }

  json to_json() const {
    return json{{"vocab_size", vocab_size},
                {"hidden", hidden},
                {"layers", layers},
                {"heads", heads},
                {"ffn_dim", ffn_dim},
                {"num_projections", num_projections},
                {"max_train_len", max_train_len},
                {"max_infer_len", max_infer_len},
                {"adaptive_cutoffs", adaptive_cutoffs},
                {"tail_reduction_factor", tail_reduction_factor},
                {"layer_norm_eps", layer_norm_eps}};
  }

  // Unknown keys are rejected. Missing keys keep their defaults.
  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    for (const auto& [key, value] : j.items()) {
      if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
      else if (key == "hidden") c.hidden = value.get<std::size_t>();
      else if (key == "layers") c.layers = value.get<std::size_t>();
      else if (key == "heads") c.heads = value.get<std::size_t>();
      else if (key == "ffn_dim") c.ffn_dim = value.get<std::size_t>();
      else if (key == "num_projections") c.num_projections = value.get<std::size_t>();
      else if (key == "max_train_len") c.max_train_len = value.get<std::size_t>();
      else if (key == "max_infer_len") c.max_infer_len = value.get<std::size_t>();
      else if (key == "adaptive_cutoffs") c.adaptive_cutoffs = value.get<std::vector<std::size_t>>();
      else if (key == "tail_reduction_factor") c.tail_reduction_factor = value.get<std::size_t>();
      else if (key == "layer_norm_eps") c.layer_norm_eps = value.get<double>();
      else throw std::invalid_argument("ModelConfig: unknown key \"" + key + "\"");
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// ALiBi

// Per-head slopes. Power-of-two head counts get 2^(-8i/n), i = 1..n. Other
// counts take the slopes of the nearest lower power of two plus every other
// slope of the next power of two, listed in decreasing order.
inline std::vector<double> alibi_slopes(std::size_t n_heads) {
  if (n_heads == 0) throw std::invalid_argument("alibi_slopes: n_heads must be >= 1");
  auto pow2_slopes = [](std::size_t n) {
    std::vector<double> s(n);
    for (std::size_t i = 1; i <= n; ++i)
      s[i - 1] = std::exp2(-8.0 * static_cast<double>(i) / static_cast<double>(n));
    return s;
  };
  std::size_t p = 1;
  while (p * 2 <= n_heads) p *= 2;
  auto slopes = pow2_slopes(p);
  if (p != n_heads) {
    const auto extra = pow2_slopes(2 * p);
    for (std::size_t i = 0; i < n_heads - p; ++i) slopes.push_back(extra[2 * i]);
    std::sort(slopes.begin(), slopes.end(), std::greater<>());
  }
  return slopes;
}

// Symmetric encoder bias: bias[i][j] = -slope * |i - j|.
template <typename T>
Tensor<T> alibi_bias_matrix(std::size_t seq_len, double slope) {
  if (seq_len == 0) throw std::invalid_argument("alibi_bias_matrix: seq_len must be >= 1");
  std::vector<T> b(seq_len * seq_len);
  for (std::size_t i = 0; i < seq_len; ++i)
    for (std::size_t j = 0; j < seq_len; ++j)
      b[i * seq_len + j] = static_cast<T>(-slope * static_cast<double>(i > j ? i - j : j - i));
  return Tensor<T>({seq_len, seq_len}, std::move(b));
}

// ---------------------------------------------------------------------------
// Parameter blocks

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]; undefined for bias-free projections
  Tensor<T> operator()(const Tensor<T>& x) const {
    return bias.defined() ? add(matmul(x, weight), bias) : matmul(x, weight);
  }
};

template <typename T>
struct MultiProjEmbedding {
  Tensor<T> base_table;                // [V, d]
  std::vector<Tensor<T>> projections;  // K x [d, d]
  std::vector<Tensor<T>> scorers;      // K x [d, 1]
};

template <typename T>
struct EncoderLayer {
  LayerNormParams<T> ln1, ln2;
  Linear<T> wq, wk, wv, wo;
  Linear<T> ffn_in, ffn_out;
};

template <typename T>
struct AdaptiveSoftmaxHead {
  LayerNormParams<T> pre_norm;
  Linear<T> head;                  // [d, cutoff0 + tails]
  std::vector<Tensor<T>> tail_down;  // [d, d / factor^i]
  std::vector<Tensor<T>> tail_out;   // [d / factor^i, cluster size]
  std::vector<std::size_t> cutoffs;
  // rank_of[token id] = position of the token in frequency order.
  std::vector<std::int32_t> rank_of;
  std::vector<std::int32_t> token_at_rank;

  std::size_t vocab_size() const { return cutoffs.back(); }
  std::size_t num_tails() const { return cutoffs.size() - 1; }
  std::size_t head_size() const { return cutoffs[0]; }
};

// Frequency-rank permutation: most frequent first, ties by smaller id.
inline std::vector<std::int32_t> frequency_ranks(const std::vector<std::uint64_t>& counts) {
  std::vector<std::int32_t> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
    return counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)];
  });
  std::vector<std::int32_t> rank(counts.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[static_cast<std::size_t>(order[r])] = static_cast<std::int32_t>(r);
  return rank;
}

// Full log-distribution over the vocabulary in frequency-rank order, [n, V].
template <typename T>
Tensor<T> adaptive_log_probs_ranked(const AdaptiveSoftmaxHead<T>& h, const Tensor<T>& normed) {
  const auto head_lp = log_softmax(h.head(normed), 1);
  std::vector<Tensor<T>> parts{slice(head_lp, 1, 0, h.head_size())};
  for (std::size_t i = 0; i < h.num_tails(); ++i) {
    const std::size_t size = h.cutoffs[i + 1] - h.cutoffs[i];
    const auto gate = slice(head_lp, 1, h.head_size() + i, h.head_size() + i + 1);
    const auto tail_lp = log_softmax(matmul(matmul(normed, h.tail_down[i]), h.tail_out[i]), 1);
    parts.push_back(add(tail_lp, repeat_last(gate, size)));
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 1);
}

// log P(token) for every token id, for each row of `hidden` [n, d].
template <typename T>
Tensor<T> adaptive_log_probs(const AdaptiveSoftmaxHead<T>& h, const Tensor<T>& hidden, T eps) {
  const auto normed = layer_norm(hidden, h.pre_norm.gamma, h.pre_norm.beta, eps);
  const auto ranked = adaptive_log_probs_ranked(h, normed);
  const std::size_t n = hidden.dim(0), v = h.vocab_size();
  std::vector<std::size_t> idx(n * v);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t id = 0; id < v; ++id)
      idx[r * v + id] = r * v + static_cast<std::size_t>(h.rank_of[id]);
  return reshape(take(ranked, idx), {n, v});
}

// Sum over rows of -log P(target). Tail clusters are evaluated only for the
// rows whose target falls in them.
template <typename T>
Tensor<T> adaptive_nll_sum(const AdaptiveSoftmaxHead<T>& h, const Tensor<T>& hidden,
                           const std::vector<TokenId>& targets, T eps) {
  const std::size_t m = targets.size();
  const auto normed = layer_norm(hidden, h.pre_norm.gamma, h.pre_norm.beta, eps);
  const auto head_lp = log_softmax(h.head(normed), 1);
  const std::size_t hw = h.head_size() + h.num_tails();
  std::vector<std::size_t> head_picks;
  std::vector<std::vector<std::int32_t>> tail_rows(h.num_tails());
  std::vector<std::vector<std::size_t>> tail_cols(h.num_tails());
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= h.vocab_size())
      throw std::out_of_range("target token outside vocabulary");
    const auto rank = static_cast<std::size_t>(h.rank_of[static_cast<std::size_t>(targets[r])]);
    if (rank < h.head_size()) {
      head_picks.push_back(r * hw + rank);
      continue;
    }
    std::size_t c = 1;
    while (rank >= h.cutoffs[c]) ++c;
    head_picks.push_back(r * hw + h.head_size() + (c - 1));
    tail_rows[c - 1].push_back(static_cast<std::int32_t>(r));
    tail_cols[c - 1].push_back(rank - h.cutoffs[c - 1]);
  }
  auto total = sum(take(head_lp, head_picks));
  for (std::size_t i = 0; i < h.num_tails(); ++i) {
    if (tail_rows[i].empty()) continue;
    const std::size_t size = h.cutoffs[i + 1] - h.cutoffs[i];
    const auto rows = gather_rows(normed, tail_rows[i]);
    const auto lp = log_softmax(matmul(matmul(rows, h.tail_down[i]), h.tail_out[i]), 1);
    std::vector<std::size_t> picks(tail_rows[i].size());
    for (std::size_t k = 0; k < picks.size(); ++k) picks[k] = k * size + tail_cols[i][k];
    total = add(total, sum(take(lp, picks)));
  }
  return scale(total, T(-1));
}

struct ForwardTrace {
  // attention[layer][head] holds the row-major [n, n] attention weights.
  std::vector<std::vector<std::vector<double>>> attention;
};

template <typename T>
struct EmbeddingOutput {
  Tensor<T> values;   // [n, d]
  Tensor<T> weights;  // [n, K], rows sum to 1
};

template <typename T>
class EncoderModel {
 public:
  EncoderModel() = default;

  // Fresh parameters. `token_counts` (size V) orders the adaptive-softmax
  // clusters; empty means id order.
  static EncoderModel create(ModelConfig cfg, std::uint64_t seed, double init_std = 0.02,
                             const std::vector<std::uint64_t>& token_counts = {}) {
    cfg.finalize();
    EncoderModel m;
    m.cfg_ = cfg;
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.hidden, v = cfg.vocab_size;
    auto normal = [&](Shape s, double sd) { return Tensor<T>::randn(std::move(s), static_cast<T>(sd), rng, true); };
    auto zeros = [](Shape s) { return Tensor<T>::zeros(std::move(s), true); };
    auto ones = [](Shape s) { return Tensor<T>::full(std::move(s), T(1), true); };
    auto ln = [&] { return LayerNormParams<T>{ones({d}), zeros({d})}; };
    auto linear = [&](std::size_t in, std::size_t out) {
      return Linear<T>{normal({in, out}, init_std), zeros({out})};
    };

    m.embedding_.base_table = normal({v, d}, init_std);
    for (std::size_t k = 0; k < cfg.num_projections; ++k) {
      m.embedding_.projections.push_back(normal({d, d}, 1.0 / std::sqrt(static_cast<double>(d))));
      m.embedding_.scorers.push_back(normal({d, 1}, init_std));
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      EncoderLayer<T> layer;
      layer.ln1 = ln();
      layer.wq = linear(d, d);
      // A key bias shifts every logit in a row equally, so it has no effect.
      layer.wk = Linear<T>{normal({d, d}, init_std), Tensor<T>()};
      layer.wv = linear(d, d);
      layer.wo = linear(d, d);
      layer.ln2 = ln();
      layer.ffn_in = linear(d, cfg.ffn_dim);
      layer.ffn_out = linear(cfg.ffn_dim, d);
      m.layers_.push_back(std::move(layer));
    }
    m.final_norm_ = ln();

    auto& h = m.head_;
    h.cutoffs = cfg.adaptive_cutoffs;
    h.pre_norm = ln();
    h.head = linear(d, h.head_size() + h.num_tails());
    // Gate bias ln|cluster| makes a zeroed head exactly uniform over V.
    for (std::size_t i = 0; i < h.num_tails(); ++i) {
      h.head.bias.mutable_data()[h.head_size() + i] =
          static_cast<T>(std::log(static_cast<double>(h.cutoffs[i + 1] - h.cutoffs[i])));
    }
    for (std::size_t i = 0; i < h.num_tails(); ++i) {
      const std::size_t td = cfg.tail_dim(i + 1);
      h.tail_down.push_back(normal({d, td}, init_std));
      h.tail_out.push_back(normal({td, h.cutoffs[i + 1] - h.cutoffs[i]}, init_std));
    }
    if (!token_counts.empty() && token_counts.size() != v) {
      throw std::invalid_argument("token_counts size does not match vocab_size");
    }
    m.set_rank(token_counts.empty() ? identity_rank(v) : frequency_ranks(token_counts));
    m.build_alibi();
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<double>& slopes() const { return slopes_; }
  const MultiProjEmbedding<T>& embedding() const { return embedding_; }
  const AdaptiveSoftmaxHead<T>& mlm_head() const { return head_; }
  AdaptiveSoftmaxHead<T>& mlm_head() { return head_; }
  T eps() const { return static_cast<T>(cfg_.layer_norm_eps); }

  // Every trainable tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> p;
    p.emplace_back("embedding.base_table", embedding_.base_table);
    for (std::size_t k = 0; k < embedding_.projections.size(); ++k) {
      p.emplace_back("embedding.projection." + std::to_string(k), embedding_.projections[k]);
      p.emplace_back("embedding.scorer." + std::to_string(k), embedding_.scorers[k]);
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const std::string pre = "layers." + std::to_string(l) + ".";
      p.emplace_back(pre + "ln1.gamma", L.ln1.gamma);
      p.emplace_back(pre + "ln1.beta", L.ln1.beta);
      for (const auto& [name, lin] : {std::pair{"attn.q", &L.wq}, std::pair{"attn.k", &L.wk},
                                      std::pair{"attn.v", &L.wv}, std::pair{"attn.o", &L.wo}}) {
        p.emplace_back(pre + name + ".weight", lin->weight);
        if (lin->bias.defined()) p.emplace_back(pre + name + ".bias", lin->bias);
      }
      p.emplace_back(pre + "ln2.gamma", L.ln2.gamma);
      p.emplace_back(pre + "ln2.beta", L.ln2.beta);
      p.emplace_back(pre + "ffn.in.weight", L.ffn_in.weight);
      p.emplace_back(pre + "ffn.in.bias", L.ffn_in.bias);
      p.emplace_back(pre + "ffn.out.weight", L.ffn_out.weight);
      p.emplace_back(pre + "ffn.out.bias", L.ffn_out.bias);
    }
    p.emplace_back("final_norm.gamma", final_norm_.gamma);
    p.emplace_back("final_norm.beta", final_norm_.beta);
    p.emplace_back("mlm_head.pre_norm.gamma", head_.pre_norm.gamma);
    p.emplace_back("mlm_head.pre_norm.beta", head_.pre_norm.beta);
    p.emplace_back("mlm_head.head.weight", head_.head.weight);
    p.emplace_back("mlm_head.head.bias", head_.head.bias);
    for (std::size_t i = 0; i < head_.tail_down.size(); ++i) {
      p.emplace_back("mlm_head.tail." + std::to_string(i) + ".down", head_.tail_down[i]);
      p.emplace_back("mlm_head.tail." + std::to_string(i) + ".out", head_.tail_out[i]);
    }
    return p;
  }

  std::vector<Tensor<T>> parameter_tensors() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (auto& t : parameter_tensors()) t.zero_grad();
  }

  EmbeddingOutput<T> embed_tokens(const std::vector<TokenId>& ids) const {
    for (TokenId id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
        throw std::out_of_range("token id " + std::to_string(id) + " >= vocab size " +
                                std::to_string(cfg_.vocab_size));
    }
    const auto e = gather_rows(embedding_.base_table, ids);
    const std::size_t k_count = embedding_.projections.size();
    std::vector<Tensor<T>> hs, scores;
    for (std::size_t k = 0; k < k_count; ++k) {
      hs.push_back(matmul(e, embedding_.projections[k]));
      scores.push_back(matmul(hs.back(), embedding_.scorers[k]));
    }
    const auto weights = softmax(k_count == 1 ? scores[0] : concat(scores, 1), 1);
    Tensor<T> out;
    for (std::size_t k = 0; k < k_count; ++k) {
      const auto a = repeat_last(slice(weights, 1, k, k + 1), cfg_.hidden);
      const auto term = mul(hs[k], a);
      out = k == 0 ? term : add(out, term);
    }
    return {out, weights};
  }

  // Hidden states [n, d]. Keys with attention_mask == 0 are never attended
  // to. An empty mask means all ones.
  Tensor<T> forward(const std::vector<TokenId>& ids, std::vector<std::uint8_t> attention_mask = {},
                    ForwardTrace* trace = nullptr) const {
    const std::size_t n = ids.size();
    if (n == 0) throw std::invalid_argument("encoder forward on empty sequence");
    if (n > cfg_.max_infer_len)
      throw std::length_error("sequence length " + std::to_string(n) + " exceeds max_infer_len " +
                              std::to_string(cfg_.max_infer_len));
    if (attention_mask.empty()) attention_mask.assign(n, 1);
    if (attention_mask.size() != n) throw std::invalid_argument("attention_mask length mismatch");

    const std::size_t d = cfg_.hidden, nh = cfg_.heads, dh = d / nh;
    const T inv_sqrt = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));
    std::vector<Tensor<T>> biases;
    for (std::size_t hd = 0; hd < nh; ++hd) {
      std::vector<T> b(n * n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          b[i * n + j] = attention_mask[j]
                             ? static_cast<T>(-slopes_[hd] * static_cast<double>(i > j ? i - j : j - i))
                             : -std::numeric_limits<T>::infinity();
      biases.emplace_back(Shape{n, n}, std::move(b));
    }
    if (trace) trace->attention.assign(layers_.size(), {});

    auto x = embed_tokens(ids).values;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const auto h = layer_norm(x, L.ln1.gamma, L.ln1.beta, eps());
      const auto q = L.wq(h), k = L.wk(h), v = L.wv(h);
      std::vector<Tensor<T>> heads;
      for (std::size_t hd = 0; hd < nh; ++hd) {
        const auto qh = slice(q, 1, hd * dh, (hd + 1) * dh);
        const auto kh = slice(k, 1, hd * dh, (hd + 1) * dh);
        const auto vh = slice(v, 1, hd * dh, (hd + 1) * dh);
        const auto probs = softmax(add(scale(matmul_nt(qh, kh), inv_sqrt), biases[hd]), 1);
        if (trace) trace->attention[l].emplace_back(probs.data().begin(), probs.data().end());
        heads.push_back(matmul(probs, vh));
      }
      x = add(x, L.wo(nh == 1 ? heads[0] : concat(heads, 1)));
      const auto h2 = layer_norm(x, L.ln2.gamma, L.ln2.beta, eps());
      x = add(x, L.ffn_out(gelu(L.ffn_in(h2))));
    }
    return layer_norm(x, final_norm_.gamma, final_norm_.beta, eps());
  }

  // Mean of -log P(original token) over the masked positions.
  Tensor<T> mlm_loss(const std::vector<TokenId>& corrupted_ids,
                     const std::vector<std::size_t>& mask_positions,
                     const std::vector<TokenId>& original_ids,
                     const std::vector<std::uint8_t>& attention_mask = {}) const {
    if (mask_positions.empty()) throw std::invalid_argument("mlm_loss: empty mask set");
    return scale(mlm_loss_sum(corrupted_ids, mask_positions, original_ids, attention_mask),
                 T(1) / static_cast<T>(mask_positions.size()));
  }

  // Summed (not averaged) masked-token NLL; lets callers average over a
  // whole batch.
  Tensor<T> mlm_loss_sum(const std::vector<TokenId>& corrupted_ids,
                         const std::vector<std::size_t>& mask_positions,
                         const std::vector<TokenId>& original_ids,
                         const std::vector<std::uint8_t>& attention_mask = {}) const {
    if (mask_positions.empty()) throw std::invalid_argument("mlm_loss: empty mask set");
    if (original_ids.size() != corrupted_ids.size())
      throw std::invalid_argument("mlm_loss: original/corrupted length mismatch");
    const auto hidden = forward(corrupted_ids, attention_mask);
    std::vector<std::int32_t> rows;
    std::vector<TokenId> targets;
    for (std::size_t p : mask_positions) {
      if (p >= corrupted_ids.size()) throw std::out_of_range("mask position out of range");
      rows.push_back(static_cast<std::int32_t>(p));
      targets.push_back(original_ids[p]);
    }
    return adaptive_nll_sum(head_, gather_rows(hidden, rows), targets, eps());
  }

  void save(const std::filesystem::path& dir, const Vocabulary& vocab) const {
    CheckpointWriter w;
    for (const auto& [name, t] : parameters()) w.add(name, t);
    w.add<std::int32_t>("mlm_head.rank", {head_.rank_of.size()}, head_.rank_of);
    w.write(dir);
    vocab.save(dir / "vocab.txt");
    json sidecar{{"format_version", kModelFormatVersion},
                 {"config", cfg_.to_json()},
                 {"vocab_hash", vocab.hash()}};
    write_file_atomic(dir / "config.json", sidecar.dump(2) + "\n");
  }

  static EncoderModel load(const std::filesystem::path& dir) {
    const json sidecar = json::parse(read_file(dir / "config.json"));
    if (sidecar.value("format_version", 0) != kModelFormatVersion)
      throw IoError("unsupported model format in " + dir.string());
    ModelConfig cfg = ModelConfig::from_json(sidecar.at("config"));
    auto m = create(cfg, 0);
    const auto arrays = read_checkpoint_arrays(dir);
    for (auto& [name, t] : m.parameters()) {
      auto it = arrays.find(name);
      if (it == arrays.end()) throw IoError("checkpoint lacks tensor " + name);
      if (it->second.shape != t.shape())
        throw IoError("shape mismatch for " + name + ": " + shape_str(it->second.shape) +
                      " vs " + shape_str(t.shape()));
      auto values = it->second.template as<T>();
      std::copy(values.begin(), values.end(), t.mutable_data().begin());
    }
    auto it = arrays.find("mlm_head.rank");
    if (it == arrays.end()) throw IoError("checkpoint lacks mlm_head.rank");
    m.set_rank(it->second.template as<std::int32_t>());
    return m;
  }

  template <typename U>
  EncoderModel<U> cast() const {
    auto out = EncoderModel<U>::create(cfg_, 0);
    auto src = parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i)
      std::copy(src[i].second.data().begin(), src[i].second.data().end(), dst[i].second.mutable_data().begin());
    out.set_rank(head_.rank_of);
    return out;
  }

  void set_rank(std::vector<std::int32_t> rank) {
    const std::size_t v = cfg_.vocab_size;
    if (rank.size() != v) throw std::invalid_argument("rank permutation has wrong size");
    std::vector<std::int32_t> inverse(v, -1);
    for (std::size_t id = 0; id < v; ++id) {
      const auto r = rank[id];
      if (r < 0 || static_cast<std::size_t>(r) >= v || inverse[static_cast<std::size_t>(r)] != -1)
        throw std::invalid_argument("rank is not a permutation");
      inverse[static_cast<std::size_t>(r)] = static_cast<std::int32_t>(id);
    }
    head_.rank_of = std::move(rank);
    head_.token_at_rank = std::move(inverse);
  }

 private:
  static std::vector<std::int32_t> identity_rank(std::size_t v) {
    std::vector<std::int32_t> r(v);
    std::iota(r.begin(), r.end(), 0);
    return r;
  }

  void build_alibi() { slopes_ = alibi_slopes(cfg_.heads); }

  ModelConfig cfg_;
  MultiProjEmbedding<T> embedding_;
  std::vector<EncoderLayer<T>> layers_;
  LayerNormParams<T> final_norm_;
  AdaptiveSoftmaxHead<T> head_;
  std::vector<double> slopes_;
};

template <typename T>
Tensor<T> mean_pool(const Tensor<T>& hidden, const std::vector<std::uint8_t>& attention_mask) {
  const std::size_t n = hidden.dim(0);
  if (attention_mask.size() != n) throw std::invalid_argument("mean_pool: mask length mismatch");
  const auto count = static_cast<std::size_t>(std::count_if(
      attention_mask.begin(), attention_mask.end(), [](std::uint8_t m) { return m != 0; }));
  if (count == 0) throw std::invalid_argument("mean_pool: all positions masked");
  std::vector<T> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = attention_mask[i] ? T(1) / static_cast<T>(count) : T(0);
  return reshape(matmul(Tensor<T>({1, n}, std::move(w)), hidden), {hidden.dim(1)});
}

// Unit-norm sentence embedding [1, d] for pre-tokenised ids; differentiable.
template <typename T>
Tensor<T> embed_ids(const EncoderModel<T>& model, std::vector<TokenId> ids, std::size_t max_len) {
  if (ids.empty()) throw std::invalid_argument("embed: text produced no tokens");
  if (ids.size() > max_len) ids.resize(max_len);
  const std::vector<std::uint8_t> mask(ids.size(), 1);
  const auto pooled = mean_pool(model.forward(ids, mask), mask);
  return l2_normalize(reshape(pooled, {1, pooled.numel()}), 1);
}

template <typename T>
std::vector<T> embed_text(const EncoderModel<T>& model, const TokenizerModel& tokenizer,
                          std::string_view text) {
  NoGradGuard no_grad;
  const auto e = embed_ids(model, tokenizer.encode(text).ids, model.config().max_infer_len);
  return std::vector<T>(e.data().begin(), e.data().end());
}

// Unigram counts of every id over a set of sequences, sized to the vocabulary.
inline std::vector<std::uint64_t> token_counts(const std::vector<std::vector<TokenId>>& seqs,
                                               std::size_t vocab_size) {
  std::vector<std::uint64_t> counts(vocab_size, 0);
  for (const auto& s : seqs)
    for (TokenId id : s)
      if (id >= 0 && static_cast<std::size_t>(id) < vocab_size) ++counts[static_cast<std::size_t>(id)];
  return counts;
}

// Loaded checkpoint plus its tokenizer.
struct LoadedModel {
  EncoderModel<float> model;
  TokenizerModel tokenizer;
  std::string checkpoint_hash;
  std::string tokenizer_hash;
};

inline LoadedModel load_model(const std::filesystem::path& dir) {
  auto vocab = Vocabulary::load(dir / "vocab.txt");
  const json sidecar = json::parse(read_file(dir / "config.json"));
  if (sidecar.value("vocab_hash", std::string()) != vocab.hash())
    throw IoError("vocab.txt in " + dir.string() + " does not match the checkpoint's vocab hash");
  auto model = EncoderModel<float>::load(dir);
  if (model.config().vocab_size != vocab.size())
    throw IoError("checkpoint vocab_size differs from vocab.txt");
  const std::string tok_hash = vocab.hash();
  return LoadedModel{std::move(model), TokenizerModel(std::move(vocab)),
                     hex64(fnv1a64(read_file(dir / "weights.bin"))), tok_hash};
}

}  // namespace medeir
