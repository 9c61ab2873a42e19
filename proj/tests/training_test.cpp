#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "medeir/grad_check.hpp"
#include "medeir/training.hpp"

namespace medeir {
namespace {

// [CLS] w w w [SEP] with word lengths drawn from 1..3 tokens.
EncodedSequence random_sequence(std::mt19937_64& rng, std::size_t words) {
  EncodedSequence s;
  s.ids.push_back(2);
  s.special_positions.push_back(0);
  std::uniform_int_distribution<int> len(1, 3);
  for (std::size_t w = 0; w < words; ++w) {
    const std::size_t b = s.ids.size();
    const int n = len(rng);
    for (int i = 0; i < n; ++i) s.ids.push_back(10 + i);
    s.word_groups.push_back({b, s.ids.size()});
  }
  s.special_positions.push_back(s.ids.size());
  s.ids.push_back(3);
  s.attention_mask.assign(s.ids.size(), 1);
  return s;
}

EncodedSequence single_token_words(std::size_t n) {
  EncodedSequence s;
  for (std::size_t i = 0; i < n; ++i) {
    s.ids.push_back(static_cast<TokenId>(10 + i));
    s.word_groups.push_back({i, i + 1});
  }
  s.attention_mask.assign(n, 1);
  return s;
}

TEST(MaskingTest, RateZeroAndOne) {
  std::mt19937_64 rng(1);
  const auto seq = random_sequence(rng, 8);
  EXPECT_TRUE(select_whole_word_mask(seq, 0.0, rng).empty());
  const auto all = select_whole_word_mask(seq, 1.0, rng);
  EXPECT_EQ(all.size(), seq.ids.size() - 2);
  for (std::size_t p : all) EXPECT_TRUE(p != 0 && p != seq.ids.size() - 1);
}

TEST(MaskingTest, TenSingleTokenWords) {
  const auto seq = single_token_words(10);
  std::mt19937_64 a(77), b(77);
  const auto pa = select_whole_word_mask(seq, 0.3, a);
  const auto pb = select_whole_word_mask(seq, 0.3, b);
  EXPECT_EQ(pa.size(), 3u);
  EXPECT_EQ(pa, pb);
}

TEST(MaskingTest, RateAndGroupIntegrityOverManySequences) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> words(3, 40);
  double total_rate = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto seq = random_sequence(rng, words(rng));
    const auto pos = select_whole_word_mask(seq, 0.3, rng);
    const std::set<std::size_t> chosen(pos.begin(), pos.end());
    for (std::size_t sp : seq.special_positions) EXPECT_EQ(chosen.count(sp), 0u);
    for (const auto& g : seq.word_groups) {
      std::size_t in = 0;
      for (std::size_t p = g.begin; p < g.end; ++p) in += chosen.count(p);
      EXPECT_TRUE(in == 0 || in == g.end - g.begin);
    }
    total_rate += static_cast<double>(pos.size()) / static_cast<double>(seq.ids.size() - 2);
  }
  const double mean = total_rate / 1000.0;
  EXPECT_GE(mean, 0.28);
  EXPECT_LE(mean, 0.34);
}

TEST(MaskingTest, ApplyMask) {
  std::mt19937_64 rng(3);
  const auto seq = random_sequence(rng, 5);
  const auto none = apply_mask(seq, {}, 4);
  EXPECT_EQ(none.corrupted, seq.ids);
  std::vector<std::size_t> all;
  for (std::size_t i = 1; i + 1 < seq.ids.size(); ++i) all.push_back(i);
  const auto ex = apply_mask(seq, all, 4);
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const bool masked = i != 0 && i + 1 != seq.ids.size();
    EXPECT_EQ(ex.corrupted[i], masked ? 4 : seq.ids[i]);
  }
  EXPECT_EQ(ex.targets, seq.ids);
  EXPECT_THROW(apply_mask(seq, {seq.ids.size()}, 4), std::out_of_range);
  EXPECT_THROW(apply_mask(seq, {0}, 4), std::invalid_argument);
}

TEST(MaskingTest, MixedCorruptionSplit) {
  const Vocabulary vocab = Vocabulary::with_specials({"a", "b", "c", "d", "e", "f"});
  const auto seq = single_token_words(2000);
  EncodedSequence s = seq;
  for (auto& id : s.ids) id = 5 + (id % 6);
  std::vector<std::size_t> pos(2000);
  std::iota(pos.begin(), pos.end(), 0);
  std::mt19937_64 rng(4);
  const auto ex = apply_mask(s, pos, 4, {0.8, 0.1}, &rng, &vocab);
  std::size_t masked = 0, kept = 0;
  for (std::size_t i = 0; i < 2000; ++i) {
    if (ex.corrupted[i] == 4) ++masked;
    else if (ex.corrupted[i] == s.ids[i]) ++kept;
    EXPECT_FALSE(vocab.is_special(ex.corrupted[i]) && ex.corrupted[i] != 4);
  }
  EXPECT_NEAR(masked / 2000.0, 0.8, 0.03);
  EXPECT_GT(kept, 100u);  // 10% kept plus random draws that hit the original
}

Tensor<double> rows(std::size_t b, std::size_t d, std::vector<double> v, bool rg = false) {
  return Tensor<double>({b, d}, std::move(v), rg);
}

TEST(InfoNceTest, Anchors) {
  const auto one = rows(1, 2, {0.6, 0.8});
  EXPECT_EQ(info_nce_loss(one, one, 0.05).item(), 0.0);

  std::vector<double> same;
  for (int i = 0; i < 4; ++i) same.insert(same.end(), {0.6, 0.8});
  const auto q4 = rows(4, 2, same);
  EXPECT_NEAR(info_nce_loss(q4, q4, 0.05).item(), std::log(4.0), 1e-12);

  const auto eye = rows(2, 2, {1, 0, 0, 1});
  EXPECT_NEAR(info_nce_loss(eye, eye, 1.0).item(), std::log1p(std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(info_nce_loss(eye, eye, 1.0, true).item(), std::log1p(std::exp(-1.0)), 1e-12);
}

TEST(InfoNceTest, Errors) {
  const auto a = rows(2, 2, {1, 0, 0, 1});
  EXPECT_THROW(info_nce_loss(a, a, 0.0), std::invalid_argument);
  EXPECT_THROW(info_nce_loss(a, rows(1, 2, {1, 0}), 0.1), std::invalid_argument);
  EXPECT_THROW(info_nce_loss(Tensor<double>::zeros({0, 2}), Tensor<double>::zeros({0, 2}), 0.1),
               std::invalid_argument);
}

TEST(InfoNceTest, NonNegativeAndGradCheck) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = l2_normalize(Tensor<double>::randn({5, 4}, 1.0, rng), 1);
    const auto p = l2_normalize(Tensor<double>::randn({5, 4}, 1.0, rng), 1);
    EXPECT_GE(info_nce_loss(q, p, 0.1).item(), 0.0);
  }
  auto q = Tensor<double>::randn({4, 3}, 1.0, rng, true);
  auto p = Tensor<double>::randn({4, 3}, 1.0, rng, true);
  const auto f = [&] { return info_nce_loss(l2_normalize(q, 1), l2_normalize(p, 1), 0.2, false); };
  EXPECT_LT(grad_check(f, {q, p}, 1e-5).max_relative_error, 1e-6);
  const auto fs = [&] { return info_nce_loss(l2_normalize(q, 1), l2_normalize(p, 1), 0.2, true); };
  EXPECT_LT(grad_check(fs, {q, p}, 1e-5).max_relative_error, 1e-6);
}

TEST(HardNegativeTest, ReducesToInfoNceWithoutNegatives) {
  std::mt19937_64 rng(9);
  const auto q = l2_normalize(Tensor<double>::randn({3, 4}, 1.0, rng), 1);
  const auto p = l2_normalize(Tensor<double>::randn({3, 4}, 1.0, rng), 1);
  const std::vector<Tensor<double>> none(3);
  EXPECT_EQ(hard_negative_loss(q, p, none, 0.05).item(), info_nce_loss(q, p, 0.05).item());
}

TEST(HardNegativeTest, DuplicateOfPositiveAddsLn2) {
  const auto q = rows(1, 2, {0.6, 0.8});
  const auto p = rows(1, 2, {1.0, 0.0});
  const double base = hard_negative_loss(q, p, {Tensor<double>()}, 0.05).item();
  const double with = hard_negative_loss(q, p, {p}, 0.05).item();
  EXPECT_EQ(base, 0.0);
  EXPECT_NEAR(with - base, std::log(2.0), 1e-12);
  EXPECT_NEAR(hard_negative_loss(q, p, {p}, 0.05, false).item(), std::log(2.0), 1e-12);
}

TEST(HardNegativeTest, GradCheck) {
  std::mt19937_64 rng(10);
  auto q = Tensor<double>::randn({3, 4}, 1.0, rng, true);
  auto p = Tensor<double>::randn({3, 4}, 1.0, rng, true);
  auto n0 = Tensor<double>::randn({2, 4}, 1.0, rng, true);
  auto n2 = Tensor<double>::randn({1, 4}, 1.0, rng, true);
  for (bool in_batch : {true, false}) {
    const auto f = [&] {
      return hard_negative_loss(l2_normalize(q, 1), l2_normalize(p, 1),
                                {l2_normalize(n0, 1), Tensor<double>(), l2_normalize(n2, 1)}, 0.1, in_batch);
    };
    EXPECT_LT(grad_check(f, {q, p, n0, n2}, 1e-4).max_relative_error, 1e-4);
  }
}

TEST(AdamWTest, SingleStepMatchesHandDerivation) {
  auto w = Tensor<double>::full({1}, 1.0, true);
  w.mutable_grad()[0] = 0.5;
  OptimizerState<double> st({w}, {0.9, 0.98, 1e-8, 0.01});
  adamw_step({w}, st, 0.1);
  // m_hat = 0.5, v_hat = 0.25, so the Adam direction is 0.5 / (0.5 + 1e-8).
  const double expect = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0);
  EXPECT_NEAR(w.at(0), expect, 1e-15);
  EXPECT_NEAR(w.at(0), 0.899000002, 1e-9);
  EXPECT_EQ(st.t, 1u);
}

TEST(AdamWTest, ZeroGradientNoDecayLeavesParams) {
  std::mt19937_64 rng(1);
  auto w = Tensor<double>::randn({3, 2}, 1.0, rng, true);
  const std::vector<double> before(w.data().begin(), w.data().end());
  w.mutable_grad();
  OptimizerState<double> st({w}, {0.9, 0.98, 1e-8, 0.0});
  adamw_step({w}, st, 0.1);
  EXPECT_EQ(std::vector<double>(w.data().begin(), w.data().end()), before);
}

TEST(AdamWTest, NonFiniteGradientRejected) {
  auto a = Tensor<double>::full({2}, 1.0, true);
  auto b = Tensor<double>::full({2}, 1.0, true);
  a.mutable_grad()[0] = 1.0;
  b.mutable_grad()[1] = std::numeric_limits<double>::quiet_NaN();
  OptimizerState<double> st({a, b}, {});
  EXPECT_THROW(adamw_step({a, b}, st, 0.1), std::domain_error);
  EXPECT_EQ(a.at(0), 1.0);
  EXPECT_EQ(st.t, 0u);
  EXPECT_EQ(st.m[0][0], 0.0);
}

TEST(ScheduleTest, Anchors) {
  const ScheduleConfig s{100, 0.1};
  EXPECT_EQ(lr_at(s, 2e-4, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 2e-4, 10), 2e-4);
  EXPECT_DOUBLE_EQ(lr_at(s, 2e-4, 55), 1e-4);
  EXPECT_EQ(lr_at(s, 2e-4, 100), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 1.0, 5), 0.5);
  EXPECT_THROW(lr_at(s, 1.0, 101), std::out_of_range);
  EXPECT_THROW(lr_at({100, 0.0}, 1.0, 0), std::invalid_argument);
}

TEST(ScheduleTest, PiecewiseLinearWithPeakAtWarmupEnd) {
  for (std::size_t total : {7u, 50u, 333u}) {
    for (double frac : {0.06, 0.1, 0.5}) {
      const ScheduleConfig s{total, frac};
      const std::size_t w = s.warmup_steps();
      double best = -1.0;
      std::size_t arg = 0;
      for (std::size_t t = 0; t <= total; ++t) {
        const double lr = lr_at(s, 1.0, t);
        EXPECT_GE(lr, 0.0);
        EXPECT_LE(lr, 1.0);
        if (lr > best) best = lr, arg = t;
        if (t > 0) EXPECT_LE(std::abs(lr - lr_at(s, 1.0, t - 1)), 1.0 / std::max<double>(1.0, static_cast<double>(std::min(w, total - w))) + 1e-12);
      }
      EXPECT_EQ(arg, w);
      EXPECT_EQ(lr_at(s, 1.0, total), 0.0);
    }
  }
}

ModelConfig tiny_config(std::size_t v) {
  ModelConfig c;
  c.vocab_size = v;
  c.hidden = 8;
  c.layers = 1;
  c.heads = 2;
  c.ffn_dim = 16;
  c.num_projections = 2;
  c.max_train_len = 32;
  c.max_infer_len = 64;
  return c;
}

std::vector<double> snapshot(const EncoderModel<double>& m) {
  std::vector<double> out;
  for (const auto& t : m.parameter_tensors()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

TEST(GradAccumTest, TwoHalfBatchesEqualOneFullBatch) {
  const auto base = EncoderModel<double>::create(tiny_config(20), 5, 0.3);
  struct Item {
    std::vector<TokenId> ids, corrupt;
    std::vector<std::size_t> pos;
  };
  const std::vector<Item> items{{{5, 6, 7, 8}, {5, 4, 7, 8}, {1}},
                                {{9, 10, 11}, {4, 10, 4}, {0, 2}},
                                {{12, 13, 14, 15, 16}, {12, 13, 4, 15, 16}, {2}},
                                {{17, 18}, {17, 4}, {1}}};
  auto item_loss = [&](const EncoderModel<double>& m, std::size_t i) {
    return m.mlm_loss(items[i].corrupt, items[i].pos, items[i].ids);
  };

  auto full = base.cast<double>();
  auto acc = base.cast<double>();
  OptimizerState<double> s_full(full.parameter_tensors(), {});
  OptimizerState<double> s_acc(acc.parameter_tensors(), {});

  for (int step = 0; step < 3; ++step) {
    full.zero_grad();
    auto l = item_loss(full, 0);
    for (std::size_t i = 1; i < 4; ++i) l = add(l, item_loss(full, i));
    scale(l, 0.25).backward();
    adamw_step(full.parameter_tensors(), s_full, 1e-2);

    acc.zero_grad();
    for (std::size_t half = 0; half < 2; ++half) {
      const auto micro = scale(add(item_loss(acc, 2 * half), item_loss(acc, 2 * half + 1)), 0.5);
      scale(micro, 0.5).backward();
    }
    adamw_step(acc.parameter_tensors(), s_acc, 1e-2);
  }
  const auto a = snapshot(full), b = snapshot(acc);
  ASSERT_EQ(a.size(), b.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  EXPECT_LT(worst, 1e-12);
}

TEST(SamplerTest, SingleSourceAndEpochCoverage) {
  SingleSourceSampler s({12}, 4, 3);
  std::multiset<std::size_t> seen;
  for (int i = 0; i < 3; ++i) {
    const auto b = s.next();
    EXPECT_EQ(b.source, 0u);
    EXPECT_EQ(b.epoch, 0u);
    seen.insert(b.indices.begin(), b.indices.end());
  }
  EXPECT_EQ(seen.size(), 12u);
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 12u);
  EXPECT_EQ(s.next().epoch, 1u);
}

TEST(SamplerTest, TwoEqualSourcesBalanced) {
  SingleSourceSampler s({400, 400}, 4, 11);
  std::size_t counts[2] = {0, 0};
  for (int i = 0; i < 100; ++i) ++counts[s.next().source];
  EXPECT_GE(counts[0], 40u);
  EXPECT_LE(counts[0], 60u);
}

TEST(SamplerTest, SmallSourceRejected) {
  EXPECT_THROW(SingleSourceSampler({8, 3}, 4, 0), std::invalid_argument);
  EXPECT_THROW(SingleSourceSampler({}, 4, 0), std::invalid_argument);
}

TEST(StageConfigTest, JsonAndValidation) {
  const auto d = StageConfig::defaults(StageKind::kHardNegative);
  EXPECT_EQ(d.global_batch, 1024u);
  EXPECT_EQ(d.grad_accum, 2u);
  EXPECT_DOUBLE_EQ(d.warmup_fraction, 0.06);
  const auto back = StageConfig::from_json(d.to_json());
  EXPECT_EQ(back.to_json(), d.to_json());
  EXPECT_THROW(StageConfig::from_json(json{{"stage", "mlm"}, {"batch", 4}}), std::invalid_argument);
  EXPECT_THROW(StageConfig::from_json(json{{"stage", "mlm"}, {"global_batch", 5}, {"grad_accum", 2}}),
               std::invalid_argument);
  EXPECT_THROW(StageConfig::from_json(json{{"stage", "pretrain"}}), std::invalid_argument);
}

struct ToyWorld {
  Vocabulary vocab;
  TokenizerModel tok;
  ToyWorld()
      : vocab(Vocabulary::with_specials({"the", "drug", "dose", "pain", "fever", "heart", "rate", "blood",
                                         "sugar", "low", "high", "aspirin", "insulin", "##s", "##ing"})),
        tok(vocab) {}
};

TEST(RunStageTest, MlmFirstLossNearLnVAndDeterministic) {
  ToyWorld w;
  std::vector<json> rows;
  const char* texts[] = {"the drug dose", "heart rate high", "blood sugar low", "aspirin pain fever",
                         "insulin dosing blood sugar", "the heart rate drugs", "fever pain high", "low dose aspirin"};
  for (const char* t : texts) rows.push_back(json{{"text", t}});
  StageConfig cfg = StageConfig::defaults(StageKind::kMlm);
  cfg.global_batch = 4;
  cfg.grad_accum = 2;
  cfg.total_steps = 6;
  cfg.lr = 1e-3;
  cfg.seed = 5;
  const auto data = mlm_data_from_rows(rows, w.tok, cfg.max_len);

  auto m1 = EncoderModel<float>::create(tiny_config(w.vocab.size()), 1);
  auto m2 = EncoderModel<float>::create(tiny_config(w.vocab.size()), 1);
  const auto r1 = run_stage(m1, w.tok, data, cfg);
  const auto r2 = run_stage(m2, w.tok, data, cfg);
  ASSERT_EQ(r1.records.size(), 6u);
  EXPECT_NEAR(r1.records[0].loss / std::log(static_cast<double>(w.vocab.size())), 1.0, 0.05);
  EXPECT_EQ(r1.records[0].lr, 0.0);
  EXPECT_EQ(r1.loss_log_jsonl(), r2.loss_log_jsonl());
  const auto p1 = m1.parameter_tensors(), p2 = m2.parameter_tensors();
  for (std::size_t i = 0; i < p1.size(); ++i)
    EXPECT_TRUE(std::equal(p1[i].data().begin(), p1[i].data().end(), p2[i].data().begin()));
  const auto rec = json::parse(r1.loss_log_jsonl().substr(0, r1.loss_log_jsonl().find('\n')));
  for (const char* k : {"step", "stage", "lr", "loss", "tokens_seen"}) EXPECT_TRUE(rec.contains(k)) << k;
  EXPECT_GT(r1.records.back().tokens_seen, r1.records.front().tokens_seen);
}

TEST(RunStageTest, ExhaustionDropsPartialAccumulation) {
  ToyWorld w;
  std::vector<json> rows;
  for (int i = 0; i < 6; ++i) rows.push_back(json{{"text", "the drug dose pain"}});
  StageConfig cfg = StageConfig::defaults(StageKind::kMlm);
  cfg.global_batch = 4;
  cfg.grad_accum = 2;
  cfg.total_steps = 10;
  cfg.max_epochs = 1;
  const auto data = mlm_data_from_rows(rows, w.tok, cfg.max_len);
  auto m = EncoderModel<float>::create(tiny_config(w.vocab.size()), 1);
  const auto r = run_stage(m, w.tok, data, cfg);
  // 6 items / micro-batch 2 = 3 micro-batches: one full step, then one dropped.
  EXPECT_EQ(r.steps_completed, 1u);
  EXPECT_EQ(r.dropped_micro_batches, 1u);
  ASSERT_EQ(r.log.size(), 1u);
}

TEST(RunStageTest, ContrastiveUniformStartAndLossDrops) {
  ToyWorld w;
  std::vector<json> rows;
  const std::vector<std::pair<std::string, std::string>> pairs{
      {"heart rate", "high heart rate"}, {"blood sugar", "low blood sugar"}, {"aspirin pain", "aspirin for pain"},
      {"insulin", "insulin dose"}};
  for (const auto& [q, p] : pairs) rows.push_back(json{{"query", q}, {"positive", p}, {"source_id", "toy"}});
  StageConfig cfg = StageConfig::defaults(StageKind::kContrastive);
  cfg.global_batch = 4;
  cfg.grad_accum = 1;
  cfg.total_steps = 60;
  cfg.lr = 5e-3;
  cfg.temperature = 100.0;  // near-uniform logits at the start
  cfg.seed = 2;
  const auto data = pair_data_from_rows(rows, w.tok, cfg.max_len, false, 0);
  auto m = EncoderModel<float>::create(tiny_config(w.vocab.size()), 3);
  const auto r = run_stage(m, w.tok, data, cfg);
  // Cosines lie in [-1, 1], so logits differ by at most 2/tau = 0.02.
  EXPECT_NEAR(r.records[0].loss, std::log(4.0), 1e-2);

  cfg.temperature = 0.05;
  auto m2 = EncoderModel<float>::create(tiny_config(w.vocab.size()), 3);
  const auto r2 = run_stage(m2, w.tok, data, cfg);
  EXPECT_LT(r2.records.back().loss, 0.1 * r2.records.front().loss);
}

TEST(RunStageTest, HardNegativeStageRuns) {
  ToyWorld w;
  std::vector<json> rows;
  rows.push_back(json{{"query", "heart rate"}, {"positive", "high heart rate"}, {"negatives", {"blood sugar"}}, {"source_id", "a"}});
  rows.push_back(json{{"query", "insulin"}, {"positive", "insulin dose"}, {"negatives", json::array()}, {"source_id", "a"}});
  StageConfig cfg = StageConfig::defaults(StageKind::kHardNegative);
  cfg.global_batch = 2;
  cfg.grad_accum = 1;
  cfg.total_steps = 3;
  const auto data = pair_data_from_rows(rows, w.tok, cfg.max_len, true, 0);
  auto m = EncoderModel<float>::create(tiny_config(w.vocab.size()), 3);
  const auto r = run_stage(m, w.tok, data, cfg);
  EXPECT_EQ(r.steps_completed, 3u);
  for (const auto& rec : r.records) EXPECT_TRUE(std::isfinite(rec.loss));
}

TEST(RunStageTest, VocabMismatchRejected) {
  ToyWorld w;
  const auto data = mlm_data_from_rows({json{{"text", "the drug"}}}, w.tok, 16);
  auto m = EncoderModel<float>::create(tiny_config(w.vocab.size() + 1), 1);
  auto cfg = StageConfig::defaults(StageKind::kMlm);
  cfg.global_batch = 1;
  cfg.grad_accum = 1;
  EXPECT_THROW(run_stage(m, w.tok, data, cfg), std::invalid_argument);
}

}  // namespace
}  // namespace medeir
