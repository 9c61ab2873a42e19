#pragma once

#include <unistd.h>

#include <CLI11.hpp>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "medeir/common.hpp"
#include "medeir/datapipe.hpp"
#include "medeir/eval.hpp"
#include "medeir/model.hpp"
#include "medeir/tokenizer.hpp"
#include "medeir/training.hpp"

namespace medeir::cli {

namespace fs = std::filesystem;

inline constexpr int kConfigVersion = 1;

struct GlobalOptions {
  unsigned threads = 1;
  bool deterministic = false;

  unsigned workers() const { return deterministic ? 1u : std::max(1u, threads); }
};

// Parses a JSON config file, checks its version and strips that key.
inline json load_config_file(const fs::path& path) {
  json j = json::parse(read_file(path));
  if (!j.is_object()) throw std::invalid_argument(path.string() + ": config must be a JSON object");
  if (!j.contains("version")) throw std::invalid_argument(path.string() + ": missing \"version\"");
  if (j.at("version") != kConfigVersion)
    throw std::invalid_argument(path.string() + ": unsupported config version " + j.at("version").dump());
  j.erase("version");
  return j;
}

// Declarative run description: seed, paths, model shape and per-stage settings.
struct RunConfig {
  std::uint64_t seed = 0;
  std::map<std::string, fs::path> paths;  // vocab, data, checkpoints
  std::optional<ModelConfig> model;
  std::map<std::string, StageConfig> stages;

  // Relative paths resolve against `base_dir`. The run seed fills every
  // stage that does not set its own.
  static RunConfig from_json(const json& j, const fs::path& base_dir) {
    RunConfig rc;
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") {
        rc.seed = value.get<std::uint64_t>();
      } else if (key == "paths") {
        for (const auto& [name, p] : value.items()) {
          if (name != "vocab" && name != "data" && name != "checkpoints")
            throw std::invalid_argument("RunConfig: unknown path \"" + name + "\"");
          const fs::path raw = p.get<std::string>();
          rc.paths[name] = raw.is_absolute() ? raw : base_dir / raw;
        }
      } else if (key == "model") {
        rc.model = ModelConfig::from_json(value);
      } else if (key == "stages") {
        // Filled below once the seed is known.
      } else {
        throw std::invalid_argument("RunConfig: unknown key \"" + key + "\"");
      }
    }
    if (j.contains("stages")) {
      for (const auto& [name, value] : j.at("stages").items()) {
        json sj = value;
        if (!sj.contains("stage")) sj["stage"] = name;
        if (parse_stage(sj.at("stage").get<std::string>()) != parse_stage(name))
          throw std::invalid_argument("RunConfig: stage \"" + name + "\" declares a different stage kind");
        if (!sj.contains("seed")) sj["seed"] = rc.seed;
        rc.stages.emplace(stage_name(parse_stage(name)), StageConfig::from_json(sj));
      }
    }
    rc.validate();
    return rc;
  }

  void validate() const {
    for (const char* name : {"vocab", "data"}) {
      const auto it = paths.find(name);
      if (it != paths.end() && !fs::exists(it->second))
        throw IoError(std::string("RunConfig: path \"") + name + "\" does not exist: " + it->second.string());
    }
  }
};

// Builds `out` in a sibling temp directory and renames it into place.
inline void write_dir_atomic(const fs::path& out, const std::function<void(const fs::path&)>& fill) {
  fs::path tmp = out;
  tmp += ".tmp." + std::to_string(::getpid());
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    fill(tmp);
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  if (fs::exists(out)) fs::remove_all(out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  fs::rename(tmp, out);
}

inline std::string jsonl_of(const std::vector<json>& rows) { return to_jsonl(rows); }

inline std::string display_name(const fs::path& p) {
  auto n = p.lexically_normal();
  if (n.filename().empty()) n = n.parent_path();
  return n.filename().string();
}

inline Embedder model_embedder(const LoadedModel& m) {
  return [&m](const std::string& text) { return embed_text(m.model, m.tokenizer, text); };
}

// ---------------------------------------------------------------------------
// tokenizer

struct TokTrainArgs {
  std::vector<std::string> corpus;
  std::size_t size = 30000;
  std::uint64_t min_freq = 2;
  std::string filter_base;
  std::string out;
};

inline void cmd_tokenizer_train(const TokTrainArgs& a, std::ostream& out) {
  std::vector<std::string> texts;
  for (const auto& c : a.corpus) {
    auto t = load_corpus_texts(c);
    texts.insert(texts.end(), std::make_move_iterator(t.begin()), std::make_move_iterator(t.end()));
  }
  if (texts.empty()) throw std::invalid_argument("tokenizer train: empty corpus");
  WordPieceTrainerOptions opts;
  WordCounts counts = count_words(texts, opts.lowercase);
  if (!a.filter_base.empty()) counts = filter_word_counts(TokenizerModel(Vocabulary::load(a.filter_base)), counts);
  const auto vocab = train_wordpiece_from_counts(counts, a.size, a.min_freq, opts);
  vocab.save(a.out);
  out << json{{"out", a.out}, {"size", vocab.size()}, {"hash", vocab.hash()}}.dump() << "\n";
}

struct TokMergeArgs {
  std::string base, domain, out;
};

inline void cmd_tokenizer_merge(const TokMergeArgs& a, std::ostream& out) {
  const auto base = Vocabulary::load(a.base);
  const auto merged = merge_vocabularies(base, Vocabulary::load(a.domain));
  merged.save(a.out);
  out << json{{"out", a.out}, {"base_size", base.size()}, {"size", merged.size()}, {"hash", merged.hash()}}.dump()
      << "\n";
}

struct TokCompareArgs {
  std::string a, b, corpus, report;
};

inline void cmd_tokenizer_compare(const TokCompareArgs& a, std::ostream& out) {
  const TokenizerModel ta(Vocabulary::load(a.a)), tb(Vocabulary::load(a.b));
  const auto rep = tokenizer_compare(ta, tb, load_corpus_texts(a.corpus), display_name(a.corpus));
  if (!a.report.empty()) write_file_atomic(a.report, rep.to_json().dump(2) + "\n");
  out << rep.to_json().dump() << "\n";
}

// ---------------------------------------------------------------------------
// data

struct DataCleanArgs {
  std::string in, out;
  std::size_t limit = 0;
  std::uint64_t seed = 0;
};

inline void cmd_data_clean(const DataCleanArgs& a, std::ostream& err) {
  const auto docs = documents_from_rows(read_jsonl(a.in));
  std::vector<CorpusDocument> cleaned;
  for (const auto& d : docs) {
    auto text = clean_document(d.text);
    if (!text.empty()) cleaned.push_back({d.id, std::move(text), d.source});
  }
  const auto kept = sample_limit(dedup_corpus(cleaned), a.limit, a.seed);
  std::vector<json> rows;
  for (const auto& d : kept) rows.push_back(d.to_json());
  write_file_atomic(a.out, jsonl_of(rows));
  err << "data clean: kept " << kept.size() << " of " << docs.size() << " documents\n";
}

struct DataPackArgs {
  std::string in, vocab, out;
  std::size_t chunk_len = 512, min_tail = 16;
};

inline void cmd_data_pack(const DataPackArgs& a, std::ostream& err) {
  const TokenizerModel tok(Vocabulary::load(a.vocab));
  const auto chunks = pack_chunks(load_corpus_texts(a.in), tok, a.chunk_len, a.min_tail);
  std::vector<json> rows;
  char id[32];
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    std::snprintf(id, sizeof id, "chunk-%06zu", i);
    rows.push_back(json{{"id", id}, {"ids", chunks[i]}});
  }
  write_file_atomic(a.out, jsonl_of(rows));
  err << "data pack: " << chunks.size() << " chunks of " << a.chunk_len << " tokens\n";
}

struct DataFilterArgs {
  std::string in, model, out;
  std::optional<double> drop_fraction, threshold;
  std::size_t limit = 0;
  std::uint64_t seed = 0;
};

inline void cmd_data_filter(const DataFilterArgs& a, const GlobalOptions& g, std::ostream& err) {
  if (a.drop_fraction && a.threshold) throw std::invalid_argument("data filter: give --drop-fraction or --threshold");
  const auto pairs = sample_limit(pairs_from_rows(read_jsonl(a.in)), a.limit, a.seed);
  const auto m = load_model(a.model);
  const FilterMode mode =
      a.threshold ? FilterMode::threshold(*a.threshold) : FilterMode::drop_fraction(a.drop_fraction.value_or(0.10));
  const auto kept = filter_pairs_by_similarity(pairs, model_embedder(m), mode, g.workers());
  std::vector<json> rows;
  for (const auto& p : kept) rows.push_back(p.to_json());
  write_file_atomic(a.out, jsonl_of(rows));
  err << "data filter: kept " << kept.size() << " of " << pairs.size() << " pairs\n";
}

struct DataMineArgs {
  std::string in, corpus, model, out;
  std::size_t per_query = 4;
  double band_lo = 0.3, band_hi = 0.9;
  std::size_t limit = 0;
  std::uint64_t seed = 0;
};

// Records left without any negative in the band are skipped and counted.
inline void cmd_data_mine(const DataMineArgs& a, const GlobalOptions& g, std::ostream& err) {
  const auto pairs = sample_limit(pairs_from_rows(read_jsonl(a.in)), a.limit, a.seed);
  const auto m = load_model(a.model);
  const MiningOptions opts{a.per_query, a.band_lo, a.band_hi, g.workers()};
  const auto recs = mine_hard_negatives(pairs, load_corpus_texts(a.corpus), model_embedder(m), opts);
  std::vector<json> rows;
  std::size_t skipped = 0, flagged = 0;
  for (const auto& r : recs) {
    if (r.negatives.empty()) {
      ++skipped;
      continue;
    }
    flagged += r.flagged ? 1 : 0;
    rows.push_back(r.to_json());
  }
  write_file_atomic(a.out, jsonl_of(rows));
  err << "data mine: wrote " << rows.size() << " records; " << flagged << " flagged short; " << skipped
      << " skipped with no negatives in band\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string stage;
  std::string config, data, init, vocab, model_config, out;
  std::optional<std::uint64_t> seed;
};

inline StageConfig resolve_stage_config(const TrainArgs& a, std::optional<RunConfig>& run) {
  json j = load_config_file(a.config);
  const StageKind kind = parse_stage(a.stage);
  StageConfig cfg;
  if (j.contains("stages")) {
    run = RunConfig::from_json(j, fs::path(a.config).parent_path());
    const auto it = run->stages.find(stage_name(kind));
    if (it == run->stages.end()) throw std::invalid_argument("run config has no \"" + stage_name(kind) + "\" stage");
    cfg = it->second;
  } else {
    if (!j.contains("stage")) j["stage"] = stage_name(kind);
    cfg = StageConfig::from_json(j);
    if (cfg.stage != kind) throw std::invalid_argument("stage config is for \"" + stage_name(cfg.stage) + "\"");
  }
  if (a.seed) cfg.seed = *a.seed;
  return cfg;
}

inline void cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  std::optional<RunConfig> run;
  const StageConfig cfg = resolve_stage_config(a, run);
  const bool mlm = cfg.stage == StageKind::kMlm;

  std::string data_path = a.data;
  if (data_path.empty() && run && run->paths.count("data")) data_path = run->paths.at("data").string();
  if (data_path.empty()) throw std::invalid_argument("train: --data is required");
  const auto rows = read_jsonl(data_path);

  std::optional<LoadedModel> init;
  std::unique_ptr<TokenizerModel> tok;
  if (!a.init.empty()) {
    init.emplace(load_model(a.init));
  } else {
    std::string vocab_path = a.vocab;
    if (vocab_path.empty() && run && run->paths.count("vocab")) vocab_path = run->paths.at("vocab").string();
    if (vocab_path.empty()) throw std::invalid_argument("train: give --init or a vocabulary");
    tok = std::make_unique<TokenizerModel>(Vocabulary::load(vocab_path));
  }
  const TokenizerModel& tokenizer = init ? init->tokenizer : *tok;

  ModelConfig mcfg;
  if (init) {
    mcfg = init->model.config();
  } else if (!a.model_config.empty()) {
    mcfg = ModelConfig::from_json(load_config_file(a.model_config));
  } else if (run && run->model) {
    mcfg = *run->model;
  }
  const std::size_t max_len = std::min(cfg.max_len, mcfg.max_train_len);
  const StageData data = mlm ? mlm_data_from_rows(rows, tokenizer, max_len)
                             : pair_data_from_rows(rows, tokenizer, max_len, cfg.stage == StageKind::kHardNegative,
                                                   cfg.max_negatives);

  EncoderModel<float> model;
  if (init) {
    model = init->model;
  } else {
    mcfg.vocab_size = tokenizer.vocab().size();
    std::vector<std::vector<TokenId>> seqs;
    for (const auto& src : data.sequences)
      for (const auto& s : src) seqs.push_back(s.ids);
    for (const auto& src : data.pairs)
      for (const auto& p : src) {
        seqs.push_back(p.query);
        seqs.push_back(p.positive);
      }
    const std::uint64_t model_seed = run ? run->seed : cfg.seed;
    model = EncoderModel<float>::create(mcfg, model_seed, 0.02, token_counts(seqs, mcfg.vocab_size));
  }

  StageConfig effective = cfg;
  effective.max_len = max_len;
  const auto res = run_stage(model, tokenizer, data, effective);
  for (const auto& line : res.log) err << "train: " << line << "\n";

  write_dir_atomic(a.out, [&](const fs::path& dir) {
    model.save(dir, tokenizer.vocab());
    write_file_atomic(dir / "loss_log.jsonl", res.loss_log_jsonl());
    write_file_atomic(dir / "stage_config.json", effective.to_json().dump(2) + "\n");
  });
  json summary{{"stage", stage_name(cfg.stage)}, {"steps", res.steps_completed}, {"out", a.out}};
  if (!res.records.empty()) {
    summary["first_loss"] = res.records.front().loss;
    summary["final_loss"] = res.records.back().loss;
  }
  out << summary.dump() << "\n";
}

// ---------------------------------------------------------------------------
// embed / eval

struct EmbedArgs {
  std::string model, text;
};

inline void cmd_embed(const EmbedArgs& a, std::ostream& out) {
  const auto m = load_model(a.model);
  const auto e = embed_text(m.model, m.tokenizer, a.text);
  out << json{{"text", a.text}, {"dim", e.size()}, {"embedding", e}}.dump() << "\n";
}

struct EvalArgs {
  std::vector<std::string> models, datasets;
  std::size_t k = 10;
  std::string out, table;
};

inline void cmd_eval(const EvalArgs& a, const GlobalOptions& g, std::ostream& out) {
  if (a.models.empty() || a.datasets.empty()) throw std::invalid_argument("eval: need models and datasets");
  std::vector<std::unique_ptr<LoadedModel>> loaded;
  std::vector<RetrievalModel> models;
  for (const auto& p : a.models) {
    loaded.push_back(std::make_unique<LoadedModel>(load_model(p)));
    const auto& m = *loaded.back();
    models.push_back({display_name(p), model_embedder(m), m.checkpoint_hash, m.tokenizer_hash});
  }
  std::vector<NamedDataset> datasets;
  for (const auto& d : a.datasets) datasets.push_back({display_name(d), load_dataset(d)});
  const auto cache = EmbeddingCache::from_env();
  const RetrievalOptions opts{a.k, g.workers(), cache ? &*cache : nullptr};
  const auto rep = compare_models(models, datasets, opts);
  const std::string table = rep.render_table();
  if (!a.out.empty()) write_file_atomic(a.out, rep.to_json().dump(2) + "\n");
  if (!a.table.empty()) write_file_atomic(a.table, table);
  out << table;
}

// ---------------------------------------------------------------------------
// dispatch

// Runs one command line (without the program name). Returns 0 on success, 1
// on user error and 2 on internal failure.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Medical embedding and retrieval toolkit", "medeir"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--threads", g.threads, "Worker thread cap")->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", g.deterministic, "Force serial execution paths");
  std::function<void()> action;

  auto* tok = app.add_subcommand("tokenizer", "Train, merge and compare WordPiece vocabularies");
  tok->require_subcommand(1);
  TokTrainArgs tt;
  auto* tt_cmd = tok->add_subcommand("train", "Train a WordPiece vocabulary");
  tt_cmd->add_option("--corpus", tt.corpus, "JSON-lines corpus with a text field")->required()->check(CLI::ExistingFile);
  tt_cmd->add_option("--size", tt.size, "Target vocabulary size")->required();
  tt_cmd->add_option("--min-freq", tt.min_freq, "Minimum pair frequency")->capture_default_str();
  tt_cmd->add_option("--filter-base", tt.filter_base, "Keep only words this vocabulary fragments")
      ->check(CLI::ExistingFile);
  tt_cmd->add_option("--out", tt.out, "Output vocab file")->required();
  tt_cmd->callback([&] { action = [&] { cmd_tokenizer_train(tt, out); }; });

  TokMergeArgs tm;
  auto* tm_cmd = tok->add_subcommand("merge", "Append domain tokens to a base vocabulary");
  tm_cmd->add_option("--base", tm.base)->required()->check(CLI::ExistingFile);
  tm_cmd->add_option("--domain", tm.domain)->required()->check(CLI::ExistingFile);
  tm_cmd->add_option("--out", tm.out)->required();
  tm_cmd->callback([&] { action = [&] { cmd_tokenizer_merge(tm, out); }; });

  TokCompareArgs tc;
  auto* tc_cmd = tok->add_subcommand("compare", "Sub-token counts of two vocabularies on one corpus");
  tc_cmd->add_option("--a", tc.a, "Reference vocabulary")->required()->check(CLI::ExistingFile);
  tc_cmd->add_option("--b", tc.b, "Candidate vocabulary")->required()->check(CLI::ExistingFile);
  tc_cmd->add_option("--corpus", tc.corpus)->required()->check(CLI::ExistingFile);
  tc_cmd->add_option("--report", tc.report, "Output report JSON");
  tc_cmd->callback([&] { action = [&] { cmd_tokenizer_compare(tc, out); }; });

  auto* data = app.add_subcommand("data", "Corpus and pair preparation");
  data->require_subcommand(1);
  DataCleanArgs dc;
  auto* dc_cmd = data->add_subcommand("clean", "Strip markup, deduplicate and optionally sample documents");
  dc_cmd->add_option("--in", dc.in)->required()->check(CLI::ExistingFile);
  dc_cmd->add_option("--out", dc.out)->required();
  dc_cmd->add_option("--limit", dc.limit, "Keep a seeded sample of this many documents (0 keeps all)");
  dc_cmd->add_option("--seed", dc.seed);
  dc_cmd->callback([&] { action = [&] { cmd_data_clean(dc, err); }; });

  DataPackArgs dp;
  auto* dp_cmd = data->add_subcommand("pack", "Tokenize documents into fixed-length chunks");
  dp_cmd->add_option("--in", dp.in)->required()->check(CLI::ExistingFile);
  dp_cmd->add_option("--vocab", dp.vocab)->required()->check(CLI::ExistingFile);
  dp_cmd->add_option("--out", dp.out)->required();
  dp_cmd->add_option("--chunk-len", dp.chunk_len)->capture_default_str();
  dp_cmd->add_option("--min-tail", dp.min_tail)->capture_default_str();
  dp_cmd->callback([&] { action = [&] { cmd_data_pack(dp, err); }; });

  DataFilterArgs df;
  auto* df_cmd = data->add_subcommand("filter", "Drop low-similarity pairs");
  df_cmd->add_option("--in", df.in)->required()->check(CLI::ExistingFile);
  df_cmd->add_option("--model", df.model)->required()->check(CLI::ExistingDirectory);
  df_cmd->add_option("--out", df.out)->required();
  df_cmd->add_option("--drop-fraction", df.drop_fraction, "Remove this fraction of lowest-similarity pairs");
  df_cmd->add_option("--threshold", df.threshold, "Remove pairs below this cosine");
  df_cmd->add_option("--limit", df.limit);
  df_cmd->add_option("--seed", df.seed);
  df_cmd->callback([&] { action = [&] { cmd_data_filter(df, g, err); }; });

  DataMineArgs dm;
  auto* dm_cmd = data->add_subcommand("mine", "Mine hard negatives within a similarity band");
  dm_cmd->add_option("--in", dm.in)->required()->check(CLI::ExistingFile);
  dm_cmd->add_option("--corpus", dm.corpus)->required()->check(CLI::ExistingFile);
  dm_cmd->add_option("--model", dm.model)->required()->check(CLI::ExistingDirectory);
  dm_cmd->add_option("--out", dm.out)->required();
  dm_cmd->add_option("--per-query", dm.per_query)->capture_default_str();
  dm_cmd->add_option("--band-lo", dm.band_lo)->capture_default_str();
  dm_cmd->add_option("--band-hi", dm.band_hi)->capture_default_str();
  dm_cmd->add_option("--limit", dm.limit);
  dm_cmd->add_option("--seed", dm.seed);
  dm_cmd->callback([&] { action = [&] { cmd_data_mine(dm, g, err); }; });

  auto* train = app.add_subcommand("train", "Run one training stage");
  train->require_subcommand(1);
  TrainArgs ta;
  for (const char* stage : {"mlm", "contrastive", "hardneg"}) {
    auto* s = train->add_subcommand(stage, std::string("Run the ") + stage + " stage");
    s->add_option("--config", ta.config, "Stage or run config JSON")->required()->check(CLI::ExistingFile);
    s->add_option("--data", ta.data, "Training data JSON-lines")->check(CLI::ExistingFile);
    s->add_option("--init", ta.init, "Checkpoint to continue from")->check(CLI::ExistingDirectory);
    s->add_option("--vocab", ta.vocab, "Vocabulary for a fresh model")->check(CLI::ExistingFile);
    s->add_option("--model-config", ta.model_config, "Model config JSON for a fresh model")
        ->check(CLI::ExistingFile);
    s->add_option("--seed", ta.seed, "Override the stage seed");
    s->add_option("--out", ta.out, "Output checkpoint directory")->required();
    s->callback([&, stage] {
      ta.stage = stage;
      action = [&] { cmd_train(ta, out, err); };
    });
  }

  EmbedArgs ea;
  auto* embed = app.add_subcommand("embed", "Print the embedding of one text as a JSON line");
  embed->add_option("--model", ea.model)->required()->check(CLI::ExistingDirectory);
  embed->add_option("--text", ea.text)->required();
  embed->callback([&] { action = [&] { cmd_embed(ea, out); }; });

  auto* ev = app.add_subcommand("eval", "Retrieval evaluation");
  ev->require_subcommand(1);
  EvalArgs er;
  std::string er_model, er_dataset;
  auto* er_cmd = ev->add_subcommand("run", "Evaluate one model on one dataset");
  er_cmd->add_option("--model", er_model)->required()->check(CLI::ExistingDirectory);
  er_cmd->add_option("--dataset", er_dataset)->required()->check(CLI::ExistingDirectory);
  er_cmd->add_option("--k", er.k)->capture_default_str()->check(CLI::PositiveNumber);
  er_cmd->add_option("--out", er.out, "Output report JSON");
  er_cmd->add_option("--table", er.table, "Output text table");
  er_cmd->callback([&] {
    er.models = {er_model};
    er.datasets = {er_dataset};
    action = [&] { cmd_eval(er, g, out); };
  });

  EvalArgs ec;
  auto* ec_cmd = ev->add_subcommand("compare", "Evaluate several models on several datasets");
  ec_cmd->add_option("--models", ec.models)->required()->delimiter(',')->check(CLI::ExistingDirectory);
  ec_cmd->add_option("--datasets", ec.datasets)->required()->delimiter(',')->check(CLI::ExistingDirectory);
  ec_cmd->add_option("--k", ec.k)->capture_default_str()->check(CLI::PositiveNumber);
  ec_cmd->add_option("--out", ec.out, "Output report JSON");
  ec_cmd->add_option("--table", ec.table, "Output text table");
  ec_cmd->callback([&] { action = [&] { cmd_eval(ec, g, out); }; });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (!action) throw std::invalid_argument("no command given");
    action();
    return 0;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::length_error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    err << "error: malformed JSON input: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
}

inline int dispatch(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return dispatch(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace medeir::cli
