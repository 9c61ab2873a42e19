#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "medeir/cli.hpp"

namespace medeir::cli {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("medeir_cli_" + std::string(
                                             ::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string write(const std::string& name, const std::string& contents) const {
    write_file_atomic(dir_ / name, contents);
    return path(name);
  }

  // Small corpus, vocabulary and stage configs shared by the training tests.
  void make_training_inputs() {
    std::string corpus;
    for (int i = 0; i < 40; ++i) {
      corpus += json{{"id", "d" + std::to_string(i)},
                     {"text", "patients receiving ibuprofen reported less pain and fever " + std::to_string(i % 7)}}
                    .dump() +
                "\n";
    }
    write("corpus.jsonl", corpus);
    ASSERT_EQ(run({"tokenizer", "train", "--corpus", path("corpus.jsonl"), "--size", "80", "--min-freq", "1",
                   "--out", path("vocab.txt")})
                  .code,
              0);
    write("model.json", R"({"version":1,"hidden":16,"layers":1,"heads":2,"ffn_dim":32,"num_projections":2,)"
                        R"("max_train_len":32,"max_infer_len":64})");
    write("mlm.json", R"({"version":1,"stage":"mlm","global_batch":4,"grad_accum":2,"max_len":32,)"
                      R"("total_steps":3,"lr":1e-3,"seed":5})");
  }

  fs::path dir_;
};

TEST_F(CliTest, HelpForEverySubcommand) {
  const std::vector<std::vector<std::string>> cmds{
      {},
      {"tokenizer"},
      {"tokenizer", "train"},
      {"tokenizer", "merge"},
      {"tokenizer", "compare"},
      {"data"},
      {"data", "clean"},
      {"data", "pack"},
      {"data", "filter"},
      {"data", "mine"},
      {"train"},
      {"train", "mlm"},
      {"train", "contrastive"},
      {"train", "hardneg"},
      {"embed"},
      {"eval"},
      {"eval", "run"},
      {"eval", "compare"}};
  for (auto args : cmds) {
    args.push_back("--help");
    const auto r = run(args);
    EXPECT_EQ(r.code, 0) << args.front();
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << r.out;
  }
}

TEST_F(CliTest, UserErrorsExitOne) {
  auto r = run({"tokenizer", "compare", "--bogus"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"nosuch"}).code, 1);
  EXPECT_EQ(run({"embed", "--model", path("missing"), "--text", "x"}).code, 1);
  const auto bad = write("bad.jsonl", "{not json\n");
  const auto v = (fs::path(MEDEIR_FIXTURES) / "base_vocab.txt").string();
  r = run({"tokenizer", "compare", "--a", v, "--b", v, "--corpus", bad});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTest, CompareIdentityTokenizersHasZeroReduction) {
  const auto v = (fs::path(MEDEIR_FIXTURES) / "base_vocab.txt").string();
  const auto c = write("c.jsonl", R"({"id":"a","text":"ibuprofen reduces fever"})" "\n");
  const auto r = run({"tokenizer", "compare", "--a", v, "--b", v, "--corpus", c, "--report", path("rep.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = json::parse(read_file(path("rep.json")));
  EXPECT_EQ(rep["reduction_pct"], 0.0);
  EXPECT_EQ(json::parse(r.out), rep);
}

TEST_F(CliTest, TokenizerTrainMergeKeepsBaseIds) {
  write("general.jsonl", R"({"id":"g","text":"in my view it is a cab of the quick brown fox jumps over the lazy dog"})" "\n");
  write("med.jsonl", R"({"id":"m","text":"ibuprofen ibuprofen metformin metformin ibuprofen"})" "\n");
  ASSERT_EQ(run({"tokenizer", "train", "--corpus", path("general.jsonl"), "--size", "40", "--min-freq", "1", "--out",
                 path("base.txt")})
                .code,
            0);
  ASSERT_EQ(run({"tokenizer", "train", "--corpus", path("med.jsonl"), "--size", "60", "--min-freq", "1",
                 "--filter-base", path("base.txt"), "--out", path("domain.txt")})
                .code,
            0);
  ASSERT_EQ(run({"tokenizer", "merge", "--base", path("base.txt"), "--domain", path("domain.txt"), "--out",
                 path("merged.txt")})
                .code,
            0);
  const auto base = Vocabulary::load(path("base.txt"));
  const auto merged = Vocabulary::load(path("merged.txt"));
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(merged.tokens()[i], base.tokens()[i]);
  EXPECT_GT(merged.size(), base.size());
  const auto r = run({"tokenizer", "compare", "--a", path("base.txt"), "--b", path("merged.txt"), "--corpus",
                      path("med.jsonl")});
  ASSERT_EQ(r.code, 0);
  EXPECT_GT(json::parse(r.out)["reduction_pct"].get<double>(), 0.0);
}

TEST_F(CliTest, CleanAndPack) {
  write("raw.jsonl", R"({"id":"a","text":"<b>Aspirin</b> &amp; fever see https://x.y"})" "\n"
                     R"({"id":"b","text":"aspirin &amp; FEVER see"})" "\n"
                     R"({"id":"c","text":"<br/>"})" "\n");
  auto r = run({"data", "clean", "--in", path("raw.jsonl"), "--out", path("clean.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = read_jsonl(path("clean.jsonl"));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0]["text"], "Aspirin & fever see");
  EXPECT_EQ(run({"data", "clean", "--in", path("clean.jsonl"), "--out", path("clean2.jsonl")}).code, 0);
  EXPECT_EQ(read_file(path("clean.jsonl")), read_file(path("clean2.jsonl")));

  write("vocab.txt", "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\n");
  std::string words;
  for (int i = 0; i < 1030; ++i) words += "a ";
  write("long.jsonl", json{{"id", "x"}, {"text", words}}.dump() + "\n");
  r = run({"data", "pack", "--in", path("long.jsonl"), "--vocab", path("vocab.txt"), "--out", path("packed.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto chunks = read_jsonl(path("packed.jsonl"));
  ASSERT_EQ(chunks.size(), 2u);
  EXPECT_EQ(chunks[1]["ids"].size(), 512u);
}

TEST_F(CliTest, TrainEmbedAndEval) {
  make_training_inputs();
  auto r = run({"train", "mlm", "--config", path("mlm.json"), "--data", path("corpus.jsonl"), "--vocab",
                path("vocab.txt"), "--model-config", path("model.json"), "--out", path("ckpt")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_jsonl(path("ckpt/loss_log.jsonl")).size(), 3u);
  for (const auto& e : fs::directory_iterator(dir_)) EXPECT_EQ(e.path().string().find(".tmp."), std::string::npos);

  r = run({"embed", "--model", path("ckpt"), "--text", "ibuprofen"});
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1);
  const auto e = json::parse(r.out);
  EXPECT_EQ(e["dim"], 16);
  double norm = 0;
  for (double x : e["embedding"]) norm += x * x;
  EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-5);

  write("pairs.jsonl", R"({"query":"pain","positive":"ibuprofen","source_id":"s"})" "\n"
                       R"({"query":"fever","positive":"patients reported fever","source_id":"s"})" "\n");
  write("c.json", R"({"version":1,"stage":"contrastive","global_batch":2,"grad_accum":1,"total_steps":2,"lr":1e-3})");
  r = run({"train", "contrastive", "--config", path("c.json"), "--data", path("pairs.jsonl"), "--init", path("ckpt"),
           "--out", path("ckpt2")});
  ASSERT_EQ(r.code, 0) << r.err;

  const fs::path ds = dir_ / "ds";
  write_file_atomic(ds / "queries.jsonl", R"({"id":"q1","text":"pain relief"})" "\n");
  write_file_atomic(ds / "corpus.jsonl", R"({"id":"d1","text":"ibuprofen"})" "\n" R"({"id":"d2","text":"fever"})" "\n");
  write_file_atomic(ds / "qrels.jsonl", R"({"qid":"q1","did":"d1","rel":1})" "\n");
  r = run({"eval", "run", "--model", path("ckpt"), "--dataset", ds.string(), "--k", "10", "--out", path("rep.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = json::parse(read_file(path("rep.json")));
  EXPECT_EQ(rep["rows"].size(), 2u);
  r = run({"eval", "compare", "--models", path("ckpt") + "," + path("ckpt2"), "--datasets", ds.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("ckpt2"), std::string::npos);
}

TEST_F(CliTest, ConfigValidation) {
  make_training_inputs();
  const std::vector<std::string> base{"train", "mlm", "--data", path("corpus.jsonl"), "--vocab", path("vocab.txt"),
                                      "--out", path("ckpt")};
  auto with_config = [&](const std::string& cfg) {
    auto args = base;
    args.push_back("--config");
    args.push_back(write("cfg.json", cfg));
    return run(args);
  };
  EXPECT_EQ(with_config(R"({"stage":"mlm","total_steps":1})").code, 1);
  EXPECT_EQ(with_config(R"({"version":2,"stage":"mlm","total_steps":1})").code, 1);
  EXPECT_EQ(with_config(R"({"version":1,"stage":"mlm","total_stpes":1})").code, 1);
  EXPECT_EQ(with_config(R"({"version":1,"stage":"contrastive","total_steps":1})").code, 1);
  EXPECT_EQ(with_config(R"({"version":1,"seed":3,"paths":{"vocab":"nope.txt"},"stages":{"mlm":{}}})").code, 1);
  EXPECT_EQ(with_config(R"({"version":1,"seed":3,"extra":1,"stages":{"mlm":{}}})").code, 1);
  EXPECT_FALSE(fs::exists(path("ckpt")));

  const auto rc = RunConfig::from_json(json::parse(R"({"seed":9,"stages":{"mlm":{},"contrastive":{"seed":4}}})"), dir_);
  EXPECT_EQ(rc.stages.at("mlm").seed, 9u);
  EXPECT_EQ(rc.stages.at("contrastive").seed, 4u);

  const auto r = with_config(R"({"version":1,"seed":3,"model":{"hidden":16,"layers":1,"heads":2,"ffn_dim":32,)"
                             R"("num_projections":1,"max_train_len":32,"max_infer_len":64},)"
                             R"("stages":{"mlm":{"global_batch":2,"grad_accum":1,"total_steps":2}}})");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(read_file(path("ckpt/stage_config.json")))["seed"], 3);
}

TEST_F(CliTest, FilterAndMine) {
  make_training_inputs();
  ASSERT_EQ(run({"train", "mlm", "--config", path("mlm.json"), "--data", path("corpus.jsonl"), "--vocab",
                 path("vocab.txt"), "--model-config", path("model.json"), "--out", path("ckpt")})
                .code,
            0);
  std::string pairs;
  const char* words[] = {"pain", "fever", "ibuprofen", "patients", "less", "reported", "and", "receiving"};
  for (int i = 0; i < 20; ++i)
    pairs += json{{"query", std::string(words[i % 8]) + " " + words[(i * 3) % 8]},
                  {"positive", std::string(words[(i + 1) % 8]) + " " + words[(i * 5) % 8]},
                  {"source_id", "s"}}
                 .dump() +
             "\n";
  write("pairs.jsonl", pairs);
  auto r = run({"--threads", "3", "data", "filter", "--in", path("pairs.jsonl"), "--model", path("ckpt"),
                "--drop-fraction", "0.1", "--out", path("kept.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_jsonl(path("kept.jsonl")).size(), 18u);
  r = run({"data", "filter", "--in", path("pairs.jsonl"), "--model", path("ckpt"), "--drop-fraction", "0.1",
           "--out", path("kept_serial.jsonl"), "--deterministic"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(path("kept.jsonl")), read_file(path("kept_serial.jsonl")));

  write("docs.jsonl", R"({"id":"x","text":"ibuprofen"})" "\n");
  write("one.jsonl", R"({"query":"pain","positive":"ibuprofen","source_id":"s"})" "\n");
  r = run({"data", "mine", "--in", path("one.jsonl"), "--corpus", path("docs.jsonl"), "--model", path("ckpt"),
           "--band-lo", "-1", "--band-hi", "1", "--out", path("neg.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(read_jsonl(path("neg.jsonl")).empty());
  EXPECT_NE(r.err.find("1 skipped"), std::string::npos) << r.err;

  r = run({"data", "mine", "--in", path("pairs.jsonl"), "--corpus", path("corpus.jsonl"), "--model", path("ckpt"),
           "--band-lo", "-1", "--band-hi", "1", "--per-query", "2", "--limit", "5", "--out", path("neg2.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = read_jsonl(path("neg2.jsonl"));
  ASSERT_EQ(recs.size(), 5u);
  for (const auto& rec : recs) EXPECT_EQ(rec["negatives"].size(), 2u);
}

}  // namespace
}  // namespace medeir::cli
