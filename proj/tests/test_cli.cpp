#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <sys/wait.h>

#include "amil/bagdata.hpp"
#include "amil/cli.hpp"

namespace fs = std::filesystem;
namespace bd = amil::bagdata;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = amil::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("amil_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// 60 bags, vocab 20, 2 witness tokens.
fs::path small_dataset(const fs::path& dir) {
  auto r = run({"synth", "--out", dir.string(), "--num-bags", "60", "--vocab-size", "20", "--witness-tokens", "2",
                "--positive-rate", "0.3", "--min-length", "2", "--max-length", "6", "--seed", "4"});
  EXPECT_EQ(r.code, 0) << r.err;
  return dir / "bags.jsonl";
}

std::vector<std::string> tiny_flags() {
  return {"--d-model", "8", "--heads", "2", "--fc", "6,4", "--batch-size", "16", "--lr", "0.01", "--folds", "3"};
}

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST(Cli, MissingDatasetIsDataError) {
  const auto dir = scratch("missing");
  auto r = run({"train", "--data", (dir / "nope.jsonl").string(), "--out", dir.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error [data]"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "model.ckpt"));
}

TEST(Cli, EmptyDatasetIsDataError) {
  const auto dir = scratch("empty");
  std::ofstream(dir / "empty.jsonl") << "\n";
  auto r = run({"train", "--data", (dir / "empty.jsonl").string(), "--out", dir.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("no bags"), std::string::npos) << r.err;
}

TEST(Cli, UsageAndConfigErrors) {
  EXPECT_EQ(run({}).code, 3);
  EXPECT_EQ(run({"frobnicate"}).code, 3);
  const auto dir = scratch("cfg");
  EXPECT_EQ(run({"synth", "--out", dir.string(), "--set", "model.bogus=1"}).code, 3);
  std::ofstream(dir / "bad.ini") << "[train]\nlearning_rat = 0.1\n";
  auto r = run({"synth", "--out", dir.string(), "--config", (dir / "bad.ini").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("learning_rat"), std::string::npos) << r.err;
  EXPECT_EQ(run({"synth", "--out", dir.string(), "--jobs", "0"}).code, 3);
  EXPECT_EQ(run({"sweep", "nonsense", "--data", "x", "--out", dir.string()}).code, 3);
}

TEST(Cli, SynthDefaultsAreExactAndReproducible) {
  const auto a = scratch("synth_a");
  const auto b = scratch("synth_b");
  auto ra = run({"synth", "--out", a.string(), "--seed", "11"});
  auto rb = run({"synth", "--out", b.string(), "--seed", "11"});
  ASSERT_EQ(ra.code, 0) << ra.err;
  EXPECT_NE(ra.out.find("positives: 57\n"), std::string::npos) << ra.out;
  EXPECT_NE(ra.out.find("negatives: 943\n"), std::string::npos) << ra.out;
  EXPECT_EQ(slurp(a / "bags.jsonl"), slurp(b / "bags.jsonl"));
  const auto bags = bd::load_jsonl(a / "bags.jsonl");
  EXPECT_EQ(bags.size(), 1000u);
  EXPECT_EQ(bd::to_jsonl(bags), slurp(a / "bags.jsonl"));
}

TEST(Cli, ConfigEchoRoundTripsAndFlagsOverrideFile) {
  const auto dir = scratch("echo");
  std::ofstream(dir / "in.ini") << "[synth]\nnum_bags = 40\n[train]\ngamma = 1.5\n";
  auto r = run({"synth", "--config", (dir / "in.ini").string(), "--num-bags", "30", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(bd::load_jsonl(dir / "bags.jsonl").size(), 30u);
  const auto echoed = amil::cli::from_ptree(amil::cli::read_ini_file(dir / "config.ini"));
  EXPECT_EQ(echoed.synth.num_bags, 30u);
  EXPECT_EQ(echoed.train.gamma, 1.5);
  EXPECT_EQ(amil::cli::to_ini(echoed), slurp(dir / "config.ini"));
}

TEST(Cli, GradcheckPassesAndCatchesCorruption) {
  const auto dir = scratch("gc");
  auto ok = run({"gradcheck", "--out", dir.string()});
  EXPECT_EQ(ok.code, 0) << ok.out << ok.err;
  EXPECT_NE(ok.out.find("gradcheck passed"), std::string::npos);
  // One row per parameter tensor.
  std::istringstream rows(slurp(dir / "gradcheck.csv"));
  std::string line;
  std::getline(rows, line);
  std::set<std::string> names;
  std::size_t count = 0;
  while (std::getline(rows, line) && line.find(',') != std::string::npos) {
    names.insert(line.substr(0, line.find(',')));
    ++count;
  }
  EXPECT_EQ(names.size(), count);
  EXPECT_TRUE(names.contains("embedding"));

  auto bad = run({"gradcheck", "--out", dir.string(), "--corrupt", "matmul"});
  EXPECT_EQ(bad.code, 5);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
  EXPECT_NE(bad.out.find("gradcheck FAILED"), std::string::npos);
}

TEST(Cli, TrainIsDeterministicAndFast) {
  const auto dir = scratch("train");
  const auto data = small_dataset(dir);
  const auto base = with({"train", "--data", data.string(), "--epochs", "5", "--seed", "2"}, tiny_flags());
  const auto t0 = std::chrono::steady_clock::now();
  auto a = run(with(base, {"--out", (dir / "a").string()}));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  auto b = run(with(base, {"--out", (dir / "b").string()}));
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_LT(seconds, 10.0);
  EXPECT_EQ(slurp(dir / "a" / "history.csv"), slurp(dir / "b" / "history.csv"));
  EXPECT_EQ(slurp(dir / "a" / "model.ckpt"), slurp(dir / "b" / "model.ckpt"));
  EXPECT_NE(a.out.find("epochs: 5"), std::string::npos) << a.out;
}

TEST(Cli, EvalOnOverfitModel) {
  const auto dir = scratch("eval");
  const auto data = small_dataset(dir);
  auto t = run(with({"train", "--data", data.string(), "--epochs", "40", "--patience", "40", "--out",
                     (dir / "m").string()},
                    tiny_flags()));
  ASSERT_EQ(t.code, 0) << t.err;
  auto e = run({"eval", "--data", data.string(), "--checkpoint", (dir / "m" / "model.ckpt").string(), "--out",
                (dir / "e").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  std::istringstream rows(slurp(dir / "e" / "metrics.csv"));
  std::string header, row;
  std::getline(rows, header);
  std::getline(rows, row);
  EXPECT_EQ(header, "model,loss,heads,pooling,repetition,fold,auc,accuracy,precision,recall,tp,fp,tn,fn");
  std::vector<std::string> cells;
  std::stringstream ss(row);
  for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
  ASSERT_EQ(cells.size(), 14u);
  EXPECT_GE(std::stod(cells[7]), 0.95) << row;

  // Single class: AUC nan with a warning, not an error.
  const auto pos_only = dir / "pos.jsonl";
  std::vector<bd::Bag> pos;
  for (const auto& b : bd::load_jsonl(data)) {
    if (b.label == 1) pos.push_back(b);
  }
  std::ofstream(pos_only) << bd::to_jsonl(pos);
  auto single = run({"eval", "--data", pos_only.string(), "--checkpoint", (dir / "m" / "model.ckpt").string(),
                     "--out", (dir / "s").string()});
  EXPECT_EQ(single.code, 0) << single.err;
  EXPECT_NE(single.err.find("warning"), std::string::npos);
  EXPECT_NE(single.out.find("nan"), std::string::npos) << single.out;
}

TEST(Cli, PredictWeightsFormDistribution) {
  const auto dir = scratch("predict");
  const auto data = small_dataset(dir);
  auto t = run(with({"train", "--data", data.string(), "--epochs", "2", "--out", (dir / "m").string()}, tiny_flags()));
  ASSERT_EQ(t.code, 0) << t.err;
  const auto ckpt = (dir / "m" / "model.ckpt").string();
  const auto bags = bd::load_jsonl(data);
  auto tokens = bags.front().tokens;
  std::vector<std::string> args{"predict", "--checkpoint", ckpt, "--out", (dir / "p").string()};
  args.insert(args.end(), tokens.begin(), tokens.end());
  auto p = run(args);
  ASSERT_EQ(p.code, 0) << p.err;
  std::istringstream in(p.out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("probability: ", 0), 0u);
  const double prob = std::stod(line.substr(13));
  EXPECT_GT(prob, 0.0);
  EXPECT_LT(prob, 1.0);
  std::getline(in, line);
  EXPECT_EQ(line, "token,weight");
  double sum = 0.0, prev = 2.0;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const double w = std::stod(line.substr(line.find(',') + 1));
    EXPECT_LE(w, prev);
    prev = w;
    sum += w;
    ++n;
  }
  EXPECT_EQ(n, tokens.size());
  EXPECT_NEAR(sum, 1.0, 1e-9);

  auto one = run({"predict", "--checkpoint", ckpt, "--out", (dir / "p1").string(), tokens.front()});
  ASSERT_EQ(one.code, 0) << one.err;
  EXPECT_NE(one.out.find(tokens.front() + ",1\n"), std::string::npos) << one.out;

  auto unknown = run({"predict", "--checkpoint", ckpt, "--out", (dir / "p2").string(), tokens.front(), "zzz_unseen"});
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.err.find("zzz_unseen"), std::string::npos) << unknown.err;

  auto base = run(with({"train", "--data", data.string(), "--epochs", "1", "--model", "mi_net", "--out",
                        (dir / "b").string()},
                       tiny_flags()));
  ASSERT_EQ(base.code, 0) << base.err;
  EXPECT_EQ(run({"predict", "--checkpoint", (dir / "b" / "model.ckpt").string(), "--out", (dir / "p3").string(),
                 tokens.front()})
                .code,
            4);
}

TEST(Cli, SweepWritesOneBlockPerArm) {
  const auto dir = scratch("sweep");
  const auto data = small_dataset(dir);
  auto r = run(with({"sweep", "pooling", "--data", data.string(), "--epochs", "1", "--sweep-pooling", "max,mean",
                     "--out", dir.string()},
                    tiny_flags()));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("arm,mean_auc,std_auc,mean_recall\nmax,", 0), 0u) << r.out;
  EXPECT_NE(r.out.find("\nmean,"), std::string::npos);
  const auto table = slurp(dir / "sweep_pooling.csv");
  EXPECT_NE(table.find(",max,all,mean,"), std::string::npos);
  EXPECT_NE(table.find(",mean,all,std,"), std::string::npos);

  auto defaults = amil::cli::from_ptree({});
  EXPECT_EQ(defaults.sweep_heads, (std::vector<std::size_t>{0, 4, 8, 16, 32}));
  EXPECT_EQ(defaults.sweep_pooling.size(), 4u);
}

TEST(Cli, BinaryReportsExitCodes) {
  const char* bin = std::getenv("AMIL_BIN");
  if (bin == nullptr) GTEST_SKIP() << "AMIL_BIN not set";
  const auto dir = scratch("bin");
  const std::string missing = std::string(bin) + " eval --data " + (dir / "none.jsonl").string() + " --checkpoint " +
                              (dir / "none.ckpt").string() + " --out " + dir.string() + " 2>/dev/null";
  const int status = std::system(missing.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 2);
  const int ok = std::system((std::string(bin) + " gradcheck --out " + dir.string() + " >/dev/null").c_str());
  EXPECT_EQ(WEXITSTATUS(ok), 0);
}
