#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "fairwell/pipeline.hpp"

using namespace fairwell;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("fairwell_test_" + tag + "_" +
                                        std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string synth_cfg_json(uint64_t seed = 1, double leak = 1.0, size_t n = 40) {
  std::ostringstream os;
  os << R"({
  "n_subjects": )" << n << R"(,
  "group_proportions": {"A": 0.4, "B": 0.6},
  "label_rate_per_group": {"A": 0.35, "B": 0.6},
  "seed": )" << seed << R"(,
  "modalities": {
    "audio": {"feature_dim": 6, "segment_count_range": [3, 5], "signal_strength": 1.0,
              "group_leak_strength": )" << leak << R"(, "noise_std": 0.4},
    "video": {"feature_dim": 5, "segment_count_range": [2, 4], "signal_strength": 1.0,
              "group_leak_strength": )" << leak << R"(, "noise_std": 0.4}
  }
})";
  return os.str();
}

std::string train_cfg_json(const std::string& method = "m2", int epochs = 2,
                           uint64_t seed = 1) {
  std::ostringstream os;
  os << R"({
  "method": ")" << method << R"(",
  "pooling": "single",
  "epochs": )" << epochs << R"(,
  "batch_size": 8,
  "learning_rate": 0.001,
  "seed": )" << seed << R"(,
  "hidden_dims": [8],
  "embedding_dim": 4,
  "split": {"train": 0.6, "val": 0.2, "test": 0.2}
})";
  return os.str();
}

}  // namespace

TEST_CASE("synth writes a dataset, a manifest and a marginal summary", "[pipeline]") {
  TempDir dir("synth");
  write_file(dir / "cfg.json", synth_cfg_json());
  CliOptions quiet;
  quiet.quiet = true;
  REQUIRE(cmd_synth(dir / "cfg.json", dir / "data.jsonl", quiet) == kExitOk);
  REQUIRE(fs::exists(dir / "data.jsonl"));
  auto manifest = nlohmann::json::parse(slurp(dir / "data.jsonl.manifest.json"));
  REQUIRE(manifest.at("status") == "complete");
  REQUIRE(manifest.at("command") == "synth");
  REQUIRE(manifest.at("seed") == 1);
  REQUIRE_FALSE(fs::exists(dir / "data.jsonl.lock"));
}

TEST_CASE("malformed or invalid configs exit 2", "[pipeline]") {
  TempDir dir("badcfg");
  CliOptions quiet;
  quiet.quiet = true;
  write_file(dir / "broken.json", "{ not json");
  REQUIRE(cmd_synth(dir / "broken.json", dir / "out.jsonl", quiet) == kExitConfig);
  write_file(dir / "unknown.json", R"({"n_subjects": 10, "bogus_key": 1})");
  REQUIRE(cmd_synth(dir / "unknown.json", dir / "out.jsonl", quiet) == kExitConfig);
  REQUIRE(cmd_synth(dir / "missing.json", dir / "out.jsonl", quiet) == kExitConfig);
  write_file(dir / "badfrac.json",
             R"({"n_subjects": 10, "group_proportions": {"A": 0.9, "B": 0.3}})");
  REQUIRE(cmd_synth(dir / "badfrac.json", dir / "out.jsonl", quiet) == kExitConfig);
}

TEST_CASE("synth is byte-identical for a fixed seed", "[pipeline]") {
  TempDir dir("determin");
  write_file(dir / "cfg.json", synth_cfg_json(42));
  CliOptions quiet;
  quiet.quiet = true;
  REQUIRE(cmd_synth(dir / "cfg.json", dir / "a.jsonl", quiet) == kExitOk);
  REQUIRE(cmd_synth(dir / "cfg.json", dir / "b.jsonl", quiet) == kExitOk);
  REQUIRE(file_hash(dir / "a.jsonl") == file_hash(dir / "b.jsonl"));
  CliOptions seeded = quiet;
  seeded.seed = 43;
  REQUIRE(cmd_synth(dir / "cfg.json", dir / "c.jsonl", seeded) == kExitOk);
  REQUIRE(file_hash(dir / "a.jsonl") != file_hash(dir / "c.jsonl"));
}

TEST_CASE("pretrain produces the run directory contract", "[pipeline]") {
  TempDir dir("pretrain");
  CliOptions quiet;
  quiet.quiet = true;
  write_file(dir / "synth.json", synth_cfg_json());
  REQUIRE(cmd_synth(dir / "synth.json", dir / "data.jsonl", quiet) == kExitOk);
  write_file(dir / "train.json", train_cfg_json());
  REQUIRE(cmd_pretrain(dir / "train.json", dir / "data.jsonl", dir / "run", quiet) ==
          kExitOk);
  for (const char* f : {"config.json", "split.json", "losses.csv", "checkpoint.json",
                        "manifest-pretrain.json"})
    REQUIRE(fs::exists(fs::path(dir / "run") / f));
  auto losses = slurp((fs::path(dir / "run") / "losses.csv").string());
  REQUIRE(losses.rfind(loss_csv_header(), 0) == 0);
  // resolved config materializes every default
  auto cfg = nlohmann::json::parse(slurp((fs::path(dir / "run") / "config.json").string()));
  REQUIRE(cfg.contains("optimizer"));
  REQUIRE(cfg.contains("weights"));
  REQUIRE(cfg.at("weights").contains("epsilon"));
}

TEST_CASE("illegal method/pooling combination exits 2", "[pipeline]") {
  TempDir dir("illegal");
  CliOptions quiet;
  quiet.quiet = true;
  write_file(dir / "synth.json", synth_cfg_json());
  REQUIRE(cmd_synth(dir / "synth.json", dir / "data.jsonl", quiet) == kExitOk);
  write_file(dir / "train.json", train_cfg_json());
  CliOptions bad = quiet;
  bad.method = "m2";
  bad.pooling = "none";
  REQUIRE(cmd_pretrain(dir / "train.json", dir / "data.jsonl", dir / "run", bad) ==
          kExitConfig);
}

TEST_CASE("evaluate emits fairness metrics and is idempotent", "[pipeline]") {
  TempDir dir("evaluate");
  CliOptions quiet;
  quiet.quiet = true;
  write_file(dir / "synth.json", synth_cfg_json(7, 1.5, 60));
  REQUIRE(cmd_synth(dir / "synth.json", dir / "data.jsonl", quiet) == kExitOk);
  write_file(dir / "train.json", train_cfg_json("m2", 2, 7));
  REQUIRE(cmd_pretrain(dir / "train.json", dir / "data.jsonl", dir / "run", quiet) ==
          kExitOk);
  REQUIRE(cmd_evaluate(dir / "run", dir / "data.jsonl", quiet) == kExitOk);
  REQUIRE(fs::exists(fs::path(dir / "run") / "predictions.csv"));
  auto first = slurp((fs::path(dir / "run") / "fairness.csv").string());
  REQUIRE(cmd_evaluate(dir / "run", dir / "data.jsonl", quiet) == kExitOk);
  REQUIRE(slurp((fs::path(dir / "run") / "fairness.csv").string()) == first);

  // the aggregated column recomputes from the four stored ratios
  std::stringstream ss(first);
  std::string header, rowline;
  std::getline(ss, header);
  std::getline(ss, rowline);
  std::vector<std::string> cols;
  std::stringstream rs(rowline);
  std::string cell;
  while (std::getline(rs, cell, ',')) cols.push_back(cell);
  double sp = std::stod(cols[3]), eopp = std::stod(cols[4]), eodd = std::stod(cols[5]),
         eacc = std::stod(cols[6]), agg = std::stod(cols[7]);
  REQUIRE(agg_fairness(sp, eopp, eodd, eacc) == Catch::Approx(agg).margin(1e-12));
}

TEST_CASE("evaluate without a checkpoint exits 2", "[pipeline]") {
  TempDir dir("nockpt");
  CliOptions quiet;
  quiet.quiet = true;
  fs::create_directories(dir / "empty_run");
  write_file(dir / "synth.json", synth_cfg_json());
  REQUIRE(cmd_synth(dir / "synth.json", dir / "data.jsonl", quiet) == kExitOk);
  REQUIRE(cmd_evaluate(dir / "empty_run", dir / "data.jsonl", quiet) == kExitConfig);
}

TEST_CASE("a single-group test split exits 4", "[pipeline]") {
  TempDir dir("onegroup");
  CliOptions quiet;
  quiet.quiet = true;
  write_file(dir / "synth.json", synth_cfg_json(3, 1.0, 60));
  REQUIRE(cmd_synth(dir / "synth.json", dir / "data.jsonl", quiet) == kExitOk);
  write_file(dir / "train.json", train_cfg_json("m1", 1, 3));
  REQUIRE(cmd_pretrain(dir / "train.json", dir / "data.jsonl", dir / "run", quiet) ==
          kExitOk);
  // force every test subject into one group by doctoring the split plan
  auto records = load_jsonl(dir / "data.jsonl");
  auto split_path = (fs::path(dir / "run") / "split.json").string();
  auto plan_json = nlohmann::json::parse(slurp(split_path));
  std::vector<std::string> one_group;
  for (const auto& r : records)
    if (r.group == "A") one_group.push_back(r.subject_id);
  plan_json["test"] = std::vector<std::string>(one_group.begin(), one_group.begin() + 3);
  write_file(split_path, plan_json.dump(2));
  REQUIRE(cmd_evaluate(dir / "run", dir / "data.jsonl", quiet) == kExitData);
}

TEST_CASE("a numeric blowup exits 3 and keeps the last good checkpoint", "[pipeline]") {
  TempDir dir("numabort");
  CliOptions quiet;
  quiet.quiet = true;
  write_file(dir / "synth.json", synth_cfg_json(13, 1.0, 40));
  REQUIRE(cmd_synth(dir / "synth.json", dir / "data.jsonl", quiet) == kExitOk);
  std::string cfg = train_cfg_json("m1", 4, 13);
  cfg.replace(cfg.find("0.001"), 5, "1e150");  // guaranteed overflow
  write_file(dir / "train.json", cfg);
  REQUIRE(cmd_pretrain(dir / "train.json", dir / "data.jsonl", dir / "run", quiet) ==
          kExitNumeric);
  REQUIRE(fs::exists(fs::path(dir / "run") / "checkpoint.json"));
  auto cp = load_checkpoint((fs::path(dir / "run") / "checkpoint.json").string());
  REQUIRE(cp.enc1.weight(0).first_nonfinite() == size_t(-1));
  auto manifest = nlohmann::json::parse(
      slurp((fs::path(dir / "run") / "manifest-pretrain.json").string()));
  REQUIRE(manifest.at("status").get<std::string>().rfind("aborted", 0) == 0);
}

TEST_CASE("pareto command flags the frontier", "[pipeline]") {
  TempDir dir("pareto");
  CliOptions quiet;
  quiet.quiet = true;
  // forge three evaluated runs with known metric positions
  auto forge = [&](const std::string& name, double f1, double aggf) {
    fs::create_directories(dir / name);
    FairnessReport rep;
    rep.run_id = name;
    rep.f1 = f1;
    rep.agg_f = aggf;
    rep.accuracy = 0.5;
    rep.sp = rep.eopp = rep.eodd = rep.eacc = 1.0;
    rep.numerator_group = "A";
    write_file((fs::path(dir / name) / "fairness.csv").string(),
               fairness_csv_header() + "\n" + fairness_csv_row(rep) + "\n");
  };
  forge("run_a", 0.5, 0.5);   // dominated by run_b
  forge("run_b", 0.6, 0.6);
  forge("run_c", 0.7, 0.2);   // incomparable with run_b
  REQUIRE(cmd_pareto({dir / "run_a", dir / "run_b", dir / "run_c"}, dir / "out", quiet) ==
          kExitOk);
  auto csv = slurp((fs::path(dir / "out") / "pareto.csv").string());
  REQUIRE(csv.find("run_a,") != std::string::npos);
  REQUIRE(csv.find("run_a,0.5,0.5,0") != std::string::npos);
  REQUIRE(csv.find("run_b,0.59999999999999998,0.59999999999999998,1") != std::string::npos);
  REQUIRE(fs::exists(fs::path(dir / "out") / "pareto.svg"));

  REQUIRE(cmd_pareto({dir / "run_a"}, dir / "out2", quiet) == kExitOk);
  auto single = slurp((fs::path(dir / "out2") / "pareto.csv").string());
  REQUIRE(single.find("run_a,0.5,0.5,1") != std::string::npos);

  REQUIRE(cmd_pareto({dir / "never_evaluated"}, dir / "out3", quiet) == kExitConfig);
  REQUIRE(cmd_pareto({}, dir / "out4", quiet) == kExitConfig);
}

TEST_CASE("the output lock rejects concurrent invocations", "[pipeline]") {
  TempDir dir("lock");
  CliOptions quiet;
  quiet.quiet = true;
  write_file(dir / "cfg.json", synth_cfg_json());
  write_file(dir / "data.jsonl.lock", "");
  REQUIRE(cmd_synth(dir / "cfg.json", dir / "data.jsonl", quiet) == kExitConfig);
  fs::remove(dir / "data.jsonl.lock");
  REQUIRE(cmd_synth(dir / "cfg.json", dir / "data.jsonl", quiet) == kExitOk);
}

TEST_CASE("the installed binary wires the same commands", "[pipeline][cli]") {
  TempDir dir("cli");
  std::string cli = FAIRWELL_CLI_PATH;
  auto run = [&](const std::string& args) {
    int rc = std::system((cli + " " + args + " > /dev/null 2>&1").c_str());
    return WEXITSTATUS(rc);
  };
  REQUIRE(run("--help") == 0);
  REQUIRE(run("definitely-not-a-command") == kExitConfig);
  REQUIRE(run("synth") == kExitConfig);  // missing required flags

  write_file(dir / "synth.json", synth_cfg_json(11, 1.0, 50));
  write_file(dir / "train.json", train_cfg_json("m2", 1, 11));
  REQUIRE(run("synth --config " + (dir / "synth.json") + " --out " + (dir / "d.jsonl") +
              " --quiet") == 0);
  REQUIRE(run("pretrain --config " + (dir / "train.json") + " --data " + (dir / "d.jsonl") +
              " --out " + (dir / "run") + " --quiet") == 0);
  REQUIRE(run("evaluate --run " + (dir / "run") + " --data " + (dir / "d.jsonl") +
              " --quiet") == 0);
  REQUIRE(run("pareto " + (dir / "run") + " --out " + (dir / "pareto") + " --quiet") == 0);
  REQUIRE(fs::exists(fs::path(dir / "pareto") / "pareto.svg"));

  // seed precedence: env var is the fallback of last resort
  write_file(dir / "noseed.json",
             R"({"n_subjects": 20, "group_proportions": {"A": 0.5, "B": 0.5},
                 "label_rate_per_group": {"A": 0.5, "B": 0.5}})");
  REQUIRE(std::system(("FAIRWELL_SEED=99 " + cli + " synth --config " + (dir / "noseed.json") +
                       " --out " + (dir / "env.jsonl") + " --quiet > /dev/null 2>&1")
                          .c_str()) == 0);
  auto manifest = nlohmann::json::parse(slurp(dir / "env.jsonl.manifest.json"));
  REQUIRE(manifest.at("seed") == 99);
}
