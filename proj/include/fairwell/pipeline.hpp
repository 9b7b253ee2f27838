// pipeline.hpp - config files, run manifests and the four CLI commands
//
// Commands return process exit codes instead of throwing across main():
//   0 success, 2 usage/config error, 3 numeric abort, 4 data precondition.
// Every command writes a manifest before doing work and finalizes it after,
// holding an exclusive lock file on its output directory for the duration.
#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairwell/common.hpp"
#include "fairwell/data.hpp"
#include "fairwell/fairness.hpp"
#include "fairwell/rng.hpp"
#include "fairwell/training.hpp"

namespace fairwell {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot hash missing file '" + path + "'");
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
  return hex64(h);
}

inline std::string now_iso8601() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in '" + path + "': " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw DataError("write failure on '" + path + "'");
}

inline void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& where) {
  for (const auto& [key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(where + ": unknown key '" + key + "'");
}

// Exclusive lock file; concurrent invocations must target distinct outputs.
class RunLock {
 public:
  explicit RunLock(const std::string& path) : path_(path) {
    fd_ = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw ConfigError("lock file '" + path +
                        "' exists; another invocation targets this output "
                        "(remove the file if it is stale)");
  }
  ~RunLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

// ---------------------------------------------------------------------------
// Config serialization
// ---------------------------------------------------------------------------

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"n_subjects", "group_proportions", "label_rate_per_group", "modalities",
              "latent_dim", "seed"},
             "synth config");
  SynthConfig c;
  if (j.contains("n_subjects")) c.n_subjects = j.at("n_subjects").get<size_t>();
  if (j.contains("group_proportions"))
    c.group_proportions = j.at("group_proportions").get<std::map<std::string, double>>();
  if (j.contains("label_rate_per_group"))
    c.label_rate_per_group = j.at("label_rate_per_group").get<std::map<std::string, double>>();
  if (j.contains("latent_dim")) c.latent_dim = j.at("latent_dim").get<size_t>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("modalities")) {
    c.modalities.clear();
    for (const auto& [name, mj] : j.at("modalities").items()) {
      check_keys(mj,
                 {"feature_dim", "segment_count_range", "signal_strength",
                  "group_leak_strength", "noise_std"},
                 "modality '" + name + "'");
      ModalityConfig mc;
      if (mj.contains("feature_dim")) mc.feature_dim = mj.at("feature_dim").get<size_t>();
      if (mj.contains("segment_count_range")) {
        auto range = mj.at("segment_count_range").get<std::vector<size_t>>();
        if (range.size() != 2)
          throw ConfigError("segment_count_range of '" + name + "' must be [min, max]");
        mc.segment_count_min = range[0];
        mc.segment_count_max = range[1];
      }
      if (mj.contains("signal_strength"))
        mc.signal_strength = mj.at("signal_strength").get<double>();
      if (mj.contains("group_leak_strength"))
        mc.group_leak_strength = mj.at("group_leak_strength").get<double>();
      if (mj.contains("noise_std")) mc.noise_std = mj.at("noise_std").get<double>();
      c.modalities.emplace(name, mc);
    }
  }
  c.validate();
  return c;
}

inline nlohmann::json synth_config_to_json(const SynthConfig& c) {
  nlohmann::json j;
  j["n_subjects"] = c.n_subjects;
  j["group_proportions"] = c.group_proportions;
  j["label_rate_per_group"] = c.label_rate_per_group;
  j["latent_dim"] = c.latent_dim;
  j["seed"] = c.seed;
  j["modalities"] = nlohmann::json::object();
  for (const auto& [name, mc] : c.modalities) {
    j["modalities"][name] = {{"feature_dim", mc.feature_dim},
                             {"segment_count_range", {mc.segment_count_min, mc.segment_count_max}},
                             {"signal_strength", mc.signal_strength},
                             {"group_leak_strength", mc.group_leak_strength},
                             {"noise_std", mc.noise_std}};
  }
  return j;
}

// A training run's full specification: optimization config, split fractions
// and the fairness orientation used at evaluation time.
struct RunSpec {
  TrainConfig train;
  SplitFractions split;
  std::string numerator_group;  // empty selects the minority group
};

inline RunSpec run_spec_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"method", "pooling", "weights", "epochs", "batch_size", "learning_rate",
              "optimizer", "seed", "pooled_modality", "hidden_dims", "embedding_dim",
              "projection_dim", "include_diagonal", "batch_level_vc", "fine_tune", "fine_tune_epochs",
              "split", "numerator_group"},
             "train config");
  RunSpec spec;
  TrainConfig& c = spec.train;
  if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
  if (j.contains("pooling")) c.pooling = pooling_from_string(j.at("pooling").get<std::string>());
  if (j.contains("weights")) {
    const auto& wj = j.at("weights");
    check_keys(wj, {"lambda", "mu", "nu", "gamma", "epsilon"}, "weights");
    if (wj.contains("lambda")) c.weights.lambda = wj.at("lambda").get<double>();
    if (wj.contains("mu")) c.weights.mu = wj.at("mu").get<double>();
    if (wj.contains("nu")) c.weights.nu = wj.at("nu").get<double>();
    if (wj.contains("gamma")) c.weights.gamma = wj.at("gamma").get<double>();
    if (wj.contains("epsilon")) c.weights.epsilon = wj.at("epsilon").get<double>();
  }
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<size_t>();
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("optimizer"))
    c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("pooled_modality"))
    c.pooled_modality = j.at("pooled_modality").get<std::string>();
  if (j.contains("hidden_dims")) c.hidden_dims = j.at("hidden_dims").get<std::vector<size_t>>();
  if (j.contains("embedding_dim")) c.embedding_dim = j.at("embedding_dim").get<size_t>();
  if (j.contains("projection_dim")) c.projection_dim = j.at("projection_dim").get<size_t>();
  if (j.contains("include_diagonal")) c.include_diagonal = j.at("include_diagonal").get<bool>();
  if (j.contains("batch_level_vc")) c.batch_level_vc = j.at("batch_level_vc").get<bool>();
  if (j.contains("fine_tune")) c.fine_tune = j.at("fine_tune").get<bool>();
  if (j.contains("fine_tune_epochs")) c.fine_tune_epochs = j.at("fine_tune_epochs").get<int>();
  if (j.contains("split")) {
    const auto& sj = j.at("split");
    check_keys(sj, {"train", "val", "test"}, "split");
    if (sj.contains("train")) spec.split.train = sj.at("train").get<double>();
    if (sj.contains("val")) spec.split.val = sj.at("val").get<double>();
    if (sj.contains("test")) spec.split.test = sj.at("test").get<double>();
  }
  if (j.contains("numerator_group"))
    spec.numerator_group = j.at("numerator_group").get<std::string>();
  c.validate();
  spec.split.validate();
  return spec;
}

inline nlohmann::json run_spec_to_json(const RunSpec& spec) {
  const TrainConfig& c = spec.train;
  nlohmann::json j;
  j["method"] = method_name(c.method);
  j["pooling"] = pooling_name(c.pooling);
  j["weights"] = {{"lambda", c.weights.lambda},
                  {"mu", c.weights.mu},
                  {"nu", c.weights.nu},
                  {"gamma", c.weights.gamma},
                  {"epsilon", c.weights.epsilon}};
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["optimizer"] = optimizer_name(c.optimizer);
  j["seed"] = c.seed;
  j["pooled_modality"] = c.pooled_modality;
  j["hidden_dims"] = c.hidden_dims;
  j["embedding_dim"] = c.embedding_dim;
  j["projection_dim"] = c.projection_dim;
  j["include_diagonal"] = c.include_diagonal;
  j["batch_level_vc"] = c.batch_level_vc;
  j["fine_tune"] = c.fine_tune;
  j["fine_tune_epochs"] = c.fine_tune_epochs;
  j["split"] = {{"train", spec.split.train}, {"val", spec.split.val}, {"test", spec.split.test}};
  j["numerator_group"] = spec.numerator_group;
  return j;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

class Manifest {
 public:
  Manifest(std::string path, std::string command, nlohmann::json resolved_config,
           uint64_t seed)
      : path_(std::move(path)) {
    j_["command"] = std::move(command);
    j_["version"] = std::string(kVersion);
    j_["seed"] = seed;
    j_["config"] = std::move(resolved_config);
    j_["inputs"] = nlohmann::json::object();
    j_["artifacts"] = nlohmann::json::array();
    j_["started_at"] = now_iso8601();
    j_["status"] = "started";
    flush();
  }

  void add_input(const std::string& path) { j_["inputs"][path] = file_hash(path); }
  void add_artifact(const std::string& path) { j_["artifacts"].push_back(path); }

  void finalize(const std::string& status) {
    j_["finished_at"] = now_iso8601();
    j_["status"] = status;
    flush();
  }

 private:
  void flush() { write_text_file(path_, j_.dump(2) + "\n"); }

  std::string path_;
  nlohmann::json j_;
};

// ---------------------------------------------------------------------------
// Shared command plumbing
// ---------------------------------------------------------------------------

struct CliOptions {
  std::optional<uint64_t> seed;
  std::optional<std::string> method;
  std::optional<std::string> pooling;
  bool quiet = false;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitData = 4;

namespace detail {

// flag > config file > FAIRWELL_SEED env > config default
inline uint64_t resolve_seed(const CliOptions& cli, const nlohmann::json& config_json,
                             uint64_t config_default) {
  if (cli.seed) return *cli.seed;
  if (config_json.contains("seed")) return config_json.at("seed").get<uint64_t>();
  if (const char* env = std::getenv("FAIRWELL_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError("FAIRWELL_SEED is not a valid 64-bit integer");
    }
  }
  return config_default;
}

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const DataError*>(&e)) return kExitData;
  return kExitConfig;
}

inline int report_error(const std::exception& e, bool quiet) {
  if (!quiet) std::cerr << "error: " << e.what() << "\n";
  return exit_code_for(e);
}

inline std::vector<SubjectRecord> select_records(const std::vector<SubjectRecord>& records,
                                                 const std::vector<std::string>& ids) {
  std::map<std::string, const SubjectRecord*> by_id;
  for (const auto& r : records) by_id.emplace(r.subject_id, &r);
  std::vector<SubjectRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw DataError("split references subject '" + id + "' absent from the dataset");
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

inline int cmd_synth(const std::string& config_path, const std::string& out_path,
                     const CliOptions& cli = {}) {
  try {
    nlohmann::json cj = load_json_file(config_path);
    SynthConfig config = synth_config_from_json(cj);
    config.seed = detail::resolve_seed(cli, cj, config.seed);

    if (fs::path(out_path).has_parent_path())
      fs::create_directories(fs::path(out_path).parent_path());
    RunLock lock(out_path + ".lock");
    Manifest manifest(out_path + ".manifest.json", "synth", synth_config_to_json(config),
                      config.seed);
    manifest.add_input(config_path);

    auto records = generate(config);
    save_jsonl(records, out_path);
    manifest.add_artifact(out_path);
    manifest.finalize("complete");

    if (!cli.quiet) {
      std::map<std::string, size_t> group_n;
      std::map<std::string, size_t> group_pos;
      for (const auto& r : records) {
        ++group_n[r.group];
        if (r.label == 1) ++group_pos[r.group];
      }
      std::cout << "wrote " << records.size() << " subjects to " << out_path << "\n";
      for (const auto& [g, n] : group_n)
        std::cout << "  group " << g << ": " << n << " subjects ("
                  << double(n) / double(records.size()) << "), P(y=1)="
                  << double(group_pos[g]) / double(n) << "\n";
    }
    return kExitOk;
  } catch (const std::exception& e) {
    return detail::report_error(e, cli.quiet);
  }
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

inline int cmd_pretrain(const std::string& config_path, const std::string& data_path,
                        const std::string& out_dir, const CliOptions& cli = {}) {
  try {
    nlohmann::json cj = load_json_file(config_path);
    RunSpec spec = run_spec_from_json(cj);
    if (cli.method) spec.train.method = method_from_string(*cli.method);
    if (cli.pooling) spec.train.pooling = pooling_from_string(*cli.pooling);
    spec.train.seed = detail::resolve_seed(cli, cj, spec.train.seed);
    spec.train.validate();

    auto records = load_jsonl(data_path);

    fs::create_directories(out_dir);
    RunLock lock((fs::path(out_dir) / ".lock").string());
    nlohmann::json resolved = run_spec_to_json(spec);
    Manifest manifest((fs::path(out_dir) / "manifest-pretrain.json").string(), "pretrain",
                      resolved, spec.train.seed);
    manifest.add_input(config_path);
    manifest.add_input(data_path);

    write_text_file((fs::path(out_dir) / "config.json").string(), resolved.dump(2) + "\n");
    manifest.add_artifact((fs::path(out_dir) / "config.json").string());

    SplitPlan plan = split_subjects(records, spec.split, spec.train.seed);
    write_text_file((fs::path(out_dir) / "split.json").string(),
                    split_plan_to_json(plan).dump(2) + "\n");
    manifest.add_artifact((fs::path(out_dir) / "split.json").string());

    auto train_records = detail::select_records(records, plan.train);
    PretrainResult result = pretrain(train_records, spec.train);

    std::ostringstream losses;
    losses << loss_csv_header() << "\n";
    for (const auto& sl : result.log)
      losses << loss_csv_row(sl.epoch, sl.step, sl.loss) << "\n";
    write_text_file((fs::path(out_dir) / "losses.csv").string(), losses.str());
    manifest.add_artifact((fs::path(out_dir) / "losses.csv").string());

    std::string config_hash = hex64(fnv1a64(resolved.dump()));
    save_checkpoint((fs::path(out_dir) / "checkpoint.json").string(), result.enc1,
                    result.enc2, result.modalities, config_hash);
    manifest.add_artifact((fs::path(out_dir) / "checkpoint.json").string());

    if (result.aborted) {
      manifest.finalize("aborted: " + result.abort_reason);
      if (!cli.quiet)
        std::cerr << "numeric abort: " << result.abort_reason
                  << " (last-good checkpoint retained)\n";
      return kExitNumeric;
    }
    manifest.finalize("complete");
    if (!cli.quiet)
      std::cout << "pretrained " << method_name(spec.train.method) << "/"
                << pooling_name(spec.train.pooling) << " for " << spec.train.epochs
                << " epochs (" << result.log.size() << " steps) -> " << out_dir << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    return detail::report_error(e, cli.quiet);
  }
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

inline int cmd_evaluate(const std::string& run_dir, const std::string& data_path,
                        const CliOptions& cli = {}) {
  try {
    fs::path dir(run_dir);
    if (!fs::exists(dir / "checkpoint.json"))
      throw ConfigError("no checkpoint in '" + run_dir + "' (run pretrain first)");
    RunSpec spec = run_spec_from_json(load_json_file((dir / "config.json").string()));
    SplitPlan plan = split_plan_from_json(load_json_file((dir / "split.json").string()));
    Checkpoint cp = load_checkpoint((dir / "checkpoint.json").string());

    auto records = load_jsonl(data_path);
    auto train_records = detail::select_records(records, plan.train);
    auto val_records = detail::select_records(records, plan.val);
    auto test_records = detail::select_records(records, plan.test);

    RunLock lock((dir / ".lock").string());
    Manifest manifest((dir / "manifest-evaluate.json").string(), "evaluate",
                      run_spec_to_json(spec), spec.train.seed);
    manifest.add_input(data_path);
    manifest.add_input((dir / "checkpoint.json").string());

    PredictionSet preds;
    if (spec.train.fine_tune) {
      auto ft = fine_tune(cp.enc1, cp.enc2, cp.modalities, train_records, val_records,
                          spec.train);
      preds = predict(ft.enc1, ft.enc2, cp.modalities, ft.probe, test_records);
    } else {
      Probe probe = fit_probe(cp.enc1, cp.enc2, cp.modalities, train_records, val_records,
                              spec.train.seed);
      preds = predict(cp.enc1, cp.enc2, cp.modalities, probe, test_records);
    }

    {
      std::set<std::string> groups;
      for (const auto& r : preds) groups.insert(r.group);
      if (groups.size() != 2)
        throw DataError("test split must contain exactly two groups, found " +
                        std::to_string(groups.size()));
    }

    std::ostringstream pcsv;
    pcsv << "subject_id,group,label,score,pred\n";
    for (const auto& r : preds)
      pcsv << r.subject_id << "," << r.group << "," << r.label << ","
           << format_double(r.score) << "," << r.pred << "\n";
    write_text_file((dir / "predictions.csv").string(), pcsv.str());
    manifest.add_artifact((dir / "predictions.csv").string());

    std::string run_id = dir.filename().string();
    if (run_id.empty()) run_id = dir.parent_path().filename().string();
    FairnessReport rep = evaluate_predictions(preds, spec.numerator_group, run_id);
    write_text_file((dir / "fairness.csv").string(),
                    fairness_csv_header() + "\n" + fairness_csv_row(rep) + "\n");
    manifest.add_artifact((dir / "fairness.csv").string());
    manifest.finalize("complete");

    if (!cli.quiet)
      std::cout << "run " << run_id << ": acc=" << rep.accuracy << " f1=" << rep.f1
                << " sp=" << rep.sp << " eopp=" << rep.eopp << " eodd=" << rep.eodd
                << " eacc=" << rep.eacc << " agg_f=" << rep.agg_f << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    return detail::report_error(e, cli.quiet);
  }
}

// ---------------------------------------------------------------------------
// pareto
// ---------------------------------------------------------------------------

inline RunPoint parse_fairness_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("run has no fairness.csv: '" + path + "' (evaluate it first)");
  std::string header, row;
  if (!std::getline(in, header) || !std::getline(in, row))
    throw DataError("fairness.csv '" + path + "' is malformed");
  std::vector<std::string> cols;
  std::stringstream ss(row);
  std::string cell;
  while (std::getline(ss, cell, ',')) cols.push_back(cell);
  if (cols.size() < 8) throw DataError("fairness.csv '" + path + "' has too few columns");
  RunPoint p;
  p.run_id = cols[0];
  p.f1 = std::stod(cols[2]);
  p.agg_f = std::stod(cols[7]);
  return p;
}

inline int cmd_pareto(const std::vector<std::string>& run_dirs, const std::string& out_dir,
                      const CliOptions& cli = {}) {
  try {
    if (run_dirs.empty()) throw ConfigError("pareto requires at least one evaluated run");
    std::vector<RunPoint> points;
    for (const auto& rd : run_dirs)
      points.push_back(parse_fairness_csv((fs::path(rd) / "fairness.csv").string()));

    fs::create_directories(out_dir);
    RunLock lock((fs::path(out_dir) / ".pareto.lock").string());
    nlohmann::json cfg;
    cfg["runs"] = run_dirs;
    Manifest manifest((fs::path(out_dir) / "manifest-pareto.json").string(), "pareto", cfg, 0);
    for (const auto& rd : run_dirs)
      manifest.add_input((fs::path(rd) / "fairness.csv").string());

    auto front = pareto_front(points);
    std::set<size_t> in_front(front.begin(), front.end());
    std::ostringstream csv;
    csv << "run_id,f1,agg_f,on_front\n";
    for (size_t i = 0; i < points.size(); ++i)
      csv << points[i].run_id << "," << format_double(points[i].f1) << ","
          << format_double(points[i].agg_f) << "," << (in_front.count(i) ? 1 : 0) << "\n";
    std::string csv_path = (fs::path(out_dir) / "pareto.csv").string();
    write_text_file(csv_path, csv.str());
    manifest.add_artifact(csv_path);

    std::string svg_path = (fs::path(out_dir) / "pareto.svg").string();
    write_pareto_svg(svg_path, points, front);
    manifest.add_artifact(svg_path);
    manifest.finalize("complete");

    if (!cli.quiet)
      std::cout << "pareto front holds " << front.size() << " of " << points.size()
                << " runs -> " << csv_path << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    return detail::report_error(e, cli.quiet);
  }
}

}  // namespace fairwell
