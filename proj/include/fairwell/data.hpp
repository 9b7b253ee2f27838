// data.hpp - subject records: synthesis, JSONL ingestion, splits, batching
//
// The synthetic generator draws, per subject, a latent u ~ N(0, I) shared by
// all modalities, then emits per-segment features
//   W_m u + signal * b_m * [y == 1] + leak * c_m * [g == minority] + noise.
// Group bias is therefore dialed in explicitly through leak and through
// per-group label rates, and can be audited by probing the features.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairwell/common.hpp"
#include "fairwell/rng.hpp"

namespace fairwell {

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct SubjectRecord {
  std::string subject_id;
  std::string group;
  int label = 0;  // binary
  std::map<std::string, std::vector<std::vector<double>>> modalities;

  bool operator==(const SubjectRecord&) const = default;
};

inline void validate_record(const SubjectRecord& r, const std::string& where) {
  if (r.subject_id.empty()) throw DataError(where + ": empty subject_id");
  if (r.group.empty()) throw DataError(where + ": empty group");
  if (r.label != 0 && r.label != 1)
    throw DataError(where + ": label must be 0 or 1, got " + std::to_string(r.label));
  if (r.modalities.empty()) throw DataError(where + ": no modalities");
  for (const auto& [name, segs] : r.modalities) {
    if (segs.empty())
      throw DataError(where + ": modality '" + name + "' of subject '" + r.subject_id +
                      "' has no segments");
    size_t dim = segs.front().size();
    if (dim == 0)
      throw DataError(where + ": modality '" + name + "' has zero-length features");
    for (const auto& s : segs)
      if (s.size() != dim)
        throw DataError(where + ": modality '" + name + "' of subject '" + r.subject_id +
                        "' mixes segment lengths " + std::to_string(dim) + " and " +
                        std::to_string(s.size()));
    for (const auto& s : segs)
      for (double v : s)
        if (!is_finite(v))
          throw DataError(where + ": non-finite feature in modality '" + name +
                          "' of subject '" + r.subject_id + "'");
  }
}

inline void validate_records(const std::vector<SubjectRecord>& records) {
  std::set<std::string> ids;
  std::map<std::string, size_t> dims;
  for (const auto& r : records) {
    validate_record(r, "records");
    if (!ids.insert(r.subject_id).second)
      throw DataError("records: duplicate subject_id '" + r.subject_id + "'");
    for (const auto& [name, segs] : r.modalities) {
      auto [it, fresh] = dims.emplace(name, segs.front().size());
      if (!fresh && it->second != segs.front().size())
        throw DataError("records: modality '" + name + "' feature length differs across "
                        "subjects (" + std::to_string(it->second) + " vs " +
                        std::to_string(segs.front().size()) + " at subject '" +
                        r.subject_id + "')");
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

struct ModalityConfig {
  size_t feature_dim = 12;
  size_t segment_count_min = 3;
  size_t segment_count_max = 8;
  double signal_strength = 1.0;     // label shift magnitude
  double group_leak_strength = 0.0; // minority-group shift magnitude
  double noise_std = 0.5;
};

struct SynthConfig {
  size_t n_subjects = 120;
  std::map<std::string, double> group_proportions = {{"A", 0.5}, {"B", 0.5}};
  std::map<std::string, double> label_rate_per_group = {{"A", 0.5}, {"B", 0.5}};
  std::map<std::string, ModalityConfig> modalities = {{"audio", {}}, {"video", {}}};
  size_t latent_dim = 4;
  uint64_t seed = 1;

  void validate() const {
    if (n_subjects == 0) throw ConfigError("synth: n_subjects must be positive");
    if (group_proportions.size() < 2)
      throw ConfigError("synth: need at least two groups");
    double total = 0.0;
    for (const auto& [g, p] : group_proportions) {
      if (p <= 0.0) throw ConfigError("synth: group proportion for '" + g + "' must be > 0");
      total += p;
    }
    if (std::fabs(total - 1.0) > 1e-9)
      throw ConfigError("synth: group proportions sum to " + std::to_string(total) +
                        ", expected 1");
    for (const auto& [g, p] : label_rate_per_group)
      if (p < 0.0 || p > 1.0)
        throw ConfigError("synth: label rate for '" + g + "' outside [0, 1]");
    for (const auto& [g, _] : group_proportions)
      if (!label_rate_per_group.count(g))
        throw ConfigError("synth: no label rate for group '" + g + "'");
    if (modalities.empty()) throw ConfigError("synth: need at least one modality");
    for (const auto& [m, mc] : modalities) {
      if (mc.feature_dim == 0) throw ConfigError("synth: feature_dim of '" + m + "' is 0");
      if (mc.segment_count_min == 0 || mc.segment_count_max < mc.segment_count_min)
        throw ConfigError("synth: empty segment count range for '" + m + "'");
      if (mc.noise_std < 0) throw ConfigError("synth: negative noise_std for '" + m + "'");
    }
    if (latent_dim == 0) throw ConfigError("synth: latent_dim must be positive");
  }

  // Group with the smallest proportion; ties broken by name.
  std::string minority_group() const {
    std::string best;
    double best_p = 2.0;
    for (const auto& [g, p] : group_proportions)
      if (p < best_p || (p == best_p && g < best)) {
        best = g;
        best_p = p;
      }
    return best;
  }
};

inline std::vector<SubjectRecord> generate(const SynthConfig& config) {
  config.validate();
  const std::string minority = config.minority_group();

  // fixed per-modality projection/shift directions, independent of subjects
  struct ModalityBasis {
    std::vector<double> w;  // feature_dim x latent_dim
    std::vector<double> label_shift, group_shift;
  };
  std::map<std::string, ModalityBasis> bases;
  for (const auto& [name, mc] : config.modalities) {
    Rng rng(derive_seed(config.seed, "basis:" + name));
    ModalityBasis b;
    b.w.resize(mc.feature_dim * config.latent_dim);
    for (auto& v : b.w) v = rng.normal() / std::sqrt(double(config.latent_dim));
    b.label_shift.resize(mc.feature_dim);
    b.group_shift.resize(mc.feature_dim);
    for (auto& v : b.label_shift) v = rng.normal();
    for (auto& v : b.group_shift) v = rng.normal();
    auto norm_to_unit = [](std::vector<double>& v) {
      double n = 0.0;
      for (double x : v) n += x * x;
      n = std::sqrt(n);
      for (double& x : v) x /= n;
    };
    norm_to_unit(b.label_shift);
    norm_to_unit(b.group_shift);
    bases.emplace(name, std::move(b));
  }

  // group assignment: deterministic largest-remainder quotas, then shuffled
  std::vector<std::string> group_of(config.n_subjects);
  {
    std::vector<std::pair<std::string, double>> quotas(config.group_proportions.begin(),
                                                       config.group_proportions.end());
    std::vector<size_t> counts(quotas.size(), 0);
    size_t assigned = 0;
    for (size_t i = 0; i < quotas.size(); ++i) {
      counts[i] = static_cast<size_t>(quotas[i].second * double(config.n_subjects));
      assigned += counts[i];
    }
    std::vector<size_t> order(quotas.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      double fa = quotas[a].second * double(config.n_subjects) - double(counts[a]);
      double fb = quotas[b].second * double(config.n_subjects) - double(counts[b]);
      if (fa != fb) return fa > fb;
      return quotas[a].first < quotas[b].first;
    });
    for (size_t i = 0; assigned < config.n_subjects; ++i, ++assigned)
      ++counts[order[i % order.size()]];
    size_t idx = 0;
    for (size_t qi = 0; qi < quotas.size(); ++qi)
      for (size_t c = 0; c < counts[qi]; ++c) group_of[idx++] = quotas[qi].first;
    Rng rng(derive_seed(config.seed, "groups"));
    rng.shuffle(group_of);
  }

  std::vector<SubjectRecord> records;
  records.reserve(config.n_subjects);
  for (size_t i = 0; i < config.n_subjects; ++i) {
    Rng rng(derive_seed(config.seed, "subject:" + std::to_string(i)));
    SubjectRecord r;
    {
      std::ostringstream id;
      id << "s" << std::setw(5) << std::setfill('0') << i;
      r.subject_id = id.str();
    }
    r.group = group_of[i];
    r.label = rng.uniform01() < config.label_rate_per_group.at(r.group) ? 1 : 0;

    std::vector<double> latent(config.latent_dim);
    for (auto& v : latent) v = rng.normal();

    for (const auto& [name, mc] : config.modalities) {
      const ModalityBasis& basis = bases.at(name);
      size_t n_segs = static_cast<size_t>(
          rng.uniform_range(int64_t(mc.segment_count_min), int64_t(mc.segment_count_max)));
      std::vector<std::vector<double>> segs(n_segs);
      for (auto& seg : segs) {
        seg.resize(mc.feature_dim);
        for (size_t f = 0; f < mc.feature_dim; ++f) {
          double v = 0.0;
          for (size_t l = 0; l < config.latent_dim; ++l)
            v += basis.w[f * config.latent_dim + l] * latent[l];
          if (r.label == 1) v += mc.signal_strength * basis.label_shift[f];
          if (r.group == minority) v += mc.group_leak_strength * basis.group_shift[f];
          v += mc.noise_std * rng.normal();
          seg[f] = v;
        }
      }
      r.modalities.emplace(name, std::move(segs));
    }
    records.push_back(std::move(r));
  }
  return records;
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

inline nlohmann::json record_to_json(const SubjectRecord& r) {
  nlohmann::json j;
  j["subject_id"] = r.subject_id;
  j["group"] = r.group;
  j["label"] = r.label;
  j["modalities"] = nlohmann::json::object();
  for (const auto& [name, segs] : r.modalities) j["modalities"][name] = segs;
  return j;
}

inline void save_jsonl(const std::vector<SubjectRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& r : records) out << record_to_json(r).dump() << "\n";
  if (!out) throw DataError("write failure on '" + path + "'");
}

inline std::vector<SubjectRecord> load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<SubjectRecord> records;
  std::string line;
  size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw DataError(path + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) fail("expected a JSON object");
    for (const char* key : {"subject_id", "group", "label", "modalities"})
      if (!j.contains(key)) fail(std::string("missing field '") + key + "'");
    SubjectRecord r;
    if (!j["subject_id"].is_string()) fail("'subject_id' must be a string");
    if (!j["group"].is_string()) fail("'group' must be a string");
    if (!j["label"].is_number_integer()) fail("'label' must be 0 or 1");
    if (!j["modalities"].is_object()) fail("'modalities' must be an object");
    r.subject_id = j["subject_id"].get<std::string>();
    r.group = j["group"].get<std::string>();
    r.label = j["label"].get<int>();
    for (const auto& [name, segs] : j["modalities"].items()) {
      if (!segs.is_array() || segs.empty()) fail("modality '" + name + "' must be a non-empty array");
      std::vector<std::vector<double>> parsed;
      for (const auto& seg : segs) {
        if (!seg.is_array()) fail("modality '" + name + "' segments must be arrays");
        std::vector<double> v;
        for (const auto& x : seg) {
          if (!x.is_number()) fail("modality '" + name + "' has a non-numeric feature");
          v.push_back(x.get<double>());
        }
        parsed.push_back(std::move(v));
      }
      r.modalities.emplace(name, std::move(parsed));
    }
    try {
      validate_record(r, "record");
    } catch (const DataError& e) {
      fail(e.what());
    }
    records.push_back(std::move(r));
  }
  validate_records(records);
  return records;
}

// ---------------------------------------------------------------------------
// Subject-level stratified splits
// ---------------------------------------------------------------------------

struct SplitFractions {
  double train = 0.8, val = 0.1, test = 0.1;

  void validate() const {
    if (train < 0 || val < 0 || test < 0)
      throw ConfigError("split fractions must be non-negative");
    if (std::fabs(train + val + test - 1.0) > 1e-9)
      throw ConfigError("split fractions must sum to 1");
  }
};

struct SplitPlan {
  std::vector<std::string> train, val, test;
  // (group, label) -> counts per split, for the stratification report
  std::map<std::pair<std::string, int>, std::array<size_t, 3>> cells;
  uint64_t seed = 0;

  const std::vector<std::string>& split(size_t s) const {
    return s == 0 ? train : s == 1 ? val : test;
  }
};

// Subject-level disjoint splits stratified on (group, label). Within each
// cell subjects are ordered by a seeded hash of their id; cell-vs-split
// counts come from controlled rounding so that per-cell counts stay within
// one of exact proportionality while split totals match their own
// largest-remainder targets.
inline SplitPlan split_subjects(const std::vector<SubjectRecord>& records,
                                const SplitFractions& fractions, uint64_t seed) {
  fractions.validate();
  if (records.empty()) throw DataError("split_subjects: no records");

  std::map<std::pair<std::string, int>, std::vector<std::string>> cells;
  for (const auto& r : records) cells[{r.group, r.label}].push_back(r.subject_id);
  for (auto& [key, ids] : cells) {
    std::sort(ids.begin(), ids.end(), [&](const std::string& a, const std::string& b) {
      uint64_t ha = derive_seed(seed, "order:" + a);
      uint64_t hb = derive_seed(seed, "order:" + b);
      if (ha != hb) return ha < hb;
      return a < b;
    });
  }

  const double f[3] = {fractions.train, fractions.val, fractions.test};
  const size_t n = records.size();

  // global split targets by largest remainder
  std::array<size_t, 3> target{};
  {
    double frac[3];
    size_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
      double q = f[s] * double(n);
      target[s] = static_cast<size_t>(q);
      frac[s] = q - double(target[s]);
      assigned += target[s];
    }
    while (assigned < n) {
      int best = 0;
      for (int s = 1; s < 3; ++s)
        if (frac[s] > frac[best]) best = s;
      ++target[best];
      frac[best] = -1.0;
      ++assigned;
    }
  }

  // per-cell floors, then distribute the remainder greedily by fractional
  // part subject to the global targets
  struct CellAlloc {
    std::pair<std::string, int> key;
    std::array<size_t, 3> count{};
    std::array<double, 3> frac{};
    size_t remaining = 0;
  };
  std::vector<CellAlloc> allocs;
  std::array<size_t, 3> used{};
  for (const auto& [key, ids] : cells) {
    CellAlloc a;
    a.key = key;
    size_t placed = 0;
    for (int s = 0; s < 3; ++s) {
      double q = f[s] * double(ids.size());
      a.count[s] = static_cast<size_t>(q);
      a.frac[s] = q - double(a.count[s]);
      placed += a.count[s];
      used[s] += a.count[s];
    }
    a.remaining = ids.size() - placed;
    allocs.push_back(std::move(a));
  }
  size_t leftover = 0;
  for (const auto& a : allocs) leftover += a.remaining;
  while (leftover > 0) {
    int best_cell = -1, best_split = -1;
    double best_frac = -1.0;
    for (size_t c = 0; c < allocs.size(); ++c) {
      if (allocs[c].remaining == 0) continue;
      for (int s = 0; s < 3; ++s) {
        if (used[s] >= target[s]) continue;
        if (allocs[c].frac[s] > best_frac) {
          best_frac = allocs[c].frac[s];
          best_cell = int(c);
          best_split = s;
        }
      }
    }
    if (best_cell < 0) {
      // all under-target splits exhausted their fractional preferences;
      // place anywhere capacity remains
      for (size_t c = 0; c < allocs.size() && best_cell < 0; ++c)
        if (allocs[c].remaining > 0)
          for (int s = 0; s < 3; ++s)
            if (used[s] < target[s]) {
              best_cell = int(c);
              best_split = s;
              break;
            }
    }
    if (best_cell < 0) throw StateError("split_subjects: allocation failed");
    auto& a = allocs[size_t(best_cell)];
    ++a.count[size_t(best_split)];
    a.frac[size_t(best_split)] = -1.0;
    --a.remaining;
    ++used[size_t(best_split)];
    --leftover;
  }

  SplitPlan plan;
  plan.seed = seed;
  for (const auto& a : allocs) {
    const auto& ids = cells.at(a.key);
    size_t off = 0;
    std::array<std::vector<std::string>*, 3> dst = {&plan.train, &plan.val, &plan.test};
    for (int s = 0; s < 3; ++s) {
      for (size_t c = 0; c < a.count[size_t(s)]; ++c) dst[size_t(s)]->push_back(ids[off++]);
    }
    plan.cells[a.key] = a.count;
  }
  std::sort(plan.train.begin(), plan.train.end());
  std::sort(plan.val.begin(), plan.val.end());
  std::sort(plan.test.begin(), plan.test.end());
  return plan;
}

inline nlohmann::json split_plan_to_json(const SplitPlan& plan) {
  nlohmann::json j;
  j["seed"] = plan.seed;
  j["train"] = plan.train;
  j["val"] = plan.val;
  j["test"] = plan.test;
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& [key, counts] : plan.cells) {
    cells.push_back({{"group", key.first},
                     {"label", key.second},
                     {"train", counts[0]},
                     {"val", counts[1]},
                     {"test", counts[2]}});
  }
  j["cells"] = cells;
  return j;
}

inline SplitPlan split_plan_from_json(const nlohmann::json& j) {
  SplitPlan plan;
  plan.seed = j.at("seed").get<uint64_t>();
  plan.train = j.at("train").get<std::vector<std::string>>();
  plan.val = j.at("val").get<std::vector<std::string>>();
  plan.test = j.at("test").get<std::vector<std::string>>();
  if (j.contains("cells"))
    for (const auto& c : j.at("cells"))
      plan.cells[{c.at("group").get<std::string>(), c.at("label").get<int>()}] = {
          c.at("train").get<size_t>(), c.at("val").get<size_t>(), c.at("test").get<size_t>()};
  return plan;
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

enum class BatchMode : uint8_t { unconstrained, same_label };

// One epoch worth of batches as index lists into `records`. Deterministic in
// (seed, epoch). In same_label mode every batch is single-label, classes
// alternate where counts permit, and each subject appears exactly once.
inline std::vector<std::vector<size_t>> sample_batches(
    const std::vector<SubjectRecord>& records, size_t batch_size, BatchMode mode,
    uint64_t seed, int epoch = 1) {
  if (batch_size == 0) throw ConfigError("sample_batches: batch_size must be >= 1");
  if (records.empty()) throw DataError("sample_batches: no records");
  Rng rng(derive_seed(seed, "epoch:" + std::to_string(epoch)));

  if (mode == BatchMode::unconstrained) {
    std::vector<size_t> order(records.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<std::vector<size_t>> batches;
    for (size_t off = 0; off < order.size(); off += batch_size) {
      size_t end = std::min(off + batch_size, order.size());
      batches.emplace_back(order.begin() + long(off), order.begin() + long(end));
    }
    return batches;
  }

  // same_label: per-class shuffles, chunk each class, then interleave
  std::array<std::vector<size_t>, 2> by_class;
  for (size_t i = 0; i < records.size(); ++i)
    by_class[size_t(records[i].label)].push_back(i);
  if (by_class[0].empty() || by_class[1].empty())
    throw DataError("sample_batches: same_label mode requires both classes present");
  std::array<std::vector<std::vector<size_t>>, 2> class_batches;
  for (int c = 0; c < 2; ++c) {
    rng.shuffle(by_class[size_t(c)]);
    for (size_t off = 0; off < by_class[size_t(c)].size(); off += batch_size) {
      size_t end = std::min(off + batch_size, by_class[size_t(c)].size());
      class_batches[size_t(c)].emplace_back(by_class[size_t(c)].begin() + long(off),
                                            by_class[size_t(c)].begin() + long(end));
    }
  }
  std::vector<std::vector<size_t>> batches;
  std::array<size_t, 2> next{0, 0};
  int last = -1;
  while (next[0] < class_batches[0].size() || next[1] < class_batches[1].size()) {
    std::array<size_t, 2> remaining = {class_batches[0].size() - next[0],
                                       class_batches[1].size() - next[1]};
    int pick;
    if (remaining[0] == 0) {
      pick = 1;
    } else if (remaining[1] == 0) {
      pick = 0;
    } else if (last == -1) {
      pick = remaining[1] > remaining[0] ? 1 : 0;  // start with the larger class
    } else {
      pick = 1 - last;  // alternate whenever the other class still has batches
    }
    batches.push_back(std::move(class_batches[size_t(pick)][next[size_t(pick)]]));
    ++next[size_t(pick)];
    last = pick;
  }
  return batches;
}

}  // namespace fairwell
