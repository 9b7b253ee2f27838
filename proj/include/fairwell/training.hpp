// training.hpp - two-phase pipeline: SSL pretraining + frozen-encoder probe
//
// Phase one optimizes both segment encoders under the configured batch loss
// (vicreg baseline or m1-m4). Phase two fits a logistic probe on the frozen
// concatenated pooled embeddings and picks the decision threshold on the
// validation split by F1. A config-gated fine-tune mode unfreezes the
// encoders under a cross-entropy head instead.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairwell/common.hpp"
#include "fairwell/data.hpp"
#include "fairwell/encoders.hpp"
#include "fairwell/fairness.hpp"
#include "fairwell/loss_graph.hpp"
#include "fairwell/losses.hpp"
#include "fairwell/rng.hpp"

namespace fairwell {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

enum class OptimizerKind : uint8_t { sgd_momentum, adaptive_moments };

inline const char* optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::sgd_momentum ? "sgd_momentum" : "adaptive_moments";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (s == "adaptive_moments") return OptimizerKind::adaptive_moments;
  throw ConfigError("unknown optimizer '" + s + "'");
}

struct TrainConfig {
  Method method = Method::m2;
  Pooling pooling = Pooling::single;
  LossWeights weights;
  int epochs = 20;
  size_t batch_size = 16;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adaptive_moments;
  uint64_t seed = 1;
  std::string pooled_modality;  // empty selects the modality with the larger
                                // mean segment count
  // encoder architecture
  std::vector<size_t> hidden_dims = {32};
  size_t embedding_dim = 16;
  size_t projection_dim = 0;  // > 0 adds a linear projection head that only
                              // the loss sees
  // config-gated variations
  bool include_diagonal = true;
  bool batch_level_vc = false;
  bool fine_tune = false;
  int fine_tune_epochs = 50;

  void validate() const {
    weights.validate();
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (learning_rate < 0) throw ConfigError("learning_rate must be >= 0");
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
    if (pooling == Pooling::none && method != Method::vicreg)
      throw ConfigError("pooling 'none' is only valid with the vicreg baseline");
    if (fine_tune_epochs < 1) throw ConfigError("fine_tune_epochs must be >= 1");
  }

  BatchLossOptions loss_options() const {
    return BatchLossOptions{pooling, include_diagonal, batch_level_vc};
  }
};

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void step(std::map<std::string, Tensor*>& params,
            const std::map<std::string, Tensor>& grads) {
    ++t_;
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor& g = git->second;
      if (kind_ == OptimizerKind::sgd_momentum) {
        Tensor& vel = state(vel_, name, p->shape());
        for (size_t i = 0; i < p->numel(); ++i) {
          vel[i] = momentum_ * vel[i] + g[i];
          (*p)[i] -= lr_ * vel[i];
        }
      } else {
        Tensor& m = state(m_, name, p->shape());
        Tensor& v = state(v_, name, p->shape());
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t i = 0; i < p->numel(); ++i) {
          m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
          v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
          double mhat = m[i] / bc1;
          double vhat = v[i] / bc2;
          (*p)[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
      }
    }
  }

 private:
  Tensor& state(std::map<std::string, Tensor>& store, const std::string& name,
                const std::vector<size_t>& shape) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Tensor::zeros(shape)).first;
    return it->second;
  }

  OptimizerKind kind_;
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  double momentum_ = 0.9;
  std::map<std::string, Tensor> m_, v_, vel_;
  int t_ = 0;
};

// Mutable views of both encoders' parameters under the loss-graph names.
inline std::map<std::string, Tensor*> encoder_param_refs(SegmentEncoder& enc1,
                                                         SegmentEncoder& enc2) {
  std::map<std::string, Tensor*> m;
  for (size_t l = 0; l < enc1.layer_count(); ++l) {
    m.emplace(param_name(1, 'w', l), &enc1.weight(l));
    m.emplace(param_name(1, 'b', l), &enc1.bias(l));
  }
  for (size_t l = 0; l < enc2.layer_count(); ++l) {
    m.emplace(param_name(2, 'w', l), &enc2.weight(l));
    m.emplace(param_name(2, 'b', l), &enc2.bias(l));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Modality selection
// ---------------------------------------------------------------------------

struct ModalityPair {
  std::string m1;  // pooled side
  std::string m2;
  size_t dim1 = 0, dim2 = 0;
};

inline ModalityPair resolve_modalities(const std::vector<SubjectRecord>& records,
                                       const std::string& pooled_modality) {
  if (records.empty()) throw DataError("no records");
  std::map<std::string, std::pair<size_t, size_t>> seg_stats;  // name -> (segments, dim)
  for (const auto& r : records)
    for (const auto& [name, segs] : r.modalities) {
      auto& st = seg_stats[name];
      st.first += segs.size();
      st.second = segs.front().size();
    }
  if (seg_stats.size() != 2)
    throw DataError("training expects exactly two modalities, found " +
                    std::to_string(seg_stats.size()));
  for (const auto& r : records)
    for (const auto& [name, _] : seg_stats)
      if (!r.modalities.count(name))
        throw DataError("subject '" + r.subject_id + "' is missing modality '" + name + "'");

  auto it = seg_stats.begin();
  auto [name_a, stat_a] = *it;
  ++it;
  auto [name_b, stat_b] = *it;

  ModalityPair pair;
  if (!pooled_modality.empty()) {
    if (pooled_modality != name_a && pooled_modality != name_b)
      throw ConfigError("pooled_modality '" + pooled_modality + "' not present in the data");
    pair.m1 = pooled_modality;
  } else {
    // larger mean segment count pools; ties break lexicographically
    double mean_a = double(stat_a.first), mean_b = double(stat_b.first);
    pair.m1 = mean_a > mean_b ? name_a : mean_b > mean_a ? name_b
                              : std::min(name_a, name_b);
  }
  pair.m2 = pair.m1 == name_a ? name_b : name_a;
  pair.dim1 = pair.m1 == name_a ? stat_a.second : stat_b.second;
  pair.dim2 = pair.m2 == name_a ? stat_a.second : stat_b.second;
  return pair;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct StepLog {
  int epoch = 1;
  int step = 0;
  LossBreakdown loss;
};

struct PretrainResult {
  SegmentEncoder enc1, enc2;
  ModalityPair modalities;
  std::vector<StepLog> log;
  bool aborted = false;
  std::string abort_reason;
};

namespace detail {

inline BatchSubject to_batch_subject(const SubjectRecord& r, const ModalityPair& mp) {
  BatchSubject s;
  s.subject_id = r.subject_id;
  s.label = r.label;
  auto i1 = r.modalities.find(mp.m1);
  auto i2 = r.modalities.find(mp.m2);
  if (i1 == r.modalities.end() || i2 == r.modalities.end())
    throw DataError("subject '" + r.subject_id + "' is missing a configured modality");
  s.segs_m1 = i1->second;
  s.segs_m2 = i2->second;
  return s;
}

inline bool grads_finite(const std::map<std::string, Tensor>& grads) {
  for (const auto& [_, g] : grads)
    if (g.first_nonfinite() != static_cast<size_t>(-1)) return false;
  return true;
}

}  // namespace detail

inline PretrainResult pretrain(const std::vector<SubjectRecord>& records,
                               const TrainConfig& config) {
  config.validate();
  validate_records(records);
  ModalityPair mp = resolve_modalities(records, config.pooled_modality);

  PretrainResult result;
  result.modalities = mp;
  result.enc1 = SegmentEncoder(mp.m1, mp.dim1, config.hidden_dims, config.embedding_dim,
                               derive_seed(config.seed, "enc1"), config.projection_dim);
  result.enc2 = SegmentEncoder(mp.m2, mp.dim2, config.hidden_dims, config.embedding_dim,
                               derive_seed(config.seed, "enc2"), config.projection_dim);

  Optimizer opt(config.optimizer, config.learning_rate);
  auto refs = encoder_param_refs(result.enc1, result.enc2);

  // snapshot of the parameters that last produced a finite loss
  auto snapshot = [&]() {
    std::map<std::string, Tensor> s;
    for (auto& [name, p] : refs) s.emplace(name, *p);
    return s;
  };
  auto restore = [&](const std::map<std::string, Tensor>& s) {
    for (auto& [name, p] : refs) *p = s.at(name);
  };
  std::map<std::string, Tensor> last_good = snapshot();

  for (int epoch = 1; epoch <= config.epochs && !result.aborted; ++epoch) {
    Method effective = config.method == Method::m4 ? select_m4(epoch) : config.method;
    BatchMode mode =
        effective == Method::m3 ? BatchMode::same_label : BatchMode::unconstrained;
    auto batches = sample_batches(records, config.batch_size, mode,
                                  derive_seed(config.seed, "sampler"), epoch);

    // pooled vicreg variance needs >= 2 pooled rows; fold a trailing
    // single-subject batch into its predecessor
    if (effective == Method::vicreg && config.pooling != Pooling::none &&
        batches.size() > 1 && batches.back().size() < 2) {
      auto tail = batches.back();
      batches.pop_back();
      for (size_t idx : tail) batches.back().push_back(idx);
    }

    for (size_t bi = 0; bi < batches.size() && !result.aborted; ++bi) {
      std::vector<BatchSubject> batch;
      batch.reserve(batches[bi].size());
      for (size_t idx : batches[bi])
        batch.push_back(detail::to_batch_subject(records[idx], mp));

      try {
        auto bundle = build_batch_loss_graph(result.enc1, result.enc2, batch, config.method,
                                             epoch, config.weights, config.loss_options());
        LossBreakdown bd = bundle.run(encoder_param_bindings(result.enc1, result.enc2));
        auto grads = bundle.graph.backward();
        if (!detail::grads_finite(grads))
          throw NumericError("non-finite gradient at epoch " + std::to_string(epoch));
        StepLog sl;
        sl.epoch = epoch;
        sl.step = int(bi);
        sl.loss = bd;
        result.log.push_back(sl);
        last_good = snapshot();
        opt.step(refs, grads);
      } catch (const NumericError& e) {
        restore(last_good);
        result.aborted = true;
        result.abort_reason = e.what();
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Pooled-feature extraction
// ---------------------------------------------------------------------------

// Concatenated pooled embeddings [pooled(m1) | pooled(m2)], dimension 2d.
inline std::vector<double> subject_features(const SegmentEncoder& enc1,
                                            const SegmentEncoder& enc2,
                                            const ModalityPair& mp, const SubjectRecord& r) {
  auto i1 = r.modalities.find(mp.m1);
  auto i2 = r.modalities.find(mp.m2);
  if (i1 == r.modalities.end() || i2 == r.modalities.end())
    throw DataError("subject '" + r.subject_id + "' is missing a configured modality");
  auto encode_pooled = [](const SegmentEncoder& enc,
                          const std::vector<std::vector<double>>& segs) {
    std::vector<std::vector<double>> z;
    z.reserve(segs.size());
    for (const auto& s : segs) z.push_back(enc.encode_backbone(s));
    return mean_pool(z);
  };
  auto p1 = encode_pooled(enc1, i1->second);
  auto p2 = encode_pooled(enc2, i2->second);
  p1.insert(p1.end(), p2.begin(), p2.end());
  return p1;
}

// Mean over dimensions of the per-dimension std of all segment embeddings of
// one modality (the collapse sentinel).
inline double mean_embedding_std(const SegmentEncoder& enc,
                                 const std::vector<SubjectRecord>& records,
                                 const std::string& modality) {
  std::vector<std::vector<double>> all;
  for (const auto& r : records) {
    auto it = r.modalities.find(modality);
    if (it == r.modalities.end()) continue;
    for (const auto& seg : it->second) all.push_back(enc.encode_one(seg));
  }
  if (all.size() < 2) throw DataError("mean_embedding_std: fewer than 2 embeddings");
  size_t d = all.front().size();
  double acc = 0.0;
  for (size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (const auto& v : all) mean += v[j];
    mean /= double(all.size());
    double var = 0.0;
    for (const auto& v : all) var += (v[j] - mean) * (v[j] - mean);
    var /= double(all.size() - 1);
    acc += std::sqrt(var);
  }
  return acc / double(d);
}

// ---------------------------------------------------------------------------
// Probe
// ---------------------------------------------------------------------------

struct Probe {
  std::vector<double> weights;  // over the 2d concatenated pooled features
  double bias = 0.0;
  double threshold = 0.5;  // in (0, 1)
};

namespace detail {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Threshold with the best F1 on (score, label) pairs; ties prefer the
// smaller threshold. Falls back to 0.5 when F1 is degenerate everywhere.
inline double best_f1_threshold(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<double> candidates = {0.5};
  if (!sorted.empty()) {
    candidates.push_back(sorted.front() / 2.0);
    candidates.push_back((sorted.back() + 1.0) / 2.0);
    for (size_t i = 0; i + 1 < sorted.size(); ++i)
      candidates.push_back((sorted[i] + sorted[i + 1]) / 2.0);
  }
  std::sort(candidates.begin(), candidates.end());
  double best_t = 0.5, best_f1 = -1.0;
  for (double t : candidates) {
    if (!(t > 0.0 && t < 1.0)) continue;
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
      int pred = scores[i] >= t ? 1 : 0;
      if (labels[i] == 1 && pred == 1) ++tp;
      if (labels[i] == 0 && pred == 1) ++fp;
      if (labels[i] == 1 && pred == 0) ++fn;
    }
    size_t denom = 2 * tp + fp + fn;
    double f1 = denom == 0 ? 0.0 : 2.0 * double(tp) / double(denom);
    if (f1 > best_f1 + 1e-15) {
      best_f1 = f1;
      best_t = t;
    }
  }
  return best_t;
}

}  // namespace detail

struct ProbeOptions {
  int max_iters = 3000;
  double lr = 0.05;
  double l2 = 1e-4;
  double grad_tol = 1e-8;
};

// Logistic regression on frozen concatenated pooled embeddings; threshold
// chosen on the validation records by F1. Deterministic (zero init,
// full-batch adaptive-moment updates).
inline Probe fit_probe(const SegmentEncoder& enc1, const SegmentEncoder& enc2,
                       const ModalityPair& mp,
                       const std::vector<SubjectRecord>& train_records,
                       const std::vector<SubjectRecord>& val_records, uint64_t seed,
                       const ProbeOptions& opt = {}) {
  (void)seed;  // the fit is fully deterministic; kept for interface stability
  if (train_records.empty()) throw DataError("fit_probe: empty training set");
  bool has0 = false, has1 = false;
  for (const auto& r : train_records) (r.label == 1 ? has1 : has0) = true;
  if (!has0 || !has1)
    throw DataError("fit_probe: training labels are single-class");

  const size_t n = train_records.size();
  std::vector<std::vector<double>> x(n);
  std::vector<int> y(n);
  for (size_t i = 0; i < n; ++i) {
    x[i] = subject_features(enc1, enc2, mp, train_records[i]);
    y[i] = train_records[i].label;
  }
  const size_t dim = x.front().size();

  // standardize, then fold the affine transform back into the weights
  std::vector<double> mean(dim, 0.0), stddev(dim, 0.0);
  for (const auto& row : x)
    for (size_t j = 0; j < dim; ++j) mean[j] += row[j];
  for (auto& m : mean) m /= double(n);
  for (const auto& row : x)
    for (size_t j = 0; j < dim; ++j) stddev[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
  for (auto& s : stddev) {
    s = std::sqrt(s / double(n));
    if (s < 1e-12) s = 1.0;
  }
  for (auto& row : x)
    for (size_t j = 0; j < dim; ++j) row[j] = (row[j] - mean[j]) / stddev[j];

  std::vector<double> w(dim, 0.0), m_state(dim + 1, 0.0), v_state(dim + 1, 0.0);
  double b = 0.0;
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= opt.max_iters; ++t) {
    std::vector<double> gw(dim, 0.0);
    double gb = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double z = b;
      for (size_t j = 0; j < dim; ++j) z += w[j] * x[i][j];
      double err = detail::sigmoid(z) - double(y[i]);
      for (size_t j = 0; j < dim; ++j) gw[j] += err * x[i][j];
      gb += err;
    }
    double inv_n = 1.0 / double(n);
    double gmax = 0.0;
    for (size_t j = 0; j < dim; ++j) {
      gw[j] = gw[j] * inv_n + opt.l2 * w[j];
      gmax = std::max(gmax, std::fabs(gw[j]));
    }
    gb *= inv_n;
    gmax = std::max(gmax, std::fabs(gb));
    if (gmax < opt.grad_tol) break;
    double bc1 = 1.0 - std::pow(beta1, t), bc2 = 1.0 - std::pow(beta2, t);
    for (size_t j = 0; j <= dim; ++j) {
      double g = j < dim ? gw[j] : gb;
      m_state[j] = beta1 * m_state[j] + (1 - beta1) * g;
      v_state[j] = beta2 * v_state[j] + (1 - beta2) * g * g;
      double stepv = (m_state[j] / bc1) / (std::sqrt(v_state[j] / bc2) + eps);
      if (j < dim)
        w[j] -= opt.lr * stepv;
      else
        b -= opt.lr * stepv;
    }
  }

  Probe probe;
  probe.weights.resize(dim);
  probe.bias = b;
  for (size_t j = 0; j < dim; ++j) {
    probe.weights[j] = w[j] / stddev[j];
    probe.bias -= w[j] * mean[j] / stddev[j];
  }

  if (!val_records.empty()) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& r : val_records) {
      auto f = subject_features(enc1, enc2, mp, r);
      double z = probe.bias;
      for (size_t j = 0; j < dim; ++j) z += probe.weights[j] * f[j];
      scores.push_back(detail::sigmoid(z));
      labels.push_back(r.label);
    }
    probe.threshold = detail::best_f1_threshold(scores, labels);
  }
  return probe;
}

inline PredictionSet predict(const SegmentEncoder& enc1, const SegmentEncoder& enc2,
                             const ModalityPair& mp, const Probe& probe,
                             const std::vector<SubjectRecord>& records) {
  PredictionSet preds;
  preds.reserve(records.size());
  for (const auto& r : records) {
    auto f = subject_features(enc1, enc2, mp, r);
    if (f.size() != probe.weights.size())
      throw ShapeError("predict: probe dimension " + std::to_string(probe.weights.size()) +
                       " does not match feature dimension " + std::to_string(f.size()));
    double z = probe.bias;
    for (size_t j = 0; j < f.size(); ++j) z += probe.weights[j] * f[j];
    PredictionRow row;
    row.subject_id = r.subject_id;
    row.group = r.group;
    row.label = r.label;
    row.score = detail::sigmoid(z);
    row.pred = row.score >= probe.threshold ? 1 : 0;
    preds.push_back(std::move(row));
  }
  return preds;
}

// ---------------------------------------------------------------------------
// Fine-tuning (config-gated alternative to the frozen probe)
// ---------------------------------------------------------------------------

struct FineTuneResult {
  SegmentEncoder enc1, enc2;
  Probe probe;
  std::vector<double> bce_log;  // one mean cross-entropy value per iteration
};

// Unfreezes both encoders under a linear head and full-batch cross-entropy.
// The graph computes the logits; the cross-entropy derivative enters through
// the backward seed, so no primitive beyond the core set is needed.
inline FineTuneResult fine_tune(const SegmentEncoder& enc1_in, const SegmentEncoder& enc2_in,
                                const ModalityPair& mp,
                                const std::vector<SubjectRecord>& train_records,
                                const std::vector<SubjectRecord>& val_records,
                                const TrainConfig& config) {
  if (train_records.empty()) throw DataError("fine_tune: empty training set");
  bool has0 = false, has1 = false;
  for (const auto& r : train_records) (r.label == 1 ? has1 : has0) = true;
  if (!has0 || !has1) throw DataError("fine_tune: training labels are single-class");

  FineTuneResult result;
  result.enc1 = enc1_in.strip_projection();
  result.enc2 = enc2_in.strip_projection();
  const size_t d = result.enc1.output_dim();
  const size_t n = train_records.size();

  // one graph over the whole training set: stacked encode, block-average
  // pooling, two d->1 heads
  ad::Graph g;
  auto e1 = graphs::declare_encoder(g, 1, result.enc1);
  auto e2 = graphs::declare_encoder(g, 2, result.enc2);
  std::vector<std::vector<double>> stack1, stack2;
  std::vector<size_t> n1(n), n2(n);
  for (size_t i = 0; i < n; ++i) {
    BatchSubject s = detail::to_batch_subject(train_records[i], mp);
    n1[i] = s.segs_m1.size();
    n2[i] = s.segs_m2.size();
    for (auto& seg : s.segs_m1) stack1.push_back(std::move(seg));
    for (auto& seg : s.segs_m2) stack2.push_back(std::move(seg));
  }
  auto pool_matrix = [&](const std::vector<size_t>& counts, size_t total) {
    std::vector<double> m(n * total, 0.0);
    size_t off = 0;
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < counts[i]; ++j) m[i * total + off + j] = 1.0 / double(counts[i]);
      off += counts[i];
    }
    return g.constant(Tensor::matrix(n, total, std::move(m)));
  };
  ad::NodeId z1 = graphs::encode(
      g, e1, graphs::segment_constant(g, stack1, result.enc1.input_dim(), "(train)", "modality-1"),
      stack1.size());
  ad::NodeId z2 = graphs::encode(
      g, e2, graphs::segment_constant(g, stack2, result.enc2.input_dim(), "(train)", "modality-2"),
      stack2.size());
  ad::NodeId p1 = g.matmul(pool_matrix(n1, stack1.size()), z1);
  ad::NodeId p2 = g.matmul(pool_matrix(n2, stack2.size()), z2);
  ad::NodeId w1 = g.input("head.w1", {d, 1}, true);
  ad::NodeId w2 = g.input("head.w2", {d, 1}, true);
  ad::NodeId hb = g.input("head.b", {1, 1}, true);
  ad::NodeId logits = g.add(g.add(g.matmul(p1, w1), g.matmul(p2, w2)),
                            g.broadcast(g.sum(hb, ad::Axis::All), {n, 1}));
  g.set_output(logits);

  Tensor head_w1 = Tensor::zeros({d, 1});
  Tensor head_w2 = Tensor::zeros({d, 1});
  Tensor head_b = Tensor::zeros({1, 1});
  auto refs = encoder_param_refs(result.enc1, result.enc2);
  refs.emplace("head.w1", &head_w1);
  refs.emplace("head.w2", &head_w2);
  refs.emplace("head.b", &head_b);

  Optimizer opt(OptimizerKind::adaptive_moments, config.learning_rate);
  for (int iter = 0; iter < config.fine_tune_epochs; ++iter) {
    std::map<std::string, Tensor> bindings;
    for (auto& [name, p] : refs) bindings.emplace(name, *p);
    Tensor out = g.forward(bindings);
    Tensor seed = Tensor::zeros({n, 1});
    double bce = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double s = detail::sigmoid(out[i]);
      double yi = double(train_records[i].label);
      seed[i] = (s - yi) / double(n);
      // clamped log for the report only; the gradient needs no log
      double p = std::min(std::max(yi == 1.0 ? s : 1.0 - s, 1e-12), 1.0);
      bce -= std::log(p) / double(n);
    }
    result.bce_log.push_back(bce);
    auto grads = g.backward(seed);
    opt.step(refs, grads);
  }

  result.probe.weights.resize(2 * d);
  for (size_t j = 0; j < d; ++j) {
    result.probe.weights[j] = head_w1[j];
    result.probe.weights[d + j] = head_w2[j];
  }
  result.probe.bias = head_b[0];
  if (!val_records.empty()) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& r : val_records) {
      auto f = subject_features(result.enc1, result.enc2, mp, r);
      double z = result.probe.bias;
      for (size_t j = 0; j < f.size(); ++j) z += result.probe.weights[j] * f[j];
      scores.push_back(detail::sigmoid(z));
      labels.push_back(r.label);
    }
    result.probe.threshold = detail::best_f1_threshold(scores, labels);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline nlohmann::json encoder_to_json(const SegmentEncoder& enc) {
  nlohmann::json j;
  j["modality"] = enc.modality_name();
  j["input_dim"] = enc.input_dim();
  j["hidden_dims"] = enc.hidden_dims();
  j["output_dim"] = enc.output_dim();
  j["projection_dim"] = enc.projection_dim();
  nlohmann::json layers = nlohmann::json::array();
  for (size_t l = 0; l < enc.layer_count(); ++l) {
    layers.push_back({{"rows", enc.weight(l).shape()[0]},
                      {"cols", enc.weight(l).shape()[1]},
                      {"w", enc.weight(l).data()},
                      {"b", enc.bias(l).data()}});
  }
  j["layers"] = layers;
  return j;
}

inline SegmentEncoder encoder_from_json(const nlohmann::json& j) {
  SegmentEncoder enc(j.at("modality").get<std::string>(), j.at("input_dim").get<size_t>(),
                     j.at("hidden_dims").get<std::vector<size_t>>(),
                     j.at("output_dim").get<size_t>(), 0, j.value("projection_dim", size_t{0}));
  const auto& layers = j.at("layers");
  if (layers.size() != enc.layer_count())
    throw DataError("checkpoint: layer count mismatch for modality '" +
                    enc.modality_name() + "'");
  for (size_t l = 0; l < enc.layer_count(); ++l) {
    const auto& layer = layers[l];
    size_t rows = layer.at("rows").get<size_t>();
    size_t cols = layer.at("cols").get<size_t>();
    enc.set_layer(l,
                  Tensor::matrix(rows, cols, layer.at("w").get<std::vector<double>>()),
                  Tensor::vector(layer.at("b").get<std::vector<double>>()));
  }
  return enc;
}

struct Checkpoint {
  SegmentEncoder enc1, enc2;
  ModalityPair modalities;
  std::string config_hash;
};

inline void save_checkpoint(const std::string& path, const SegmentEncoder& enc1,
                            const SegmentEncoder& enc2, const ModalityPair& mp,
                            const std::string& config_hash) {
  nlohmann::json j;
  j["format"] = "fairwell-checkpoint-v1";
  j["config_hash"] = config_hash;
  j["modality1"] = mp.m1;
  j["modality2"] = mp.m2;
  j["encoders"] = {encoder_to_json(enc1), encoder_to_json(enc2)};
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw DataError("write failure on '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint '" + path + "': invalid JSON: " + e.what());
  }
  if (j.value("format", "") != "fairwell-checkpoint-v1")
    throw DataError("checkpoint '" + path + "': unknown format");
  Checkpoint cp;
  cp.config_hash = j.at("config_hash").get<std::string>();
  cp.modalities.m1 = j.at("modality1").get<std::string>();
  cp.modalities.m2 = j.at("modality2").get<std::string>();
  cp.enc1 = encoder_from_json(j.at("encoders")[0]);
  cp.enc2 = encoder_from_json(j.at("encoders")[1]);
  cp.modalities.dim1 = cp.enc1.input_dim();
  cp.modalities.dim2 = cp.enc2.input_dim();
  return cp;
}

}  // namespace fairwell
