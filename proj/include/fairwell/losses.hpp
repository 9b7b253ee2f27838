// losses.hpp - VICReg regularizers and the subject-aware batch losses
//
// Three base regularizers over sets of d-dim embeddings:
//   variance:    (1/d) sum_j max(0, gamma - sqrt(Var_j + eps))
//   invariance:  mean over pairs of squared Euclidean distance
//   covariance:  (1/d) sum_{j != k} Cov[j,k]^2
// Var and Cov are the unbiased (n-1) sample estimators.
//
// The subject-aware batch losses align a pooled modality-1 vector against
// the other modality's segment embeddings:
//   m1: within subject only, averaged over the batch
//   m2: over all ordered subject pairs (i, k), averaged over |B|^2
//   m3: same arithmetic as m2, batch restricted to a single label
//   m4: alternates m2 (odd epochs) and m3 (even epochs)
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "fairwell/common.hpp"
#include "fairwell/encoders.hpp"

namespace fairwell {

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

enum class Method : uint8_t { vicreg, m1, m2, m3, m4 };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::vicreg: return "vicreg";
    case Method::m1: return "m1";
    case Method::m2: return "m2";
    case Method::m3: return "m3";
    case Method::m4: return "m4";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "vicreg") return Method::vicreg;
  if (s == "m1") return Method::m1;
  if (s == "m2") return Method::m2;
  if (s == "m3") return Method::m3;
  if (s == "m4") return Method::m4;
  throw ConfigError("unknown method '" + s + "'");
}

enum class Pooling : uint8_t { none, single, double_pool };

inline const char* pooling_name(Pooling p) {
  switch (p) {
    case Pooling::none: return "none";
    case Pooling::single: return "single";
    case Pooling::double_pool: return "double";
  }
  return "?";
}

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "none") return Pooling::none;
  if (s == "single") return Pooling::single;
  if (s == "double") return Pooling::double_pool;
  throw ConfigError("unknown pooling mode '" + s + "'");
}

struct LossWeights {
  double lambda = 25.0;  // invariance weight (m1-m4 only; plain vicreg carries none)
  double mu = 25.0;      // variance weight
  double nu = 1.0;       // covariance weight
  double gamma = 1.0;    // std target
  double epsilon = 1e-4; // numerical stabilizer inside the sqrt

  void validate() const {
    if (lambda < 0 || mu < 0 || nu < 0)
      throw ConfigError("loss weights must be non-negative");
    if (!(gamma > 0)) throw ConfigError("gamma must be positive");
    if (!(epsilon > 0)) throw ConfigError("epsilon must be positive");
  }
};

struct LossBreakdown {
  double invariance = 0.0;
  double variance_m1 = 0.0;
  double variance_m2 = 0.0;
  double covariance_m1 = 0.0;
  double covariance_m2 = 0.0;
  double total = 0.0;
  Method method = Method::vicreg;
  int epoch = 1;
  // weights as applied; plain vicreg stores lambda = 1 since its combined
  // form has no invariance coefficient
  double lambda = 1.0, mu = 0.0, nu = 0.0;

  double recombine() const {
    return lambda * invariance + mu * (variance_m1 + variance_m2) +
           nu * (covariance_m1 + covariance_m2);
  }
};

// One batch element: both modality embedding sets for a subject plus its
// label (m3 needs the label to enforce its same-class constraint).
struct SubjectEmbeddings {
  EmbeddingSet m1;
  EmbeddingSet m2;
  int label = 0;
};

struct BatchLossOptions {
  Pooling pooling = Pooling::single;
  bool include_diagonal = true;   // m2/m3 ordered pairs include i == k
  bool batch_level_vc = false;    // variance/covariance over the whole batch
                                  // instead of per-subject segment sets
};

// ---------------------------------------------------------------------------
// Base regularizers
// ---------------------------------------------------------------------------

namespace detail {

inline void check_embeddings(const std::vector<std::vector<double>>& e, const char* who,
                             size_t min_count) {
  if (e.size() < min_count)
    throw DataError(std::string(who) + " requires at least " + std::to_string(min_count) +
                    " embeddings, got " + std::to_string(e.size()));
  size_t d = e.front().size();
  if (d == 0) throw ShapeError(std::string(who) + ": zero-dimensional embeddings");
  for (const auto& v : e)
    if (v.size() != d) throw ShapeError(std::string(who) + ": inconsistent dimensions");
}

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (size_t j = 0; j < a.size(); ++j) {
    double diff = a[j] - b[j];
    acc += diff * diff;
  }
  return acc;
}

}  // namespace detail

// (1/d) sum_j max(0, gamma - sqrt(Var_j + eps)); result lies in [0, gamma).
inline double variance_reg(const std::vector<std::vector<double>>& embeddings, double gamma,
                           double eps) {
  detail::check_embeddings(embeddings, "variance_reg", 2);
  size_t n = embeddings.size(), d = embeddings.front().size();
  double acc = 0.0;
  for (size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) mean += embeddings[i][j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double dev = embeddings[i][j] - mean;
      var += dev * dev;
    }
    var /= static_cast<double>(n - 1);
    double hinge = gamma - std::sqrt(var + eps);
    acc += hinge > 0.0 ? hinge : 0.0;
  }
  return acc / static_cast<double>(d);
}

// Mean squared Euclidean distance over index-paired embeddings.
inline double invariance_reg(const std::vector<std::vector<double>>& a,
                             const std::vector<std::vector<double>>& b) {
  detail::check_embeddings(a, "invariance_reg", 1);
  detail::check_embeddings(b, "invariance_reg", 1);
  if (a.size() != b.size())
    throw ShapeError("invariance_reg: branch sizes differ (" + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()) + ")");
  if (a.front().size() != b.front().size())
    throw ShapeError("invariance_reg: embedding dimensions differ");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += detail::squared_distance(a[i], b[i]);
  return acc / static_cast<double>(a.size());
}

// (1/d) sum over off-diagonal squared entries of the covariance matrix.
inline double covariance_reg(const std::vector<std::vector<double>>& embeddings) {
  detail::check_embeddings(embeddings, "covariance_reg", 2);
  size_t n = embeddings.size(), d = embeddings.front().size();
  std::vector<double> mean(d, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) mean[j] += embeddings[i][j];
  for (auto& m : mean) m /= static_cast<double>(n);
  double acc = 0.0;
  for (size_t j = 0; j < d; ++j) {
    for (size_t k = 0; k < d; ++k) {
      if (j == k) continue;
      double cov = 0.0;
      for (size_t i = 0; i < n; ++i)
        cov += (embeddings[i][j] - mean[j]) * (embeddings[i][k] - mean[k]);
      cov /= static_cast<double>(n - 1);
      acc += cov * cov;
    }
  }
  return acc / static_cast<double>(d);
}

// (1/N) sum_j ||pooled - segment_j||^2: the pooled-vs-segments alignment term.
inline double pooled_invariance(const std::vector<double>& pooled,
                                const std::vector<std::vector<double>>& segments) {
  if (segments.empty()) throw DataError("pooled_invariance: empty segment list");
  if (pooled.size() != segments.front().size())
    throw ShapeError("pooled_invariance: dimension mismatch");
  double acc = 0.0;
  for (const auto& s : segments) acc += detail::squared_distance(pooled, s);
  return acc / static_cast<double>(segments.size());
}

// ---------------------------------------------------------------------------
// Combined VICReg loss over two equally sized branches
// ---------------------------------------------------------------------------

inline LossBreakdown vicreg_loss(const std::vector<std::vector<double>>& f1,
                                 const std::vector<std::vector<double>>& f2,
                                 const LossWeights& w) {
  w.validate();
  LossBreakdown b;
  b.method = Method::vicreg;
  b.lambda = 1.0;  // the combined form carries no invariance coefficient
  b.mu = w.mu;
  b.nu = w.nu;
  b.invariance = invariance_reg(f1, f2);
  b.variance_m1 = variance_reg(f1, w.gamma, w.epsilon);
  b.variance_m2 = variance_reg(f2, w.gamma, w.epsilon);
  b.covariance_m1 = covariance_reg(f1);
  b.covariance_m2 = covariance_reg(f2);
  b.total = b.recombine();
  return b;
}

// ---------------------------------------------------------------------------
// Subject-aware batch losses
// ---------------------------------------------------------------------------

namespace detail {

inline void validate_batch(const std::vector<SubjectEmbeddings>& batch) {
  if (batch.empty()) throw DataError("batch loss: empty batch");
  size_t d = batch.front().m1.dim();
  for (const auto& s : batch) {
    if (s.m1.segments.empty())
      throw DataError("batch loss: subject '" + s.m1.subject_id +
                      "' is missing modality-1 segments");
    if (s.m2.segments.empty())
      throw DataError("batch loss: subject '" + s.m2.subject_id +
                      "' is missing modality-2 segments");
    if (s.m1.dim() != d || s.m2.dim() != d)
      throw ShapeError("batch loss: embedding dimensions differ across the batch");
    if (s.m1.pooled) {
      auto check = mean_pool(s.m1.segments);
      for (size_t j = 0; j < check.size(); ++j)
        if (std::fabs((*s.m1.pooled)[j] - check[j]) > 1e-9)
          throw DataError("batch loss: pooled vector of subject '" + s.m1.subject_id +
                          "' is not the mean of its segments");
    }
  }
}

// Pooled vectors for every subject; supplied ones are reused, missing ones
// computed. pooled2 is only needed for double pooling.
struct PooledCache {
  std::vector<std::vector<double>> p1, p2;

  PooledCache(const std::vector<SubjectEmbeddings>& batch, Pooling pooling) {
    if (pooling == Pooling::none) return;
    p1.reserve(batch.size());
    for (const auto& s : batch)
      p1.push_back(s.m1.pooled ? *s.m1.pooled : mean_pool(s.m1.segments));
    if (pooling == Pooling::double_pool) {
      p2.reserve(batch.size());
      for (const auto& s : batch)
        p2.push_back(s.m2.pooled ? *s.m2.pooled : mean_pool(s.m2.segments));
    }
  }
};

// Invariance summand between subject i's modality-1 side and subject k's
// modality-2 side under the configured pooling mode.
inline double pair_invariance(const std::vector<SubjectEmbeddings>& batch,
                              const PooledCache& cache, size_t i, size_t k,
                              Pooling pooling) {
  switch (pooling) {
    case Pooling::single:
      return pooled_invariance(cache.p1[i], batch[k].m2.segments);
    case Pooling::double_pool:
      return squared_distance(cache.p1[i], cache.p2[k]);
    case Pooling::none: {
      // index-paired over the common prefix of the two segment lists
      const auto& a = batch[i].m1.segments;
      const auto& b = batch[k].m2.segments;
      size_t n = std::min(a.size(), b.size());
      double acc = 0.0;
      for (size_t j = 0; j < n; ++j) acc += squared_distance(a[j], b[j]);
      return acc / static_cast<double>(n);
    }
  }
  throw StateError("unreachable pooling mode");
}

struct ComponentSums {
  std::vector<double> inv, v1, v2, c1, c2;

  LossBreakdown combine(Method method, const LossWeights& w, double denom) const {
    LossBreakdown b;
    b.method = method;
    b.lambda = w.lambda;
    b.mu = w.mu;
    b.nu = w.nu;
    b.invariance = sorted_pairwise_sum(inv) / denom;
    b.variance_m1 = sorted_pairwise_sum(v1) / denom;
    b.variance_m2 = sorted_pairwise_sum(v2) / denom;
    b.covariance_m1 = sorted_pairwise_sum(c1) / denom;
    b.covariance_m2 = sorted_pairwise_sum(c2) / denom;
    b.total = b.recombine();
    return b;
  }
};

struct BatchVc {
  std::vector<double> var1, var2, cov1, cov2;  // per subject
  double bv1 = 0, bv2 = 0, bc1 = 0, bc2 = 0;   // batch level
  bool batch_level;

  BatchVc(const std::vector<SubjectEmbeddings>& batch, const LossWeights& w,
          bool batch_level_vc)
      : batch_level(batch_level_vc) {
    if (batch_level) {
      std::vector<std::vector<double>> all1, all2;
      for (const auto& s : batch) {
        all1.insert(all1.end(), s.m1.segments.begin(), s.m1.segments.end());
        all2.insert(all2.end(), s.m2.segments.begin(), s.m2.segments.end());
      }
      bv1 = variance_reg(all1, w.gamma, w.epsilon);
      bv2 = variance_reg(all2, w.gamma, w.epsilon);
      bc1 = covariance_reg(all1);
      bc2 = covariance_reg(all2);
      return;
    }
    size_t n = batch.size();
    var1.resize(n);
    var2.resize(n);
    cov1.resize(n);
    cov2.resize(n);
    for (size_t i = 0; i < n; ++i) {
      var1[i] = variance_reg(batch[i].m1.segments, w.gamma, w.epsilon);
      var2[i] = variance_reg(batch[i].m2.segments, w.gamma, w.epsilon);
      cov1[i] = covariance_reg(batch[i].m1.segments);
      cov2[i] = covariance_reg(batch[i].m2.segments);
    }
  }

  double v1(size_t i) const { return batch_level ? bv1 : var1[i]; }
  double v2(size_t k) const { return batch_level ? bv2 : var2[k]; }
  double c1(size_t i) const { return batch_level ? bc1 : cov1[i]; }
  double c2(size_t k) const { return batch_level ? bc2 : cov2[k]; }
};

// Shared arithmetic of m2/m3: all ordered pairs averaged over their count.
inline LossBreakdown pairwise_batch_loss(const std::vector<SubjectEmbeddings>& batch,
                                         const LossWeights& w, const BatchLossOptions& opt,
                                         Method method) {
  w.validate();
  validate_batch(batch);
  size_t n = batch.size();
  PooledCache cache(batch, opt.pooling);
  BatchVc vc(batch, w, opt.batch_level_vc);

  ComponentSums sums;
  size_t pairs = 0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t k = 0; k < n; ++k) {
      if (!opt.include_diagonal && i == k && n > 1) continue;
      ++pairs;
      sums.inv.push_back(pair_invariance(batch, cache, i, k, opt.pooling));
      sums.v1.push_back(vc.v1(i));
      sums.v2.push_back(vc.v2(k));
      sums.c1.push_back(vc.c1(i));
      sums.c2.push_back(vc.c2(k));
    }
  }
  return sums.combine(method, w, static_cast<double>(pairs));
}

}  // namespace detail

// m1: invariance within subject only, every component averaged over |B|.
inline LossBreakdown batch_loss_m1(const std::vector<SubjectEmbeddings>& batch,
                                   const LossWeights& w, const BatchLossOptions& opt = {}) {
  w.validate();
  detail::validate_batch(batch);
  size_t n = batch.size();
  detail::PooledCache cache(batch, opt.pooling);
  detail::BatchVc vc(batch, w, opt.batch_level_vc);
  detail::ComponentSums sums;
  for (size_t i = 0; i < n; ++i) {
    sums.inv.push_back(detail::pair_invariance(batch, cache, i, i, opt.pooling));
    sums.v1.push_back(vc.v1(i));
    sums.v2.push_back(vc.v2(i));
    sums.c1.push_back(vc.c1(i));
    sums.c2.push_back(vc.c2(i));
  }
  return sums.combine(Method::m1, w, static_cast<double>(n));
}

// m2: all ordered subject pairs, including i == k, averaged over |B|^2.
inline LossBreakdown batch_loss_m2(const std::vector<SubjectEmbeddings>& batch,
                                   const LossWeights& w, const BatchLossOptions& opt = {}) {
  return detail::pairwise_batch_loss(batch, w, opt, Method::m2);
}

// m3: m2 arithmetic, legal only on single-label batches.
inline LossBreakdown batch_loss_m3(const std::vector<SubjectEmbeddings>& batch,
                                   const LossWeights& w, const BatchLossOptions& opt = {}) {
  if (!batch.empty()) {
    int label = batch.front().label;
    for (const auto& s : batch)
      if (s.label != label)
        throw DataError("batch_loss_m3: mixed labels in batch (subject '" +
                        s.m1.subject_id + "'); the sampler must emit single-label batches");
  }
  return detail::pairwise_batch_loss(batch, w, opt, Method::m3);
}

// m4 alternation: odd epochs run m2, even epochs run m3. Epochs are 1-based,
// so training starts with m2.
inline Method select_m4(int epoch) {
  if (epoch < 1) throw ConfigError("epoch index must be >= 1");
  return epoch % 2 == 1 ? Method::m2 : Method::m3;
}

// ---------------------------------------------------------------------------
// CSV serialization (one row per training step)
// ---------------------------------------------------------------------------

inline std::string loss_csv_header() {
  return "epoch,step,method,invariance,variance_m1,variance_m2,covariance_m1,"
         "covariance_m2,total";
}

// Doubles carry full round-trip precision so logs are byte-reproducible.
inline std::string loss_csv_row(int epoch, int step, const LossBreakdown& b) {
  auto fmt = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  std::ostringstream os;
  os << epoch << "," << step << "," << method_name(b.method) << "," << fmt(b.invariance)
     << "," << fmt(b.variance_m1) << "," << fmt(b.variance_m2) << ","
     << fmt(b.covariance_m1) << "," << fmt(b.covariance_m2) << "," << fmt(b.total);
  return os.str();
}

}  // namespace fairwell
