// loss_graph.hpp - autodiff-graph construction of the batch losses
//
// Builds the same quantities as the scalar functions in losses.hpp, but as a
// recorded graph over the encoder parameters so training can differentiate
// through segment encoding, pooling and every loss term. One graph is built
// per batch; parameters enter as named inputs ("enc1.w0", "enc1.b0", ...)
// and raw segment features enter as constants.
//
// Pooling is expressed with constant block-averaging matrices (a pooled
// vector is a row average, which is a matmul), so no primitive beyond the
// core op set is needed.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "fairwell/autodiff.hpp"
#include "fairwell/common.hpp"
#include "fairwell/encoders.hpp"
#include "fairwell/losses.hpp"

namespace fairwell {

// Raw (pre-encoder) features for one subject in a training batch.
struct BatchSubject {
  std::string subject_id;
  int label = 0;
  std::vector<std::vector<double>> segs_m1;
  std::vector<std::vector<double>> segs_m2;
};

struct LossGraphBundle {
  ad::Graph graph;
  ad::NodeId total{};
  ad::NodeId invariance{}, variance_m1{}, variance_m2{}, covariance_m1{}, covariance_m2{};
  Method requested = Method::vicreg;   // as configured (m4 stays m4)
  Method effective = Method::vicreg;   // what this epoch actually optimizes
  int epoch = 1;
  LossWeights weights;

  // Runs the graph and assembles the per-component breakdown.
  LossBreakdown run(const std::map<std::string, Tensor>& params) {
    graph.forward(params);
    LossBreakdown b;
    b.method = effective;
    b.epoch = epoch;
    b.lambda = requested == Method::vicreg ? 1.0 : weights.lambda;
    b.mu = weights.mu;
    b.nu = weights.nu;
    b.invariance = graph.value(invariance).item();
    b.variance_m1 = graph.value(variance_m1).item();
    b.variance_m2 = graph.value(variance_m2).item();
    b.covariance_m1 = graph.value(covariance_m1).item();
    b.covariance_m2 = graph.value(covariance_m2).item();
    b.total = graph.value(total).item();
    return b;
  }
};

inline std::string param_name(int side, char kind, size_t layer) {
  return "enc" + std::to_string(side) + "." + kind + std::to_string(layer);
}

// Current encoder parameters as a forward/backward binding map.
inline std::map<std::string, Tensor> encoder_param_bindings(const SegmentEncoder& enc1,
                                                            const SegmentEncoder& enc2) {
  std::map<std::string, Tensor> m;
  for (size_t l = 0; l < enc1.layer_count(); ++l) {
    m.emplace(param_name(1, 'w', l), enc1.weight(l));
    m.emplace(param_name(1, 'b', l), enc1.bias(l));
  }
  for (size_t l = 0; l < enc2.layer_count(); ++l) {
    m.emplace(param_name(2, 'w', l), enc2.weight(l));
    m.emplace(param_name(2, 'b', l), enc2.bias(l));
  }
  return m;
}

namespace graphs {

struct EncoderNodes {
  std::vector<ad::NodeId> w, b;
  std::vector<LayerSpec> specs;
};

inline EncoderNodes declare_encoder(ad::Graph& g, int side, const SegmentEncoder& enc) {
  EncoderNodes nodes;
  nodes.specs = enc.layer_specs();
  for (size_t l = 0; l < nodes.specs.size(); ++l) {
    nodes.w.push_back(g.input(param_name(side, 'w', l),
                              {nodes.specs[l].in, nodes.specs[l].out}, true));
    nodes.b.push_back(g.input(param_name(side, 'b', l), {nodes.specs[l].out}, true));
  }
  return nodes;
}

// Segment matrix {N, in} through the MLP -> {N, d}.
inline ad::NodeId encode(ad::Graph& g, const EncoderNodes& enc, ad::NodeId x, size_t rows) {
  ad::NodeId cur = x;
  for (size_t l = 0; l < enc.specs.size(); ++l) {
    cur = g.matmul(cur, enc.w[l]);
    cur = g.add(cur, g.broadcast(enc.b[l], {rows, enc.specs[l].out}));
    if (enc.specs[l].relu) cur = g.relu(cur);
  }
  return cur;
}

inline ad::NodeId segment_constant(ad::Graph& g, const std::vector<std::vector<double>>& segs,
                                   size_t expect_dim, const std::string& subject,
                                   const char* modality) {
  if (segs.empty())
    throw DataError("loss graph: subject '" + subject + "' is missing " + modality +
                    " segments");
  std::vector<double> flat;
  flat.reserve(segs.size() * expect_dim);
  for (const auto& s : segs) {
    if (s.size() != expect_dim)
      throw ShapeError("loss graph: subject '" + subject + "' has a " + modality +
                       " segment of length " + std::to_string(s.size()) + ", expected " +
                       std::to_string(expect_dim));
    flat.insert(flat.end(), s.begin(), s.end());
  }
  return g.constant(Tensor::matrix(segs.size(), expect_dim, std::move(flat)));
}

// V_reg over the rows of a {n, d} matrix node.
inline ad::NodeId variance_node(ad::Graph& g, ad::NodeId z, size_t n, size_t d,
                                const LossWeights& w) {
  if (n < 2)
    throw DataError("loss graph: variance term requires >= 2 embeddings, got " +
                    std::to_string(n));
  ad::NodeId mu = g.mean(z, ad::Axis::Rows);
  ad::NodeId centered = g.subtract(z, g.broadcast(mu, {n, d}));
  ad::NodeId ss = g.sum(g.square(centered), ad::Axis::Rows);
  ad::NodeId var = g.multiply(ss, g.constant(Tensor::full({d}, 1.0 / double(n - 1))));
  ad::NodeId sd = g.sqrt_eps(var, w.epsilon);
  ad::NodeId hinge = g.max_const(g.subtract(g.constant(Tensor::full({d}, w.gamma)), sd), 0.0);
  return g.mean(hinge, ad::Axis::All);
}

// C_reg over the rows of a {n, d} matrix node.
inline ad::NodeId covariance_node(ad::Graph& g, ad::NodeId z, size_t n, size_t d) {
  if (n < 2)
    throw DataError("loss graph: covariance term requires >= 2 embeddings, got " +
                    std::to_string(n));
  ad::NodeId mu = g.mean(z, ad::Axis::Rows);
  ad::NodeId centered = g.subtract(z, g.broadcast(mu, {n, d}));
  ad::NodeId cov = g.multiply(g.matmul(centered, centered, true, false),
                              g.constant(Tensor::full({d, d}, 1.0 / double(n - 1))));
  std::vector<double> mask(d * d, 1.0);
  for (size_t j = 0; j < d; ++j) mask[j * d + j] = 0.0;
  ad::NodeId off = g.multiply(g.square(cov), g.constant(Tensor::matrix(d, d, std::move(mask))));
  return g.multiply(g.sum(off, ad::Axis::All), g.scalar(1.0 / double(d)));
}

// Mean over rows of the squared row distance between two {n, d} nodes.
inline ad::NodeId paired_distance_node(ad::Graph& g, ad::NodeId a, ad::NodeId b) {
  ad::NodeId sq = g.square(g.subtract(a, b));
  return g.mean(g.sum(sq, ad::Axis::Cols), ad::Axis::All);
}

// (1/N) sum_j ||pooled - z_j||^2 where pooled is a {d} vector node and z a
// {n, d} matrix node.
inline ad::NodeId pooled_vs_segments_node(ad::Graph& g, ad::NodeId pooled, ad::NodeId z,
                                          size_t n, size_t d) {
  ad::NodeId diff = g.subtract(g.broadcast(pooled, {n, d}), z);
  return g.mean(g.sum(g.square(diff), ad::Axis::Cols), ad::Axis::All);
}

// Truncation to the first n rows as a constant selection matmul.
inline ad::NodeId take_rows(ad::Graph& g, ad::NodeId z, size_t total_rows, size_t n) {
  if (n == total_rows) return z;
  std::vector<double> sel(n * total_rows, 0.0);
  for (size_t i = 0; i < n; ++i) sel[i * total_rows + i] = 1.0;
  return g.matmul(g.constant(Tensor::matrix(n, total_rows, std::move(sel))), z);
}

inline ad::NodeId add_chain(ad::Graph& g, const std::vector<ad::NodeId>& terms) {
  if (terms.empty()) throw StateError("add_chain: no terms");
  ad::NodeId acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = g.add(acc, terms[i]);
  return acc;
}

inline ad::NodeId scaled_sum(ad::Graph& g, const std::vector<ad::NodeId>& terms, double scale) {
  return g.multiply(add_chain(g, terms), g.scalar(scale));
}

}  // namespace graphs

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

inline LossGraphBundle build_batch_loss_graph(const SegmentEncoder& enc1,
                                              const SegmentEncoder& enc2,
                                              const std::vector<BatchSubject>& batch,
                                              Method method, int epoch, LossWeights w,
                                              const BatchLossOptions& opt = {}) {
  w.validate();
  if (batch.empty()) throw DataError("loss graph: empty batch");
  if (enc1.loss_dim() != enc2.loss_dim())
    throw ShapeError("loss graph: encoders disagree on output dimension");

  LossGraphBundle bundle;
  bundle.requested = method;
  bundle.effective = method == Method::m4 ? select_m4(epoch) : method;
  bundle.epoch = epoch;
  bundle.weights = w;

  if (bundle.effective == Method::m3) {
    int label = batch.front().label;
    for (const auto& s : batch)
      if (s.label != label)
        throw DataError("loss graph: m3 requires a single-label batch (subject '" +
                        s.subject_id + "' differs)");
  }

  ad::Graph& g = bundle.graph;
  auto e1 = graphs::declare_encoder(g, 1, enc1);
  auto e2 = graphs::declare_encoder(g, 2, enc2);
  const size_t d = enc1.loss_dim();
  const size_t n_subj = batch.size();

  using namespace graphs;

  if (bundle.effective == Method::vicreg) {
    // Batch-level formulation over two branch sets F1/F2 assembled by the
    // pooling mode. Stacking raw segments first and encoding once is
    // equivalent to per-subject encoding (the MLP is per-row).
    std::vector<size_t> n1(n_subj), n2(n_subj);
    std::vector<std::vector<double>> stack1, stack2;
    for (size_t i = 0; i < n_subj; ++i) {
      n1[i] = batch[i].segs_m1.size();
      n2[i] = batch[i].segs_m2.size();
      if (opt.pooling == Pooling::none) {
        size_t n = std::min(n1[i], n2[i]);
        if (n == 0)
          throw DataError("loss graph: subject '" + batch[i].subject_id +
                          "' is missing a modality");
        for (size_t j = 0; j < n; ++j) {
          stack1.push_back(batch[i].segs_m1[j]);
          stack2.push_back(batch[i].segs_m2[j]);
        }
      } else {
        for (const auto& s : batch[i].segs_m1) stack1.push_back(s);
        for (const auto& s : batch[i].segs_m2) stack2.push_back(s);
      }
    }
    ad::NodeId x1 = segment_constant(g, stack1, enc1.input_dim(), "(batch)", "modality-1");
    ad::NodeId x2 = segment_constant(g, stack2, enc2.input_dim(), "(batch)", "modality-2");
    ad::NodeId z1 = encode(g, e1, x1, stack1.size());
    ad::NodeId z2 = encode(g, e2, x2, stack2.size());

    ad::NodeId f1 = z1, f2 = z2;
    size_t rows1 = stack1.size(), rows2 = stack2.size();
    ad::NodeId inv{};

    if (opt.pooling == Pooling::none) {
      inv = paired_distance_node(g, z1, z2);
    } else {
      // block-averaging matrices produce the per-subject pooled rows
      auto pool_matrix = [&](const std::vector<size_t>& counts, size_t total) {
        std::vector<double> m(n_subj * total, 0.0);
        size_t off = 0;
        for (size_t i = 0; i < n_subj; ++i) {
          for (size_t j = 0; j < counts[i]; ++j)
            m[i * total + off + j] = 1.0 / double(counts[i]);
          off += counts[i];
        }
        return g.constant(Tensor::matrix(n_subj, total, std::move(m)));
      };
      ad::NodeId p1 = g.matmul(pool_matrix(n1, rows1), z1);
      if (opt.pooling == Pooling::double_pool) {
        ad::NodeId p2 = g.matmul(pool_matrix(n2, rows2), z2);
        inv = paired_distance_node(g, p1, p2);
        f1 = p1;
        f2 = p2;
        rows1 = rows2 = n_subj;
      } else {
        // single: each subject's pooled m1 row against its own m2 segments
        std::vector<double> expand(rows2 * n_subj, 0.0);
        std::vector<double> row_w(rows2, 0.0);
        size_t off = 0;
        for (size_t i = 0; i < n_subj; ++i) {
          for (size_t j = 0; j < n2[i]; ++j) {
            expand[(off + j) * n_subj + i] = 1.0;
            row_w[off + j] = 1.0 / (double(n_subj) * double(n2[i]));
          }
          off += n2[i];
        }
        ad::NodeId aligned = g.matmul(g.constant(Tensor::matrix(rows2, n_subj, std::move(expand))), p1);
        ad::NodeId per_row = g.sum(g.square(g.subtract(aligned, z2)), ad::Axis::Cols);
        inv = g.sum(g.multiply(per_row, g.constant(Tensor::vector(std::move(row_w)))),
                    ad::Axis::All);
        f1 = p1;
        rows1 = n_subj;
      }
    }

    bundle.invariance = inv;
    bundle.variance_m1 = variance_node(g, f1, rows1, d, w);
    bundle.variance_m2 = variance_node(g, f2, rows2, d, w);
    bundle.covariance_m1 = covariance_node(g, f1, rows1, d);
    bundle.covariance_m2 = covariance_node(g, f2, rows2, d);

    ad::NodeId vsum = g.multiply(g.add(bundle.variance_m1, bundle.variance_m2), g.scalar(w.mu));
    ad::NodeId csum =
        g.multiply(g.add(bundle.covariance_m1, bundle.covariance_m2), g.scalar(w.nu));
    bundle.total = g.add(g.add(bundle.invariance, vsum), csum);
    g.set_output(bundle.total);
    return bundle;
  }

  // m1 / m2 / m3: per-subject encodings with cached per-subject terms
  std::vector<ad::NodeId> z1(n_subj), z2(n_subj);
  std::vector<ad::NodeId> pooled1(n_subj), pooled2(n_subj);
  std::vector<size_t> n1(n_subj), n2(n_subj);
  for (size_t i = 0; i < n_subj; ++i) {
    n1[i] = batch[i].segs_m1.size();
    n2[i] = batch[i].segs_m2.size();
    ad::NodeId x1 =
        segment_constant(g, batch[i].segs_m1, enc1.input_dim(), batch[i].subject_id, "modality-1");
    ad::NodeId x2 =
        segment_constant(g, batch[i].segs_m2, enc2.input_dim(), batch[i].subject_id, "modality-2");
    z1[i] = encode(g, e1, x1, n1[i]);
    z2[i] = encode(g, e2, x2, n2[i]);
    if (opt.pooling != Pooling::none) pooled1[i] = g.mean(z1[i], ad::Axis::Rows);
    if (opt.pooling == Pooling::double_pool) pooled2[i] = g.mean(z2[i], ad::Axis::Rows);
  }

  std::vector<ad::NodeId> var1(n_subj), var2(n_subj), cov1(n_subj), cov2(n_subj);
  ad::NodeId batch_v1{}, batch_v2{}, batch_c1{}, batch_c2{};
  if (opt.batch_level_vc) {
    // one stacked encode per modality, reusing the declared parameters
    std::vector<std::vector<double>> stack1, stack2;
    for (const auto& s : batch) {
      for (const auto& seg : s.segs_m1) stack1.push_back(seg);
      for (const auto& seg : s.segs_m2) stack2.push_back(seg);
    }
    ad::NodeId zs1 = encode(
        g, e1, segment_constant(g, stack1, enc1.input_dim(), "(batch)", "modality-1"),
        stack1.size());
    ad::NodeId zs2 = encode(
        g, e2, segment_constant(g, stack2, enc2.input_dim(), "(batch)", "modality-2"),
        stack2.size());
    batch_v1 = variance_node(g, zs1, stack1.size(), d, w);
    batch_v2 = variance_node(g, zs2, stack2.size(), d, w);
    batch_c1 = covariance_node(g, zs1, stack1.size(), d);
    batch_c2 = covariance_node(g, zs2, stack2.size(), d);
  } else {
    for (size_t i = 0; i < n_subj; ++i) {
      var1[i] = variance_node(g, z1[i], n1[i], d, w);
      var2[i] = variance_node(g, z2[i], n2[i], d, w);
      cov1[i] = covariance_node(g, z1[i], n1[i], d);
      cov2[i] = covariance_node(g, z2[i], n2[i], d);
    }
  }

  auto pair_inv = [&](size_t i, size_t k) -> ad::NodeId {
    switch (opt.pooling) {
      case Pooling::single:
        return pooled_vs_segments_node(g, pooled1[i], z2[k], n2[k], d);
      case Pooling::double_pool: {
        ad::NodeId diff = g.subtract(pooled1[i], pooled2[k]);
        return g.sum(g.square(diff), ad::Axis::All);
      }
      case Pooling::none: {
        size_t n = std::min(n1[i], n2[k]);
        ad::NodeId a = take_rows(g, z1[i], n1[i], n);
        ad::NodeId b = take_rows(g, z2[k], n2[k], n);
        return paired_distance_node(g, a, b);
      }
    }
    throw StateError("unreachable pooling mode");
  };

  std::vector<std::pair<size_t, size_t>> pairs;
  if (bundle.effective == Method::m1) {
    for (size_t i = 0; i < n_subj; ++i) pairs.emplace_back(i, i);
  } else {
    for (size_t i = 0; i < n_subj; ++i)
      for (size_t k = 0; k < n_subj; ++k) {
        if (!opt.include_diagonal && i == k && n_subj > 1) continue;
        pairs.emplace_back(i, k);
      }
  }

  std::vector<ad::NodeId> inv_terms, v1_terms, v2_terms, c1_terms, c2_terms;
  for (auto [i, k] : pairs) {
    inv_terms.push_back(pair_inv(i, k));
    v1_terms.push_back(opt.batch_level_vc ? batch_v1 : var1[i]);
    v2_terms.push_back(opt.batch_level_vc ? batch_v2 : var2[k]);
    c1_terms.push_back(opt.batch_level_vc ? batch_c1 : cov1[i]);
    c2_terms.push_back(opt.batch_level_vc ? batch_c2 : cov2[k]);
  }

  double denom = 1.0 / double(pairs.size());
  bundle.invariance = scaled_sum(g, inv_terms, denom);
  bundle.variance_m1 = scaled_sum(g, v1_terms, denom);
  bundle.variance_m2 = scaled_sum(g, v2_terms, denom);
  bundle.covariance_m1 = scaled_sum(g, c1_terms, denom);
  bundle.covariance_m2 = scaled_sum(g, c2_terms, denom);

  ad::NodeId weighted_inv = g.multiply(bundle.invariance, g.scalar(w.lambda));
  ad::NodeId vsum = g.multiply(g.add(bundle.variance_m1, bundle.variance_m2), g.scalar(w.mu));
  ad::NodeId csum =
      g.multiply(g.add(bundle.covariance_m1, bundle.covariance_m2), g.scalar(w.nu));
  bundle.total = g.add(g.add(weighted_inv, vsum), csum);
  g.set_output(bundle.total);
  return bundle;
}

}  // namespace fairwell
