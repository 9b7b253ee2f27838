// encoders.hpp - per-modality segment encoders and segment pooling
//
// A SegmentEncoder is an MLP with rectified-linear hidden layers and a
// linear output layer, applied to each fixed-length segment of a modality
// independently. All modalities in one model share the same output
// dimension so their embeddings live in a common space.
#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fairwell/common.hpp"
#include "fairwell/rng.hpp"
#include "fairwell/tensor.hpp"

namespace fairwell {

// Pairwise (cascade) summation over values sorted ascending. The summation
// order then depends only on the value multiset, so any permutation of the
// inputs yields the exact same double.
inline double sorted_pairwise_sum(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  struct Impl {
    static double run(const double* v, size_t n) {
      if (n <= 8) {
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) acc += v[i];
        return acc;
      }
      size_t half = n / 2;
      return run(v, half) + run(v + half, n - half);
    }
  };
  return Impl::run(values.data(), values.size());
}

// Per-subject, per-modality segment embeddings plus the optional pooled
// vector (the arithmetic mean of the segment embeddings).
struct EmbeddingSet {
  std::string subject_id;
  std::string modality_name;
  std::vector<std::vector<double>> segments;
  std::optional<std::vector<double>> pooled;

  size_t dim() const { return segments.empty() ? 0 : segments.front().size(); }
};

struct LayerSpec {
  size_t in = 0, out = 0;
  bool relu = false;
};

class SegmentEncoder {
 public:
  SegmentEncoder() = default;

  // Xavier-uniform initialization in +-sqrt(6 / (fan_in + fan_out)).
  // projection_dim > 0 appends a linear projection layer after the output;
  // the loss sees the projected vectors while downstream consumers read the
  // backbone output (see encode_backbone).
  SegmentEncoder(std::string modality_name, size_t input_dim,
                 std::vector<size_t> hidden_dims, size_t output_dim, uint64_t seed,
                 size_t projection_dim = 0)
      : modality_name_(std::move(modality_name)),
        input_dim_(input_dim),
        hidden_dims_(std::move(hidden_dims)),
        output_dim_(output_dim),
        projection_dim_(projection_dim) {
    if (input_dim_ == 0 || output_dim_ == 0)
      throw ConfigError("encoder dims must be positive");
    size_t in = input_dim_;
    size_t layer_idx = 0;
    auto add_layer = [&](size_t out, bool relu) {
      Rng rng(derive_seed(derive_seed(seed, modality_name_), layer_idx++));
      double bound = std::sqrt(6.0 / static_cast<double>(in + out));
      std::vector<double> w(in * out);
      for (auto& v : w) v = rng.uniform(-bound, bound);
      weights_.push_back(Tensor::matrix(in, out, std::move(w)));
      biases_.push_back(Tensor::vector(std::vector<double>(out, 0.0)));
      relu_.push_back(relu);
      in = out;
    };
    for (size_t h : hidden_dims_) {
      if (h == 0) throw ConfigError("encoder hidden dim must be positive");
      add_layer(h, true);
    }
    add_layer(output_dim_, false);
    if (projection_dim_ > 0) add_layer(projection_dim_, false);
  }

  const std::string& modality_name() const { return modality_name_; }
  size_t input_dim() const { return input_dim_; }
  size_t output_dim() const { return output_dim_; }
  size_t projection_dim() const { return projection_dim_; }
  // dimensionality of the vectors the loss consumes
  size_t loss_dim() const { return projection_dim_ > 0 ? projection_dim_ : output_dim_; }
  const std::vector<size_t>& hidden_dims() const { return hidden_dims_; }
  size_t layer_count() const { return weights_.size(); }
  // layers up to and including the backbone output (excludes the projection)
  size_t backbone_layer_count() const {
    return projection_dim_ > 0 ? weights_.size() - 1 : weights_.size();
  }

  const Tensor& weight(size_t layer) const { return weights_[layer]; }
  const Tensor& bias(size_t layer) const { return biases_[layer]; }
  Tensor& weight(size_t layer) { return weights_[layer]; }
  Tensor& bias(size_t layer) { return biases_[layer]; }
  bool layer_relu(size_t layer) const { return relu_[layer]; }

  std::vector<LayerSpec> layer_specs() const {
    std::vector<LayerSpec> specs;
    for (size_t l = 0; l < weights_.size(); ++l)
      specs.push_back({weights_[l].shape()[0], weights_[l].shape()[1], static_cast<bool>(relu_[l])});
    return specs;
  }

  // Copy without the projection layer (used once pretraining is done).
  SegmentEncoder strip_projection() const {
    if (projection_dim_ == 0) return *this;
    SegmentEncoder enc(modality_name_, input_dim_, hidden_dims_, output_dim_, 0);
    for (size_t l = 0; l < enc.layer_count(); ++l) enc.set_layer(l, weights_[l], biases_[l]);
    return enc;
  }

  // Installs externally trained parameters (checkpoint load, optimizer step).
  void set_layer(size_t layer, Tensor w, Tensor b) {
    if (w.shape() != weights_[layer].shape() || b.shape() != biases_[layer].shape())
      throw ShapeError("set_layer: parameter shape mismatch for modality '" +
                       modality_name_ + "' layer " + std::to_string(layer));
    weights_[layer] = std::move(w);
    biases_[layer] = std::move(b);
  }

  // One segment through the MLP. The arithmetic mirrors the autodiff matmul
  // (sequential dot products), so batched and single-segment encodings are
  // bit-identical.
  std::vector<double> encode_one(std::span<const double> x) const {
    return run_layers(x, weights_.size());
  }

  // Stops before the projection layer; identical to encode_one when no
  // projection is configured.
  std::vector<double> encode_backbone(std::span<const double> x) const {
    return run_layers(x, backbone_layer_count());
  }

 private:
  std::vector<double> run_layers(std::span<const double> x, size_t n_layers) const {
    if (x.size() != input_dim_)
      throw ShapeError("segment of length " + std::to_string(x.size()) +
                       " fed to encoder for modality '" + modality_name_ +
                       "' expecting " + std::to_string(input_dim_));
    std::vector<double> cur(x.begin(), x.end());
    for (size_t l = 0; l < n_layers; ++l) {
      const Tensor& w = weights_[l];
      const Tensor& b = biases_[l];
      size_t out_dim = w.shape()[1];
      std::vector<double> nxt(out_dim);
      for (size_t j = 0; j < out_dim; ++j) {
        double acc = 0.0;
        for (size_t k = 0; k < cur.size(); ++k) acc += cur[k] * w.at(k, j);
        acc += b[j];
        nxt[j] = relu_[l] && acc < 0.0 ? 0.0 : acc;
      }
      cur = std::move(nxt);
    }
    return cur;
  }

  std::string modality_name_;
  size_t input_dim_ = 0;
  std::vector<size_t> hidden_dims_;
  size_t output_dim_ = 0;
  size_t projection_dim_ = 0;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
  std::vector<uint8_t> relu_;
};

// Encodes every segment, order preserved.
inline EmbeddingSet encode_segments(const SegmentEncoder& encoder,
                                    const std::vector<std::vector<double>>& segments,
                                    std::string subject_id = {}) {
  if (segments.empty())
    throw DataError("encode_segments: empty segment list for modality '" +
                    encoder.modality_name() + "'");
  EmbeddingSet set;
  set.subject_id = std::move(subject_id);
  set.modality_name = encoder.modality_name();
  set.segments.reserve(segments.size());
  for (const auto& s : segments) set.segments.push_back(encoder.encode_one(s));
  return set;
}

// Componentwise mean of a set of equal-length vectors with the
// permutation-exact summation policy.
inline std::vector<double> mean_pool(const std::vector<std::vector<double>>& vectors) {
  if (vectors.empty()) throw DataError("mean_pool: empty vector list");
  size_t d = vectors.front().size();
  std::vector<double> pooled(d);
  std::vector<double> column(vectors.size());
  for (size_t j = 0; j < d; ++j) {
    for (size_t i = 0; i < vectors.size(); ++i) {
      if (vectors[i].size() != d)
        throw ShapeError("mean_pool: inconsistent vector lengths");
      column[i] = vectors[i][j];
    }
    pooled[j] = sorted_pairwise_sum(column) / static_cast<double>(vectors.size());
  }
  return pooled;
}

// Fills set.pooled with the mean of the segment embeddings.
inline EmbeddingSet pool(EmbeddingSet set) {
  if (set.segments.empty())
    throw DataError("pool: empty segment list for subject '" + set.subject_id + "'");
  set.pooled = mean_pool(set.segments);
  return set;
}

}  // namespace fairwell
