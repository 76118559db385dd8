#pragma once

// Consistency weights: how closely each model's per-layer activation
// similarity structure tracks a reference similarity matrix built from
// sentence embeddings, mapped through inverted normalization and a sigmoid.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cwmerge/error.hpp"
#include "cwmerge/parallel.hpp"
#include "cwmerge/tensor_store.hpp"

namespace cwmerge {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  static Matrix from_rows(const std::vector<std::vector<double>>& rs) {
    Matrix m(rs.size(), rs.empty() ? 0 : rs.front().size());
    for (std::size_t i = 0; i < rs.size(); ++i) {
      if (rs[i].size() != m.cols) throw ValidationError("ragged matrix rows");
      std::copy(rs[i].begin(), rs[i].end(), m.values.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
    }
    return m;
  }

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
};

/// Pooled activations of one model: layers[l] is T x D_l, row t belongs to
/// query_ids[t].
struct ActivationSet {
  std::string model_id;
  std::vector<Matrix> layers;
  std::vector<std::string> query_ids;

  void validate() const {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].rows != query_ids.size())
        throw ValidationError("model " + model_id + ": layer " + std::to_string(l) + " has " +
                              std::to_string(layers[l].rows) + " rows, expected " +
                              std::to_string(query_ids.size()));
      for (double v : layers[l].values)
        if (std::isnan(v))
          throw ValidationError("model " + model_id + ": NaN activation in layer " + std::to_string(l));
    }
  }
};

struct SimilarityMatrix {
  Matrix values;
  std::vector<std::string> query_ids;
};

struct WeightParams {
  double a = 4.0;
  double b = 0.0;
};

/// N x L consistency weights plus the per-layer distance tables they came from.
struct LayerWeights {
  std::vector<std::string> models;
  std::vector<std::vector<double>> weights;    // [model][layer]
  std::vector<std::vector<double>> distances;  // [layer][model]
  WeightParams params;

  std::size_t model_count() const { return weights.size(); }
  std::size_t layer_count() const { return weights.empty() ? 0 : weights.front().size(); }

  /// Weight used for tensors outside the indexed layers.
  double mean_weight(std::size_t model) const {
    const auto& w = weights.at(model);
    if (w.empty()) return 1.0;
    return std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  }

  /// Every weight set to `value`; used for the uniform-weights override.
  static LayerWeights uniform(std::vector<std::string> models, std::size_t layers, double value = 1.0) {
    LayerWeights lw;
    lw.weights.assign(models.size(), std::vector<double>(layers, value));
    lw.models = std::move(models);
    return lw;
  }
};

inline std::vector<double> max_pool_sequence(const Matrix& seq) {
  if (seq.rows == 0) throw ValidationError("max-pooling needs at least one sequence position");
  std::vector<double> out(seq.row(0).begin(), seq.row(0).end());
  for (std::size_t s = 1; s < seq.rows; ++s) {
    auto r = seq.row(s);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::max(out[j], r[j]);
  }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline constexpr double kMinRowNorm = 1e-12;

/// Pairwise cosine similarity of the rows of a T x D matrix.
inline SimilarityMatrix similarity_matrix(const Matrix& acts, std::vector<std::string> query_ids = {}) {
  const std::size_t t = acts.rows;
  if (t < 2) throw ValidationError("similarity matrix needs at least 2 rows, got " + std::to_string(t));
  if (!query_ids.empty() && query_ids.size() != t)
    throw ValidationError("query id count does not match activation rows");
  std::vector<double> norms(t);
  for (std::size_t i = 0; i < t; ++i) {
    norms[i] = std::sqrt(dot(acts.row(i), acts.row(i)));
    if (!(norms[i] > kMinRowNorm))
      throw ValidationError("zero-norm row " + std::to_string(i) +
                            (query_ids.empty() ? std::string() : " (query " + query_ids[i] + ")"));
  }
  SimilarityMatrix sim{Matrix(t, t), std::move(query_ids)};
  for (std::size_t i = 0; i < t; ++i) {
    sim.values(i, i) = 1.0;
    for (std::size_t j = i + 1; j < t; ++j) {
      const double c = std::clamp(dot(acts.row(i), acts.row(j)) / (norms[i] * norms[j]), -1.0, 1.0);
      sim.values(i, j) = c;
      sim.values(j, i) = c;
    }
  }
  return sim;
}

/// Mean absolute difference over the off-diagonal entries.
inline double layer_distance(const SimilarityMatrix& sim, const SimilarityMatrix& ref) {
  if (sim.query_ids != ref.query_ids) throw ValidationError("query-set mismatch between similarity matrices");
  const std::size_t t = sim.values.rows;
  if (ref.values.rows != t || sim.values.cols != t || ref.values.cols != t)
    throw ValidationError("query-set mismatch: similarity matrices differ in size");
  if (t < 2) throw ValidationError("similarity matrices need at least 2 queries");
  double sum = 0.0;
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j)
      if (i != j) sum += std::fabs(sim.values(i, j) - ref.values(i, j));
  return sum / static_cast<double>(t * (t - 1));
}

/// r_k = (max(d) - d_k) / sum_j (max(d) - d_j); uniform when every
/// distance is equal.
inline std::vector<double> invert_normalize(std::span<const double> distances) {
  if (distances.empty()) throw ValidationError("need at least one distance");
  for (double d : distances)
    if (!(d >= 0.0)) throw ValidationError("distances must be non-negative");
  const double top = *std::max_element(distances.begin(), distances.end());
  std::vector<double> r(distances.size());
  double total = 0.0;
  for (std::size_t k = 0; k < r.size(); ++k) {
    r[k] = top - distances[k];
    total += r[k];
  }
  if (total == 0.0) {
    std::fill(r.begin(), r.end(), 1.0 / static_cast<double>(r.size()));
    return r;
  }
  for (double& v : r) v /= total;
  return r;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline std::vector<double> sigmoid_weights(std::span<const double> ratios, double a, double b) {
  std::vector<double> w(ratios.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (!(ratios[k] >= 0.0 && ratios[k] <= 1.0)) throw ValidationError("ratios must lie in [0,1]");
    w[k] = sigmoid(a * ratios[k] + b);
  }
  return w;
}

inline LayerWeights compute_layer_weights(std::span<const ActivationSet> acts, const SimilarityMatrix& ref,
                                          WeightParams params = {}, unsigned threads = 1) {
  if (acts.empty()) throw ValidationError("need at least one activation set");
  const std::size_t layers = acts.front().layers.size();
  if (layers == 0) throw ValidationError("model " + acts.front().model_id + ": activation set has no layers");
  for (const auto& a : acts) {
    a.validate();
    if (a.layers.size() != layers)
      throw ValidationError("model " + a.model_id + ": has " + std::to_string(a.layers.size()) +
                            " layers, expected " + std::to_string(layers));
    if (a.query_ids != ref.query_ids)
      throw ValidationError("model " + a.model_id + ": query ids/order differ from the reference");
  }

  const std::size_t n = acts.size();
  LayerWeights lw;
  lw.params = params;
  lw.weights.assign(n, std::vector<double>(layers));
  lw.distances.assign(layers, std::vector<double>(n));
  for (const auto& a : acts) lw.models.push_back(a.model_id);

  parallel_for(layers, threads, [&](std::size_t l) {
    auto& dm = lw.distances[l];
    for (std::size_t k = 0; k < n; ++k) {
      try {
        dm[k] = layer_distance(similarity_matrix(acts[k].layers[l], acts[k].query_ids), ref);
      } catch (const ValidationError& e) {
        throw ValidationError("model " + acts[k].model_id + ", layer " + std::to_string(l) + ": " + e.what());
      }
    }
    const auto w = sigmoid_weights(invert_normalize(dm), params.a, params.b);
    for (std::size_t k = 0; k < n; ++k) lw.weights[k][l] = w[k];
  });
  return lw;
}

// ---------------------------------------------------------------------------
// File forms. Activation dumps hold tensors "layer.{l}" of shape [T, D_l];
// reference files hold "embeddings" of shape [T, E]. Both carry the query
// order as metadata "query_ids", a JSON array of strings.

inline constexpr std::string_view kQueryIdsKey = "query_ids";

inline std::vector<std::string> query_ids_from(const Checkpoint& ckpt, const std::string& what) {
  auto it = ckpt.metadata.find(std::string(kQueryIdsKey));
  if (it == ckpt.metadata.end()) throw ValidationError(what + ": missing metadata key 'query_ids'");
  try {
    auto j = nlohmann::json::parse(it->second);
    return j.get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(what + ": metadata 'query_ids' is not a JSON array of strings");
  }
}

inline Matrix matrix_from_tensor(const TensorRecord& rec, const std::string& what) {
  if (rec.shape.size() != 2) throw ValidationError(what + ": expected a rank-2 tensor, got shape " + shape_string(rec.shape));
  Matrix m(rec.shape[0], rec.shape[1]);
  std::copy(rec.data.begin(), rec.data.end(), m.values.begin());
  return m;
}

inline TensorRecord tensor_from_matrix(const Matrix& m) {
  TensorRecord rec;
  rec.shape = {m.rows, m.cols};
  rec.data.assign(m.values.begin(), m.values.end());
  return rec;
}

inline ActivationSet activation_set_from(const Checkpoint& ckpt, std::string model_id) {
  const std::string what = "activations for model " + model_id;
  ActivationSet set;
  set.model_id = std::move(model_id);
  set.query_ids = query_ids_from(ckpt, what);
  for (std::size_t l = 0;; ++l) {
    auto it = ckpt.tensors.find("layer." + std::to_string(l));
    if (it == ckpt.tensors.end()) break;
    set.layers.push_back(matrix_from_tensor(it->second, what + " layer " + std::to_string(l)));
  }
  if (set.layers.size() != ckpt.tensors.size())
    throw ValidationError(what + ": tensors must be exactly layer.0 .. layer.{L-1}");
  set.validate();
  return set;
}

inline Checkpoint activation_set_to_checkpoint(const ActivationSet& set) {
  Checkpoint ckpt;
  for (std::size_t l = 0; l < set.layers.size(); ++l)
    ckpt.tensors.emplace("layer." + std::to_string(l), tensor_from_matrix(set.layers[l]));
  ckpt.metadata.emplace(std::string(kQueryIdsKey), nlohmann::json(set.query_ids).dump());
  return ckpt;
}

inline ActivationSet load_activation_set(const std::filesystem::path& path, std::string model_id) {
  try {
    return activation_set_from(read_container(path), std::move(model_id));
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

/// Query embeddings: ids plus a T x E matrix.
struct EmbeddingTable {
  std::vector<std::string> ids;
  Matrix vectors;
};

inline EmbeddingTable embedding_table_from(const Checkpoint& ckpt, const std::string& what) {
  EmbeddingTable tbl;
  tbl.ids = query_ids_from(ckpt, what);
  auto it = ckpt.tensors.find("embeddings");
  if (it == ckpt.tensors.end()) throw ValidationError(what + ": missing tensor 'embeddings'");
  tbl.vectors = matrix_from_tensor(it->second, what);
  if (tbl.vectors.rows != tbl.ids.size())
    throw ValidationError(what + ": 'embeddings' has " + std::to_string(tbl.vectors.rows) + " rows but " +
                          std::to_string(tbl.ids.size()) + " query ids");
  return tbl;
}

inline Checkpoint embedding_table_to_checkpoint(const EmbeddingTable& tbl) {
  Checkpoint ckpt;
  ckpt.tensors.emplace("embeddings", tensor_from_matrix(tbl.vectors));
  ckpt.metadata.emplace(std::string(kQueryIdsKey), nlohmann::json(tbl.ids).dump());
  return ckpt;
}

inline EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
  return embedding_table_from(read_container(path), path.string());
}

inline SimilarityMatrix reference_similarity(const EmbeddingTable& tbl) {
  return similarity_matrix(tbl.vectors, tbl.ids);
}

}  // namespace cwmerge
