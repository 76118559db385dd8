#pragma once

// A miniature layered network used as a stand-in for an LLM in end-to-end
// tests. Parameters: "embed" [d0,d0], "blocks.{l}.w" [d_{l+1},d_l],
// "blocks.{l}.b" [d_{l+1}], "head" [dL,dL]. Each block is affine + tanh.
//
// Initial parameters lie on a 2^-12 grid and perturbation noise on a 2^-10
// grid times `scale`, so for dyadic scales base + noise is exact in float32
// and the recorded delta equals the applied noise bit for bit.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cwmerge/consistency_weights.hpp"
#include "cwmerge/delta_ops.hpp"
#include "cwmerge/error.hpp"
#include "cwmerge/eval_metrics.hpp"
#include "cwmerge/rng.hpp"
#include "cwmerge/tensor_store.hpp"

namespace cwmerge::toy {

struct ToyNet {
  std::vector<std::size_t> dims;
  std::uint64_t seed = 0;
  Checkpoint params;

  std::size_t layer_count() const { return dims.size() - 1; }

  static std::string weight_name(std::size_t l) { return "blocks." + std::to_string(l) + ".w"; }
  static std::string bias_name(std::size_t l) { return "blocks." + std::to_string(l) + ".b"; }
};

namespace detail {

/// Uniform on a 2^-12 grid within +-range (range a power of two <= 1/2).
inline void fill_grid(TensorRecord& rec, const std::string& name, std::uint64_t seed, double range) {
  const rng::KeyedStream stream(seed, name);
  const auto steps = static_cast<std::uint64_t>(range * 4096.0);
  for (std::size_t i = 0; i < rec.data.size(); ++i) {
    const auto k = static_cast<std::int64_t>(stream.below(i, 2 * steps + 1)) - static_cast<std::int64_t>(steps);
    rec.data[i] = static_cast<float>(static_cast<double>(k) / 4096.0);
  }
}

/// Largest power of two not above 1/sqrt(fan_in), capped at 1/2.
inline double init_range(std::size_t fan_in) {
  double r = 0.5;
  while (r * r * static_cast<double>(fan_in) > 1.0) r *= 0.5;
  return r;
}

inline TensorRecord make_tensor(Shape shape) {
  TensorRecord rec;
  rec.data.resize(element_count(shape));
  rec.shape = std::move(shape);
  return rec;
}

}  // namespace detail

inline ToyNet init_toy_net(std::uint64_t seed, std::vector<std::size_t> dims) {
  if (dims.size() < 2) throw ValidationError("toy net needs at least two widths (one layer)");
  for (auto d : dims)
    if (d == 0) throw ValidationError("toy net widths must be positive");
  ToyNet net;
  net.dims = std::move(dims);
  net.seed = seed;
  auto add = [&](const std::string& name, Shape shape, double range) {
    auto rec = detail::make_tensor(std::move(shape));
    detail::fill_grid(rec, name, seed, range);
    net.params.tensors.emplace(name, std::move(rec));
  };
  const auto& d = net.dims;
  add("embed", {d[0], d[0]}, detail::init_range(d[0]));
  for (std::size_t l = 0; l + 1 < d.size(); ++l) {
    add(ToyNet::weight_name(l), {d[l + 1], d[l]}, detail::init_range(d[l]));
    add(ToyNet::bias_name(l), {d[l + 1]}, 0.125);
  }
  add("head", {d.back(), d.back()}, detail::init_range(d.back()));
  net.params.metadata["toy_dims"] = nlohmann::json(net.dims).dump();
  net.params.metadata["toy_seed"] = std::to_string(seed);
  return net;
}

struct Perturbation {
  ToyNet net;
  TaskVector delta;
};

/// Adds keyed noise of magnitude < scale to every parameter and returns the
/// delta actually applied (perturbed - base, in float32).
inline Perturbation perturb(const ToyNet& net, std::uint64_t seed, double scale) {
  if (!(scale > 0.0)) throw ValidationError("perturbation scale must be positive");
  Perturbation p{net, {}};
  p.delta.source_model = "perturb:" + std::to_string(seed);
  for (auto& [name, rec] : p.net.params.tensors) {
    const rng::KeyedStream stream(seed, name);
    const auto& orig = net.params.tensors.at(name).data;
    std::vector<float> delta(rec.data.size());
    for (std::size_t i = 0; i < rec.data.size(); ++i) {
      const double q = (static_cast<double>(stream.below(i, 2048)) - 1024.0) / 1024.0;
      rec.data[i] = orig[i] + static_cast<float>(scale * q);
      delta[i] = rec.data[i] - orig[i];
    }
    p.delta.deltas.emplace(name, std::move(delta));
  }
  return p;
}

/// Rebuilds a ToyNet view around a checkpoint loaded from disk.
inline ToyNet from_checkpoint(Checkpoint ckpt) {
  ToyNet net;
  auto it = ckpt.metadata.find("toy_dims");
  if (it == ckpt.metadata.end()) throw ValidationError("checkpoint lacks toy_dims metadata");
  net.dims = nlohmann::json::parse(it->second).get<std::vector<std::size_t>>();
  if (auto s = ckpt.metadata.find("toy_seed"); s != ckpt.metadata.end()) net.seed = std::stoull(s->second);
  net.params = std::move(ckpt);
  return net;
}

struct ForwardResult {
  std::vector<double> output;
  std::vector<std::vector<double>> pooled;  // per layer, width dims[l+1]
};

inline std::vector<double> affine(const TensorRecord& w, const TensorRecord* b, std::span<const double> x) {
  const std::size_t rows = w.shape.at(0), cols = w.shape.at(1);
  if (cols != x.size())
    throw ValidationError("width mismatch: weight expects " + std::to_string(cols) + " inputs, got " + std::to_string(x.size()));
  std::vector<double> y(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = b ? static_cast<double>(b->data[r]) : 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += static_cast<double>(w.data[r * cols + c]) * x[c];
    y[r] = s;
  }
  return y;
}

/// Embeds each token row, runs every block per position, max-pools each
/// block's outputs over positions; the head reads the last pooled vector.
inline ForwardResult forward_with_activations(const ToyNet& net, const Matrix& tokens) {
  if (tokens.rows == 0) throw ValidationError("forward pass needs at least one token");
  if (tokens.cols != net.dims.front())
    throw ValidationError("width mismatch: tokens have width " + std::to_string(tokens.cols) + ", net expects " +
                          std::to_string(net.dims.front()));
  const auto& p = net.params;
  std::vector<std::vector<double>> h(tokens.rows);
  for (std::size_t s = 0; s < tokens.rows; ++s) h[s] = affine(p.at("embed"), nullptr, tokens.row(s));

  ForwardResult res;
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    const auto& w = p.at(ToyNet::weight_name(l));
    const auto& b = p.at(ToyNet::bias_name(l));
    Matrix layer_out(tokens.rows, net.dims[l + 1]);
    for (std::size_t s = 0; s < tokens.rows; ++s) {
      auto y = affine(w, &b, h[s]);
      for (double& v : y) v = std::tanh(v);
      std::copy(y.begin(), y.end(), layer_out.row(s).begin());
      h[s] = std::move(y);
    }
    res.pooled.push_back(max_pool_sequence(layer_out));
  }
  res.output = affine(p.at("head"), nullptr, res.pooled.back());
  return res;
}

/// Deterministic pseudo-random unit vector for a string. Similar strings do
/// not get similar vectors.
inline std::vector<double> hash_embed(std::string_view text, std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw ValidationError("embedding dimension must be positive");
  const rng::KeyedStream stream(seed, text);
  std::vector<double> v(dim);
  double norm = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double u1 = 1.0 - stream.uniform(2 * i);  // (0,1]
    const double u2 = stream.uniform(2 * i + 1);
    v[i] = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    norm += v[i] * v[i];
  }
  norm = std::sqrt(norm);
  if (norm == 0.0) {
    v.assign(dim, 0.0);
    v[0] = 1.0;
    return v;
  }
  for (double& x : v) x /= norm;
  return v;
}

/// One hash-embedded row per token of the query (a single row for the
/// whole string if it has no tokens).
inline Matrix token_matrix(std::string_view query, std::size_t dim, std::uint64_t seed) {
  auto toks = tokenize(query);
  if (toks.empty()) toks.emplace_back(query);
  Matrix m(toks.size(), dim);
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const auto v = hash_embed(toks[i], dim, seed);
    std::copy(v.begin(), v.end(), m.row(i).begin());
  }
  return m;
}

/// Normalized bag-of-words embedding; queries sharing words are similar.
inline std::vector<double> bag_of_words_embed(std::string_view text, std::size_t dim, std::uint64_t seed) {
  const Matrix rows = token_matrix(text, dim, seed);
  std::vector<double> v(dim, 0.0);
  for (std::size_t r = 0; r < rows.rows; ++r)
    for (std::size_t c = 0; c < dim; ++c) v[c] += rows(r, c);
  const double n = std::sqrt(dot(v, v));
  if (n > 0.0)
    for (double& x : v) x /= n;
  return v;
}

/// Pooled activations of `net` over a dev set, one row per query.
inline ActivationSet collect_activations(const ToyNet& net, std::span<const std::string> queries,
                                         std::span<const std::string> query_ids, std::uint64_t token_seed,
                                         std::string model_id) {
  if (queries.size() != query_ids.size()) throw ValidationError("query and id counts differ");
  ActivationSet set;
  set.model_id = std::move(model_id);
  set.query_ids.assign(query_ids.begin(), query_ids.end());
  for (std::size_t l = 0; l < net.layer_count(); ++l) set.layers.emplace_back(queries.size(), net.dims[l + 1]);
  for (std::size_t t = 0; t < queries.size(); ++t) {
    const auto res = forward_with_activations(net, token_matrix(queries[t], net.dims.front(), token_seed));
    for (std::size_t l = 0; l < net.layer_count(); ++l)
      std::copy(res.pooled[l].begin(), res.pooled[l].end(), set.layers[l].row(t).begin());
  }
  return set;
}

}  // namespace cwmerge::toy
