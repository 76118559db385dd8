#pragma once

// Straightforward re-derivation of the merge from files, written without
// the library's merge, delta or weight code. Only the container reader and
// the keyed generator are shared.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

#include "cwmerge/rng.hpp"
#include "cwmerge/tensor_store.hpp"

namespace oracle {

struct Options {
  std::optional<double> drop_prob;
  std::uint64_t dare_seed = 0;
  std::optional<double> density;
  double a = 4.0, b = 0.0;
  bool uniform = false;
};

using Rows = std::vector<std::vector<double>>;

inline Rows rows_of(const cwmerge::TensorRecord& t) {
  Rows r(t.shape[0], std::vector<double>(t.shape[1]));
  for (std::size_t i = 0; i < t.shape[0]; ++i)
    for (std::size_t j = 0; j < t.shape[1]; ++j) r[i][j] = t.data[i * t.shape[1] + j];
  return r;
}

inline Rows cosine_matrix(const Rows& x) {
  const std::size_t n = x.size();
  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (double v : x[i]) s += v * v;
    norm[i] = std::sqrt(s);
  }
  Rows c(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0;
      for (std::size_t d = 0; d < x[i].size(); ++d) s += x[i][d] * x[j][d];
      c[i][j] = c[j][i] = std::clamp(s / (norm[i] * norm[j]), -1.0, 1.0);
    }
  return c;
}

/// weights[k][l]
inline Rows weights(const std::vector<cwmerge::Checkpoint>& acts, const cwmerge::Checkpoint& ref, double a, double b) {
  const Rows sr = cosine_matrix(rows_of(ref.at("embeddings")));
  const std::size_t n = acts.size(), t = sr.size();
  std::size_t layers = 0;
  while (acts[0].tensors.contains("layer." + std::to_string(layers))) ++layers;
  Rows w(n, std::vector<double>(layers));
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> d(n);
    for (std::size_t k = 0; k < n; ++k) {
      const Rows s = cosine_matrix(rows_of(acts[k].at("layer." + std::to_string(l))));
      double sum = 0;
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j)
          if (i != j) sum += std::fabs(s[i][j] - sr[i][j]);
      d[k] = sum / static_cast<double>(t * (t - 1));
    }
    const double mx = *std::max_element(d.begin(), d.end());
    double total = 0;
    for (double v : d) total += mx - v;
    for (std::size_t k = 0; k < n; ++k) {
      const double r = total == 0 ? 1.0 / static_cast<double>(n) : (mx - d[k]) / total;
      w[k][l] = 1.0 / (1.0 + std::exp(-(a * r + b)));
    }
  }
  return w;
}

/// merged = base + sum_k w_k(l) * delta_k after drop/trim/elect.
inline cwmerge::Checkpoint merge(const cwmerge::Checkpoint& base, const std::vector<cwmerge::Checkpoint>& tuned,
                                 const Rows& w, const Options& o) {
  const std::size_t n = tuned.size(), layers = w[0].size();
  const std::regex layer_re(R"(blocks\.(\d+)\.)");
  cwmerge::Checkpoint out = base;
  for (auto& [name, rec] : out.tensors) {
    const std::size_t len = rec.data.size();
    std::vector<std::vector<float>> d(n, std::vector<float>(len));
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < len; ++i) d[k][i] = tuned[k].at(name).data[i] - base.at(name).data[i];

    if (o.drop_prob && *o.drop_prob > 0) {
      const double p = *o.drop_prob;
      for (std::size_t k = 0; k < n; ++k) {
        const cwmerge::rng::KeyedStream s(cwmerge::rng::combine(o.dare_seed, k), name);
        for (std::size_t i = 0; i < len; ++i)
          d[k][i] = s.uniform(i) < p ? 0.0f : static_cast<float>(static_cast<double>(d[k][i]) / (1.0 - p));
      }
    }
    if (o.density) {
      const auto keep = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::ceil(*o.density * static_cast<double>(len) - 1e-9)), 1, len);
      for (auto& v : d) {
        std::vector<std::size_t> idx(len);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](auto x, auto y) { return std::fabs(v[x]) > std::fabs(v[y]); });
        for (std::size_t r = keep; r < len; ++r) v[idx[r]] = 0.0f;
      }
      for (std::size_t i = 0; i < len; ++i) {
        double pos = 0, neg = 0;
        for (std::size_t k = 0; k < n; ++k) (d[k][i] > 0 ? pos : neg) += std::fabs(d[k][i]);
        for (std::size_t k = 0; k < n; ++k)
          if ((pos >= neg && d[k][i] < 0) || (pos < neg && d[k][i] > 0)) d[k][i] = 0.0f;
      }
    }

    std::smatch m;
    std::optional<std::size_t> layer;
    if (std::regex_search(name, m, layer_re)) layer = std::stoul(m[1].str());
    std::vector<double> wk(n);
    for (std::size_t k = 0; k < n; ++k) {
      if (o.uniform) {
        wk[k] = 1.0;
      } else if (layer) {
        wk[k] = w[k][*layer];
      } else {
        double s = 0;
        for (double v : w[k]) s += v;
        wk[k] = s / static_cast<double>(layers);
      }
    }
    for (std::size_t i = 0; i < len; ++i) {
      double acc = base.at(name).data[i];
      for (std::size_t k = 0; k < n; ++k) acc += wk[k] * static_cast<double>(d[k][i]);
      rec.data[i] = static_cast<float>(acc);
    }
  }
  return out;
}

/// Reads the fixture's merge.json (relative paths) and runs the oracle.
inline cwmerge::Checkpoint merge_from_config(const std::filesystem::path& config_path) {
  std::ifstream in(config_path);
  const auto j = nlohmann::json::parse(in);
  const auto dir = config_path.parent_path();
  const auto base = cwmerge::read_container(dir / j["base"].get<std::string>());
  std::vector<cwmerge::Checkpoint> tuned, acts;
  for (const auto& m : j["models"]) {
    tuned.push_back(cwmerge::read_container(dir / m["checkpoint"].get<std::string>()));
    if (m.contains("activations") && !m["activations"].is_null())
      acts.push_back(cwmerge::read_container(dir / m["activations"].get<std::string>()));
  }
  Options o;
  if (j.contains("dare") && !j["dare"].is_null()) {
    o.drop_prob = j["dare"]["drop_prob"].get<double>();
    o.dare_seed = j["dare"]["seed"].get<std::uint64_t>();
  }
  if (j.contains("ties") && !j["ties"].is_null()) o.density = j["ties"]["density"].get<double>();
  o.a = j.value("a", 4.0);
  o.b = j.value("b", 0.0);
  o.uniform = j.value("uniform_weights", false);
  Rows w;
  if (o.uniform) {
    std::size_t layers = 0;
    for (const auto& [name, r] : base.tensors)
      if (name.rfind("blocks.", 0) == 0) layers = std::max<std::size_t>(layers, std::stoul(name.substr(7)) + 1);
    w.assign(tuned.size(), std::vector<double>(layers, 1.0));
  } else {
    w = weights(acts, cwmerge::read_container(dir / j["reference"].get<std::string>()), o.a, o.b);
  }
  return merge(base, tuned, w, o);
}

}  // namespace oracle
