#pragma once

// Task vectors and the DARE / TIES operations applied to them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cwmerge/error.hpp"
#include "cwmerge/rng.hpp"
#include "cwmerge/tensor_store.hpp"

namespace cwmerge {

/// Per-tensor difference between a fine-tuned checkpoint and the base.
struct TaskVector {
  std::map<std::string, std::vector<float>> deltas;
  std::string source_model;
};

struct DareConfig {
  double drop_prob = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(drop_prob >= 0.0 && drop_prob < 1.0))
      throw ValidationError("DARE drop probability must lie in [0,1), got " + std::to_string(drop_prob));
  }
};

struct TiesConfig {
  double density = 0.2;

  void validate() const {
    if (!(density > 0.0 && density <= 1.0))
      throw ValidationError("TIES density must lie in (0,1], got " + std::to_string(density));
  }
};

inline TaskVector compute_task_vector(const Checkpoint& base, const Checkpoint& tuned, std::string model_id = {}) {
  require_compatible(base, tuned, model_id.empty() ? "task vector" : "task vector for model " + model_id);
  TaskVector tv;
  tv.source_model = std::move(model_id);
  for (const auto& [name, b] : base.tensors) {
    const auto& t = tuned.tensors.at(name);
    std::vector<float> d(b.data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = t.data[i] - b.data[i];
    tv.deltas.emplace(name, std::move(d));
  }
  return tv;
}

/// Throws unless every task vector carries the same names and lengths.
inline void require_compatible(std::span<const TaskVector> tvs) {
  if (tvs.empty()) throw ValidationError("need at least one task vector");
  const auto& ref = tvs.front().deltas;
  for (const auto& tv : tvs.subspan(1)) {
    if (tv.deltas.size() != ref.size())
      throw ValidationError("task vector '" + tv.source_model + "' has a different tensor set");
    for (auto a = ref.begin(), b = tv.deltas.begin(); a != ref.end(); ++a, ++b) {
      if (a->first != b->first || a->second.size() != b->second.size())
        throw ValidationError("task vector '" + tv.source_model + "' differs at tensor '" + a->first + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// DARE

/// Drop-and-rescale one tensor. Element i is dropped iff the keyed draw
/// (seed, name, i) falls below p; survivors are scaled by 1/(1-p).
inline void dare_tensor(std::span<float> values, const std::string& name, const DareConfig& cfg) {
  const rng::KeyedStream stream(cfg.seed, name);
  const double keep = 1.0 - cfg.drop_prob;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (stream.uniform(i) < cfg.drop_prob) {
      values[i] = 0.0f;
    } else {
      values[i] = static_cast<float>(static_cast<double>(values[i]) / keep);
    }
  }
}

inline TaskVector dare_sparsify(TaskVector tv, const DareConfig& cfg) {
  cfg.validate();
  if (cfg.drop_prob == 0.0) return tv;
  for (auto& [name, d] : tv.deltas) dare_tensor(d, name, cfg);
  return tv;
}

// ---------------------------------------------------------------------------
// TIES

/// Number of entries kept out of n at the given density: ceil(density * n),
/// guarded against products like 0.2 * 5 landing one ulp above an integer.
inline std::size_t ties_keep_count(double density, std::size_t n) {
  if (n == 0) return 0;
  const double exact = density * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
  return std::clamp<std::size_t>(k, 1, n);
}

inline void ties_trim_tensor(std::span<float> values, double density) {
  const std::size_t n = values.size();
  const std::size_t k = ties_keep_count(density, n);
  if (k >= n) return;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Larger magnitude first; equal magnitudes keep the lower flat index.
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     const float ma = std::fabs(values[a]), mb = std::fabs(values[b]);
                     return ma != mb ? ma > mb : a < b;
                   });
  for (auto it = order.begin() + static_cast<std::ptrdiff_t>(k); it != order.end(); ++it) values[*it] = 0.0f;
}

inline TaskVector ties_trim(TaskVector tv, const TiesConfig& cfg) {
  cfg.validate();
  for (auto& [name, d] : tv.deltas) ties_trim_tensor(d, cfg.density);
  return tv;
}

/// Elected sign per element: +1 when the positive mass is at least the
/// negative mass, -1 otherwise, 0 when every model is zero there.
using SignMap = std::map<std::string, std::vector<std::int8_t>>;

inline SignMap ties_elect(std::span<const TaskVector> tvs) {
  require_compatible(tvs);
  SignMap signs;
  for (const auto& [name, first] : tvs.front().deltas) {
    std::vector<std::int8_t> s(first.size(), 0);
    for (std::size_t i = 0; i < s.size(); ++i) {
      double pos = 0.0, neg = 0.0;
      for (const auto& tv : tvs) {
        const float v = tv.deltas.at(name)[i];
        if (v > 0.0f) pos += v;
        else if (v < 0.0f) neg -= v;
      }
      if (pos == 0.0 && neg == 0.0) continue;
      s[i] = pos >= neg ? 1 : -1;
    }
    signs.emplace(name, std::move(s));
  }
  return signs;
}

/// Zeroes every entry whose sign disagrees with the elected sign.
inline TaskVector keep_agreeing(TaskVector tv, const SignMap& signs) {
  for (auto& [name, d] : tv.deltas) {
    const auto& s = signs.at(name);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const int sv = d[i] > 0.0f ? 1 : (d[i] < 0.0f ? -1 : 0);
      if (sv != s[i]) d[i] = 0.0f;
    }
  }
  return tv;
}

/// Sign election followed by a disjoint mean: each element is the mean of
/// the nonzero entries that agree with the elected sign.
inline TaskVector ties_merge(std::span<const TaskVector> tvs) {
  const SignMap signs = ties_elect(tvs);
  TaskVector out;
  out.source_model = "ties_merge";
  for (const auto& [name, s] : signs) {
    std::vector<float> merged(s.size(), 0.0f);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == 0) continue;
      double sum = 0.0;
      std::size_t count = 0;
      for (const auto& tv : tvs) {
        const float v = tv.deltas.at(name)[i];
        if ((s[i] > 0 && v > 0.0f) || (s[i] < 0 && v < 0.0f)) {
          sum += v;
          ++count;
        }
      }
      merged[i] = static_cast<float>(sum / static_cast<double>(count));
    }
    out.deltas.emplace(name, std::move(merged));
  }
  return out;
}

}  // namespace cwmerge
