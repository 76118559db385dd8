#pragma once

// Consistency-aware layer-wise merge of N fine-tuned checkpoints.
//
// Pipeline per tensor: task vector -> DARE drop/rescale (per-model seed) ->
// TIES trim -> sign election across models -> each model keeps only its
// sign-agreeing entries -> merged = base + sum_k w_k(l) * delta_k, where l
// is the tensor's layer. Tensors outside the indexed layers use each model's
// mean layer weight.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cwmerge/consistency_weights.hpp"
#include "cwmerge/delta_ops.hpp"
#include "cwmerge/error.hpp"
#include "cwmerge/parallel.hpp"
#include "cwmerge/rng.hpp"
#include "cwmerge/tensor_store.hpp"

namespace cwmerge {

struct ModelEntry {
  std::string id;
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> activations;
};

struct MergeConfig {
  std::filesystem::path base;
  std::vector<ModelEntry> models;
  std::optional<std::filesystem::path> reference;
  std::string layer_pattern{kDefaultLayerPattern};
  std::optional<DareConfig> dare;
  std::optional<TiesConfig> ties;
  WeightParams weight_params;
  bool uniform_weights = false;
  unsigned threads = 1;

  void validate() const {
    if (models.empty()) throw ValidationError("merge config needs at least one fine-tuned model");
    std::set<std::string> ids;
    for (const auto& m : models)
      if (!ids.insert(m.id).second) throw ValidationError("duplicate model id '" + m.id + "'");
    if (dare) dare->validate();
    if (ties) ties->validate();
    if (!uniform_weights && !reference)
      throw ValidationError("merge config needs a reference embedding file unless uniform_weights is set");
  }

  /// Relative paths are resolved against `base_dir`.
  static MergeConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    auto resolve = [&](const std::string& p) {
      std::filesystem::path path(p);
      return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    };
    try {
      MergeConfig cfg;
      cfg.base = resolve(j.at("base").get<std::string>());
      std::size_t k = 0;
      for (const auto& m : j.at("models")) {
        ++k;
        ModelEntry e;
        e.id = m.contains("id") ? m.at("id").get<std::string>() : "model" + std::to_string(k);
        e.checkpoint = resolve(m.at("checkpoint").get<std::string>());
        if (m.contains("activations") && !m.at("activations").is_null())
          e.activations = resolve(m.at("activations").get<std::string>());
        cfg.models.push_back(std::move(e));
      }
      if (j.contains("reference") && !j.at("reference").is_null())
        cfg.reference = resolve(j.at("reference").get<std::string>());
      if (j.contains("layer_pattern")) cfg.layer_pattern = j.at("layer_pattern").get<std::string>();
      if (j.contains("dare") && !j.at("dare").is_null()) {
        DareConfig d;
        d.drop_prob = j.at("dare").value("drop_prob", d.drop_prob);
        d.seed = j.at("dare").value("seed", d.seed);
        cfg.dare = d;
      }
      if (j.contains("ties") && !j.at("ties").is_null()) {
        TiesConfig t;
        t.density = j.at("ties").value("density", t.density);
        cfg.ties = t;
      }
      cfg.weight_params.a = j.value("a", cfg.weight_params.a);
      cfg.weight_params.b = j.value("b", cfg.weight_params.b);
      cfg.uniform_weights = j.value("uniform_weights", false);
      return cfg;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("merge config: ") + e.what());
    }
  }

  static MergeConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open merge config '" + path.string() + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ": " + e.what());
    }
    return from_json(j, path.parent_path());
  }

  /// Echo for the weight report. Thread count is left out so reports do not
  /// depend on it.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["base"] = base.generic_string();
    j["models"] = nlohmann::json::array();
    for (const auto& m : models) {
      nlohmann::json e{{"id", m.id}, {"checkpoint", m.checkpoint.generic_string()}};
      e["activations"] = m.activations ? nlohmann::json(m.activations->generic_string()) : nlohmann::json();
      j["models"].push_back(std::move(e));
    }
    j["reference"] = reference ? nlohmann::json(reference->generic_string()) : nlohmann::json();
    j["layer_pattern"] = layer_pattern;
    j["dare"] = dare ? nlohmann::json{{"drop_prob", dare->drop_prob}, {"seed", dare->seed}} : nlohmann::json();
    j["ties"] = ties ? nlohmann::json{{"density", ties->density}} : nlohmann::json();
    j["a"] = weight_params.a;
    j["b"] = weight_params.b;
    j["uniform_weights"] = uniform_weights;
    return j;
  }
};

/// DARE configuration for model k: same drop rate, seed mixed with k so
/// models draw independent masks.
inline DareConfig dare_config_for_model(const DareConfig& cfg, std::size_t k) {
  return {cfg.drop_prob, rng::combine(cfg.seed, k)};
}

/// Applies the configured DARE / TIES stages to every task vector. With
/// TIES enabled, entries that disagree with the elected sign are zeroed.
inline std::vector<TaskVector> prepare_deltas(std::vector<TaskVector> tvs, const std::optional<DareConfig>& dare,
                                              const std::optional<TiesConfig>& ties, unsigned threads = 1) {
  require_compatible(tvs);
  if (dare) dare->validate();
  if (ties) ties->validate();
  if (!dare && !ties) return tvs;

  std::vector<const std::string*> names;
  for (const auto& kv : tvs.front().deltas) names.push_back(&kv.first);

  parallel_for(names.size(), threads, [&](std::size_t idx) {
    const std::string& name = *names[idx];
    for (std::size_t k = 0; k < tvs.size(); ++k) {
      auto& d = tvs[k].deltas.at(name);
      if (dare && dare->drop_prob > 0.0) dare_tensor(d, name, dare_config_for_model(*dare, k));
      if (ties) ties_trim_tensor(d, ties->density);
    }
    if (!ties) return;
    for (std::size_t i = 0, n = tvs.front().deltas.at(name).size(); i < n; ++i) {
      double pos = 0.0, neg = 0.0;
      for (const auto& tv : tvs) {
        const float v = tv.deltas.at(name)[i];
        if (v > 0.0f) pos += v;
        else if (v < 0.0f) neg -= v;
      }
      const bool positive = pos >= neg;
      for (auto& tv : tvs) {
        float& v = tv.deltas.at(name)[i];
        if ((positive && v < 0.0f) || (!positive && v > 0.0f)) v = 0.0f;
      }
    }
  });
  return tvs;
}

/// merged[n] = base[n] + sum_k w_k(layer(n)) * tv_k[n], accumulated in
/// double over k in order and rounded once to float32.
inline Checkpoint merge_models(const Checkpoint& base, std::span<const TaskVector> tvs, const LayerWeights& lw,
                               const LayerMap& lm, unsigned threads = 1) {
  require_compatible(tvs);
  if (lw.model_count() != tvs.size())
    throw ValidationError("layer weights cover " + std::to_string(lw.model_count()) + " models, got " +
                          std::to_string(tvs.size()) + " task vectors");
  if (lw.layer_count() != lm.layer_count)
    throw ValidationError("layer weights cover " + std::to_string(lw.layer_count()) + " layers, layer map has " +
                          std::to_string(lm.layer_count));
  const auto& names = tvs.front().deltas;
  if (names.size() != base.tensors.size())
    throw ValidationError("task vectors and base checkpoint hold different tensor sets");

  std::vector<double> mean_w(tvs.size());
  for (std::size_t k = 0; k < tvs.size(); ++k) mean_w[k] = lw.mean_weight(k);

  std::vector<std::pair<std::string, TensorRecord>> out;
  for (const auto& [name, rec] : base.tensors) {
    if (!names.contains(name)) throw ValidationError("task vectors lack tensor '" + name + "'");
    if (names.at(name).size() != rec.data.size())
      throw ValidationError("task vector length mismatch at tensor '" + name + "'");
    out.emplace_back(name, rec);
  }

  parallel_for(out.size(), threads, [&](std::size_t idx) {
    auto& [name, rec] = out[idx];
    const auto layer = lm.layer_of(name);
    std::vector<double> w(tvs.size());
    for (std::size_t k = 0; k < tvs.size(); ++k) w[k] = layer ? lw.weights[k][*layer] : mean_w[k];
    for (std::size_t i = 0; i < rec.data.size(); ++i) {
      double acc = rec.data[i];
      for (std::size_t k = 0; k < tvs.size(); ++k) acc += w[k] * static_cast<double>(tvs[k].deltas.at(name)[i]);
      rec.data[i] = static_cast<float>(acc);
    }
  });

  Checkpoint merged;
  merged.metadata = base.metadata;
  for (auto& [name, rec] : out) merged.tensors.emplace(std::move(name), std::move(rec));
  return merged;
}

inline nlohmann::json weight_report(const LayerWeights& lw, const nlohmann::json& config_echo) {
  return {{"weights", lw.weights},
          {"distances", lw.distances},
          {"layers", lw.layer_count()},
          {"models", lw.models},
          {"config", config_echo}};
}

struct MergeResult {
  Checkpoint merged;
  LayerWeights weights;
  nlohmann::json report;
};

inline std::string model_context(const MergeConfig& cfg, std::size_t k) {
  return "model " + std::to_string(k + 1) + " ('" + cfg.models[k].id + "')";
}

/// Loads activations + reference named by the config and computes weights.
inline LayerWeights weights_from_config(const MergeConfig& cfg) {
  if (!cfg.reference) throw ValidationError("no reference embedding file configured");
  const auto ref = reference_similarity(load_embedding_table(*cfg.reference));
  std::vector<ActivationSet> acts;
  for (std::size_t k = 0; k < cfg.models.size(); ++k) {
    const auto& m = cfg.models[k];
    try {
      if (!m.activations) throw ValidationError("no activation file configured");
      if (!std::filesystem::exists(*m.activations))
        throw IoError("activation file '" + m.activations->string() + "' not found");
      acts.push_back(load_activation_set(*m.activations, m.id));
    } catch (const IoError& e) {
      throw IoError(model_context(cfg, k) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(model_context(cfg, k) + ": " + e.what());
    }
  }
  return compute_layer_weights(acts, ref, cfg.weight_params, cfg.threads);
}

inline MergeResult run_merge(const MergeConfig& cfg) {
  cfg.validate();
  const Checkpoint base = read_container(cfg.base);
  const LayerMap lm = partition_layers(base, cfg.layer_pattern);

  std::vector<TaskVector> tvs;
  for (std::size_t k = 0; k < cfg.models.size(); ++k) {
    try {
      tvs.push_back(compute_task_vector(base, read_container(cfg.models[k].checkpoint), cfg.models[k].id));
    } catch (const IoError& e) {
      throw IoError(model_context(cfg, k) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(model_context(cfg, k) + ": " + e.what());
    }
  }

  std::vector<std::string> ids;
  for (const auto& m : cfg.models) ids.push_back(m.id);
  LayerWeights lw = cfg.uniform_weights ? LayerWeights::uniform(ids, lm.layer_count) : weights_from_config(cfg);
  if (lw.layer_count() != lm.layer_count)
    throw ValidationError("activation dumps have " + std::to_string(lw.layer_count()) +
                          " layers but the checkpoint has " + std::to_string(lm.layer_count) +
                          " layers under pattern '" + cfg.layer_pattern + "'");
  if (cfg.uniform_weights) lw.params = cfg.weight_params;

  tvs = prepare_deltas(std::move(tvs), cfg.dare, cfg.ties, cfg.threads);
  MergeResult result;
  result.merged = merge_models(base, tvs, lw, lm, cfg.threads);
  result.report = weight_report(lw, cfg.to_json());
  result.weights = std::move(lw);
  return result;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

/// Runs the merge and writes the merged container plus the JSON weight report.
inline MergeResult run_merge_pipeline(const MergeConfig& cfg, const std::filesystem::path& out_path,
                                      const std::filesystem::path& report_path) {
  MergeResult result = run_merge(cfg);
  write_container(result.merged, out_path);
  write_json_file(report_path, result.report);
  return result;
}

}  // namespace cwmerge
