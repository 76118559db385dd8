#pragma once

// Command-line front end. Exit codes: 0 success, 1 validation or usage
// error, 2 I/O or endpoint error. Results go to files (or stdout when no
// --out is given for reports); progress goes to the error stream.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cwmerge/consistency_weights.hpp"
#include "cwmerge/error.hpp"
#include "cwmerge/eval_metrics.hpp"
#include "cwmerge/fixture.hpp"
#include "cwmerge/jsonl.hpp"
#include "cwmerge/merge_engine.hpp"
#include "cwmerge/paraphrase.hpp"
#include "cwmerge/triplet_kit.hpp"
#include "cwmerge/variation_gen.hpp"
#include "cwmerge/version.hpp"

namespace cwmerge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;

namespace detail {

/// For subcommands whose --config is a JSON object of flag values: appends
/// "--key value" for every key not already given on the command line.
inline std::vector<std::string> expand_flag_config(std::vector<std::string> args) {
  if (args.empty() || args.front() == "merge" || args.front() == "weights") return args;
  auto it = std::find(args.begin(), args.end(), "--config");
  if (it == args.end() || std::next(it) == args.end()) return args;
  const std::filesystem::path path = *std::next(it);
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ValidationError(path.string() + ": config must be a JSON object");
  args.erase(it, it + 2);
  for (const auto& [key, value] : j.items()) {
    const std::string flag = "--" + key;
    if (std::find(args.begin(), args.end(), flag) != args.end()) continue;
    auto scalar = [](const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    if (value.is_boolean()) {
      if (value.get<bool>()) args.push_back(flag);
    } else if (value.is_array()) {
      for (const auto& v : value) {
        args.push_back(flag);
        args.push_back(scalar(v));
      }
    } else {
      args.push_back(flag);
      args.push_back(scalar(value));
    }
  }
  return args;
}

inline void write_report(const nlohmann::json& report, const std::string& out_path, std::ostream& out) {
  if (out_path.empty() || out_path == "-") {
    out << report.dump(2) << '\n';
  } else {
    write_json_file(out_path, report);
  }
}

}  // namespace detail

inline int dispatch(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Consistency-aware layer-wise model merging toolkit", "cwmerge"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.fallthrough(false);

  auto versioned = [](CLI::App* sub) {
    sub->set_version_flag("--version", std::string(kVersion));
    return sub;
  };

  // merge
  std::string config_path, out_path, report_path;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::optional<double> a, b, dare_p, ties_density;
  bool uniform = false, no_dare = false, no_ties = false;
  auto* merge = versioned(app.add_subcommand("merge", "Merge fine-tuned checkpoints with consistency weights"));
  merge->add_option("--config", config_path, "Merge config (JSON)")->required();
  merge->add_option("--out", out_path, "Merged container path")->required();
  merge->add_option("--report", report_path, "Weight report path (default: <out stem>.report.json)");
  merge->add_option("--seed", seed, "DARE seed");
  merge->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  merge->add_option("--a", a, "Sigmoid scale");
  merge->add_option("--b", b, "Sigmoid offset");
  merge->add_option("--dare-p", dare_p, "DARE drop probability (enables DARE)");
  merge->add_option("--ties-density", ties_density, "TIES density (enables TIES)");
  merge->add_flag("--uniform-weights", uniform, "Use w = 1 for every model and layer");
  merge->add_flag("--no-dare", no_dare, "Disable DARE");
  merge->add_flag("--no-ties", no_ties, "Disable TIES");

  // weights
  std::vector<std::string> activation_paths;
  std::string reference_path;
  auto* weights = versioned(app.add_subcommand("weights", "Compute per-layer consistency weights"));
  weights->add_option("--config", config_path, "Merge config (JSON) naming activations and reference");
  weights->add_option("--activations", activation_paths, "Activation dump per model (repeatable)");
  weights->add_option("--reference", reference_path, "Reference embedding container");
  weights->add_option("--out", out_path, "Report path (default: stdout)");
  weights->add_option("--a", a, "Sigmoid scale");
  weights->add_option("--b", b, "Sigmoid offset");
  weights->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  // synth
  std::string corpus_path, endpoint_url, rules_path;
  std::vector<std::string> types{"howto", "numart"};
  int paraphrases = 1, max_attempts = 4;
  bool copy_context = false;
  auto* synth = versioned(app.add_subcommand("synth", "Generate query variations from a corpus"));
  synth->add_option("--config", config_path, "JSON object of flag values");
  synth->add_option("--corpus", corpus_path, "Query corpus (JSON Lines)")->required();
  synth->add_option("--out", out_path, "Variations output (JSON Lines)")->required();
  synth->add_option("--seed", seed, "Sampling seed");
  synth->add_option("--types", types, "Variation families: howto, numart, para")
      ->delimiter(',')
      ->check(CLI::IsMember({"howto", "numart", "para"}));
  synth->add_option("--endpoint-url", endpoint_url, "Completion endpoint for paraphrases");
  synth->add_option("--paraphrases", paraphrases, "Paraphrases per query")->check(CLI::PositiveNumber);
  synth->add_option("--max-attempts", max_attempts, "Attempts per endpoint request")->check(CLI::PositiveNumber);
  synth->add_option("--rules", rules_path, "Rule tables (JSON); default: built-in");
  synth->add_option("--threads", threads, "Concurrent endpoint requests")->check(CLI::PositiveNumber);
  synth->add_flag("--copy-context", copy_context, "Copy source contexts onto variations");

  // triplets
  std::string embeddings_path, distance_name = "euclidean";
  std::size_t per_anchor = 1;
  auto* triplets = versioned(app.add_subcommand("triplets", "Mine (anchor, positive, negative) triplets"));
  triplets->add_option("--config", config_path, "JSON object of flag values");
  triplets->add_option("--embeddings", embeddings_path, "Embedding container")->required();
  triplets->add_option("--out", out_path, "Triplets output (JSON Lines)")->required();
  triplets->add_option("--seed", seed, "Sampling seed");
  triplets->add_option("--per-anchor", per_anchor, "Triplets per anchor")->check(CLI::PositiveNumber);
  triplets->add_option("--distance", distance_name, "euclidean or cosine")->check(CLI::IsMember({"euclidean", "cosine"}));
  triplets->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  // eval-accuracy
  std::string responses_path;
  auto* eval_acc = versioned(app.add_subcommand("eval-accuracy", "ROUGE-L and BLEU-4 against references"));
  eval_acc->add_option("--config", config_path, "JSON object of flag values");
  eval_acc->add_option("--responses", responses_path, "JSON Lines of {id, response, reference}")->required();
  eval_acc->add_option("--out", out_path, "Report path (default: stdout)");

  // eval-consistency
  std::string pairs_path;
  double threshold = kDefaultRsThreshold;
  auto* eval_con = versioned(app.add_subcommand("eval-consistency", "EM / RS / BS over response pairs"));
  eval_con->add_option("--config", config_path, "JSON object of flag values");
  eval_con->add_option("--pairs", pairs_path, "Response pairs (JSON Lines)")->required();
  eval_con->add_option("--threshold", threshold, "RS threshold")->check(CLI::Range(0.0, 1.0));
  eval_con->add_option("--embeddings", embeddings_path, "Response embeddings container ({id}.a / {id}.b)");
  eval_con->add_option("--out", out_path, "Report path (default: stdout)");

  // make-fixture
  std::string fixture_dir;
  std::size_t layers = 4, width = 16, variants = 3;
  auto* fixture = versioned(app.add_subcommand("make-fixture", "Write a toy merge scenario directory"));
  fixture->add_option("--config", config_path, "JSON object of flag values");
  fixture->add_option("--out", fixture_dir, "Output directory")->required();
  fixture->add_option("--seed", seed, "Fixture seed");
  fixture->add_option("--layers", layers, "Block count")->check(CLI::PositiveNumber);
  fixture->add_option("--width", width, "Block width")->check(CLI::PositiveNumber);
  fixture->add_option("--variants", variants, "Fine-tuned variants")->check(CLI::PositiveNumber);

  try {
    args = detail::expand_flag_config(std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }

  try {
    if (merge->parsed()) {
      MergeConfig cfg = MergeConfig::load(config_path);
      if (dare_p) {
        if (!cfg.dare) cfg.dare = DareConfig{};
        cfg.dare->drop_prob = *dare_p;
      }
      if (seed && cfg.dare) cfg.dare->seed = *seed;
      if (no_dare) cfg.dare.reset();
      if (ties_density) cfg.ties = TiesConfig{*ties_density};
      if (no_ties) cfg.ties.reset();
      if (a) cfg.weight_params.a = *a;
      if (b) cfg.weight_params.b = *b;
      if (uniform) cfg.uniform_weights = true;
      cfg.threads = threads;
      if (report_path.empty()) report_path = std::filesystem::path(out_path).replace_extension(".report.json").string();
      const auto result = run_merge_pipeline(cfg, out_path, report_path);
      err << "merged " << cfg.models.size() << " models over " << result.weights.layer_count() << " layers -> "
          << out_path << " (report: " << report_path << ")\n";
    } else if (weights->parsed()) {
      MergeConfig cfg;
      if (!config_path.empty()) {
        cfg = MergeConfig::load(config_path);
      } else {
        if (activation_paths.empty() || reference_path.empty())
          throw ValidationError("weights needs --config or both --activations and --reference");
        for (std::size_t k = 0; k < activation_paths.size(); ++k)
          cfg.models.push_back({"model" + std::to_string(k + 1), {}, activation_paths[k]});
        cfg.reference = reference_path;
      }
      if (a) cfg.weight_params.a = *a;
      if (b) cfg.weight_params.b = *b;
      cfg.threads = threads;
      const auto lw = weights_from_config(cfg);
      detail::write_report(weight_report(lw, cfg.to_json()), out_path, out);
    } else if (synth->parsed()) {
      const RuleTables rules = rules_path.empty() ? RuleTables::builtin() : RuleTables::load(rules_path);
      const auto corpus = jsonl::read_queries(corpus_path);
      const auto has = [&](const char* t) { return std::find(types.begin(), types.end(), t) != types.end(); };
      std::vector<std::vector<VariationRecord>> para(corpus.size());
      if (has("para")) {
        if (endpoint_url.empty()) throw ValidationError("--types para needs --endpoint-url");
        EndpointConfig ep;
        ep.url = endpoint_url;
        ep.log = &err;
        HttpCompletionClient client(ep);
        RetryPolicy retry;
        retry.max_attempts = max_attempts;
        para = gen_paraphrases_batch(corpus, client, paraphrases, retry, threads);
      }
      std::vector<VariationRecord> all;
      for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& q = corpus[i];
        std::vector<VariationRecord> vs;
        if (has("howto")) vs = gen_howto_variations(q, rules);
        if (has("numart")) {
          auto na = gen_number_article_variations(q, seed.value_or(0), {}, rules);
          vs.insert(vs.end(), na.begin(), na.end());
        }
        vs.insert(vs.end(), para[i].begin(), para[i].end());
        for (auto& v : vs) {
          if (copy_context) v.context = q.context;
          all.push_back(std::move(v));
        }
      }
      jsonl::write_variations(out_path, all);
      err << "wrote " << all.size() << " variations for " << corpus.size() << " queries -> " << out_path << '\n';
    } else if (triplets->parsed()) {
      const auto tbl = load_embedding_table(embeddings_path);
      MiningOptions opts;
      opts.per_anchor = per_anchor;
      opts.distance = distance_name == "cosine" ? DistanceKind::Cosine : DistanceKind::Euclidean;
      opts.threads = threads;
      const auto ts = mine_triplets(tbl, seed.value_or(0), opts);
      jsonl::write_file(out_path, ts, [](const Triplet& t) { return to_json(t); });
      err << "wrote " << ts.size() << " triplets -> " << out_path << '\n';
    } else if (eval_acc->parsed()) {
      const auto items = jsonl::read_accuracy_items(responses_path);
      detail::write_report(evaluate_accuracy(items).to_json(), out_path, out);
    } else if (eval_con->parsed()) {
      const auto pairs = jsonl::read_response_pairs(pairs_path);
      std::optional<EmbeddingLookup> emb;
      if (!embeddings_path.empty()) emb = embedding_lookup_from(read_container(embeddings_path));
      const auto report = evaluate_consistency(pairs, emb ? &*emb : nullptr, threshold);
      detail::write_report(report.to_json(), out_path, out);
    } else if (fixture->parsed()) {
      toy::FixtureOptions opts;
      if (seed) opts.seed = *seed;
      opts.dims.assign(layers + 1, width);
      opts.variants = variants;
      const auto paths = toy::write_toy_fixture(fixture_dir, opts);
      err << "fixture written to " << paths.dir.string() << '\n';
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitOk;
}

}  // namespace cwmerge::cli
