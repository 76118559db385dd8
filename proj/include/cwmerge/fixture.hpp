#pragma once

// Writes a complete toy merge scenario: base + perturbed variants, their
// activation dumps over a dev set, reference embeddings, a merge config,
// and a small set of response pairs for the consistency evaluator.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cwmerge/consistency_weights.hpp"
#include "cwmerge/error.hpp"
#include "cwmerge/eval_metrics.hpp"
#include "cwmerge/jsonl.hpp"
#include "cwmerge/merge_engine.hpp"
#include "cwmerge/tensor_store.hpp"
#include "cwmerge/toy_model.hpp"

namespace cwmerge::toy {

inline const std::array<std::string, 16>& dev_queries() {
  static const std::array<std::string, 16> q{
      "how do we manage customer feedback at end of project",
      "how to manage customer feedback at end of project",
      "can we drive to a grocery store",
      "can I drive to a grocery store",
      "delivering packages for shipment",
      "delivering package for shipment",
      "how to add a contact to a phone book",
      "how to add contacts to phone books",
      "how do I reset my account password",
      "what is the refund policy for late orders",
      "where can I find the holiday calendar",
      "how to submit an expense report",
      "who approves vacation requests",
      "how do we book a meeting room",
      "what are the office hours on friday",
      "how to update the billing address on an invoice",
  };
  return q;
}

struct FixtureOptions {
  std::uint64_t seed = 7;
  std::vector<std::size_t> dims{16, 16, 16, 16, 16};
  std::size_t variants = 3;
  /// Noise scale of variant k is base_scale * (k + 1); dyadic keeps deltas exact.
  double base_scale = 1.0 / 64.0;
  std::size_t embed_dim = 32;
};

struct FixturePaths {
  std::filesystem::path dir;
  std::filesystem::path base;
  std::vector<std::filesystem::path> variants;
  std::vector<std::filesystem::path> activations;
  std::filesystem::path reference;
  std::filesystem::path dev_set;
  std::filesystem::path merge_config;
  std::filesystem::path pairs;
  std::filesystem::path pair_embeddings;
};

inline std::vector<ResponsePair> fixture_pairs() {
  return {
      {"p1", "how do we manage customer feedback", "how to manage customer feedback",
       "Collect feedback in the project closure survey.", "Collect feedback in the project closure survey.",
       VariationType::HowToDo},
      {"p2", "can we drive to a grocery store", "can I drive to a grocery store",
       "Yes, the store has a parking lot.", "Yes, the store has a large parking lot.", VariationType::HowToDo},
      {"p3", "delivering packages for shipment", "delivering package for shipment",
       "Drop packages at the loading dock before noon.", "Packages go to the front desk.",
       VariationType::SingPlurArticle},
      {"p4", "how to add a contact to a phone book", "how to add contacts to phone books",
       "Open Contacts and tap Add.", "Open Contacts and tap Add.", VariationType::SingPlurArticle},
      {"p5", "how do I reset my password", "what is the way to reset my password",
       "Use the self-service portal to reset your password.", "Call the help desk.", VariationType::Semantic},
      {"p6", "who approves vacation requests", "who signs off on vacation requests",
       "Your manager approves vacation requests in the portal.",
       "Your manager approves vacation requests in the HR portal.", VariationType::Semantic},
  };
}

inline FixturePaths write_toy_fixture(const std::filesystem::path& dir, const FixtureOptions& opts = {}) {
  if (opts.variants < 1) throw ValidationError("fixture needs at least one variant");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create fixture directory '" + dir.string() + "': " + ec.message());

  FixturePaths paths;
  paths.dir = dir;
  paths.base = dir / "base.st";
  paths.reference = dir / "reference.st";
  paths.dev_set = dir / "dev.jsonl";
  paths.merge_config = dir / "merge.json";
  paths.pairs = dir / "pairs.jsonl";
  paths.pair_embeddings = dir / "pair_embeddings.st";

  const auto& queries = dev_queries();
  std::vector<std::string> ids;
  std::vector<QueryRecord> dev;
  for (std::size_t t = 0; t < queries.size(); ++t) {
    ids.push_back("q" + std::string(t < 9 ? "0" : "") + std::to_string(t + 1));
    dev.push_back({ids.back(), queries[t], std::nullopt, std::nullopt});
  }
  jsonl::write_queries(paths.dev_set, dev);

  const ToyNet base = init_toy_net(opts.seed, opts.dims);
  write_container(base.params, paths.base);

  const std::uint64_t token_seed = rng::combine(opts.seed, 0x70CE);
  nlohmann::json cfg;
  cfg["base"] = "base.st";
  cfg["models"] = nlohmann::json::array();
  for (std::size_t k = 0; k < opts.variants; ++k) {
    const std::string id = "v" + std::to_string(k + 1);
    const auto pert = perturb(base, rng::combine(opts.seed, k + 1), opts.base_scale * static_cast<double>(k + 1));
    paths.variants.push_back(dir / ("variant_" + std::to_string(k + 1) + ".st"));
    paths.activations.push_back(dir / ("acts_" + std::to_string(k + 1) + ".st"));
    write_container(pert.net.params, paths.variants.back());
    const auto acts = collect_activations(pert.net, queries, ids, token_seed, id);
    write_container(activation_set_to_checkpoint(acts), paths.activations.back());
    cfg["models"].push_back({{"id", id},
                             {"checkpoint", paths.variants.back().filename().string()},
                             {"activations", paths.activations.back().filename().string()}});
  }

  EmbeddingTable ref;
  ref.ids = ids;
  ref.vectors = Matrix(queries.size(), opts.embed_dim);
  for (std::size_t t = 0; t < queries.size(); ++t) {
    const auto v = bag_of_words_embed(queries[t], opts.embed_dim, opts.seed);
    std::copy(v.begin(), v.end(), ref.vectors.row(t).begin());
  }
  write_container(embedding_table_to_checkpoint(ref), paths.reference);

  cfg["reference"] = "reference.st";
  cfg["layer_pattern"] = std::string(kDefaultLayerPattern);
  cfg["dare"] = {{"drop_prob", 0.5}, {"seed", opts.seed}};
  cfg["ties"] = {{"density", 0.2}};
  cfg["a"] = 4.0;
  cfg["b"] = 0.0;
  cfg["uniform_weights"] = false;
  write_json_file(paths.merge_config, cfg);

  const auto pairs = fixture_pairs();
  jsonl::write_file(paths.pairs, pairs, [](const ResponsePair& p) { return jsonl::to_json(p); });
  Checkpoint emb;
  for (const auto& p : pairs) {
    for (const auto& [suffix, text] : {std::pair{".a", &p.response}, std::pair{".b", &p.response_variant}}) {
      const auto v = bag_of_words_embed(*text, opts.embed_dim, opts.seed);
      TensorRecord rec;
      rec.shape = {v.size()};
      rec.data.assign(v.begin(), v.end());
      emb.tensors.emplace(p.id + suffix, std::move(rec));
    }
  }
  write_container(emb, paths.pair_embeddings);
  return paths;
}

}  // namespace cwmerge::toy
