#pragma once

// Accuracy metrics (ROUGE-L, sentence BLEU-4) and response-consistency
// metrics (exact match, ROUGE-thresholded similarity, embedding cosine).
//
// All text metrics share one tokenizer: ASCII-lowercase, split on
// whitespace, strip leading/trailing punctuation, drop empty tokens.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cwmerge/error.hpp"
#include "cwmerge/records.hpp"
#include "cwmerge/tensor_store.hpp"

namespace cwmerge {

inline std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    std::size_t b = i, e = j;
    while (b < e && std::ispunct(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(s[e - 1]))) --e;
    if (b < e) {
      std::string tok(s.substr(b, e - b));
      for (char& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      out.push_back(std::move(tok));
    }
    i = j;
  }
  return out;
}

inline std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (const auto& x : a) {
    for (std::size_t j = 0; j < b.size(); ++j) cur[j + 1] = x == b[j] ? prev[j] + 1 : std::max(prev[j + 1], cur[j]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// ROUGE-L of `s2` against `s`: precision over s2's tokens, recall over s's.
inline RougeScore rouge_l(std::string_view s, std::string_view s2) {
  const auto a = tokenize(s), b = tokenize(s2);
  if (a.empty() && b.empty()) return {1.0, 1.0, 1.0};
  if (a.empty() || b.empty()) return {};
  const double lcs = static_cast<double>(lcs_length(a, b));
  RougeScore r;
  r.precision = lcs / static_cast<double>(b.size());
  r.recall = lcs / static_cast<double>(a.size());
  if (r.precision + r.recall > 0.0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

inline constexpr int kBleuOrder = 4;

/// Sentence BLEU-4 without smoothing: any zero n-gram precision gives 0.
inline double bleu4(std::string_view candidate, std::string_view reference) {
  const auto cand = tokenize(candidate), ref = tokenize(reference);
  if (cand.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= kBleuOrder; ++n) {
    if (cand.size() < static_cast<std::size_t>(n)) return 0.0;
    std::map<std::vector<std::string>, int> ref_counts, cand_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
    for (std::size_t i = 0; i + n <= cand.size(); ++i) ++cand_counts[{cand.begin() + i, cand.begin() + i + n}];
    long matched = 0;
    for (const auto& [gram, c] : cand_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matched += std::min(c, it->second);
    }
    if (matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched) / static_cast<double>(cand.size() - n + 1));
  }
  const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / kBleuOrder);
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline bool exact_match(std::string_view s, std::string_view s2) { return trim(s) == trim(s2); }

inline constexpr double kDefaultRsThreshold = 0.7;

inline bool response_similarity(std::string_view s, std::string_view s2, double threshold = kDefaultRsThreshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ValidationError("RS threshold must lie in [0,1]");
  return rouge_l(s, s2).f1 > threshold;
}

inline double embedding_similarity(std::span<const float> e1, std::span<const float> e2) {
  if (e1.size() != e2.size())
    throw ValidationError("embedding dimension mismatch: " + std::to_string(e1.size()) + " vs " +
                          std::to_string(e2.size()));
  double d = 0.0, n1 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < e1.size(); ++i) {
    d += static_cast<double>(e1[i]) * e2[i];
    n1 += static_cast<double>(e1[i]) * e1[i];
    n2 += static_cast<double>(e2[i]) * e2[i];
  }
  if (n1 == 0.0 || n2 == 0.0) throw ValidationError("embedding similarity of a zero vector");
  return std::clamp(d / (std::sqrt(n1) * std::sqrt(n2)), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Consistency evaluation

struct ResponsePair {
  std::string id;
  std::string query;
  std::string query_variant;
  std::string response;
  std::string response_variant;
  VariationType variation_type = VariationType::Semantic;
};

/// Response embeddings keyed "{id}.a" (response) and "{id}.b" (variant).
using EmbeddingLookup = std::map<std::string, std::vector<float>>;

struct ConsistencyStats {
  std::size_t count = 0;
  double em_rate = 0.0;
  double rs_rate = 0.0;
  std::optional<double> bs_mean;
};

struct ConsistencyReport {
  ConsistencyStats overall;
  std::map<VariationType, ConsistencyStats> by_type;
  double threshold = kDefaultRsThreshold;

  nlohmann::json to_json() const {
    auto stats = [](const ConsistencyStats& s) {
      nlohmann::json j{{"count", s.count}, {"em_rate", s.em_rate}, {"rs_rate", s.rs_rate}};
      j["bs_mean"] = s.bs_mean ? nlohmann::json(*s.bs_mean) : nlohmann::json();
      return j;
    };
    nlohmann::json j = stats(overall);
    j["threshold"] = threshold;
    j["by_variation_type"] = nlohmann::json::object();
    for (const auto& [t, s] : by_type) j["by_variation_type"][std::string(to_string(t))] = stats(s);
    return j;
  }
};

inline ConsistencyReport evaluate_consistency(std::span<const ResponsePair> pairs, const EmbeddingLookup* embeddings,
                                              double threshold = kDefaultRsThreshold) {
  if (pairs.empty()) throw ValidationError("empty evaluation set");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ValidationError("RS threshold must lie in [0,1]");

  struct Acc {
    std::size_t n = 0, em = 0, rs = 0;
    double bs = 0.0;
  };
  Acc all;
  std::map<VariationType, Acc> per;
  for (const auto& p : pairs) {
    const bool em = exact_match(p.response, p.response_variant);
    const bool rs = response_similarity(p.response, p.response_variant, threshold);
    double bs = 0.0;
    if (embeddings) {
      auto a = embeddings->find(p.id + ".a"), b = embeddings->find(p.id + ".b");
      if (a == embeddings->end() || b == embeddings->end())
        throw ValidationError("missing embeddings for pair '" + p.id + "'");
      bs = embedding_similarity(a->second, b->second);
    }
    for (Acc* acc : {&all, &per[p.variation_type]}) {
      ++acc->n;
      acc->em += em;
      acc->rs += rs;
      acc->bs += bs;
    }
  }
  auto finish = [&](const Acc& a) {
    ConsistencyStats s;
    s.count = a.n;
    s.em_rate = static_cast<double>(a.em) / static_cast<double>(a.n);
    s.rs_rate = static_cast<double>(a.rs) / static_cast<double>(a.n);
    if (embeddings) s.bs_mean = a.bs / static_cast<double>(a.n);
    return s;
  };
  ConsistencyReport report;
  report.threshold = threshold;
  report.overall = finish(all);
  for (const auto& [t, a] : per) report.by_type[t] = finish(a);
  return report;
}

/// Flattens every tensor of a container into an embedding lookup.
inline EmbeddingLookup embedding_lookup_from(const Checkpoint& ckpt) {
  EmbeddingLookup out;
  for (const auto& [name, rec] : ckpt.tensors) out.emplace(name, rec.data);
  return out;
}

// ---------------------------------------------------------------------------
// Accuracy evaluation: generated responses against references.

struct AccuracyItem {
  std::string id;
  std::string response;
  std::string reference;
};

struct AccuracyReport {
  std::size_t count = 0;
  RougeScore rouge_l_mean;
  double bleu4_mean = 0.0;

  nlohmann::json to_json() const {
    return {{"count", count},
            {"rouge_l", {{"precision", rouge_l_mean.precision}, {"recall", rouge_l_mean.recall}, {"f1", rouge_l_mean.f1}}},
            {"bleu4", bleu4_mean}};
  }
};

inline AccuracyReport evaluate_accuracy(std::span<const AccuracyItem> items) {
  if (items.empty()) throw ValidationError("empty evaluation set");
  AccuracyReport r;
  r.count = items.size();
  for (const auto& it : items) {
    const auto s = rouge_l(it.reference, it.response);
    r.rouge_l_mean.precision += s.precision;
    r.rouge_l_mean.recall += s.recall;
    r.rouge_l_mean.f1 += s.f1;
    r.bleu4_mean += bleu4(it.response, it.reference);
  }
  const double n = static_cast<double>(items.size());
  r.rouge_l_mean.precision /= n;
  r.rouge_l_mean.recall /= n;
  r.rouge_l_mean.f1 /= n;
  r.bleu4_mean /= n;
  return r;
}

}  // namespace cwmerge
