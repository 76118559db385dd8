#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "cwmerge/error.hpp"

namespace cwmerge {

enum class VariationType { HowToDo, Semantic, SingPlurArticle };

inline constexpr std::array kVariationTypes{VariationType::HowToDo, VariationType::Semantic,
                                            VariationType::SingPlurArticle};

inline std::string_view to_string(VariationType t) {
  switch (t) {
    case VariationType::HowToDo: return "HOW_TO_DO";
    case VariationType::Semantic: return "SEMANTIC";
    case VariationType::SingPlurArticle: return "SING_PLUR_ARTICLE";
  }
  return "?";
}

inline VariationType parse_variation_type(std::string_view s) {
  for (auto t : kVariationTypes)
    if (to_string(t) == s) return t;
  throw ValidationError("unknown variation_type '" + std::string(s) + "'");
}

struct QueryRecord {
  std::string id;
  std::string query;
  std::optional<std::string> context;
  std::optional<std::string> answer;

  bool operator==(const QueryRecord&) const = default;
};

/// A synthesized query linked to the record it was derived from.
struct VariationRecord {
  std::string id;
  std::string source_id;
  VariationType variation_type = VariationType::HowToDo;
  std::string query;
  /// Context copied from the source record; the retriever is not re-run.
  std::optional<std::string> context;

  bool operator==(const VariationRecord&) const = default;
};

}  // namespace cwmerge
