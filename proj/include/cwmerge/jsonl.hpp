#pragma once

// JSON Lines readers and writers for query corpora, variations, triplets and
// evaluation inputs. Readers report malformed input as "line N: ...".
// Writers emit one compact object per line with sorted keys.

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cwmerge/error.hpp"
#include "cwmerge/eval_metrics.hpp"
#include "cwmerge/records.hpp"

namespace cwmerge::jsonl {

using nlohmann::json;

/// Calls fn(object, line_number) for every non-blank line.
inline void for_each_line(std::istream& in, const std::function<void(const json&, std::size_t)>& fn) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      throw ValidationError("line " + std::to_string(lineno) + ": not valid JSON");
    }
    if (!j.is_object()) throw ValidationError("line " + std::to_string(lineno) + ": not a JSON object");
    try {
      fn(j, lineno);
    } catch (const json::exception& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline std::string required_string(const json& j, const char* field, std::size_t lineno) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) throw ValidationError("line " + std::to_string(lineno) + ": missing field " + field);
  if (!it->is_string()) throw ValidationError("line " + std::to_string(lineno) + ": field " + field + " is not a string");
  return it->get<std::string>();
}

inline std::optional<std::string> optional_string(const json& j, const char* field, std::size_t lineno) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw ValidationError("line " + std::to_string(lineno) + ": field " + field + " is not a string");
  return it->get<std::string>();
}

template <typename T, typename Parse>
std::vector<T> read_file(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<T> out;
  try {
    for_each_line(in, [&](const json& j, std::size_t n) { out.push_back(parse(j, n)); });
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return out;
}

template <typename T, typename ToJson>
void write_stream(std::ostream& out, const std::vector<T>& items, ToJson to_json) {
  for (const auto& item : items) out << to_json(item).dump() << '\n';
}

template <typename T, typename ToJson>
void write_file(const std::filesystem::path& path, const std::vector<T>& items, ToJson to_json) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_stream(out, items, to_json);
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

// --- queries ---------------------------------------------------------------

inline QueryRecord parse_query(const json& j, std::size_t n) {
  QueryRecord q;
  q.id = required_string(j, "id", n);
  q.query = required_string(j, "query", n);
  if (q.query.empty()) throw ValidationError("line " + std::to_string(n) + ": field query is empty");
  q.context = optional_string(j, "context", n);
  q.answer = optional_string(j, "answer", n);
  return q;
}

inline json to_json(const QueryRecord& q) {
  json j{{"id", q.id}, {"query", q.query}};
  if (q.context) j["context"] = *q.context;
  if (q.answer) j["answer"] = *q.answer;
  return j;
}

inline std::vector<QueryRecord> read_queries(const std::filesystem::path& path) {
  auto out = read_file<QueryRecord>(path, parse_query);
  std::set<std::string> ids;
  for (const auto& q : out)
    if (!ids.insert(q.id).second) throw ValidationError(path.string() + ": duplicate query id '" + q.id + "'");
  return out;
}

inline void write_queries(const std::filesystem::path& path, const std::vector<QueryRecord>& qs) {
  write_file(path, qs, [](const QueryRecord& q) { return to_json(q); });
}

// --- variations ------------------------------------------------------------

inline VariationRecord parse_variation(const json& j, std::size_t n) {
  VariationRecord v;
  v.id = required_string(j, "id", n);
  v.source_id = required_string(j, "source_id", n);
  v.variation_type = parse_variation_type(required_string(j, "variation_type", n));
  v.query = required_string(j, "query", n);
  v.context = optional_string(j, "context", n);
  return v;
}

inline json to_json(const VariationRecord& v) {
  json j{{"id", v.id},
         {"source_id", v.source_id},
         {"variation_type", std::string(to_string(v.variation_type))},
         {"query", v.query}};
  if (v.context) {
    j["context"] = *v.context;
    j["context_copied"] = true;
  }
  return j;
}

inline std::vector<VariationRecord> read_variations(const std::filesystem::path& path) {
  return read_file<VariationRecord>(path, parse_variation);
}

inline void write_variations(const std::filesystem::path& path, const std::vector<VariationRecord>& vs) {
  write_file(path, vs, [](const VariationRecord& v) { return to_json(v); });
}

// --- evaluation inputs -----------------------------------------------------

inline ResponsePair parse_response_pair(const json& j, std::size_t n) {
  ResponsePair p;
  p.id = required_string(j, "id", n);
  p.query = optional_string(j, "query", n).value_or("");
  p.query_variant = optional_string(j, "query_variant", n).value_or("");
  p.response = required_string(j, "response", n);
  p.response_variant = required_string(j, "response_variant", n);
  p.variation_type = parse_variation_type(required_string(j, "variation_type", n));
  return p;
}

inline json to_json(const ResponsePair& p) {
  return {{"id", p.id},
          {"query", p.query},
          {"query_variant", p.query_variant},
          {"response", p.response},
          {"response_variant", p.response_variant},
          {"variation_type", std::string(to_string(p.variation_type))}};
}

inline std::vector<ResponsePair> read_response_pairs(const std::filesystem::path& path) {
  return read_file<ResponsePair>(path, parse_response_pair);
}

inline AccuracyItem parse_accuracy_item(const json& j, std::size_t n) {
  return {required_string(j, "id", n), required_string(j, "response", n), required_string(j, "reference", n)};
}

inline std::vector<AccuracyItem> read_accuracy_items(const std::filesystem::path& path) {
  return read_file<AccuracyItem>(path, parse_accuracy_item);
}

}  // namespace cwmerge::jsonl
