#pragma once

// Rule-based query variations: how-to/do stem rewrites (including the
// we/I pronoun swaps) and singular/plural/article edits. Rule tables are
// data (data/variation_rules.json); the built-in copy is compiled in.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cwmerge/embedded_data.hpp"
#include "cwmerge/error.hpp"
#include "cwmerge/records.hpp"
#include "cwmerge/rng.hpp"

namespace cwmerge {

struct StemRule {
  std::string from;
  std::string to;
};

struct RuleTables {
  int version = 0;
  std::vector<StemRule> howto_rules;
  std::set<std::string> articles;
  std::set<std::string> determiners;
  std::set<std::string> verb_context;
  std::map<std::string, std::string> irregular_plurals;  // singular -> plural
  std::map<std::string, std::string> irregular_singulars;
  std::set<std::string> uncountable;
  std::set<std::string> nouns;

  static RuleTables from_json(const nlohmann::json& j) {
    try {
      RuleTables t;
      t.version = j.at("version").get<int>();
      for (const auto& r : j.at("howto_rules"))
        t.howto_rules.push_back({r.at("from").get<std::string>(), r.at("to").get<std::string>()});
      auto lower_set = [&](const char* key) {
        std::set<std::string> s;
        for (const auto& w : j.at(key)) s.insert(lower(w.get<std::string>()));
        return s;
      };
      t.articles = lower_set("articles");
      t.determiners = lower_set("determiners");
      t.verb_context = lower_set("verb_context");
      t.uncountable = lower_set("uncountable");
      t.nouns = lower_set("nouns");
      for (const auto& [sg, pl] : j.at("irregular_plurals").items()) {
        t.irregular_plurals[lower(sg)] = lower(pl.get<std::string>());
        t.irregular_singulars[lower(pl.get<std::string>())] = lower(sg);
      }
      return t;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("variation rule tables: ") + e.what());
    }
  }

  static const RuleTables& builtin() {
    static const RuleTables t = from_json(nlohmann::json::parse(embedded::kVariationRules));
    return t;
  }

  static RuleTables load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open rule tables '" + path.string() + "'");
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(path.string() + ": " + e.what());
    }
  }

  static std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  }

  std::string pluralize(const std::string& w) const {
    if (auto it = irregular_plurals.find(w); it != irregular_plurals.end()) return it->second;
    auto ends = [&](std::string_view suf) { return w.size() >= suf.size() && w.ends_with(suf); };
    if (w.size() >= 2 && w.back() == 'y' && std::string_view("aeiou").find(w[w.size() - 2]) == std::string_view::npos)
      return w.substr(0, w.size() - 1) + "ies";
    if (ends("s") || ends("x") || ends("z") || ends("ch") || ends("sh")) return w + "es";
    return w + "s";
  }

  /// Singular form of a plural lexicon noun, or nullopt.
  std::optional<std::string> singular_of(const std::string& w) const {
    if (auto it = irregular_singulars.find(w); it != irregular_singulars.end()) return it->second;
    std::vector<std::string> candidates;
    if (w.ends_with("ies")) candidates.push_back(w.substr(0, w.size() - 3) + "y");
    if (w.ends_with("es")) candidates.push_back(w.substr(0, w.size() - 2));
    if (w.ends_with("s") && !w.ends_with("ss")) candidates.push_back(w.substr(0, w.size() - 1));
    for (const auto& c : candidates)
      if (nouns.contains(c) && !uncountable.contains(c) && pluralize(c) == w) return c;
    return std::nullopt;
  }
};

// ---------------------------------------------------------------------------
// How-to/do rewrites

namespace detail {

inline bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '\''; }

/// First case-insensitive whole-word occurrence of `phrase` in `text`.
inline std::optional<std::size_t> find_phrase(std::string_view text, std::string_view phrase) {
  if (phrase.empty() || phrase.size() > text.size()) return std::nullopt;
  for (std::size_t i = 0; i + phrase.size() <= text.size(); ++i) {
    bool eq = true;
    for (std::size_t k = 0; k < phrase.size() && eq; ++k)
      eq = std::tolower(static_cast<unsigned char>(text[i + k])) == std::tolower(static_cast<unsigned char>(phrase[k]));
    if (!eq) continue;
    if (i > 0 && is_word_char(text[i - 1])) continue;
    if (i + phrase.size() < text.size() && is_word_char(text[i + phrase.size()])) continue;
    return i;
  }
  return std::nullopt;
}

inline std::string replace_phrase(std::string_view text, std::size_t at, std::size_t len, std::string to) {
  if (!to.empty() && std::isupper(static_cast<unsigned char>(text[at])))
    to[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(to[0])));
  return std::string(text.substr(0, at)) + to + std::string(text.substr(at + len));
}

}  // namespace detail

/// Every distinct rewrite obtained by applying one stem rule, in either
/// direction, to the first matching occurrence.
inline std::vector<std::string> howto_rewrites(std::string_view query, const RuleTables& rules = RuleTables::builtin()) {
  std::vector<std::string> out;
  auto emit = [&](std::string s) {
    if (s != query && std::find(out.begin(), out.end(), s) == out.end()) out.push_back(std::move(s));
  };
  for (const auto& r : rules.howto_rules) {
    if (auto at = detail::find_phrase(query, r.from)) emit(detail::replace_phrase(query, *at, r.from.size(), r.to));
    if (auto at = detail::find_phrase(query, r.to)) emit(detail::replace_phrase(query, *at, r.to.size(), r.from));
  }
  return out;
}

inline std::vector<VariationRecord> gen_howto_variations(const QueryRecord& q, const RuleTables& rules = RuleTables::builtin()) {
  std::vector<VariationRecord> out;
  for (auto& text : howto_rewrites(q.query, rules))
    out.push_back({q.id + ".howto." + std::to_string(out.size()), q.id, VariationType::HowToDo, std::move(text), std::nullopt});
  return out;
}

// ---------------------------------------------------------------------------
// Singular/plural/article edits

struct NumberArticleOptions {
  /// Noun phrases edited per variant.
  std::size_t max_edits = 2;
  /// Variants kept per query; larger candidate sets are sampled with the seed.
  std::size_t max_variants = 16;
};

namespace detail {

struct Word {
  std::string prefix;  // leading punctuation
  std::string core;
  std::string suffix;  // trailing punctuation
  std::string lower;
};

inline std::vector<Word> split_words(std::string_view text) {
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    std::string_view tok = text.substr(i, j - i);
    std::size_t b = 0, e = tok.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(tok[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(tok[e - 1]))) --e;
    Word w{std::string(tok.substr(0, b)), std::string(tok.substr(b, e - b)), std::string(tok.substr(e)), {}};
    w.lower = RuleTables::lower(w.core);
    words.push_back(std::move(w));
    i = j;
  }
  return words;
}

enum class NounNumber { Singular, Plural, Mass };

/// A noun phrase: optional article at `first`, nouns through `last`.
struct NounPhrase {
  std::size_t first = 0;
  std::size_t last = 0;
  std::optional<std::string> article;
  NounNumber head_number = NounNumber::Singular;
  /// Alternative renderings of words[first..last].
  std::vector<std::vector<std::string>> alternatives;
};

inline std::string with_case_of(const std::string& original, std::string replacement) {
  if (!original.empty() && !replacement.empty() && std::isupper(static_cast<unsigned char>(original[0])))
    replacement[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(replacement[0])));
  return replacement;
}

inline std::string indefinite_for(const std::string& next) {
  return !next.empty() && std::string_view("aeiou").find(static_cast<char>(std::tolower(static_cast<unsigned char>(next[0])))) !=
                              std::string_view::npos
             ? "an"
             : "a";
}

inline std::optional<NounNumber> noun_number(const Word& w, const RuleTables& rules) {
  if (rules.uncountable.contains(w.lower)) return NounNumber::Mass;
  if (rules.nouns.contains(w.lower)) return NounNumber::Singular;
  if (rules.singular_of(w.lower)) return NounNumber::Plural;
  return std::nullopt;
}

inline std::vector<NounPhrase> find_noun_phrases(const std::vector<Word>& words, const RuleTables& rules) {
  std::vector<NounPhrase> out;
  std::size_t i = 0;
  // Inner words of a phrase must have no trailing punctuation.
  auto run_end = [&](std::size_t s) {
    std::size_t e = s;
    while (e + 1 < words.size() && words[e].suffix.empty() && words[e + 1].prefix.empty() &&
           noun_number(words[e + 1], rules))
      ++e;
    return e;
  };
  while (i < words.size()) {
    const Word& w = words[i];
    const bool is_article = rules.articles.contains(w.lower) && w.suffix.empty();
    if (is_article && i + 1 < words.size() && words[i + 1].prefix.empty() && noun_number(words[i + 1], rules)) {
      NounPhrase np;
      np.first = i;
      np.last = run_end(i + 1);
      np.article = w.lower;
      np.head_number = *noun_number(words[np.last], rules);
      out.push_back(np);
      i = np.last + 1;
      continue;
    }
    if (noun_number(w, rules)) {
      const std::string prev = i > 0 ? words[i - 1].lower : std::string();
      NounPhrase np;
      np.first = i;
      np.last = run_end(i);
      np.head_number = *noun_number(words[np.last], rules);
      if (!rules.verb_context.contains(prev)) out.push_back(np);
      i = np.last + 1;
      continue;
    }
    ++i;
  }
  return out;
}

/// Fills in the alternative renderings of a phrase.
inline void build_alternatives(NounPhrase& np, const std::vector<Word>& words, const RuleTables& rules) {
  std::vector<std::string> nouns;  // core words of the noun run
  const std::size_t noun_first = np.article ? np.first + 1 : np.first;
  for (std::size_t k = noun_first; k <= np.last; ++k) nouns.push_back(words[k].core);
  const Word& head = words[np.last];

  std::optional<std::string> toggled;
  if (np.head_number == NounNumber::Singular) toggled = with_case_of(head.core, rules.pluralize(head.lower));
  else if (np.head_number == NounNumber::Plural) toggled = with_case_of(head.core, *rules.singular_of(head.lower));

  auto with_head = [&](const std::string& h) {
    auto v = nouns;
    v.back() = h;
    return v;
  };
  auto prepend = [](std::string a, std::vector<std::string> v) {
    v.insert(v.begin(), std::move(a));
    return v;
  };
  auto& alts = np.alternatives;

  if (!np.article) {
    const std::string prev = np.first > 0 ? words[np.first - 1].lower : std::string();
    const bool can_insert = !rules.determiners.contains(prev) && !rules.articles.contains(prev);
    if (toggled) alts.push_back(with_head(*toggled));
    if (can_insert) {
      if (np.head_number == NounNumber::Singular) alts.push_back(prepend(indefinite_for(nouns.front()), nouns));
      else alts.push_back(prepend("the", nouns));
    }
    return;
  }

  const std::string& art = *np.article;
  const bool indefinite = art != "the";
  switch (np.head_number) {
    case NounNumber::Singular:
      if (indefinite) {
        alts.push_back(with_head(*toggled));  // "a contact" -> "contacts"
        alts.push_back(prepend("the", nouns));
      } else {
        alts.push_back(prepend(indefinite_for(nouns.front()), nouns));
        alts.push_back(with_head(*toggled));
      }
      alts.push_back(nouns);  // article omitted
      break;
    case NounNumber::Plural:
      alts.push_back(nouns);
      if (!indefinite) alts.push_back(prepend("the", with_head(*toggled)));
      break;
    case NounNumber::Mass:
      alts.push_back(nouns);
      if (indefinite) alts.push_back(prepend("the", nouns));
      break;
  }
}

inline std::string render(const std::vector<Word>& words, const std::vector<std::pair<const NounPhrase*, std::size_t>>& edits) {
  std::string out;
  auto append = [&](const std::string& piece) {
    if (!out.empty()) out += ' ';
    out += piece;
  };
  std::size_t i = 0;
  while (i < words.size()) {
    const auto hit = std::find_if(edits.begin(), edits.end(), [&](const auto& e) { return e.first->first == i; });
    if (hit == edits.end()) {
      append(words[i].prefix + words[i].core + words[i].suffix);
      ++i;
      continue;
    }
    const NounPhrase& np = *hit->first;
    const auto& alt = np.alternatives[hit->second];
    for (std::size_t k = 0; k < alt.size(); ++k) {
      std::string piece = alt[k];
      if (k == 0) piece = words[np.first].prefix + with_case_of(words[np.first].core, piece);
      if (k + 1 == alt.size()) piece += words[np.last].suffix;
      append(piece);
    }
    i = np.last + 1;
  }
  return out;
}

}  // namespace detail

/// All distinct variants with 1..max_edits edited noun phrases, in a fixed
/// enumeration order.
inline std::vector<std::string> number_article_candidates(std::string_view query, std::size_t max_edits = 2,
                                                          const RuleTables& rules = RuleTables::builtin()) {
  using namespace detail;
  const auto words = split_words(query);
  auto phrases = find_noun_phrases(words, rules);
  for (auto& np : phrases) build_alternatives(np, words, rules);
  std::erase_if(phrases, [](const NounPhrase& np) { return np.alternatives.empty(); });

  std::string normalized = render(words, {});
  std::vector<std::string> out;
  std::set<std::string> seen{normalized, std::string(query)};
  auto emit = [&](const std::vector<std::pair<const NounPhrase*, std::size_t>>& edits) {
    auto s = render(words, edits);
    if (seen.insert(s).second) out.push_back(std::move(s));
  };

  // Enumerate subsets of phrases in size order, then every alternative choice.
  std::vector<std::pair<const NounPhrase*, std::size_t>> edits;
  const std::size_t limit = std::min(max_edits, phrases.size());
  for (std::size_t size = 1; size <= limit; ++size) {
    std::vector<std::size_t> idx(size);
    for (std::size_t k = 0; k < size; ++k) idx[k] = k;
    while (true) {
      std::vector<std::size_t> choice(size, 0);
      while (true) {
        edits.clear();
        for (std::size_t k = 0; k < size; ++k) edits.emplace_back(&phrases[idx[k]], choice[k]);
        emit(edits);
        std::size_t k = size;
        while (k > 0 && ++choice[k - 1] == phrases[idx[k - 1]].alternatives.size()) choice[--k] = 0;
        if (k == 0) break;
      }
      std::size_t k = size;
      while (k > 0 && idx[k - 1] == phrases.size() - size + (k - 1)) --k;
      if (k == 0) break;
      ++idx[k - 1];
      for (std::size_t m = k; m < size; ++m) idx[m] = idx[m - 1] + 1;
    }
  }
  return out;
}

inline std::vector<VariationRecord> gen_number_article_variations(const QueryRecord& q, std::uint64_t seed,
                                                                  const NumberArticleOptions& opts = {},
                                                                  const RuleTables& rules = RuleTables::builtin()) {
  auto candidates = number_article_candidates(q.query, opts.max_edits, rules);
  std::vector<std::size_t> picked(candidates.size());
  for (std::size_t i = 0; i < picked.size(); ++i) picked[i] = i;
  if (candidates.size() > opts.max_variants) {
    const rng::KeyedStream stream(seed, q.id);
    for (std::size_t i = 0; i < opts.max_variants; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(stream.below(i, picked.size() - i));
      std::swap(picked[i], picked[j]);
    }
    picked.resize(opts.max_variants);
    std::sort(picked.begin(), picked.end());
  }
  std::vector<VariationRecord> out;
  for (std::size_t i : picked)
    out.push_back({q.id + ".numart." + std::to_string(out.size()), q.id, VariationType::SingPlurArticle,
                   std::move(candidates[i]), std::nullopt});
  return out;
}

}  // namespace cwmerge
