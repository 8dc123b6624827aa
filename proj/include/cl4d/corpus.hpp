#pragma once

// Bimodal (query, code) corpus construction: function extraction, query
// derivation from docstrings, quality filters with first-failing-rule
// attribution, near-duplicate removal and seeded splits. The canonical
// dataset format is JSONL with keys id, language, query, code, meta.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cl4d/common.hpp"

namespace cl4d::corpus {

enum class Language { Python, Java, Go, Php, Javascript, Ruby };

inline const std::vector<std::pair<Language, std::string>>& language_names() {
  static const std::vector<std::pair<Language, std::string>> names = {
      {Language::Python, "python"},         {Language::Java, "java"},
      {Language::Go, "go"},                 {Language::Php, "php"},
      {Language::Javascript, "javascript"}, {Language::Ruby, "ruby"}};
  return names;
}

inline std::string language_name(Language l) {
  for (const auto& [lang, name] : language_names())
    if (lang == l) return name;
  throw DataError("unknown language enum value");
}

inline Language language_from_name(std::string_view s) {
  for (const auto& [lang, name] : language_names())
    if (name == s) return lang;
  throw DataError("unsupported language '" + std::string(s) + "'");
}

inline std::string language_extension(Language l) {
  switch (l) {
    case Language::Python: return ".py";
    case Language::Java: return ".java";
    case Language::Go: return ".go";
    case Language::Php: return ".php";
    case Language::Javascript: return ".js";
    case Language::Ruby: return ".rb";
  }
  throw DataError("unknown language enum value");
}

struct SourceFunction {
  Language language = Language::Python;
  std::string repo;
  std::string path;
  std::string name;
  std::string code_text;  // full function with the docstring removed
  std::string docstring;  // raw docstring content, may be empty
  std::size_t start_line = 1;  // 1-based, the def line
  std::size_t end_line = 1;
};

struct BimodalPair {
  std::string id;
  Language language = Language::Python;
  std::string query;
  std::string code;
  std::map<std::string, std::string> meta;
};

inline std::string pair_id(Language language, std::string_view query,
                           std::string_view code) {
  Sha256 h;
  std::string lang = language_name(language);
  h.update(lang);
  h.update("\0", 1);
  h.update(query);
  h.update("\0", 1);
  h.update(code);
  auto d = h.digest();
  return hex_encode(d.data(), d.size());
}

// ---------------------------------------------------------------------------
// Python extractor: indentation blocks plus a small string/comment lexer so
// that `def` inside strings and docstring delimiters across lines are seen
// correctly. No grammar dependency.
// ---------------------------------------------------------------------------

namespace detail {

struct LineInfo {
  std::string text;
  bool starts_in_string = false;  // line begins inside a triple-quoted string
  bool def_here = false;          // a def statement starts on this line
  std::size_t def_name_start = 0;
  std::size_t def_name_len = 0;
  int indent = 0;     // leading whitespace count (spaces and tabs)
  bool blank = true;  // only whitespace outside strings
};

inline bool is_ident_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
         (c >= '0' && c <= '9') || c == '_';
}

// Lex all lines, tracking triple-quoted strings across lines. Throws
// ParseFailure on an unterminated triple quote.
inline std::vector<LineInfo> lex_python(std::string_view text,
                                        const std::string& path) {
  std::vector<LineInfo> lines;
  for (auto& raw : split_lines(text)) {
    LineInfo li;
    li.text = std::move(raw);
    lines.push_back(std::move(li));
  }
  // a lone trailing entry from a file ending in '\n'
  if (!lines.empty() && lines.back().text.empty()) lines.pop_back();

  bool in_triple = false;
  char triple_quote = '"';
  for (auto& li : lines) {
    li.starts_in_string = in_triple;
    const std::string& s = li.text;
    std::size_t i = 0;
    if (!in_triple) {
      while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
      li.indent = static_cast<int>(i);
      li.blank = i == s.size();
      // detect a def/async def statement at the start of the line content
      std::size_t j = i;
      if (s.compare(j, 6, "async ") == 0) {
        j += 6;
        while (j < s.size() && (s[j] == ' ' || s[j] == '\t')) ++j;
      }
      if (s.compare(j, 4, "def ") == 0 || s.compare(j, 4, "def\t") == 0) {
        j += 4;
        while (j < s.size() && (s[j] == ' ' || s[j] == '\t')) ++j;
        std::size_t name_start = j;
        while (j < s.size() && is_ident_char(s[j])) ++j;
        if (j > name_start) {
          li.def_here = true;
          li.def_name_start = name_start;
          li.def_name_len = j - name_start;
        }
      }
      i = li.indent;
    } else {
      li.blank = false;
      li.indent = 0;
    }
    // walk the remainder updating the string state
    while (i < s.size()) {
      char c = s[i];
      if (in_triple) {
        if (c == '\\') {
          i += 2;
          continue;
        }
        if (c == triple_quote && s.compare(i, 3, std::string(3, triple_quote)) == 0) {
          in_triple = false;
          i += 3;
          continue;
        }
        ++i;
        continue;
      }
      if (c == '#') break;  // comment to end of line
      if (c == '"' || c == '\'') {
        if (s.compare(i, 3, std::string(3, c)) == 0) {
          in_triple = true;
          triple_quote = c;
          i += 3;
          // the rest of this line may already close it
          continue;
        }
        // single-quoted string: ends at matching quote or end of line
        char q = c;
        ++i;
        while (i < s.size()) {
          if (s[i] == '\\') {
            i += 2;
            continue;
          }
          if (s[i] == q) {
            ++i;
            break;
          }
          ++i;
        }
        continue;
      }
      ++i;
    }
  }
  if (in_triple)
    throw ParseFailure(path + ": unterminated triple-quoted string");
  return lines;
}

// Leading string-literal of a body: returns [first_line, last_line] of the
// docstring statement and its content, or nullopt when the first statement
// is not a plain string literal.
struct DocstringSpan {
  std::size_t first_line, last_line;  // 0-based line indices
  std::string content;
};

inline std::optional<DocstringSpan> find_docstring(
    const std::vector<LineInfo>& lines, std::size_t body_begin,
    std::size_t body_end) {
  for (std::size_t ln = body_begin; ln < body_end; ++ln) {
    const LineInfo& li = lines[ln];
    if (li.starts_in_string) return std::nullopt;  // inside outer string: bail
    std::string_view s = li.text;
    std::string_view t = trim_view(s);
    if (t.empty()) continue;
    if (t[0] == '#') continue;  // leading comments are skipped
    // optional string prefix letters (r, b, u, f in any case, max two)
    std::size_t p = 0;
    while (p < t.size() && p < 2) {
      char c = t[p];
      if (c == 'r' || c == 'R' || c == 'b' || c == 'B' || c == 'u' ||
          c == 'U' || c == 'f' || c == 'F')
        ++p;
      else
        break;
    }
    if (p >= t.size() || (t[p] != '"' && t[p] != '\'')) return std::nullopt;
    char q = t[p];
    bool triple = t.compare(p, 3, std::string(3, q)) == 0;
    std::size_t open_end = p + (triple ? 3 : 1);
    if (!triple) {
      // single-line string: find the closing quote
      std::size_t i = open_end;
      while (i < t.size()) {
        if (t[i] == '\\') {
          i += 2;
          continue;
        }
        if (t[i] == q) break;
        ++i;
      }
      if (i >= t.size()) return std::nullopt;
      if (!trim_view(t.substr(i + 1)).empty()) return std::nullopt;
      return DocstringSpan{ln, ln, std::string(t.substr(open_end, i - open_end))};
    }
    // triple-quoted: may close on the same line or a later one
    std::string closer(3, q);
    std::size_t same = t.find(closer, open_end);
    if (same != std::string_view::npos) {
      if (!trim_view(t.substr(same + 3)).empty()) return std::nullopt;
      return DocstringSpan{ln, ln, std::string(t.substr(open_end, same - open_end))};
    }
    std::string content(t.substr(open_end));
    for (std::size_t k = ln + 1; k < body_end; ++k) {
      const std::string& line = lines[k].text;
      std::size_t close = line.find(closer);
      if (close != std::string::npos) {
        if (!trim_view(std::string_view(line).substr(close + 3)).empty())
          return std::nullopt;
        content += "\n" + line.substr(0, close);
        return DocstringSpan{ln, k, content};
      }
      content += "\n" + line;
    }
    return std::nullopt;  // closes outside the body; treat as no docstring
  }
  return std::nullopt;
}

}  // namespace detail

// Built-in extractor. Captures every named def (top-level, nested, methods)
// with its docstring; code_text is the function text with the docstring
// statement removed.
inline std::vector<SourceFunction> extract_python(std::string_view file_text,
                                                  const std::string& repo,
                                                  const std::string& path) {
  auto lines = detail::lex_python(file_text, path);
  std::vector<SourceFunction> out;
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    if (!lines[ln].def_here) continue;
    const auto& def_line = lines[ln];
    int def_indent = def_line.indent;

    // header: consume lines until bracket depth is zero and a ':' closes the
    // signature (trailing comments ignored by the lexer's bracket counting)
    std::size_t header_end = ln;
    bool header_ok = false;
    {
      long depth = 0;
      for (std::size_t k = ln; k < lines.size() && !header_ok; ++k) {
        const std::string& s = lines[k].text;
        std::size_t i = 0;
        bool saw_colon_at_depth0 = false;
        while (i < s.size()) {
          char c = s[i];
          if (c == '#') break;
          if (c == '"' || c == '\'') {
            char q = c;
            ++i;
            while (i < s.size()) {
              if (s[i] == '\\') {
                i += 2;
                continue;
              }
              if (s[i] == q) {
                ++i;
                break;
              }
              ++i;
            }
            continue;
          }
          if (c == '(' || c == '[' || c == '{') ++depth;
          if (c == ')' || c == ']' || c == '}') --depth;
          if (c == ':' && depth == 0) saw_colon_at_depth0 = true;
          ++i;
        }
        if (saw_colon_at_depth0 && depth <= 0) {
          header_end = k;
          header_ok = true;
        }
        if (k > ln + 50) break;  // malformed; stop scanning
      }
    }
    if (!header_ok) continue;

    // body: lines strictly more indented than the def, plus blank lines and
    // lines that begin inside a multi-line string
    std::size_t body_begin = header_end + 1;
    std::size_t body_end = body_begin;
    std::size_t last_content = header_end;
    for (std::size_t k = body_begin; k < lines.size(); ++k) {
      const auto& li = lines[k];
      if (li.starts_in_string) {
        body_end = k + 1;
        last_content = k;
        continue;
      }
      if (li.blank) {
        body_end = k + 1;
        continue;
      }
      if (li.indent <= def_indent) break;
      body_end = k + 1;
      last_content = k;
    }
    auto doc = detail::find_docstring(lines, body_begin, body_end);

    std::string code;
    for (std::size_t k = ln; k <= last_content; ++k) {
      if (doc && k >= doc->first_line && k <= doc->last_line) continue;
      if (!code.empty()) code += "\n";
      code += lines[k].text;
    }
    if (code.empty()) continue;

    SourceFunction fn;
    fn.language = Language::Python;
    fn.repo = repo;
    fn.path = path;
    fn.name = def_line.text.substr(def_line.def_name_start, def_line.def_name_len);
    fn.code_text = std::move(code);
    fn.docstring = doc ? doc->content : std::string();
    fn.start_line = ln + 1;
    fn.end_line = last_content + 1;
    out.push_back(std::move(fn));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Extraction interface: one registry, python built in, grammar-backed
// extractors for other languages plug in here.
// ---------------------------------------------------------------------------

using ExtractFn = std::function<std::vector<SourceFunction>(
    std::string_view file_text, const std::string& repo,
    const std::string& path)>;

inline std::map<Language, ExtractFn>& extractor_registry() {
  static std::map<Language, ExtractFn> registry = {
      {Language::Python, extract_python}};
  return registry;
}

inline void register_extractor(Language lang, ExtractFn fn) {
  extractor_registry()[lang] = std::move(fn);
}

inline std::vector<SourceFunction> extract_functions(std::string_view file_text,
                                                     Language lang,
                                                     const std::string& repo = "",
                                                     const std::string& path = "") {
  auto it = extractor_registry().find(lang);
  if (it == extractor_registry().end())
    throw DataError("no extractor registered for language '" +
                    language_name(lang) + "'");
  return it->second(file_text, repo, path);
}

struct ExtractionResult {
  std::vector<SourceFunction> functions;
  std::vector<std::string> parse_errors;  // "<path>: <reason>" per skipped file
};

// Walks a directory for files of the language, extracts in path-sorted
// order. Files may be processed in parallel; the merge order is fixed.
inline ExtractionResult extract_directory(const std::filesystem::path& dir,
                                          Language lang,
                                          const std::string& repo = "") {
  if (!std::filesystem::exists(dir))
    throw IoError("input directory does not exist: " + dir.string());
  if (!extractor_registry().count(lang))
    throw DataError("no extractor registered for language '" +
                    language_name(lang) + "'");
  std::string ext = language_extension(lang);
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ext)
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  std::string repo_name = repo.empty() ? dir.filename().string() : repo;
  std::vector<std::vector<SourceFunction>> per_file(files.size());
  std::vector<std::string> errors(files.size());
  parallel_for(files.size(), [&](std::size_t i) {
    std::string rel = std::filesystem::relative(files[i], dir).generic_string();
    try {
      std::string text = read_file(files[i]);
      per_file[i] = extract_functions(text, lang, repo_name, rel);
    } catch (const Error& e) {
      errors[i] = e.what();  // messages carry the path already
    }
  });

  ExtractionResult result;
  for (std::size_t i = 0; i < files.size(); ++i) {
    for (auto& fn : per_file[i]) result.functions.push_back(std::move(fn));
    if (!errors[i].empty()) result.parse_errors.push_back(errors[i]);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Query derivation
// ---------------------------------------------------------------------------

// First non-empty docstring line, trimmed of whitespace, quote runs and
// comment sigils. nullopt when nothing remains.
inline std::optional<std::string> derive_query(std::string_view docstring) {
  for (const std::string& raw : split_lines(docstring)) {
    std::string_view s = trim_view(raw);
    bool changed = true;
    while (changed && !s.empty()) {
      changed = false;
      if (s.starts_with("#")) { s.remove_prefix(1); changed = true; }
      else if (s.starts_with("//")) { s.remove_prefix(2); changed = true; }
      else if (s.starts_with("/*")) { s.remove_prefix(2); changed = true; }
      else if (s.starts_with("*/")) { s.remove_prefix(2); changed = true; }
      else if (s.front() == '"' || s.front() == '\'') {
        while (!s.empty() && (s.front() == '"' || s.front() == '\''))
          s.remove_prefix(1);
        changed = true;
      }
      if (changed) s = trim_view(s);
    }
    changed = true;
    while (changed && !s.empty()) {
      changed = false;
      if (s.ends_with("*/")) { s.remove_suffix(2); changed = true; }
      else if (s.back() == '"' || s.back() == '\'') {
        while (!s.empty() && (s.back() == '"' || s.back() == '\''))
          s.remove_suffix(1);
        changed = true;
      }
      if (changed) s = trim_view(s);
    }
    if (!s.empty()) return std::string(s);
  }
  return std::nullopt;
}

inline std::vector<BimodalPair> make_pairs(
    const std::vector<SourceFunction>& functions) {
  std::vector<BimodalPair> pairs;
  for (const auto& fn : functions) {
    auto query = derive_query(fn.docstring);
    if (!query) continue;
    BimodalPair p;
    p.language = fn.language;
    p.query = *query;
    p.code = fn.code_text;
    p.id = pair_id(p.language, p.query, p.code);
    p.meta = {{"repo", fn.repo}, {"path", fn.path}, {"name", fn.name}};
    pairs.push_back(std::move(p));
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

struct FilterConfig {
  std::size_t min_query_tokens = 3;   // whitespace tokens
  std::size_t min_code_lines = 3;
  std::size_t max_code_chars = 4096;
  bool reject_test_and_ctor_names = true;
  double max_non_ascii_ratio = 0.5;   // over query bytes
  bool reject_query_in_code = true;
};

struct FilterReport {
  std::size_t input = 0;
  std::size_t kept = 0;
  // fixed rule order
  std::vector<std::pair<std::string, std::size_t>> rejected = {
      {"short-query", 0}, {"short-code", 0},   {"long-code", 0},
      {"test-or-ctor", 0}, {"non-english", 0}, {"query-in-code", 0}};

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["input"] = input;
    j["kept"] = kept;
    nlohmann::ordered_json rej;
    for (const auto& [rule, count] : rejected) rej[rule] = count;
    j["rejected"] = rej;
    return j;
  }
};

namespace detail {

inline std::size_t whitespace_token_count(std::string_view s) {
  std::size_t n = 0;
  bool in_tok = false;
  for (char c : s) {
    bool ws = c == ' ' || c == '\t' || c == '\r' || c == '\n';
    if (!ws && !in_tok) ++n;
    in_tok = !ws;
  }
  return n;
}

inline double non_ascii_ratio(std::string_view s) {
  if (s.empty()) return 0.0;
  std::size_t n = 0;
  for (unsigned char c : s)
    if (c > 127) ++n;
  return static_cast<double>(n) / static_cast<double>(s.size());
}

inline bool is_test_or_ctor_name(std::string_view name) {
  return name.starts_with("test") || name.starts_with("Test") ||
         name == "__init__" || name == "constructor";
}

}  // namespace detail

// Returns the name of the first failing rule, or nullopt when the pair
// passes every rule.
inline std::optional<std::string> first_failing_rule(const BimodalPair& p,
                                                     const FilterConfig& fc) {
  if (detail::whitespace_token_count(p.query) < fc.min_query_tokens)
    return "short-query";
  if (count_lines(p.code) < fc.min_code_lines) return "short-code";
  if (p.code.size() > fc.max_code_chars) return "long-code";
  if (fc.reject_test_and_ctor_names) {
    auto it = p.meta.find("name");
    if (it != p.meta.end() && detail::is_test_or_ctor_name(it->second))
      return "test-or-ctor";
  }
  if (detail::non_ascii_ratio(p.query) > fc.max_non_ascii_ratio)
    return "non-english";
  if (fc.reject_query_in_code && p.code.find(p.query) != std::string::npos)
    return "query-in-code";
  return std::nullopt;
}

inline std::pair<std::vector<BimodalPair>, FilterReport> filter_pairs(
    const std::vector<BimodalPair>& pairs, const FilterConfig& fc = {}) {
  std::vector<BimodalPair> kept;
  FilterReport report;
  report.input = pairs.size();
  for (const auto& p : pairs) {
    auto rule = first_failing_rule(p, fc);
    if (!rule) {
      kept.push_back(p);
      continue;
    }
    for (auto& [name, count] : report.rejected)
      if (name == *rule) {
        ++count;
        break;
      }
  }
  report.kept = kept.size();
  return {std::move(kept), std::move(report)};
}

// ---------------------------------------------------------------------------
// Dedup and split
// ---------------------------------------------------------------------------

inline std::string normalize_code(std::string_view code) {
  return collapse_whitespace(to_lower_ascii(code));
}

// drops pairs whose whitespace-collapsed, lowercased code hashes equal;
// keeps the first occurrence in input order
inline std::vector<BimodalPair> dedup(const std::vector<BimodalPair>& pairs) {
  std::set<std::string> seen;
  std::vector<BimodalPair> out;
  for (const auto& p : pairs) {
    std::string h = sha256_hex(normalize_code(p.code));
    if (seen.insert(h).second) out.push_back(p);
  }
  return out;
}

struct SplitResult {
  std::vector<BimodalPair> train, valid, test;
};

inline SplitResult split(const std::vector<BimodalPair>& pairs,
                         double train_ratio, double valid_ratio,
                         double test_ratio, std::uint64_t seed) {
  if (train_ratio <= 0 || valid_ratio <= 0 || test_ratio <= 0)
    throw RatioError("split ratios must be positive");
  double sum = train_ratio + valid_ratio + test_ratio;
  if (std::abs(sum - 1.0) > 1e-9)
    throw RatioError("split ratios sum to " + std::to_string(sum) +
                     ", expected 1");
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "corpus-split"));
  shuffle(order, rng);

  std::size_t n = pairs.size();
  std::size_t n_train = static_cast<std::size_t>(train_ratio * static_cast<double>(n));
  std::size_t n_valid = static_cast<std::size_t>(valid_ratio * static_cast<double>(n));
  std::size_t n_test = static_cast<std::size_t>(test_ratio * static_cast<double>(n));
  // distribute the rounding remainder in bucket order
  std::size_t rem = n - (n_train + n_valid + n_test);
  if (rem > 0) { ++n_train; --rem; }
  if (rem > 0) { ++n_valid; --rem; }
  if (rem > 0) { ++n_test; --rem; }

  SplitResult result;
  for (std::size_t i = 0; i < n; ++i) {
    const BimodalPair& p = pairs[order[i]];
    if (i < n_train)
      result.train.push_back(p);
    else if (i < n_train + n_valid)
      result.valid.push_back(p);
    else
      result.test.push_back(p);
  }
  return result;
}

// ---------------------------------------------------------------------------
// JSONL serialization
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json pair_to_json(const BimodalPair& p) {
  nlohmann::ordered_json j;
  j["id"] = p.id;
  j["language"] = language_name(p.language);
  j["query"] = p.query;
  j["code"] = p.code;
  nlohmann::ordered_json meta;
  for (const auto& [k, v] : p.meta) meta[k] = v;  // std::map: sorted keys
  j["meta"] = meta;
  return j;
}

inline BimodalPair pair_from_json(const nlohmann::json& j) {
  BimodalPair p;
  p.id = j.at("id").get<std::string>();
  p.language = language_from_name(j.at("language").get<std::string>());
  p.query = j.at("query").get<std::string>();
  p.code = j.at("code").get<std::string>();
  if (j.contains("meta"))
    for (const auto& [k, v] : j.at("meta").items())
      p.meta[k] = v.get<std::string>();
  return p;
}

inline std::string pairs_to_jsonl(const std::vector<BimodalPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) out += pair_to_json(p).dump() + "\n";
  return out;
}

inline std::vector<BimodalPair> pairs_from_jsonl(std::string_view text) {
  std::vector<BimodalPair> pairs;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    if (trim_view(line).empty()) continue;
    try {
      pairs.push_back(pair_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad JSONL at line " + std::to_string(line_no) + ": " +
                      e.what());
    }
  }
  return pairs;
}

inline void save_pairs(const std::filesystem::path& path,
                       const std::vector<BimodalPair>& pairs) {
  write_file(path, pairs_to_jsonl(pairs));
}

inline std::vector<BimodalPair> load_pairs(const std::filesystem::path& path) {
  return pairs_from_jsonl(read_file(path));
}

}  // namespace cl4d::corpus
