#pragma once

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tabalign/common.hpp"
#include "tabalign/sql_ast.hpp"
#include "tabalign/text.hpp"

namespace tabalign {

enum class ColumnType { Text, Real };

inline std::optional<double> parse_real_cell(const std::string& s) {
  std::size_t a = 0;
  std::size_t b = s.size();
  while (a < b && detail::is_ascii_space(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && detail::is_ascii_space(static_cast<unsigned char>(s[b - 1]))) --b;
  if (a == b) return std::nullopt;
  const std::string trimmed = s.substr(a, b - a);
  char* end = nullptr;
  const double v = std::strtod(trimmed.c_str(), &end);
  if (end != trimmed.c_str() + trimmed.size()) return std::nullopt;
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

// One table: headers, per-column types, string cells. Cells may be marked
// absent (only produced by schema flattening); absent cells are never
// sampled and never satisfy a condition.
struct Table {
  std::string id;
  std::vector<std::string> headers;
  std::vector<ColumnType> types;
  std::vector<std::vector<std::string>> rows;
  // Parallel to rows when nonempty; absent.empty() means every cell present.
  std::vector<std::vector<std::uint8_t>> absent;

  int n_cols() const { return static_cast<int>(headers.size()); }
  int n_rows() const { return static_cast<int>(rows.size()); }

  bool is_absent(int row, int col) const {
    if (absent.empty()) return false;
    return absent[static_cast<std::size_t>(row)][static_cast<std::size_t>(col)] != 0;
  }

  const std::string& cell(int row, int col) const {
    return rows[static_cast<std::size_t>(row)][static_cast<std::size_t>(col)];
  }
};

struct LabeledExample {
  std::string question;
  std::string table_id;
  SqlStatement sql;
};

struct SchemaGroup {
  std::string schema_id;
  std::vector<std::string> table_ids;
};

using TableMap = std::map<std::string, Table>;

// Lowercased-header foreign-key name rule used by schema flattening and
// sampling-column filtering.
inline bool is_foreign_key_header(const std::string& header) {
  const std::string h = detail::ascii_lower(header);
  if (h == "id" || h == "code") return true;
  auto ends_with = [&](const std::string& suffix) {
    return h.size() >= suffix.size() && h.compare(h.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(" id") || ends_with(" code") || ends_with("_id") || ends_with("_code");
}

inline void validate_table(const Table& t) {
  const int m = t.n_cols();
  if (m < 1) throw ValidationError("table " + t.id + ": must have at least one column");
  if (static_cast<int>(t.types.size()) != m) {
    throw ValidationError("table " + t.id + ": types length " + std::to_string(t.types.size()) +
                          " != header length " + std::to_string(m));
  }
  for (const auto& h : t.headers) {
    if (h.empty()) throw ValidationError("table " + t.id + ": empty header");
    if (tokenize(h).empty()) throw ValidationError("table " + t.id + ": header '" + h + "' has no tokens");
  }
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (static_cast<int>(t.rows[r].size()) != m) {
      throw ValidationError("table " + t.id + ": row " + std::to_string(r) + " has " +
                            std::to_string(t.rows[r].size()) + " cells, expected " + std::to_string(m));
    }
  }
  if (!t.absent.empty()) {
    if (t.absent.size() != t.rows.size()) throw ValidationError("table " + t.id + ": absent mask row mismatch");
    for (const auto& row : t.absent) {
      if (static_cast<int>(row.size()) != m) throw ValidationError("table " + t.id + ": absent mask arity mismatch");
    }
  }
  for (int c = 0; c < m; ++c) {
    if (t.types[static_cast<std::size_t>(c)] != ColumnType::Real) continue;
    for (int r = 0; r < t.n_rows(); ++r) {
      if (t.is_absent(r, c)) continue;
      if (!parse_real_cell(t.cell(r, c))) {
        throw ValidationError("table " + t.id + ": real column '" + t.headers[static_cast<std::size_t>(c)] +
                              "' holds non-numeric cell '" + t.cell(r, c) + "'");
      }
    }
  }
}

inline void validate_example(const LabeledExample& ex, const TableMap& tables) {
  auto it = tables.find(ex.table_id);
  if (it == tables.end()) throw ValidationError("example references unknown table id '" + ex.table_id + "'");
  const int m = it->second.n_cols();
  if (ex.sql.sel < 0 || ex.sql.sel >= m) {
    throw ValidationError("example on table '" + ex.table_id + "': sel column " +
                          std::to_string(ex.sql.sel) + " out of range (M=" + std::to_string(m) + ")");
  }
  for (const auto& c : ex.sql.conds) {
    if (c.column < 0 || c.column >= m) {
      throw ValidationError("example on table '" + ex.table_id + "': cond column " +
                            std::to_string(c.column) + " out of range (M=" + std::to_string(m) + ")");
    }
    if (c.value.empty()) throw ValidationError("example on table '" + ex.table_id + "': empty cond value");
  }
  if (ex.sql.conds.size() > kMaxConds) {
    throw ValidationError("example on table '" + ex.table_id + "': too many conditions");
  }
}

namespace detail {

inline nlohmann::json parse_jsonl_line(const std::string& line, const std::string& path, std::size_t lineno) {
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded()) {
    throw ParseError(path + ":" + std::to_string(lineno) + ": malformed JSON line");
  }
  return j;
}

}  // namespace detail

// JSON-lines tables: one object per line with keys id, header, types, rows.
// Unknown keys ignored. A column declared "real" whose cells do not all parse
// as finite numbers is demoted to text so raw WikiSQL releases load unchanged.
inline TableMap load_tables(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open tables file: " + path);
  TableMap out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = detail::parse_jsonl_line(line, path, lineno);
    Table t;
    try {
      t.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      for (const auto& h : j.at("header")) {
        t.headers.push_back(detail::json_scalar_to_string(h, "header"));
      }
      for (const auto& ty : j.at("types")) {
        const std::string name = ty.get<std::string>();
        if (name == "text") {
          t.types.push_back(ColumnType::Text);
        } else if (name == "real") {
          t.types.push_back(ColumnType::Real);
        } else {
          throw ParseError("unknown column type '" + name + "'");
        }
      }
      for (const auto& row : j.at("rows")) {
        std::vector<std::string> cells;
        for (const auto& cell : row) {
          cells.push_back(detail::json_scalar_to_string(cell, "cell"));
        }
        t.rows.push_back(std::move(cells));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    for (std::size_t c = 0; c < t.types.size(); ++c) {
      if (t.types[c] != ColumnType::Real) continue;
      for (const auto& row : t.rows) {
        if (c < row.size() && !parse_real_cell(row[c])) {
          t.types[c] = ColumnType::Text;
          break;
        }
      }
    }
    validate_table(t);
    if (!out.emplace(t.id, t).second) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": duplicate table id '" + t.id + "'");
    }
  }
  return out;
}

// JSON-lines labeled examples: question, table_id, sql {sel, agg, conds}.
inline std::vector<LabeledExample> load_examples(const std::string& path, const TableMap& tables) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open examples file: " + path);
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = detail::parse_jsonl_line(line, path, lineno);
    LabeledExample ex;
    try {
      ex.question = j.at("question").get<std::string>();
      ex.table_id = j.at("table_id").is_string() ? j.at("table_id").get<std::string>() : j.at("table_id").dump();
      ex.sql = sql_from_json(j.at("sql"));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    validate_example(ex, tables);
    out.push_back(std::move(ex));
  }
  return out;
}

inline nlohmann::json table_to_json(const Table& t) {
  nlohmann::json types = nlohmann::json::array();
  for (auto ty : t.types) types.push_back(ty == ColumnType::Real ? "real" : "text");
  return nlohmann::json{{"id", t.id}, {"header", t.headers}, {"types", types}, {"rows", t.rows}};
}

inline nlohmann::json example_to_json(const LabeledExample& ex) {
  return nlohmann::json{{"question", ex.question}, {"table_id", ex.table_id}, {"sql", sql_to_json(ex.sql)}};
}

// Flatten a schema group into one table for sampling. Columns matching the
// foreign-key name rule are dropped, as is any later column whose header
// string already appeared. Rows zip by index; a member table shorter than the
// longest contributes absent cells below its last row.
inline Table concat_schema_tables(const SchemaGroup& group, const TableMap& tables) {
  if (group.table_ids.empty()) throw ValidationError("schema group '" + group.schema_id + "' is empty");
  std::vector<const Table*> members;
  for (const auto& id : group.table_ids) {
    auto it = tables.find(id);
    if (it == tables.end()) {
      throw ValidationError("schema group '" + group.schema_id + "' references unknown table '" + id + "'");
    }
    members.push_back(&it->second);
  }
  Table out;
  out.id = group.schema_id;
  std::set<std::string> seen_headers;
  struct SourceCol {
    const Table* table;
    int col;
  };
  std::vector<SourceCol> sources;
  std::size_t max_rows = 0;
  for (const Table* t : members) {
    max_rows = std::max(max_rows, t->rows.size());
    for (int c = 0; c < t->n_cols(); ++c) {
      const std::string& header = t->headers[static_cast<std::size_t>(c)];
      if (is_foreign_key_header(header)) continue;
      if (!seen_headers.insert(header).second) continue;
      out.headers.push_back(header);
      out.types.push_back(t->types[static_cast<std::size_t>(c)]);
      sources.push_back({t, c});
    }
  }
  for (std::size_t r = 0; r < max_rows; ++r) {
    std::vector<std::string> cells;
    std::vector<std::uint8_t> missing;
    for (const auto& src : sources) {
      const int ri = static_cast<int>(r);
      if (ri < src.table->n_rows() && !src.table->is_absent(ri, src.col)) {
        cells.push_back(src.table->cell(ri, src.col));
        missing.push_back(0);
      } else {
        cells.emplace_back();
        missing.push_back(1);
      }
    }
    out.rows.push_back(std::move(cells));
    out.absent.push_back(std::move(missing));
  }
  return out;
}

// Sampling view of a table: text columns that do not match the foreign-key
// name rule. Returns nullopt when no column survives (table unusable for
// sampling; callers skip it). Idempotent.
inline std::optional<Table> filter_sampling_columns(const Table& t) {
  std::vector<int> keep;
  for (int c = 0; c < t.n_cols(); ++c) {
    if (t.types[static_cast<std::size_t>(c)] != ColumnType::Text) continue;
    if (is_foreign_key_header(t.headers[static_cast<std::size_t>(c)])) continue;
    keep.push_back(c);
  }
  if (keep.empty()) return std::nullopt;
  Table out;
  out.id = t.id;
  for (int c : keep) {
    out.headers.push_back(t.headers[static_cast<std::size_t>(c)]);
    out.types.push_back(t.types[static_cast<std::size_t>(c)]);
  }
  const bool any_absent = !t.absent.empty();
  for (int r = 0; r < t.n_rows(); ++r) {
    std::vector<std::string> cells;
    std::vector<std::uint8_t> missing;
    for (int c : keep) {
      cells.push_back(t.cell(r, c));
      if (any_absent) missing.push_back(t.is_absent(r, c) ? 1 : 0);
    }
    out.rows.push_back(std::move(cells));
    if (any_absent) out.absent.push_back(std::move(missing));
  }
  return out;
}

// floor(fraction * N) examples chosen uniformly without replacement,
// reported in their original relative order. fraction = 1 returns the input.
inline std::vector<LabeledExample> subsample_labeled(const std::vector<LabeledExample>& examples,
                                                     double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw ConfigError("subsample_labeled: fraction must be in (0, 1]");
  }
  if (fraction == 1.0) return examples;
  const std::size_t n = examples.size();
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  std::vector<LabeledExample> out;
  out.reserve(k);
  for (std::size_t i : idx) out.push_back(examples[i]);
  return out;
}

}  // namespace tabalign
