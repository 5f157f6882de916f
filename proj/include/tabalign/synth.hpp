#pragma once

#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tabalign/common.hpp"
#include "tabalign/table.hpp"
#include "tabalign/text.hpp"

namespace tabalign {

// Knobs for the synthetic corpus used by the experiment harness and tests.
// Every count must be positive; templates picks how many of the built-in
// question families are enabled (1..5).
struct SynthConfig {
  int n_tables = 10;
  int n_unseen_tables = 5;
  int rows_per_table = 24;
  int cols_per_table = 4;
  int n_train_examples = 100;
  int n_eval_examples = 200;
  int entities_per_column = 30;
  int templates = 5;
};

struct SynthOutput {
  TableMap tables;
  TableMap unseen_tables;
  std::vector<SchemaGroup> schema_groups;
  std::vector<LabeledExample> train_examples;
  std::vector<LabeledExample> eval_examples;
};

namespace synth_detail {

inline const std::vector<std::string>& text_column_names() {
  static const std::vector<std::string> names = {
      "team",    "player", "position", "college", "home city", "coach",
      "stadium", "country", "sponsor",  "league",  "captain",   "district"};
  return names;
}

inline const std::vector<std::string>& real_column_names() {
  static const std::vector<std::string> names = {"pick #", "score", "rank", "attendance", "year"};
  return names;
}

inline std::string make_word(Rng& rng) {
  static const char* consonants = "bdfghklmnprstvwz";
  static const char* vowels = "aeiou";
  const std::size_t n_syll = 2 + rng.below(2);
  std::string w;
  for (std::size_t s = 0; s < n_syll; ++s) {
    w.push_back(consonants[rng.below(16)]);
    w.push_back(vowels[rng.below(5)]);
  }
  return w;
}

struct EntityPools {
  // column name -> disjoint entity vocabulary (each entity 1-2 words)
  std::unordered_map<std::string, std::vector<std::string>> pools;
};

inline EntityPools build_entity_pools(const SynthConfig& cfg, Rng& rng) {
  std::unordered_set<std::string> forbidden;
  for (const auto& name : text_column_names()) {
    for (const auto& tok : tokenize(name).tokens) forbidden.insert(tok);
  }
  for (const auto& name : real_column_names()) {
    for (const auto& tok : tokenize(name).tokens) forbidden.insert(tok);
  }
  for (const char* w : {"what", "is", "the", "when", "how", "many", "have", "equal",
                        "to", "and", "more", "less", "than", "highest", "lowest",
                        "total", "average", "overall"}) {
    forbidden.insert(w);
  }
  std::unordered_set<std::string> used;
  auto fresh_word = [&]() {
    for (;;) {
      std::string w = make_word(rng);
      if (forbidden.count(w) || used.count(w)) continue;
      used.insert(w);
      return w;
    }
  };
  EntityPools out;
  for (const auto& name : text_column_names()) {
    std::vector<std::string> pool;
    pool.reserve(static_cast<std::size_t>(cfg.entities_per_column));
    for (int i = 0; i < cfg.entities_per_column; ++i) {
      std::string entity = fresh_word();
      if (rng.bernoulli(0.3)) entity += " " + fresh_word();
      pool.push_back(std::move(entity));
    }
    out.pools.emplace(name, std::move(pool));
  }
  return out;
}

inline std::string make_number_cell(const std::string& column_name, Rng& rng) {
  if (column_name == "year") return std::to_string(1950 + rng.below(71));
  return std::to_string(1 + rng.below(500));
}

inline Table make_table(const SynthConfig& cfg, const EntityPools& pools, const std::string& id, Rng& rng) {
  Table t;
  t.id = id;
  std::vector<std::string> text_names = text_column_names();
  rng.shuffle(text_names);
  const bool with_real = cfg.cols_per_table >= 3;
  const int n_text = with_real ? cfg.cols_per_table - 1 : cfg.cols_per_table;
  for (int c = 0; c < n_text; ++c) {
    t.headers.push_back(text_names[static_cast<std::size_t>(c)]);
    t.types.push_back(ColumnType::Text);
  }
  if (with_real) {
    const auto& real_names = real_column_names();
    const std::string real_name = real_names[rng.below(real_names.size())];
    const std::size_t pos = rng.below(t.headers.size() + 1);
    t.headers.insert(t.headers.begin() + static_cast<std::ptrdiff_t>(pos), real_name);
    t.types.insert(t.types.begin() + static_cast<std::ptrdiff_t>(pos), ColumnType::Real);
  }
  for (int r = 0; r < cfg.rows_per_table; ++r) {
    std::vector<std::string> row;
    for (int c = 0; c < t.n_cols(); ++c) {
      const std::string& header = t.headers[static_cast<std::size_t>(c)];
      if (t.types[static_cast<std::size_t>(c)] == ColumnType::Real) {
        row.push_back(make_number_cell(header, rng));
      } else {
        const auto& pool = pools.pools.at(header);
        row.push_back(pool[rng.below(pool.size())]);
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

struct QuestionDraw {
  LabeledExample example;
};

inline std::vector<int> columns_of_type(const Table& t, ColumnType type) {
  std::vector<int> out;
  for (int c = 0; c < t.n_cols(); ++c) {
    if (t.types[static_cast<std::size_t>(c)] == type) out.push_back(c);
  }
  return out;
}

inline LabeledExample draw_example(const SynthConfig& cfg, const TableMap& tables,
                                   const std::vector<std::string>& table_ids, Rng& rng) {
  const Table& t = tables.at(table_ids[rng.below(table_ids.size())]);
  const std::vector<int> text_cols = columns_of_type(t, ColumnType::Text);
  const std::vector<int> real_cols = columns_of_type(t, ColumnType::Real);
  const int row = static_cast<int>(rng.below(static_cast<std::size_t>(t.n_rows())));
  int family = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(cfg.templates)));
  if (real_cols.empty() && (family == 4 || family == 5)) family = 1;
  if (text_cols.size() < 2 && family == 2) family = 1;

  LabeledExample ex;
  ex.table_id = t.id;
  auto pick_other = [&](const std::vector<int>& from, std::vector<int> excluded) {
    std::vector<int> candidates;
    for (int c : from) {
      bool skip = false;
      for (int e : excluded) skip = skip || (c == e);
      if (!skip) candidates.push_back(c);
    }
    if (candidates.empty()) return from[rng.below(from.size())];
    return candidates[rng.below(candidates.size())];
  };
  auto header = [&](int c) { return t.headers[static_cast<std::size_t>(c)]; };
  auto cell = [&](int c) { return t.cell(row, c); };

  switch (family) {
    case 2: {
      const int c1 = text_cols[rng.below(text_cols.size())];
      const int c2 = pick_other(text_cols, {c1});
      std::vector<int> all_cols;
      for (int c = 0; c < t.n_cols(); ++c) all_cols.push_back(c);
      const int sel = pick_other(all_cols, {c1, c2});
      ex.question = "what is the " + header(sel) + " when the " + header(c1) + " is " + cell(c1) +
                    " and the " + header(c2) + " is " + cell(c2);
      ex.sql = {sel, AggFunc::None, {{c1, CondOp::Eq, cell(c1)}, {c2, CondOp::Eq, cell(c2)}}};
      break;
    }
    case 3: {
      const int c1 = text_cols[rng.below(text_cols.size())];
      std::vector<int> all_cols;
      for (int c = 0; c < t.n_cols(); ++c) all_cols.push_back(c);
      const int sel = pick_other(all_cols, {c1});
      ex.question = "how many " + header(sel) + " have " + header(c1) + " equal to " + cell(c1);
      ex.sql = {sel, AggFunc::Count, {{c1, CondOp::Eq, cell(c1)}}};
      break;
    }
    case 4: {
      const int sel = real_cols[rng.below(real_cols.size())];
      static const std::pair<const char*, AggFunc> kAggWords[] = {
          {"highest", AggFunc::Max}, {"lowest", AggFunc::Min}, {"total", AggFunc::Sum}, {"average", AggFunc::Avg}};
      const auto& [word, agg] = kAggWords[rng.below(4)];
      if (rng.bernoulli(0.5) || text_cols.empty()) {
        ex.question = std::string("what is the ") + word + " " + header(sel) + " overall";
        ex.sql = {sel, agg, {}};
      } else {
        const int c1 = text_cols[rng.below(text_cols.size())];
        ex.question = std::string("what is the ") + word + " " + header(sel) + " when the " + header(c1) +
                      " is " + cell(c1);
        ex.sql = {sel, agg, {{c1, CondOp::Eq, cell(c1)}}};
      }
      break;
    }
    case 5: {
      const int c1 = real_cols[rng.below(real_cols.size())];
      const int sel = text_cols.empty() ? c1 : text_cols[rng.below(text_cols.size())];
      const bool more = rng.bernoulli(0.5);
      ex.question = "what is the " + header(sel) + " when the " + header(c1) + " is " +
                    (more ? "more" : "less") + " than " + cell(c1);
      ex.sql = {sel, AggFunc::None, {{c1, more ? CondOp::Gt : CondOp::Lt, cell(c1)}}};
      break;
    }
    case 1:
    default: {
      const int c1 = text_cols[rng.below(text_cols.size())];
      std::vector<int> all_cols;
      for (int c = 0; c < t.n_cols(); ++c) all_cols.push_back(c);
      const int sel = pick_other(all_cols, {c1});
      ex.question = "what is the " + header(sel) + " when the " + header(c1) + " is " + cell(c1);
      ex.sql = {sel, AggFunc::None, {{c1, CondOp::Eq, cell(c1)}}};
      break;
    }
  }
  return ex;
}

}  // namespace synth_detail

// Deterministic per seed; every condition value of every generated example
// locates in its question, and gold SQL is valid for its table.
inline SynthOutput generate_synthetic_dataset(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.n_tables <= 0 || cfg.rows_per_table <= 0 || cfg.cols_per_table <= 0 ||
      cfg.n_train_examples <= 0 || cfg.n_eval_examples <= 0 || cfg.entities_per_column <= 0 ||
      cfg.n_unseen_tables < 0) {
    throw ConfigError("generate_synthetic_dataset: counts must be positive");
  }
  if (cfg.templates < 1 || cfg.templates > 5) {
    throw ConfigError("generate_synthetic_dataset: templates must be in 1..5");
  }
  const auto max_cols = static_cast<int>(synth_detail::text_column_names().size());
  if (cfg.cols_per_table > max_cols) {
    throw ConfigError("generate_synthetic_dataset: cols_per_table must be <= " + std::to_string(max_cols));
  }

  Rng rng(seed);
  SynthOutput out;
  const synth_detail::EntityPools pools = synth_detail::build_entity_pools(cfg, rng);

  std::vector<std::string> table_ids;
  for (int i = 0; i < cfg.n_tables; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth_t%04d", i);
    Table t = synth_detail::make_table(cfg, pools, buf, rng);
    validate_table(t);
    table_ids.push_back(t.id);
    out.tables.emplace(t.id, std::move(t));
  }
  for (int i = 0; i < cfg.n_unseen_tables; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth_u%04d", i);
    Table t = synth_detail::make_table(cfg, pools, buf, rng);
    validate_table(t);
    out.unseen_tables.emplace(t.id, std::move(t));
  }
  for (std::size_t i = 0; i + 1 < table_ids.size(); i += 2) {
    SchemaGroup g;
    g.schema_id = "synth_s" + std::to_string(i / 2);
    g.table_ids = {table_ids[i], table_ids[i + 1]};
    out.schema_groups.push_back(std::move(g));
  }

  std::set<std::string> train_questions;
  for (int i = 0; i < cfg.n_train_examples; ++i) {
    LabeledExample ex = synth_detail::draw_example(cfg, out.tables, table_ids, rng);
    validate_example(ex, out.tables);
    train_questions.insert(ex.question);
    out.train_examples.push_back(std::move(ex));
  }
  for (int i = 0; i < cfg.n_eval_examples; ++i) {
    LabeledExample ex = synth_detail::draw_example(cfg, out.tables, table_ids, rng);
    for (int attempt = 0; attempt < 200 && train_questions.count(ex.question); ++attempt) {
      ex = synth_detail::draw_example(cfg, out.tables, table_ids, rng);
    }
    validate_example(ex, out.tables);
    out.eval_examples.push_back(std::move(ex));
  }
  return out;
}

}  // namespace tabalign
