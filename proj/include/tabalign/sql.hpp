#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tabalign/common.hpp"
#include "tabalign/encoder.hpp"
#include "tabalign/slots.hpp"
#include "tabalign/sql_ast.hpp"
#include "tabalign/table.hpp"
#include "tabalign/text.hpp"

namespace tabalign {

// Execution outcome. Aggregated queries yield a scalar; agg = NONE yields the
// selected cells in row order; zero surviving rows yield Empty for every
// aggregation (the execution-guided signal); semantic failures (numeric
// aggregation over a text column, bad column index) yield Error.
struct ExecResult {
  enum class Kind { Scalar, List, Empty, Error };
  Kind kind = Kind::Empty;
  double scalar = 0.0;
  std::vector<std::string> list;
  std::string error;

  static ExecResult make_scalar(double v) { return {Kind::Scalar, v, {}, {}}; }
  static ExecResult make_list(std::vector<std::string> v) { return {Kind::List, 0.0, std::move(v), {}}; }
  static ExecResult make_empty() { return {Kind::Empty, 0.0, {}, {}}; }
  static ExecResult make_error(std::string msg) { return {Kind::Error, 0.0, {}, std::move(msg)}; }

  bool ok() const { return kind != Kind::Error; }
  bool nonempty() const { return kind == Kind::Scalar || kind == Kind::List; }
};

// Kind plus payload; lists compare as multisets. Error payloads are not
// compared (any two errors are equal).
inline bool exec_result_equal(const ExecResult& a, const ExecResult& b) {
  if (a.kind != b.kind) return false;
  switch (a.kind) {
    case ExecResult::Kind::Scalar: return a.scalar == b.scalar;
    case ExecResult::Kind::List: {
      if (a.list.size() != b.list.size()) return false;
      std::vector<std::string> la = a.list;
      std::vector<std::string> lb = b.list;
      std::sort(la.begin(), la.end());
      std::sort(lb.begin(), lb.end());
      return la == lb;
    }
    default: return true;
  }
}

namespace exec_detail {

inline bool cond_matches(const Table& t, int row, const SqlCond& cond) {
  if (t.is_absent(row, cond.column)) return false;
  const std::string& cell = t.cell(row, cond.column);
  if (t.types[static_cast<std::size_t>(cond.column)] == ColumnType::Real) {
    const auto cell_num = parse_real_cell(cell);
    const auto value_num = parse_real_cell(cond.value);
    if (!cell_num || !value_num) return false;
    switch (cond.op) {
      case CondOp::Eq: return *cell_num == *value_num;
      case CondOp::Gt: return *cell_num > *value_num;
      case CondOp::Lt: return *cell_num < *value_num;
    }
    return false;
  }
  const std::string lhs = normalize_value(cell);
  const std::string rhs = normalize_value(cond.value);
  switch (cond.op) {
    case CondOp::Eq: return lhs == rhs;
    case CondOp::Gt: return lhs > rhs;
    case CondOp::Lt: return lhs < rhs;
  }
  return false;
}

}  // namespace exec_detail

// Conjunctive WHERE filter then SELECT with optional aggregation. Total:
// every failure mode is an Error result, never a thrown exception.
inline ExecResult execute(const SqlStatement& stmt, const Table& t) {
  const int m = t.n_cols();
  if (stmt.sel < 0 || stmt.sel >= m) return ExecResult::make_error("sel column out of range");
  for (const auto& c : stmt.conds) {
    if (c.column < 0 || c.column >= m) return ExecResult::make_error("cond column out of range");
    if (c.value.empty()) return ExecResult::make_error("empty cond value");
  }
  std::vector<int> surviving;
  for (int r = 0; r < t.n_rows(); ++r) {
    bool keep = true;
    for (const auto& c : stmt.conds) {
      if (!exec_detail::cond_matches(t, r, c)) {
        keep = false;
        break;
      }
    }
    if (keep) surviving.push_back(r);
  }
  if (surviving.empty()) return ExecResult::make_empty();

  if (stmt.agg == AggFunc::None) {
    std::vector<std::string> cells;
    cells.reserve(surviving.size());
    for (int r : surviving) cells.push_back(t.cell(r, stmt.sel));
    return ExecResult::make_list(std::move(cells));
  }
  if (stmt.agg == AggFunc::Count) {
    return ExecResult::make_scalar(static_cast<double>(surviving.size()));
  }
  if (t.types[static_cast<std::size_t>(stmt.sel)] != ColumnType::Real) {
    return ExecResult::make_error(std::string(agg_name(stmt.agg)) + " over text column");
  }
  std::vector<double> values;
  for (int r : surviving) {
    if (t.is_absent(r, stmt.sel)) continue;
    const auto v = parse_real_cell(t.cell(r, stmt.sel));
    if (!v) return ExecResult::make_error("non-numeric cell under numeric aggregation");
    values.push_back(*v);
  }
  if (values.empty()) return ExecResult::make_empty();
  switch (stmt.agg) {
    case AggFunc::Max: return ExecResult::make_scalar(*std::max_element(values.begin(), values.end()));
    case AggFunc::Min: return ExecResult::make_scalar(*std::min_element(values.begin(), values.end()));
    case AggFunc::Sum: return ExecResult::make_scalar(std::accumulate(values.begin(), values.end(), 0.0));
    case AggFunc::Avg:
      return ExecResult::make_scalar(std::accumulate(values.begin(), values.end(), 0.0) /
                                     static_cast<double>(values.size()));
    default: return ExecResult::make_error("unsupported aggregation");
  }
}

namespace decode_detail {

inline int argmax(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

inline std::vector<double> log_softmax(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double z = 0;
  for (double x : v) z += std::exp(x - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out;
  out.reserve(v.size());
  for (double x : v) out.push_back(x - lse);
  return out;
}

// Column indices ordered by (score desc, index asc).
inline std::vector<int> ranked_columns(const std::vector<double>& scores) {
  std::vector<int> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  return idx;
}

struct Candidate {
  SqlStatement stmt;
  double score = 0.0;
  int count = 0;
};

// Statement for a fixed where-count plus its joint log-probability score.
inline Candidate build_candidate(const SlotLogits& slots, const TokenizedText& utterance, int count) {
  Candidate cand;
  cand.count = count;
  const auto sel_lp = log_softmax(slots.sel);
  const auto agg_lp = log_softmax(slots.agg);
  const auto cnt_lp = log_softmax(slots.where_count);
  const auto col_lp = log_softmax(slots.where_col);
  cand.stmt.sel = argmax(slots.sel);
  cand.stmt.agg = static_cast<AggFunc>(argmax(slots.agg));
  cand.score = sel_lp[static_cast<std::size_t>(cand.stmt.sel)] +
               agg_lp[static_cast<std::size_t>(static_cast<int>(cand.stmt.agg))] +
               cnt_lp[static_cast<std::size_t>(count)];
  const auto ranked = ranked_columns(slots.where_col);
  for (int k = 0; k < count; ++k) {
    const int col = ranked[static_cast<std::size_t>(k)];
    SqlCond cond;
    cond.column = col;
    const auto op_lp = log_softmax(slots.op[static_cast<std::size_t>(col)]);
    cond.op = static_cast<CondOp>(argmax(slots.op[static_cast<std::size_t>(col)]));
    const auto start_lp = log_softmax(slots.start[static_cast<std::size_t>(col)]);
    const auto end_lp = log_softmax(slots.end[static_cast<std::size_t>(col)]);
    // Value spans never target the NONE sentinel; they detokenize from the
    // original question text.
    const SpanPrediction span = best_span(slots.start[static_cast<std::size_t>(col)],
                                          slots.end[static_cast<std::size_t>(col)], false);
    cond.value = utterance.slice(span.start - 1, span.end - 1);
    cand.score += col_lp[static_cast<std::size_t>(col)] +
                  op_lp[static_cast<std::size_t>(static_cast<int>(cond.op))] +
                  start_lp[static_cast<std::size_t>(span.start)] + end_lp[static_cast<std::size_t>(span.end)];
    cand.stmt.conds.push_back(std::move(cond));
  }
  return cand;
}

}  // namespace decode_detail

// Statements for every feasible where-count, ranked by joint log-probability
// score (ties keep the smaller count first). Execution-guided decoding
// considers the first four of these.
inline std::vector<SqlStatement> decode_candidates(const SlotLogits& slots, const TokenizedText& utterance) {
  const int max_count = std::min(kMaxConds, slots.n_headers());
  std::vector<decode_detail::Candidate> candidates;
  for (int count = 0; count <= max_count; ++count) {
    candidates.push_back(decode_detail::build_candidate(slots, utterance, count));
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<SqlStatement> out;
  out.reserve(candidates.size());
  for (auto& c : candidates) out.push_back(std::move(c.stmt));
  return out;
}

// Slot-filling decode. Without execution guidance the where-count is its
// argmax. With a table provided, the top 4 ranked candidates are tried in
// tiers: non-empty executable first, then merely executable, then the top
// candidate unchanged.
inline SqlStatement decode_sql(const SlotLogits& slots, const TokenizedText& utterance,
                               const Table* eg_table = nullptr) {
  if (eg_table == nullptr) {
    const int max_count = std::min(kMaxConds, slots.n_headers());
    int count = decode_detail::argmax(slots.where_count);
    count = std::min(count, max_count);
    return decode_detail::build_candidate(slots, utterance, count).stmt;
  }
  std::vector<SqlStatement> candidates = decode_candidates(slots, utterance);
  if (candidates.size() > 4) candidates.resize(4);
  for (const auto& stmt : candidates) {
    if (execute(stmt, *eg_table).nonempty()) return stmt;
  }
  for (const auto& stmt : candidates) {
    if (execute(stmt, *eg_table).ok()) return stmt;
  }
  return candidates.front();
}

struct Metrics {
  double lf = 0.0;
  double ex = 0.0;
  double select_c = 0.0;
  double where_c = 0.0;
  double where_v = 0.0;
  long long n = 0;
  long long n_where_col_match = 0;

  nlohmann::json to_json() const {
    return nlohmann::json{{"lf", lf},           {"ex", ex},
                          {"select_c", select_c}, {"where_c", where_c},
                          {"where_v", where_v},   {"n", n},
                          {"n_where_col_match", n_where_col_match}};
  }

  std::string csv_row(const std::string& run_id, const std::string& stage, std::uint64_t seed) const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%s,%llu,%.6f,%.6f,%.6f,%.6f,%.6f", run_id.c_str(), stage.c_str(),
                  static_cast<unsigned long long>(seed), lf, ex, select_c, where_c, where_v);
    return buf;
  }
};

inline const char* kMetricsCsvHeader = "run_id,stage,seed,lf,ex,select_c,where_c,where_v";

namespace eval_detail {

inline std::vector<std::pair<int, std::string>> cond_col_values(const SqlStatement& s) {
  std::vector<std::pair<int, std::string>> out;
  for (const auto& c : s.conds) out.emplace_back(c.column, normalize_value(c.value));
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<int> cond_columns(const SqlStatement& s) {
  std::vector<int> out;
  for (const auto& c : s.conds) out.push_back(c.column);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace eval_detail

// Compare one prediction against gold on its table, updating running counts.
struct MetricsAccumulator {
  long long n = 0;
  long long lf = 0;
  long long ex = 0;
  long long sel = 0;
  long long wcol = 0;
  long long wval = 0;

  void add(const SqlStatement& pred, const SqlStatement& gold, const Table& table) {
    ++n;
    if (logical_form_equal(pred, gold)) ++lf;
    if (exec_result_equal(execute(pred, table), execute(gold, table))) ++ex;
    if (pred.sel == gold.sel) ++sel;
    if (eval_detail::cond_columns(pred) == eval_detail::cond_columns(gold)) {
      ++wcol;
      if (eval_detail::cond_col_values(pred) == eval_detail::cond_col_values(gold)) ++wval;
    }
  }

  void merge(const MetricsAccumulator& o) {
    n += o.n;
    lf += o.lf;
    ex += o.ex;
    sel += o.sel;
    wcol += o.wcol;
    wval += o.wval;
  }

  Metrics finalize() const {
    Metrics m;
    m.n = n;
    m.n_where_col_match = wcol;
    if (n > 0) {
      m.lf = static_cast<double>(lf) / static_cast<double>(n);
      m.ex = static_cast<double>(ex) / static_cast<double>(n);
      m.select_c = static_cast<double>(sel) / static_cast<double>(n);
      m.where_c = static_cast<double>(wcol) / static_cast<double>(n);
    }
    if (wcol > 0) m.where_v = static_cast<double>(wval) / static_cast<double>(wcol);
    return m;
  }
};

// Greedy-decode every example and score it. Per-example executor errors count
// as mismatches, never as failures of the evaluation itself.
template <typename ModelT>
Metrics evaluate(ModelT& model, const std::vector<LabeledExample>& examples, const TableMap& tables,
                 bool eg, const Vocabulary& vocab) {
  MetricsAccumulator acc;
  for (const auto& ex : examples) {
    const Table& table = tables.at(ex.table_id);
    const TokenizedText question = tokenize(ex.question);
    const InputEncoding enc = encode_question(question, table, vocab, model.config().max_len);
    const SlotLogits slots = model.eval_slots(enc);
    const SqlStatement pred = decode_sql(slots, question, eg ? &table : nullptr);
    acc.add(pred, ex.sql, table);
  }
  return acc.finalize();
}

}  // namespace tabalign
