#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tabalign/common.hpp"
#include "tabalign/text.hpp"

namespace tabalign {

// WikiSQL-order aggregation codes: 0 = none, then MAX..AVG.
enum class AggFunc : int { None = 0, Max = 1, Min = 2, Count = 3, Sum = 4, Avg = 5 };
constexpr int kNumAggs = 6;

// WikiSQL-order condition operators.
enum class CondOp : int { Eq = 0, Gt = 1, Lt = 2 };
constexpr int kNumOps = 3;

constexpr int kMaxConds = 4;
constexpr int kNumWhereCounts = kMaxConds + 1;  // classes 0..4

inline const char* agg_name(AggFunc a) {
  switch (a) {
    case AggFunc::None: return "";
    case AggFunc::Max: return "MAX";
    case AggFunc::Min: return "MIN";
    case AggFunc::Count: return "COUNT";
    case AggFunc::Sum: return "SUM";
    case AggFunc::Avg: return "AVG";
  }
  return "";
}

inline const char* op_name(CondOp o) {
  switch (o) {
    case CondOp::Eq: return "=";
    case CondOp::Gt: return ">";
    case CondOp::Lt: return "<";
  }
  return "";
}

struct SqlCond {
  int column = 0;
  CondOp op = CondOp::Eq;
  std::string value;

  bool operator==(const SqlCond& o) const {
    return column == o.column && op == o.op && value == o.value;
  }
};

struct SqlStatement {
  int sel = 0;
  AggFunc agg = AggFunc::None;
  std::vector<SqlCond> conds;

  bool operator==(const SqlStatement& o) const {
    return sel == o.sel && agg == o.agg && conds == o.conds;
  }
};

// Trimmed, lowercased value text; the normalization used by condition
// matching and logical-form comparison.
inline std::string normalize_value(const std::string& v) {
  std::size_t a = 0;
  std::size_t b = v.size();
  while (a < b && detail::is_ascii_space(static_cast<unsigned char>(v[a]))) ++a;
  while (b > a && detail::is_ascii_space(static_cast<unsigned char>(v[b - 1]))) --b;
  return detail::ascii_lower(v.substr(a, b - a));
}

// True iff sel and agg match and conds are equal as multisets with values
// compared after normalization.
inline bool logical_form_equal(const SqlStatement& a, const SqlStatement& b) {
  if (a.sel != b.sel || a.agg != b.agg) return false;
  if (a.conds.size() != b.conds.size()) return false;
  auto canon = [](const SqlStatement& s) {
    std::vector<std::tuple<int, int, std::string>> c;
    c.reserve(s.conds.size());
    for (const auto& cond : s.conds) {
      c.emplace_back(cond.column, static_cast<int>(cond.op), normalize_value(cond.value));
    }
    std::sort(c.begin(), c.end());
    return c;
  };
  return canon(a) == canon(b);
}

inline nlohmann::json sql_to_json(const SqlStatement& s) {
  nlohmann::json conds = nlohmann::json::array();
  for (const auto& c : s.conds) {
    conds.push_back({c.column, static_cast<int>(c.op), c.value});
  }
  return nlohmann::json{{"sel", s.sel}, {"agg", static_cast<int>(s.agg)}, {"conds", conds}};
}

namespace detail {
// WikiSQL files may carry condition values (and cells) as JSON numbers.
inline std::string json_scalar_to_string(const nlohmann::json& j, const char* what) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_number() || j.is_boolean()) return j.dump();
  throw ParseError(std::string(what) + " must be a string or number");
}
}  // namespace detail

inline SqlStatement sql_from_json(const nlohmann::json& j) {
  SqlStatement s;
  s.sel = j.at("sel").get<int>();
  const int agg = j.at("agg").get<int>();
  if (agg < 0 || agg >= kNumAggs) throw ParseError("sql agg code out of range: " + std::to_string(agg));
  s.agg = static_cast<AggFunc>(agg);
  for (const auto& c : j.at("conds")) {
    if (!c.is_array() || c.size() != 3) throw ParseError("sql cond must be [column, op, value]");
    SqlCond cond;
    cond.column = c[0].get<int>();
    const int op = c[1].get<int>();
    if (op < 0 || op >= kNumOps) throw ParseError("sql cond op code out of range: " + std::to_string(op));
    cond.op = static_cast<CondOp>(op);
    cond.value = detail::json_scalar_to_string(c[2], "sql cond value");
    if (cond.value.empty()) throw ParseError("sql cond value must be nonempty");
    s.conds.push_back(std::move(cond));
  }
  if (s.conds.size() > kMaxConds) {
    throw ParseError("sql statement has more than " + std::to_string(kMaxConds) + " conditions");
  }
  return s;
}

}  // namespace tabalign
