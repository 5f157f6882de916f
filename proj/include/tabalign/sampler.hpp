#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tabalign/common.hpp"
#include "tabalign/table.hpp"
#include "tabalign/text.hpp"

namespace tabalign {

enum class SamplingMethod { FixedOrder, RandomOrder, MixedTables };

constexpr double kDefaultPSwap = 0.3;

inline const char* sampling_method_name(SamplingMethod m) {
  switch (m) {
    case SamplingMethod::FixedOrder: return "fixed";
    case SamplingMethod::RandomOrder: return "random";
    case SamplingMethod::MixedTables: return "mixed";
  }
  return "random";
}

inline SamplingMethod sampling_method_from_name(const std::string& name) {
  if (name == "fixed") return SamplingMethod::FixedOrder;
  if (name == "random") return SamplingMethod::RandomOrder;
  if (name == "mixed") return SamplingMethod::MixedTables;
  throw ConfigError("unknown sampling method '" + name + "' (expected fixed|random|mixed)");
}

// One self-supervised example: the concatenated entities of a table row plus
// per-header gold token spans. An absent gold span (MixedTables swap-in)
// trains toward the NONE sentinel.
struct PseudoUtterance {
  std::string source_text;
  TokenizedText tokens;
  std::vector<int> header_indices;                  // into the post-filter table's headers
  std::vector<std::optional<TokenSpan>> gold_spans;  // aligned with header_indices
  std::string source_table_id;
  int source_row = 0;
};

namespace sampler_detail {

// Columns of this row that can contribute an entity: present and at least
// one token. Headers of dropped cells are skipped for this draw.
inline std::vector<int> usable_columns(const Table& t, int row) {
  std::vector<int> cols;
  for (int c = 0; c < t.n_cols(); ++c) {
    if (t.is_absent(row, c)) continue;
    if (tokenize(t.cell(row, c)).empty()) continue;
    cols.push_back(c);
  }
  return cols;
}

inline std::optional<std::string> draw_donor_entity(const std::vector<Table>& donors, Rng& rng) {
  for (int attempt = 0; attempt < 32; ++attempt) {
    const Table& donor = donors[rng.below(donors.size())];
    if (donor.n_rows() == 0 || donor.n_cols() == 0) continue;
    const int r = static_cast<int>(rng.below(static_cast<std::size_t>(donor.n_rows())));
    const int c = static_cast<int>(rng.below(static_cast<std::size_t>(donor.n_cols())));
    if (donor.is_absent(r, c)) continue;
    const std::string& cell = donor.cell(r, c);
    if (tokenize(cell).empty()) continue;
    return cell;
  }
  return std::nullopt;
}

}  // namespace sampler_detail

// Build one pseudo utterance from row `row` of a post-filter table.
// FixedOrder keeps column order; RandomOrder applies a uniform permutation;
// MixedTables additionally swaps each entity with probability p_swap for an
// entity from a donor table, making that header's gold span absent.
inline PseudoUtterance sample_pseudo_utterance(const Table& t, int row, SamplingMethod method, Rng& rng,
                                               const std::vector<Table>* donor_tables = nullptr,
                                               double p_swap = kDefaultPSwap) {
  if (row < 0 || row >= t.n_rows()) {
    throw ConfigError("sample_pseudo_utterance: row " + std::to_string(row) + " out of range for table " + t.id);
  }
  if (method == SamplingMethod::MixedTables && (donor_tables == nullptr || donor_tables->empty())) {
    throw ConfigError("sample_pseudo_utterance: MixedTables requires donor tables");
  }
  std::vector<int> order = sampler_detail::usable_columns(t, row);
  if (order.empty()) {
    throw ValidationError("table unusable: no sampleable entity in table " + t.id + " row " + std::to_string(row));
  }
  if (method != SamplingMethod::FixedOrder) rng.shuffle(order);

  PseudoUtterance out;
  out.source_table_id = t.id;
  out.source_row = row;
  struct Part {
    std::string entity;
    int header = 0;
    bool swapped = false;
  };
  std::vector<Part> parts;
  parts.reserve(order.size());
  for (int col : order) {
    Part p;
    p.header = col;
    p.entity = t.cell(row, col);
    if (method == SamplingMethod::MixedTables && rng.bernoulli(p_swap)) {
      if (auto donor = sampler_detail::draw_donor_entity(*donor_tables, rng)) {
        p.entity = *donor;
        p.swapped = true;
      }
    }
    parts.push_back(std::move(p));
  }

  int cursor = 0;
  for (const auto& part : parts) {
    if (!out.source_text.empty()) out.source_text += " ";
    out.source_text += part.entity;
    const int width = static_cast<int>(tokenize(part.entity).size());
    out.header_indices.push_back(part.header);
    if (part.swapped) {
      out.gold_spans.push_back(std::nullopt);
    } else {
      out.gold_spans.push_back(TokenSpan{cursor, cursor + width - 1});
    }
    cursor += width;
  }
  out.tokens = tokenize(out.source_text);
  return out;
}

// Usable sampling views of a table corpus: post-filter tables that still have
// at least one samplable (row, column) pair.
inline std::vector<Table> usable_sampling_tables(const TableMap& tables) {
  std::vector<Table> out;
  for (const auto& [id, t] : tables) {
    auto filtered = filter_sampling_columns(t);
    if (!filtered) continue;
    bool any = false;
    for (int r = 0; r < filtered->n_rows() && !any; ++r) {
      any = !sampler_detail::usable_columns(*filtered, r).empty();
    }
    if (any) out.push_back(std::move(*filtered));
  }
  return out;
}

// batch_size pseudo utterances; each draw picks a usable table uniformly,
// then one of its rows uniformly. Deterministic for a fixed rng state.
inline std::vector<PseudoUtterance> make_selfsup_batch(const std::vector<Table>& tables, int batch_size,
                                                       SamplingMethod method, Rng& rng,
                                                       double p_swap = kDefaultPSwap) {
  if (batch_size < 1) throw ConfigError("make_selfsup_batch: batch_size must be >= 1");
  if (tables.empty()) throw ValidationError("make_selfsup_batch: no usable tables");
  std::vector<PseudoUtterance> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (int b = 0; b < batch_size; ++b) {
    bool produced = false;
    for (int attempt = 0; attempt < 256 && !produced; ++attempt) {
      const Table& t = tables[rng.below(tables.size())];
      if (t.n_rows() == 0) continue;
      const int row = static_cast<int>(rng.below(static_cast<std::size_t>(t.n_rows())));
      if (sampler_detail::usable_columns(t, row).empty()) continue;
      out.push_back(sample_pseudo_utterance(t, row, method, rng, &tables, p_swap));
      produced = true;
    }
    if (!produced) throw ValidationError("make_selfsup_batch: no usable (table, row) draw found");
  }
  return out;
}

// Inspection export: one JSON object per pseudo utterance.
inline nlohmann::json pseudo_to_json(const PseudoUtterance& pu, const Table& source) {
  nlohmann::json spans = nlohmann::json::array();
  nlohmann::json headers = nlohmann::json::array();
  for (std::size_t i = 0; i < pu.header_indices.size(); ++i) {
    headers.push_back(source.headers[static_cast<std::size_t>(pu.header_indices[i])]);
    if (pu.gold_spans[i]) {
      spans.push_back({pu.gold_spans[i]->start, pu.gold_spans[i]->end});
    } else {
      spans.push_back(nullptr);
    }
  }
  return nlohmann::json{{"tokens", pu.tokens.tokens},
                        {"headers", headers},
                        {"spans", spans},
                        {"table_id", pu.source_table_id},
                        {"row", pu.source_row}};
}

}  // namespace tabalign
