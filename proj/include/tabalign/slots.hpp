#pragma once

#include <vector>

namespace tabalign {

// Slot-filling scores for one encoded example, read out of the network in
// eval mode. Span logits are in utterance-mask coordinates: index 0 is the
// NONE sentinel, indices 1..L the utterance tokens (so each row has L+1
// entries).
struct SlotLogits {
  std::vector<double> sel;                 // M
  std::vector<double> agg;                 // aggregation classes
  std::vector<double> where_count;         // classes 0..4
  std::vector<double> where_col;           // M
  std::vector<std::vector<double>> op;     // M x operator classes
  std::vector<std::vector<double>> start;  // M x (L+1)
  std::vector<std::vector<double>> end;    // M x (L+1)

  int n_headers() const { return static_cast<int>(sel.size()); }
  int mask_size() const { return start.empty() ? 0 : static_cast<int>(start.front().size()); }
};

struct SpanPrediction {
  int start = 0;  // mask coordinates
  int end = 0;
  double score = 0.0;
};

// Highest-scoring well-formed span by summed start/end logits. Candidates are
// (s, e) with 1 <= s <= e <= s + max_span_tokens - 1 over utterance tokens,
// plus the NONE singleton (0, 0) when include_none is set.
inline SpanPrediction best_span(const std::vector<double>& start_logits,
                                const std::vector<double>& end_logits, bool include_none,
                                int max_span_tokens = 8) {
  const int n = static_cast<int>(start_logits.size());
  SpanPrediction best;
  bool found = false;
  if (include_none) {
    best = {0, 0, start_logits[0] + end_logits[0]};
    found = true;
  }
  for (int s = 1; s < n; ++s) {
    const int e_max = std::min(n - 1, s + max_span_tokens - 1);
    for (int e = s; e <= e_max; ++e) {
      const double score = start_logits[s] + end_logits[e];
      if (!found || score > best.score) {
        best = {s, e, score};
        found = true;
      }
    }
  }
  return best;
}

}  // namespace tabalign
