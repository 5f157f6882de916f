#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tabalign/common.hpp"
#include "tabalign/optim.hpp"
#include "tabalign/slots.hpp"
#include "tabalign/sql_ast.hpp"
#include "tabalign/table.hpp"
#include "tabalign/tensor.hpp"
#include "tabalign/text.hpp"

namespace tabalign {

struct EncoderConfig {
  int dim = 128;
  int layers = 3;
  int heads = 4;
  int ffn = 256;
  int max_len = 256;
  double dropout = 0.1;
  int vocab_size = 0;

  void validate() const {
    if (dim <= 0 || heads <= 0 || ffn <= 0 || max_len <= 0 || layers < 0) {
      throw ConfigError("encoder config: dims must be positive");
    }
    if (dim % heads != 0) {
      throw ConfigError("encoder config: dim " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(heads));
    }
    if (vocab_size < Vocabulary::kNumReserved) {
      throw ConfigError("encoder config: vocab_size smaller than the reserved token set");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder config: dropout must be in [0, 1)");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"dim", dim},         {"layers", layers},   {"heads", heads},
                          {"ffn", ffn},         {"max_len", max_len}, {"dropout", dropout},
                          {"vocab_size", vocab_size}};
  }

  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.dim = j.at("dim").get<int>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn = j.at("ffn").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.validate();
    return c;
  }

  bool operator==(const EncoderConfig& o) const {
    return dim == o.dim && layers == o.layers && heads == o.heads && ffn == o.ffn &&
           max_len == o.max_len && dropout == o.dropout && vocab_size == o.vocab_size;
  }
};

// Packed sequence [CLS][NONE] u_1..u_L [SEP] h_1 [SEP] ... h_M [SEP].
// utterance_positions lists the span-eligible positions: index 0 is the NONE
// sentinel (position 1), indices 1..L the utterance tokens. Position ids
// restart at L+3 for every header, so a header's representation does not
// depend on where it sits in the schema ordering.
struct InputEncoding {
  std::vector<int> token_ids;
  std::vector<int> segment_ids;   // 0 = special/utterance, 1 = header tokens
  std::vector<int> position_ids;  // per-header restart, see above
  std::vector<int> utterance_positions;
  std::vector<std::vector<int>> header_positions;
  int utterance_len = 0;

  int seq_len() const { return static_cast<int>(token_ids.size()); }
  int n_headers() const { return static_cast<int>(header_positions.size()); }
  int mask_size() const { return utterance_len + 1; }
};

inline InputEncoding build_input(const std::vector<std::string>& utterance_tokens,
                                 const std::vector<std::vector<std::string>>& header_tokens,
                                 const Vocabulary& vocab, int max_len) {
  if (utterance_tokens.empty()) throw ValidationError("build_input: empty utterance");
  if (header_tokens.empty()) throw ValidationError("build_input: no headers");
  std::size_t longest_header = 0;
  std::size_t required = 2 + utterance_tokens.size() + 1;  // CLS NONE u... SEP
  for (const auto& h : header_tokens) {
    if (h.empty()) throw ValidationError("build_input: header with no tokens");
    required += h.size() + 1;
    longest_header = std::max(longest_header, h.size());
  }
  const std::size_t max_position = 2 + utterance_tokens.size() + 1 + longest_header + 1;
  if (required > static_cast<std::size_t>(max_len) || max_position > static_cast<std::size_t>(max_len)) {
    throw ValidationError("build_input: input requires " + std::to_string(std::max(required, max_position)) +
                          " positions, maximum is " + std::to_string(max_len));
  }
  InputEncoding enc;
  enc.utterance_len = static_cast<int>(utterance_tokens.size());
  auto push = [&](int id, int seg, int pos) {
    enc.token_ids.push_back(id);
    enc.segment_ids.push_back(seg);
    enc.position_ids.push_back(pos);
  };
  push(Vocabulary::kCls, 0, 0);
  push(Vocabulary::kNone, 0, 1);
  enc.utterance_positions.push_back(1);
  int pos = 2;
  for (const auto& tok : utterance_tokens) {
    enc.utterance_positions.push_back(static_cast<int>(enc.token_ids.size()));
    push(vocab.id(tok), 0, pos++);
  }
  push(Vocabulary::kSep, 0, pos++);
  const int header_base = pos;
  for (const auto& header : header_tokens) {
    std::vector<int> positions;
    int hpos = header_base;
    for (const auto& tok : header) {
      positions.push_back(static_cast<int>(enc.token_ids.size()));
      push(vocab.id(tok), 1, hpos++);
    }
    push(Vocabulary::kSep, 0, hpos);
    enc.header_positions.push_back(std::move(positions));
  }
  return enc;
}

// The Text-to-SQL network. Parameters named "phi.*" form the span-alignment
// subnetwork shared by pretraining and fine-tuning (embeddings, transformer
// blocks, span head); "slot.*" heads complete the supervised model.
template <typename Real>
class Model {
 public:
  using Tensor = TensorT<Real>;
  using Parameter = ParameterT<Real>;

  Model(EncoderConfig cfg, std::uint64_t vocab_hash, std::uint64_t init_seed)
      : config_(cfg), vocab_hash_(vocab_hash), init_seed_(init_seed) {
    cfg.validate();
    const int d = cfg.dim;
    add_weight("phi.emb.tok", cfg.vocab_size, d);
    add_weight("phi.emb.pos", cfg.max_len, d);
    add_weight("phi.emb.seg", 2, d);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string b = "phi.block" + std::to_string(l) + ".";
      add_gain(b + "ln1.gamma", d);
      add_bias(b + "ln1.beta", d);
      add_weight(b + "attn.wq", d, d);
      add_weight(b + "attn.wk", d, d);
      add_weight(b + "attn.wv", d, d);
      add_weight(b + "attn.wo", d, d);
      add_bias(b + "attn.bq", d);
      // no key bias: a constant shift of every key cancels inside softmax
      add_bias(b + "attn.bv", d);
      add_bias(b + "attn.bo", d);
      add_gain(b + "ln2.gamma", d);
      add_bias(b + "ln2.beta", d);
      add_weight(b + "ffn.w1", d, cfg.ffn);
      add_bias(b + "ffn.b1", cfg.ffn);
      add_weight(b + "ffn.w2", cfg.ffn, d);
      add_bias(b + "ffn.b2", d);
    }
    if (cfg.layers > 0) {
      add_gain("phi.final.gamma", d);
      add_bias("phi.final.beta", d);
    }
    add_weight("phi.span.w_start", d, d);
    add_weight("phi.span.w_end", d, d);
    add_weight("slot.sel.w", d, d);
    add_weight("slot.wcol.w", d, d);
    add_weight("slot.agg.w", d, kNumAggs);
    add_bias("slot.agg.b", kNumAggs);
    add_weight("slot.wcnt.w", d, kNumWhereCounts);
    add_bias("slot.wcnt.b", kNumWhereCounts);
    add_weight("slot.op.wh", d, kNumOps);
    add_weight("slot.op.wc", d, kNumOps);
    add_bias("slot.op.b", kNumOps);
  }

  const EncoderConfig& config() const { return config_; }
  std::uint64_t vocab_hash() const { return vocab_hash_; }
  std::uint64_t init_seed() const { return init_seed_; }

  static bool is_phi(const std::string& name) { return name.rfind("phi.", 0) == 0; }

  Parameter& param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return *params_[static_cast<std::size_t>(it->second)];
  }
  const Parameter& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return *params_[static_cast<std::size_t>(it->second)];
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::vector<Parameter*> phi_parameters() {
    std::vector<Parameter*> out;
    for (auto& p : params_) {
      if (is_phi(p->name)) out.push_back(p.get());
    }
    return out;
  }

  std::map<std::string, Tensor> state_dict() const {
    std::map<std::string, Tensor> out;
    for (const auto& p : params_) out.emplace(p->name, p->value);
    return out;
  }

  void load_state(const std::map<std::string, Tensor>& state) {
    for (auto& p : params_) {
      auto it = state.find(p->name);
      if (it == state.end()) throw ValidationError("state dict missing parameter '" + p->name + "'");
      if (!it->second.same_shape(p->value)) {
        throw ValidationError("state dict parameter '" + p->name + "' shape " + it->second.shape() +
                              " vs model " + p->value.shape());
      }
      p->value = it->second;
    }
  }

  void zero_grads() {
    for (auto& p : params_) p->zero_grad();
  }

  // One example's forward graph plus the node handles later stages read.
  struct Forward {
    Tape<Real> tape;
    InputEncoding enc;
    int hidden = -1;          // T x d
    int cls = -1;             // 1 x d
    int header_summary = -1;  // M x d, row j = mean of header-j token states
  };

  // Dropout is active iff dropout_rng is non-null (train mode); eval passes
  // are deterministic.
  Forward encode(const InputEncoding& enc, Rng* dropout_rng = nullptr) {
    if (enc.seq_len() > config_.max_len) {
      throw ValidationError("encode: sequence length " + std::to_string(enc.seq_len()) +
                            " exceeds max length " + std::to_string(config_.max_len));
    }
    Forward f;
    f.enc = enc;
    Tape<Real>& tape = f.tape;
    const int tok_e = tape.embedding(tape.param(param("phi.emb.tok")), enc.token_ids);
    const int pos_e = tape.embedding(tape.param(param("phi.emb.pos")), enc.position_ids);
    const int seg_e = tape.embedding(tape.param(param("phi.emb.seg")), enc.segment_ids);
    int h = tape.add(tape.add(tok_e, pos_e), seg_e);
    h = tape.dropout(h, config_.dropout, dropout_rng);

    const int d = config_.dim;
    const int dh = d / config_.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    // pre-LN blocks: x + MHA(LN(x)), x + FFN(LN(x)), then one final LN
    for (int l = 0; l < config_.layers; ++l) {
      const std::string b = "phi.block" + std::to_string(l) + ".";
      const int a_in = tape.layer_norm(h, tape.param(param(b + "ln1.gamma")), tape.param(param(b + "ln1.beta")));
      const int q = tape.add_row(tape.matmul(a_in, tape.param(param(b + "attn.wq"))), tape.param(param(b + "attn.bq")));
      const int k = tape.matmul(a_in, tape.param(param(b + "attn.wk")));
      const int v = tape.add_row(tape.matmul(a_in, tape.param(param(b + "attn.wv"))), tape.param(param(b + "attn.bv")));
      std::vector<int> head_outputs;
      for (int head = 0; head < config_.heads; ++head) {
        const int c0 = head * dh;
        const int c1 = c0 + dh;
        const int qh = tape.slice_cols(q, c0, c1);
        const int kh = tape.slice_cols(k, c0, c1);
        const int vh = tape.slice_cols(v, c0, c1);
        const int scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dh);
        const int probs = tape.softmax_rows(scores);
        head_outputs.push_back(tape.matmul(probs, vh));
      }
      int attn = tape.concat_cols(head_outputs);
      attn = tape.add_row(tape.matmul(attn, tape.param(param(b + "attn.wo"))), tape.param(param(b + "attn.bo")));
      attn = tape.dropout(attn, config_.dropout, dropout_rng);
      h = tape.add(h, attn);
      const int f_in = tape.layer_norm(h, tape.param(param(b + "ln2.gamma")), tape.param(param(b + "ln2.beta")));
      int ff = tape.add_row(tape.matmul(f_in, tape.param(param(b + "ffn.w1"))), tape.param(param(b + "ffn.b1")));
      ff = tape.gelu(ff);
      ff = tape.add_row(tape.matmul(ff, tape.param(param(b + "ffn.w2"))), tape.param(param(b + "ffn.b2")));
      ff = tape.dropout(ff, config_.dropout, dropout_rng);
      h = tape.add(h, ff);
    }
    if (config_.layers > 0) {
      h = tape.layer_norm(h, tape.param(param("phi.final.gamma")), tape.param(param("phi.final.beta")));
    }
    f.hidden = h;
    f.cls = tape.slice_rows(h, 0, 1);
    std::vector<int> summaries;
    summaries.reserve(enc.header_positions.size());
    for (const auto& positions : enc.header_positions) {
      summaries.push_back(tape.rows_mean(h, positions));
    }
    f.header_summary = tape.concat_rows(summaries);
    return f;
  }

  // Span logits over the whole sequence, M x T; row j scores header j against
  // every position. The utterance mask restricts them to valid targets.
  struct SpanNodes {
    int start = -1;
    int end = -1;
  };
  SpanNodes span_logit_nodes(Forward& f) {
    Tape<Real>& tape = f.tape;
    SpanNodes out;
    out.start = tape.matmul_nt(tape.matmul(f.header_summary, tape.param(param("phi.span.w_start"))), f.hidden);
    out.end = tape.matmul_nt(tape.matmul(f.header_summary, tape.param(param("phi.span.w_end"))), f.hidden);
    return out;
  }

  struct SlotNodes {
    int sel = -1;     // 1 x M
    int agg = -1;     // 1 x aggs
    int wcount = -1;  // 1 x counts
    int wcol = -1;    // 1 x M
    int op = -1;      // M x ops
    SpanNodes span;   // the shared span head
  };
  SlotNodes slot_logit_nodes(Forward& f) {
    Tape<Real>& tape = f.tape;
    SlotNodes out;
    out.sel = tape.matmul_nt(tape.matmul(f.cls, tape.param(param("slot.sel.w"))), f.header_summary);
    out.wcol = tape.matmul_nt(tape.matmul(f.cls, tape.param(param("slot.wcol.w"))), f.header_summary);
    out.agg = tape.add(tape.matmul(f.cls, tape.param(param("slot.agg.w"))), tape.param(param("slot.agg.b")));
    out.wcount = tape.add(tape.matmul(f.cls, tape.param(param("slot.wcnt.w"))), tape.param(param("slot.wcnt.b")));
    const int op_h = tape.matmul(f.header_summary, tape.param(param("slot.op.wh")));
    const int op_c = tape.add(tape.matmul(f.cls, tape.param(param("slot.op.wc"))), tape.param(param("slot.op.b")));
    out.op = tape.add_row(op_h, op_c);
    out.span = span_logit_nodes(f);
    return out;
  }

  // Eval-mode span distribution support, mask coordinates (0 = NONE).
  struct EvalSpans {
    std::vector<std::vector<double>> start;  // M x (L+1)
    std::vector<std::vector<double>> end;
  };
  EvalSpans eval_span_logits(const InputEncoding& enc) {
    Forward f = encode(enc);
    SpanNodes nodes = span_logit_nodes(f);
    return extract_spans(f, nodes);
  }

  SlotLogits eval_slots(const InputEncoding& enc) {
    Forward f = encode(enc);
    SlotNodes nodes = slot_logit_nodes(f);
    SlotLogits out;
    const auto& sel = f.tape.val(nodes.sel);
    const auto& agg = f.tape.val(nodes.agg);
    const auto& wcount = f.tape.val(nodes.wcount);
    const auto& wcol = f.tape.val(nodes.wcol);
    const auto& op = f.tape.val(nodes.op);
    for (int j = 0; j < sel.cols; ++j) out.sel.push_back(static_cast<double>(sel.at(0, j)));
    for (int j = 0; j < agg.cols; ++j) out.agg.push_back(static_cast<double>(agg.at(0, j)));
    for (int j = 0; j < wcount.cols; ++j) out.where_count.push_back(static_cast<double>(wcount.at(0, j)));
    for (int j = 0; j < wcol.cols; ++j) out.where_col.push_back(static_cast<double>(wcol.at(0, j)));
    for (int i = 0; i < op.rows; ++i) {
      std::vector<double> row;
      for (int j = 0; j < op.cols; ++j) row.push_back(static_cast<double>(op.at(i, j)));
      out.op.push_back(std::move(row));
    }
    EvalSpans spans = extract_spans(f, nodes.span);
    out.start = std::move(spans.start);
    out.end = std::move(spans.end);
    return out;
  }

 private:
  EvalSpans extract_spans(Forward& f, const SpanNodes& nodes) {
    EvalSpans out;
    const auto& start = f.tape.val(nodes.start);
    const auto& end = f.tape.val(nodes.end);
    for (int j = 0; j < start.rows; ++j) {
      std::vector<double> s;
      std::vector<double> e;
      s.reserve(f.enc.utterance_positions.size());
      e.reserve(f.enc.utterance_positions.size());
      for (int pos : f.enc.utterance_positions) {
        s.push_back(static_cast<double>(start.at(j, pos)));
        e.push_back(static_cast<double>(end.at(j, pos)));
      }
      out.start.push_back(std::move(s));
      out.end.push_back(std::move(e));
    }
    return out;
  }

  void add_param(const std::string& name, int rows, int cols, int kind) {
    auto p = std::make_unique<Parameter>(name, rows, cols);
    Rng rng = Rng::derive(init_seed_, fnv1a64(name));
    for (Real& v : p->value.data) {
      switch (kind) {
        case 0: v = static_cast<Real>(rng.normal(0.0, 0.02)); break;  // weight
        case 1: v = Real(0); break;                                   // bias
        default: v = Real(1); break;                                  // layer-norm gain
      }
    }
    index_.emplace(name, static_cast<int>(params_.size()));
    params_.push_back(std::move(p));
  }
  void add_weight(const std::string& name, int rows, int cols) { add_param(name, rows, cols, 0); }
  void add_bias(const std::string& name, int cols) { add_param(name, 1, cols, 1); }
  void add_gain(const std::string& name, int cols) { add_param(name, 1, cols, 2); }

  EncoderConfig config_;
  std::uint64_t vocab_hash_ = 0;
  std::uint64_t init_seed_ = 0;
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, int> index_;
};

// Input packing for a labeled question against its table.
inline InputEncoding encode_question(const TokenizedText& question, const Table& table,
                                     const Vocabulary& vocab, int max_len) {
  std::vector<std::vector<std::string>> header_tokens;
  header_tokens.reserve(table.headers.size());
  for (const auto& h : table.headers) header_tokens.push_back(tokenize(h).tokens);
  return build_input(question.tokens, header_tokens, vocab, max_len);
}

}  // namespace tabalign
