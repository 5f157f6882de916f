#pragma once

#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tabalign/common.hpp"
#include "tabalign/encoder.hpp"
#include "tabalign/optim.hpp"
#include "tabalign/sampler.hpp"
#include "tabalign/table.hpp"
#include "tabalign/text.hpp"

namespace tabalign {

enum class TrainStage { Pretrain, Finetune };

struct TrainConfig {
  TrainStage stage = TrainStage::Pretrain;
  int epochs = 3;  // pretraining default; fine-tuning defaults to 30
  int batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  SamplingMethod method = SamplingMethod::RandomOrder;
  double p_swap = kDefaultPSwap;
  int log_interval = 25;
  int early_stop_patience = 0;  // 0 disables best-eval early stopping
  std::string checkpoint_path;  // empty disables checkpointing
  bool quiet = true;

  void validate() const {
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train config: batch size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train config: lr must be positive");
    if (p_swap < 0.0 || p_swap > 1.0) throw ConfigError("train config: p_swap must be in [0, 1]");
  }
};

struct TrainReport {
  std::vector<double> step_losses;
  std::vector<double> epoch_mean_losses;
  double wall_clock_sec = 0.0;
  std::string final_checkpoint;
  std::uint64_t seed = 0;
  long long skipped_examples = 0;
  long long unlocatable_values = 0;
  int best_epoch = -1;  // set when early stopping tracked an eval split

  nlohmann::json to_json() const {
    return nlohmann::json{{"step_losses", step_losses},
                          {"epoch_mean_losses", epoch_mean_losses},
                          {"wall_clock_sec", wall_clock_sec},
                          {"final_checkpoint", final_checkpoint},
                          {"seed", seed},
                          {"skipped_examples", skipped_examples},
                          {"unlocatable_values", unlocatable_values},
                          {"best_epoch", best_epoch}};
  }
};

namespace train_detail {

inline std::vector<std::uint8_t> utterance_mask(const InputEncoding& enc) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(enc.seq_len()), 0);
  for (int pos : enc.utterance_positions) mask[static_cast<std::size_t>(pos)] = 1;
  return mask;
}

// Sequence position of a mask coordinate (0 = NONE sentinel).
inline int mask_to_position(const InputEncoding& enc, int mask_index) {
  return enc.utterance_positions[static_cast<std::size_t>(mask_index)];
}

}  // namespace train_detail

struct LossValue {
  double value = 0.0;
  long long skipped = 0;
  long long unlocatable = 0;
};

// Mean over the batch of the per-example sum of start/end cross-entropies,
// one pair per sampled header. Absent gold spans target the NONE sentinel.
// When `accumulate_grads` is set, parameter gradients of the mean are added
// to the model's parameters. Unencodable examples are skipped with a count;
// a fully skipped batch is an error.
template <typename Real>
LossValue selfsup_loss(Model<Real>& model, const std::vector<PseudoUtterance>& batch,
                       const std::map<std::string, const Table*>& sampling_tables, const Vocabulary& vocab,
                       bool accumulate_grads, Rng* dropout_rng = nullptr) {
  if (batch.empty()) throw ConfigError("selfsup_loss: empty batch");
  struct Prepared {
    const PseudoUtterance* pu;
    InputEncoding enc;
  };
  std::vector<Prepared> prepared;
  long long skipped = 0;
  for (const auto& pu : batch) {
    auto it = sampling_tables.find(pu.source_table_id);
    if (it == sampling_tables.end()) {
      throw ValidationError("selfsup_loss: unknown source table '" + pu.source_table_id + "'");
    }
    const Table& t = *it->second;
    std::vector<std::vector<std::string>> header_tokens;
    header_tokens.reserve(t.headers.size());
    for (const auto& h : t.headers) header_tokens.push_back(tokenize(h).tokens);
    try {
      prepared.push_back({&pu, build_input(pu.tokens.tokens, header_tokens, vocab, model.config().max_len)});
    } catch (const ValidationError&) {
      ++skipped;
    }
  }
  if (prepared.empty()) throw ValidationError("selfsup_loss: every example in the batch was unencodable");

  const double inv_batch = 1.0 / static_cast<double>(prepared.size());
  LossValue out;
  out.skipped = skipped;
  for (const auto& ex : prepared) {
    auto f = model.encode(ex.enc, dropout_rng);
    auto span = model.span_logit_nodes(f);
    const auto mask = train_detail::utterance_mask(ex.enc);
    std::vector<int> terms;
    for (std::size_t k = 0; k < ex.pu->header_indices.size(); ++k) {
      const int header = ex.pu->header_indices[k];
      const auto& gold = ex.pu->gold_spans[k];
      const int start_target =
          gold ? train_detail::mask_to_position(ex.enc, gold->start + 1) : train_detail::mask_to_position(ex.enc, 0);
      const int end_target =
          gold ? train_detail::mask_to_position(ex.enc, gold->end + 1) : train_detail::mask_to_position(ex.enc, 0);
      terms.push_back(f.tape.cross_entropy_row(span.start, header, start_target, mask));
      terms.push_back(f.tape.cross_entropy_row(span.end, header, end_target, mask));
    }
    if (terms.empty()) continue;
    const int example_loss = f.tape.add_n(terms);
    const int scaled = f.tape.scale(example_loss, inv_batch);
    out.value += static_cast<double>(f.tape.val(scaled).data[0]);
    if (accumulate_grads) f.tape.backward(scaled);
  }
  if (!std::isfinite(out.value)) throw NumericError("selfsup_loss: non-finite loss");
  return out;
}

// Mean over the batch of the summed slot cross-entropies: sel, agg,
// where-count, and per condition column/operator/value-span terms. Condition
// values that cannot be located in the utterance contribute every term except
// the value span (counted in `unlocatable`).
template <typename Real>
LossValue supervised_loss(Model<Real>& model, const std::vector<LabeledExample>& batch, const TableMap& tables,
                          const Vocabulary& vocab, bool accumulate_grads, Rng* dropout_rng = nullptr) {
  if (batch.empty()) throw ConfigError("supervised_loss: empty batch");
  struct Prepared {
    const LabeledExample* ex;
    TokenizedText question;
    InputEncoding enc;
  };
  std::vector<Prepared> prepared;
  long long skipped = 0;
  for (const auto& ex : batch) {
    auto it = tables.find(ex.table_id);
    if (it == tables.end()) throw ValidationError("supervised_loss: unknown table '" + ex.table_id + "'");
    TokenizedText question = tokenize(ex.question);
    try {
      InputEncoding enc = encode_question(question, it->second, vocab, model.config().max_len);
      prepared.push_back({&ex, std::move(question), std::move(enc)});
    } catch (const ValidationError&) {
      ++skipped;
    }
  }
  if (prepared.empty()) throw ValidationError("supervised_loss: every example in the batch was unencodable");

  const double inv_batch = 1.0 / static_cast<double>(prepared.size());
  LossValue out;
  out.skipped = skipped;
  for (const auto& p : prepared) {
    auto f = model.encode(p.enc, dropout_rng);
    auto slots = model.slot_logit_nodes(f);
    const auto mask = train_detail::utterance_mask(p.enc);
    const SqlStatement& sql = p.ex->sql;
    std::vector<int> terms;
    terms.push_back(f.tape.cross_entropy_row(slots.sel, 0, sql.sel));
    terms.push_back(f.tape.cross_entropy_row(slots.agg, 0, static_cast<int>(sql.agg)));
    terms.push_back(f.tape.cross_entropy_row(slots.wcount, 0, static_cast<int>(sql.conds.size())));
    for (const auto& cond : sql.conds) {
      terms.push_back(f.tape.cross_entropy_row(slots.wcol, 0, cond.column));
      terms.push_back(f.tape.cross_entropy_row(slots.op, cond.column, static_cast<int>(cond.op)));
      const auto span = locate_span(p.question, cond.value);
      if (!span) {
        ++out.unlocatable;
        continue;
      }
      const int start_target = train_detail::mask_to_position(p.enc, span->start + 1);
      const int end_target = train_detail::mask_to_position(p.enc, span->end + 1);
      terms.push_back(f.tape.cross_entropy_row(slots.span.start, cond.column, start_target, mask));
      terms.push_back(f.tape.cross_entropy_row(slots.span.end, cond.column, end_target, mask));
    }
    const int example_loss = f.tape.add_n(terms);
    const int scaled = f.tape.scale(example_loss, inv_batch);
    out.value += static_cast<double>(f.tape.val(scaled).data[0]);
    if (accumulate_grads) f.tape.backward(scaled);
  }
  if (!std::isfinite(out.value)) throw NumericError("supervised_loss: non-finite loss");
  return out;
}

// ---- checkpoints ------------------------------------------------------------

constexpr const char* kCheckpointMagic = "tabalign-checkpoint";
constexpr int kCheckpointVersion = 1;

// Single CBOR file: format version, encoder config, vocabulary hash, model
// init seed, and every named tensor as raw little-endian float64 bytes.
template <typename Real>
void checkpoint_save(const Model<Real>& model, const std::string& path) {
  nlohmann::json j;
  j["magic"] = kCheckpointMagic;
  j["version"] = kCheckpointVersion;
  j["config"] = model.config().to_json();
  j["vocab_hash"] = hex64(model.vocab_hash());
  j["init_seed"] = model.init_seed();
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, tensor] : model.state_dict()) {
    std::vector<std::uint8_t> bytes(tensor.data.size() * sizeof(double));
    for (std::size_t i = 0; i < tensor.data.size(); ++i) {
      const double v = static_cast<double>(tensor.data[i]);
      if (!std::isfinite(v)) throw NumericError("checkpoint_save: non-finite value in '" + name + "'");
      std::memcpy(bytes.data() + i * sizeof(double), &v, sizeof(double));
    }
    params.push_back({{"name", name},
                      {"rows", tensor.rows},
                      {"cols", tensor.cols},
                      {"data", nlohmann::json::binary(std::move(bytes))}});
  }
  j["params"] = std::move(params);
  const auto blob = nlohmann::json::to_cbor(j);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("short write on checkpoint: " + path);
}

template <typename Real>
Model<Real> checkpoint_load(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j = nlohmann::json::from_cbor(blob, true, false);
  if (j.is_discarded() || !j.is_object() || j.value("magic", "") != kCheckpointMagic) {
    throw ParseError("not a checkpoint file: " + path);
  }
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw ValidationError("checkpoint version mismatch: file has " + j.at("version").dump() + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  if (j.at("vocab_hash").get<std::string>() != hex64(vocab.hash())) {
    throw ValidationError("checkpoint vocabulary hash mismatch (file " + j.at("vocab_hash").get<std::string>() +
                          ", current vocabulary " + hex64(vocab.hash()) + ")");
  }
  EncoderConfig cfg = EncoderConfig::from_json(j.at("config"));
  if (cfg.vocab_size != vocab.size()) {
    throw ValidationError("checkpoint vocab size " + std::to_string(cfg.vocab_size) + " vs vocabulary " +
                          std::to_string(vocab.size()));
  }
  Model<Real> model(cfg, vocab.hash(), j.at("init_seed").get<std::uint64_t>());
  std::map<std::string, TensorT<Real>> state;
  for (const auto& pj : j.at("params")) {
    const std::string name = pj.at("name").get<std::string>();
    TensorT<Real> t(pj.at("rows").get<int>(), pj.at("cols").get<int>());
    const auto& bytes = pj.at("data").get_binary();
    if (bytes.size() != t.data.size() * sizeof(double)) {
      throw ParseError("checkpoint tensor '" + name + "' has wrong byte length");
    }
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      double v = 0;
      std::memcpy(&v, bytes.data() + i * sizeof(double), sizeof(double));
      t.data[i] = static_cast<Real>(v);
    }
    state.emplace(name, std::move(t));
  }
  model.load_state(state);
  return model;
}

// ---- training loops ---------------------------------------------------------

namespace train_detail {

inline void log_step(const TrainConfig& cfg, const char* stage, int epoch, long long step, double loss) {
  if (cfg.quiet || cfg.log_interval <= 0 || step % cfg.log_interval != 0) return;
  std::fprintf(stderr, "[%s] epoch %d step %lld loss %.6f\n", stage, epoch, step, loss);
}

}  // namespace train_detail

// Self-supervised stage: cfg.epochs passes over every usable (table, row)
// pair in seeded shuffled order. Only phi-named parameters are updated.
template <typename Real>
TrainReport pretrain(Model<Real>& model, const TableMap& tables, const TrainConfig& cfg, const Vocabulary& vocab) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Table> sampling = usable_sampling_tables(tables);
  if (sampling.empty()) throw ValidationError("pretrain: no usable tables");
  std::map<std::string, const Table*> by_id;
  for (const auto& t : sampling) by_id.emplace(t.id, &t);

  std::vector<std::pair<int, int>> pairs;
  for (std::size_t ti = 0; ti < sampling.size(); ++ti) {
    for (int r = 0; r < sampling[ti].n_rows(); ++r) {
      if (!sampler_detail::usable_columns(sampling[ti], r).empty()) {
        pairs.emplace_back(static_cast<int>(ti), r);
      }
    }
  }
  if (pairs.empty()) throw ValidationError("pretrain: no usable (table, row) pairs");

  AdamState<Real> adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  auto phi = model.phi_parameters();
  TrainReport report;
  report.seed = cfg.seed;
  long long global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = Rng::derive(cfg.seed, 0x5e1f0000ULL + static_cast<std::uint64_t>(epoch));
    auto order = pairs;
    epoch_rng.shuffle(order);
    double epoch_sum = 0.0;
    long long epoch_steps = 0;
    for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t hi = std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
      std::vector<PseudoUtterance> batch;
      batch.reserve(hi - off);
      for (std::size_t i = off; i < hi; ++i) {
        const Table& t = sampling[static_cast<std::size_t>(order[i].first)];
        batch.push_back(sample_pseudo_utterance(t, order[i].second, cfg.method, epoch_rng, &sampling, cfg.p_swap));
      }
      Rng dropout_rng = Rng::derive(cfg.seed, 0xd20000ULL + static_cast<std::uint64_t>(global_step));
      const LossValue loss = selfsup_loss(model, batch, by_id, vocab, true, &dropout_rng);
      report.skipped_examples += loss.skipped;
      adam_step(phi, adam);
      report.step_losses.push_back(loss.value);
      epoch_sum += loss.value;
      ++epoch_steps;
      ++global_step;
      train_detail::log_step(cfg, "pretrain", epoch, global_step, loss.value);
    }
    report.epoch_mean_losses.push_back(epoch_sum / static_cast<double>(epoch_steps));
    if (!cfg.checkpoint_path.empty()) {
      checkpoint_save(model, cfg.checkpoint_path);
      report.final_checkpoint = cfg.checkpoint_path;
    }
  }
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// Supervised stage: updates all of theta (phi plus slot heads). When an eval
// split and patience are provided, tracks best eval logical-form accuracy,
// restores the best parameters at the end, and stops early after `patience`
// epochs without improvement. The eval scorer is supplied by the caller to
// keep this header independent of the decoder.
template <typename Real>
TrainReport finetune(Model<Real>& model, const std::vector<LabeledExample>& examples, const TableMap& tables,
                     const TrainConfig& cfg, const Vocabulary& vocab,
                     const std::type_identity_t<std::function<double(Model<Real>&)>>& eval_score = nullptr) {
  cfg.validate();
  if (examples.empty()) throw ValidationError("finetune: no labeled examples");
  const auto t0 = std::chrono::steady_clock::now();
  AdamState<Real> adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  auto params = model.parameters();
  TrainReport report;
  report.seed = cfg.seed;
  long long global_step = 0;
  double best_score = -1.0;
  std::map<std::string, TensorT<Real>> best_state;
  int epochs_since_best = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = Rng::derive(cfg.seed, 0xf17e0000ULL + static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    epoch_rng.shuffle(order);
    double epoch_sum = 0.0;
    long long epoch_steps = 0;
    for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t hi = std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
      std::vector<LabeledExample> batch;
      batch.reserve(hi - off);
      for (std::size_t i = off; i < hi; ++i) batch.push_back(examples[order[i]]);
      Rng dropout_rng = Rng::derive(cfg.seed, 0xd30000ULL + static_cast<std::uint64_t>(global_step));
      const LossValue loss = supervised_loss(model, batch, tables, vocab, true, &dropout_rng);
      report.skipped_examples += loss.skipped;
      report.unlocatable_values += loss.unlocatable;
      adam_step(params, adam);
      report.step_losses.push_back(loss.value);
      epoch_sum += loss.value;
      ++epoch_steps;
      ++global_step;
      train_detail::log_step(cfg, "finetune", epoch, global_step, loss.value);
    }
    report.epoch_mean_losses.push_back(epoch_sum / static_cast<double>(epoch_steps));
    if (!cfg.checkpoint_path.empty()) {
      checkpoint_save(model, cfg.checkpoint_path);
      report.final_checkpoint = cfg.checkpoint_path;
    }
    if (eval_score && cfg.early_stop_patience > 0) {
      const double score = eval_score(model);
      if (score > best_score) {
        best_score = score;
        best_state = model.state_dict();
        report.best_epoch = epoch;
        epochs_since_best = 0;
      } else if (++epochs_since_best >= cfg.early_stop_patience) {
        break;
      }
    }
  }
  if (!best_state.empty()) {
    model.load_state(best_state);
    if (!cfg.checkpoint_path.empty()) checkpoint_save(model, cfg.checkpoint_path);
  }
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace tabalign
