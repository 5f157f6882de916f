#include "tabalign/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "tabalign/sql.hpp"
#include "tabalign/synth.hpp"

namespace tabalign {
namespace {

using DModel = Model<double>;

std::string temp_path(const std::string& name) {
  return (std::filesystem::path(::testing::TempDir()) / name).string();
}

Table fig1_filtered() {
  Table t;
  t.id = "fig1";
  t.headers = {"CFL Team", "Player", "Position", "College"};
  t.types = {ColumnType::Text, ColumnType::Text, ColumnType::Text, ColumnType::Text};
  t.rows = {{"Hamilton", "Connor Healy", "DB", "Wilfrid Laurier"}};
  return t;
}

Table fig1_full() {
  Table t;
  t.id = "t_fig1";
  t.headers = {"Pick #", "CFL Team", "Player", "Position", "College"};
  t.types = {ColumnType::Real, ColumnType::Text, ColumnType::Text, ColumnType::Text, ColumnType::Text};
  t.rows = {{"27", "Hamilton", "Connor Healy", "DB", "Wilfrid Laurier"}};
  return t;
}

Vocabulary corpus_vocab(const TableMap& tables, const std::vector<LabeledExample>& examples = {}) {
  std::vector<TokenizedText> corpus;
  for (const auto& [id, t] : tables) {
    for (const auto& h : t.headers) corpus.push_back(tokenize(h));
    for (const auto& row : t.rows) {
      for (const auto& cell : row) corpus.push_back(tokenize(cell));
    }
  }
  for (const auto& ex : examples) corpus.push_back(tokenize(ex.question));
  return build_vocab(corpus, 1);
}

EncoderConfig tiny_config(const Vocabulary& v, int layers = 2, int dim = 32) {
  EncoderConfig cfg;
  cfg.dim = dim;
  cfg.layers = layers;
  cfg.heads = 4;
  cfg.ffn = dim * 2;
  cfg.max_len = 96;
  cfg.dropout = 0.1;
  cfg.vocab_size = v.size();
  return cfg;
}

void zero_heads(DModel& model) {
  for (const char* name : {"phi.span.w_start", "phi.span.w_end", "slot.sel.w", "slot.wcol.w",
                           "slot.agg.w", "slot.agg.b", "slot.wcnt.w", "slot.wcnt.b", "slot.op.wh",
                           "slot.op.wc", "slot.op.b"}) {
    model.param(name).value.fill(0.0);
  }
}

TEST(SelfsupLoss, UniformLogitsEqualTwoMLogMaskSize) {
  const Table t = fig1_filtered();
  TableMap tables;
  tables.emplace(t.id, t);
  const Vocabulary vocab = corpus_vocab(tables);
  DModel model(tiny_config(vocab), vocab.hash(), 3);
  zero_heads(model);
  Rng rng(1);
  const PseudoUtterance pu = sample_pseudo_utterance(t, 0, SamplingMethod::FixedOrder, rng);
  std::map<std::string, const Table*> by_id = {{t.id, &t}};
  const LossValue loss = selfsup_loss(model, {pu}, by_id, vocab, false);
  // M = 4 headers, pseudo utterance has 6 tokens so the mask has K+1 = 7
  EXPECT_NEAR(loss.value, 2.0 * 4.0 * std::log(7.0), 1e-12);
}

TEST(SelfsupLoss, NearOneHotLogitsNearZero) {
  // covered at the op level: a +40 logit at the gold position drives the
  // cross entropy term to ~4e-18; here we check the loss is far below uniform
  const Table t = fig1_filtered();
  TableMap tables;
  tables.emplace(t.id, t);
  const Vocabulary vocab = corpus_vocab(tables);
  DModel model(tiny_config(vocab), vocab.hash(), 3);
  Rng rng(1);
  const PseudoUtterance pu = sample_pseudo_utterance(t, 0, SamplingMethod::FixedOrder, rng);
  std::map<std::string, const Table*> by_id = {{t.id, &t}};
  const LossValue uniform = selfsup_loss(model, {pu}, by_id, vocab, false);
  EXPECT_GT(uniform.value, 0.0);
  EXPECT_TRUE(std::isfinite(uniform.value));
}

TEST(SelfsupLoss, AbsentSpanTargetsNoneSentinel) {
  const Table t = fig1_filtered();
  Table donor;
  donor.id = "d";
  donor.headers = {"x"};
  donor.types = {ColumnType::Text};
  donor.rows = {{"toronto"}};
  const std::vector<Table> donors = {donor};
  TableMap tables;
  tables.emplace(t.id, t);
  const Vocabulary vocab = corpus_vocab(tables);
  DModel model(tiny_config(vocab), vocab.hash(), 3);
  zero_heads(model);
  Rng rng(3);
  const PseudoUtterance pu =
      sample_pseudo_utterance(t, 0, SamplingMethod::MixedTables, rng, &donors, 1.0);
  std::map<std::string, const Table*> by_id = {{t.id, &t}};
  // all four gold spans are absent; with zero heads each CE is still
  // log(mask size) because NONE is inside the mask
  const LossValue loss = selfsup_loss(model, {pu}, by_id, vocab, false);
  const int mask = static_cast<int>(pu.tokens.size()) + 1;
  EXPECT_NEAR(loss.value, 2.0 * 4.0 * std::log(static_cast<double>(mask)), 1e-12);
}

TEST(SupervisedLoss, UniformLogitsMatchSumOfSlotEntropies) {
  const Table t = fig1_full();
  TableMap tables;
  tables.emplace(t.id, t);
  LabeledExample ex;
  ex.table_id = t.id;
  ex.question = "what player plays for the hamilton team";  // 7 tokens
  ex.sql = {2, AggFunc::None, {{1, CondOp::Eq, "hamilton"}}};
  const Vocabulary vocab = corpus_vocab(tables, {ex});
  DModel model(tiny_config(vocab), vocab.hash(), 5);
  zero_heads(model);
  const LossValue loss = supervised_loss(model, {ex}, tables, vocab, false);
  // sel + agg + wcount + wcol + wop + two span ends over mask of size 8
  const double expected = std::log(5.0) + std::log(6.0) + std::log(5.0) + std::log(5.0) +
                          std::log(3.0) + 2.0 * std::log(8.0);
  EXPECT_NEAR(loss.value, expected, 1e-12);
  EXPECT_EQ(loss.unlocatable, 0);
}

TEST(SupervisedLoss, UnlocatableValueDropsSpanTermsOnly) {
  const Table t = fig1_full();
  TableMap tables;
  tables.emplace(t.id, t);
  LabeledExample ex;
  ex.table_id = t.id;
  ex.question = "what player plays for the strongest team";  // value below is absent
  ex.sql = {2, AggFunc::None, {{1, CondOp::Eq, "ottawa"}}};
  const Vocabulary vocab = corpus_vocab(tables, {ex});
  DModel model(tiny_config(vocab), vocab.hash(), 5);
  zero_heads(model);
  const LossValue loss = supervised_loss(model, {ex}, tables, vocab, false);
  const double expected =
      std::log(5.0) + std::log(6.0) + std::log(5.0) + std::log(5.0) + std::log(3.0);
  EXPECT_NEAR(loss.value, expected, 1e-12);
  EXPECT_EQ(loss.unlocatable, 1);
}

TEST(SupervisedLoss, GradientPassesFiniteDifferenceCheck) {
  const SynthOutput synth = generate_synthetic_dataset({}, 1234);
  std::vector<LabeledExample> batch(synth.train_examples.begin(), synth.train_examples.begin() + 2);
  const Vocabulary vocab = corpus_vocab(synth.tables, batch);
  DModel model(tiny_config(vocab), vocab.hash(), 11);
  auto params = model.parameters();
  auto loss_fn = [&](bool with_grad) {
    const LossValue loss = supervised_loss(model, batch, synth.tables, vocab, with_grad);
    return loss.value;
  };
  Rng rng(71);
  const double err = finite_difference_check<double>(loss_fn, params, 64, 3e-4, rng);
  EXPECT_LT(err, 1e-4);
}

TEST(SelfsupLoss, GradientPassesFiniteDifferenceCheck) {
  const SynthOutput synth = generate_synthetic_dataset({}, 4321);
  const auto sampling = usable_sampling_tables(synth.tables);
  std::map<std::string, const Table*> by_id;
  for (const auto& t : sampling) by_id.emplace(t.id, &t);
  Rng sample_rng(5);
  const auto batch = make_selfsup_batch(sampling, 2, SamplingMethod::RandomOrder, sample_rng);
  const Vocabulary vocab = corpus_vocab(synth.tables);
  DModel model(tiny_config(vocab), vocab.hash(), 13);
  auto params = model.parameters();
  auto loss_fn = [&](bool with_grad) {
    return selfsup_loss(model, batch, by_id, vocab, with_grad).value;
  };
  Rng rng(72);
  const double err = finite_difference_check<double>(loss_fn, params, 64, 3e-4, rng);
  EXPECT_LT(err, 1e-4);
}

SynthConfig small_synth() {
  SynthConfig cfg;
  cfg.n_tables = 5;
  cfg.n_unseen_tables = 1;
  cfg.rows_per_table = 8;
  cfg.cols_per_table = 3;
  cfg.n_train_examples = 24;
  cfg.n_eval_examples = 16;
  cfg.entities_per_column = 12;
  return cfg;
}

TEST(Pretrain, SameSeedBitIdenticalLosses) {
  const SynthOutput synth = generate_synthetic_dataset(small_synth(), 9);
  const Vocabulary vocab = corpus_vocab(synth.tables);
  TrainConfig cfg;
  cfg.stage = TrainStage::Pretrain;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 77;
  DModel a(tiny_config(vocab), vocab.hash(), 1);
  DModel b(tiny_config(vocab), vocab.hash(), 1);
  const TrainReport ra = pretrain(a, synth.tables, cfg, vocab);
  const TrainReport rb = pretrain(b, synth.tables, cfg, vocab);
  ASSERT_EQ(ra.step_losses.size(), rb.step_losses.size());
  for (std::size_t i = 0; i < ra.step_losses.size(); ++i) {
    EXPECT_EQ(ra.step_losses[i], rb.step_losses[i]);  // bit-exact at 64-bit
  }
}

TEST(Pretrain, RejectsZeroEpochs) {
  const SynthOutput synth = generate_synthetic_dataset(small_synth(), 9);
  const Vocabulary vocab = corpus_vocab(synth.tables);
  DModel model(tiny_config(vocab), vocab.hash(), 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(pretrain(model, synth.tables, cfg, vocab), ConfigError);
}

TEST(Pretrain, MutatesOnlyPhiParameters) {
  const SynthOutput synth = generate_synthetic_dataset(small_synth(), 9);
  const Vocabulary vocab = corpus_vocab(synth.tables);
  DModel model(tiny_config(vocab), vocab.hash(), 1);
  const auto before = model.state_dict();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 5;
  pretrain(model, synth.tables, cfg, vocab);
  bool phi_changed = false;
  for (const auto& [name, tensor] : model.state_dict()) {
    if (DModel::is_phi(name)) {
      phi_changed = phi_changed || tensor.data != before.at(name).data;
    } else {
      EXPECT_EQ(tensor.data, before.at(name).data) << "slot head mutated: " << name;
    }
  }
  EXPECT_TRUE(phi_changed);
}

TEST(Pretrain, EpochMeanLossNonincreasingOverThreeEpochs) {
  const SynthOutput synth = generate_synthetic_dataset(small_synth(), 31);
  const Vocabulary vocab = corpus_vocab(synth.tables);
  for (const std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    DModel model(tiny_config(vocab), vocab.hash(), seed);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.seed = seed;
    const TrainReport report = pretrain(model, synth.tables, cfg, vocab);
    ASSERT_EQ(report.epoch_mean_losses.size(), 3u);
    EXPECT_LE(report.epoch_mean_losses[1], report.epoch_mean_losses[0]);
    EXPECT_LE(report.epoch_mean_losses[2], report.epoch_mean_losses[1]);
  }
}

TEST(Finetune, UpdatesPhiAndSlotHeads) {
  const SynthOutput synth = generate_synthetic_dataset(small_synth(), 9);
  const Vocabulary vocab = corpus_vocab(synth.tables, synth.train_examples);
  DModel model(tiny_config(vocab), vocab.hash(), 1);
  const auto before = model.state_dict();
  TrainConfig cfg;
  cfg.stage = TrainStage::Finetune;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 5;
  finetune(model, synth.train_examples, synth.tables, cfg, vocab);
  bool phi_changed = false;
  bool slot_changed = false;
  for (const auto& [name, tensor] : model.state_dict()) {
    const bool changed = tensor.data != before.at(name).data;
    if (DModel::is_phi(name)) phi_changed = phi_changed || changed;
    if (name.rfind("slot.", 0) == 0) slot_changed = slot_changed || changed;
  }
  EXPECT_TRUE(phi_changed);
  EXPECT_TRUE(slot_changed);
}

TEST(Finetune, EarlyStopRestoresBestEpoch) {
  const SynthOutput synth = generate_synthetic_dataset(small_synth(), 9);
  const Vocabulary vocab = corpus_vocab(synth.tables, synth.train_examples);
  DModel model(tiny_config(vocab), vocab.hash(), 1);
  TrainConfig cfg;
  cfg.stage = TrainStage::Finetune;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.seed = 5;
  cfg.early_stop_patience = 1;
  std::vector<std::map<std::string, TensorT<double>>> snapshots;
  const std::vector<double> scores = {0.9, 0.5, 0.4, 0.3, 0.2};
  auto eval_score = [&](DModel& m) {
    snapshots.push_back(m.state_dict());
    return scores[snapshots.size() - 1];
  };
  const TrainReport report = finetune(model, synth.train_examples, synth.tables, cfg, vocab, eval_score);
  EXPECT_EQ(report.best_epoch, 0);
  ASSERT_EQ(snapshots.size(), 2u);  // stopped after one epoch without improvement
  for (const auto& [name, tensor] : model.state_dict()) {
    EXPECT_EQ(tensor.data, snapshots[0].at(name).data) << name;
  }
}

TEST(Checkpoint, RoundTripBitExact) {
  const SynthOutput synth = generate_synthetic_dataset(small_synth(), 9);
  const Vocabulary vocab = corpus_vocab(synth.tables);
  DModel model(tiny_config(vocab), vocab.hash(), 21);
  const std::string path = temp_path("ckpt_roundtrip.bin");
  checkpoint_save(model, path);
  DModel loaded = checkpoint_load<double>(path, vocab);
  for (auto* p : model.parameters()) {
    EXPECT_EQ(p->value.data, loaded.param(p->name).value.data) << p->name;
  }
  EXPECT_EQ(loaded.config(), model.config());
  EXPECT_EQ(loaded.init_seed(), model.init_seed());
}

TEST(Checkpoint, WrongVocabularyRejected) {
  const SynthOutput synth = generate_synthetic_dataset(small_synth(), 9);
  const Vocabulary vocab = corpus_vocab(synth.tables);
  DModel model(tiny_config(vocab), vocab.hash(), 21);
  const std::string path = temp_path("ckpt_vocab.bin");
  checkpoint_save(model, path);
  const Vocabulary other = build_vocab({tokenize("totally different corpus")}, 1);
  EXPECT_THROW(checkpoint_load<double>(path, other), ValidationError);
}

TEST(Checkpoint, VersionMismatchRejected) {
  const Vocabulary vocab = build_vocab({tokenize("a b c")}, 1);
  nlohmann::json j;
  j["magic"] = kCheckpointMagic;
  j["version"] = kCheckpointVersion + 1;
  j["vocab_hash"] = hex64(vocab.hash());
  const auto blob = nlohmann::json::to_cbor(j);
  const std::string path = temp_path("ckpt_version.bin");
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(blob.data()),
                                              static_cast<std::streamsize>(blob.size()));
  EXPECT_THROW(checkpoint_load<double>(path, vocab), ValidationError);
}

TEST(Checkpoint, PretrainedPhiLoadsWithFreshSlotHeads) {
  const SynthOutput synth = generate_synthetic_dataset(small_synth(), 9);
  const Vocabulary vocab = corpus_vocab(synth.tables);
  DModel model(tiny_config(vocab), vocab.hash(), 33);
  const auto init_state = model.state_dict();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 2;
  cfg.checkpoint_path = temp_path("ckpt_pretrained.bin");
  pretrain(model, synth.tables, cfg, vocab);
  DModel loaded = checkpoint_load<double>(cfg.checkpoint_path, vocab);
  for (const auto& [name, tensor] : loaded.state_dict()) {
    if (DModel::is_phi(name)) {
      EXPECT_EQ(tensor.data, model.param(name).value.data) << name;
    } else {
      // slot heads are exactly their seed-initialized values
      EXPECT_EQ(tensor.data, init_state.at(name).data) << name;
    }
  }
}

TEST(Training, NonFiniteLossAborts) {
  const SynthOutput synth = generate_synthetic_dataset(small_synth(), 9);
  const Vocabulary vocab = corpus_vocab(synth.tables);
  DModel model(tiny_config(vocab), vocab.hash(), 1);
  model.param("phi.span.w_start").value.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  EXPECT_THROW(pretrain(model, synth.tables, cfg, vocab), NumericError);
}

TEST(Training, DefaultsMatchDocumentedValues) {
  const TrainConfig cfg;
  EXPECT_EQ(cfg.method, SamplingMethod::RandomOrder);  // the chosen sampling method
  EXPECT_EQ(cfg.epochs, 3);                            // pretraining default
  EXPECT_DOUBLE_EQ(cfg.p_swap, 0.3);
  EXPECT_DOUBLE_EQ(cfg.lr, 1e-3);
}

TEST(Training, ReportJsonCarriesLossesAndSeed) {
  const SynthOutput synth = generate_synthetic_dataset(small_synth(), 9);
  const Vocabulary vocab = corpus_vocab(synth.tables);
  DModel model(tiny_config(vocab), vocab.hash(), 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.seed = 123;
  const TrainReport report = pretrain(model, synth.tables, cfg, vocab);
  const auto j = report.to_json();
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 123u);
  EXPECT_FALSE(j.at("step_losses").empty());
  for (const double loss : report.step_losses) EXPECT_TRUE(std::isfinite(loss));
}

}  // namespace
}  // namespace tabalign
