#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kmat/datagen.hpp"
#include "kmat/errors.hpp"
#include "kmat/evalkit.hpp"
#include "kmat/objectives.hpp"
#include "kmat/prompt_space.hpp"
#include "kmat/rng.hpp"

namespace kmat {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 4;
  double base_lr = 0.0025;
  int warmup_epochs = 1;
  int shots_per_class = 16;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  // One frozen backbone for every run: this seed is deliberately separate
  // from the per-run seeds, which only vary prompt init and batch order.
  std::uint64_t encoder_seed = 17;
  int embed_dim = 64;
  PromptConfig prompt;  // n_classes is filled from the data at train time
  LossWeights weights;
  SolverConfig solver;

  void validate() const {
    if (epochs < 0) throw ConfigError("train.epochs must be non-negative");
    if (warmup_epochs < 0 || warmup_epochs > epochs) {
      throw ConfigError("train.warmup_epochs must lie in [0, epochs]");
    }
    if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (!(base_lr > 0.0)) throw ConfigError("train.base_lr must be positive");
    if (shots_per_class < 1) throw ConfigError("train.shots_per_class must be at least 1");
    if (seeds.empty()) throw ConfigError("train.seeds must be non-empty");
    if (embed_dim < 1) throw ConfigError("encoder.embed_dim must be positive");
    if (prompt.context_len < 1) throw ConfigError("prompt.context_len must be at least 1");
    if (prompt.token_dim < 1) throw ConfigError("prompt.token_dim must be at least 1");
    weights.validate();
    solver.validate();
  }
};

// Linear warmup to base_lr, then cosine annealing to zero over the remaining
// steps. Entirely determined by (step, total_steps) and the epoch split in
// the config, so schedules are reproducible from the manifest alone.
inline double lr_at(int step, int total_steps, const TrainConfig& config) {
  if (total_steps < 1) throw ConfigError("lr_at: total_steps must be at least 1");
  if (step < 0 || step >= total_steps) throw ConfigError("lr_at: step out of range");
  if (config.epochs < 1) throw ConfigError("lr_at: schedule needs at least one epoch");
  const long long warmup_steps = static_cast<long long>(total_steps) * config.warmup_epochs /
                                 config.epochs;
  if (step < warmup_steps) {
    return config.base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (warmup_steps >= total_steps) return config.base_lr;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return config.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

struct FewShotSample {
  LabeledEmbeddingSet set;
  bool shortfall = false;            // some class had fewer records than requested
  std::vector<int> shortfall_classes;
};

// Per-class uniform subsample of the high-end training records, without
// replacement. Each class draws from its own seed substream, so adding a
// class never reshuffles the others. Classes short of `shots` contribute
// everything they have and are flagged; empty classes are an error.
inline FewShotSample sample_few_shot(const LabeledEmbeddingSet& data, int shots,
                                     std::uint64_t seed) {
  if (shots < 1) throw ConfigError("few-shot sampling needs shots >= 1");
  FewShotSample out{LabeledEmbeddingSet(data.dim(), data.n_classes()), false, {}};
  for (int c = 0; c < data.n_classes(); ++c) {
    std::vector<const EmbeddingRecord*> pool;
    for (const auto& r : data.records()) {
      if (r.label == c && r.modality == Modality::kHigh && r.split == Split::kTrain) {
        pool.push_back(&r);
      }
    }
    if (pool.empty()) {
      throw DataError("class " + std::to_string(c) + " has no high-end training records");
    }
    if (static_cast<int>(pool.size()) <= shots) {
      if (static_cast<int>(pool.size()) < shots) {
        out.shortfall = true;
        out.shortfall_classes.push_back(c);
      }
      for (const auto* r : pool) out.set.add(*r);
      continue;
    }
    Rng rng(mix_seed(seed, 101 + static_cast<std::uint64_t>(c)));
    for (std::size_t idx : rng.sample_without_replacement(pool.size(),
                                                          static_cast<std::size_t>(shots))) {
      out.set.add(*pool[idx]);
    }
  }
  return out;
}

struct TrainResult {
  PromptBank bank;
  ClassEmbeddings embeddings;             // final encoded prompts
  std::vector<LossBreakdown> loss_trace;  // per-epoch means
  bool shot_shortfall = false;
  std::vector<int> shortfall_classes;
};

// Few-shot prompt tuning on the high-end modality only. The input set must
// not contain a single low-end record: the low-end side is zero-shot by
// contract, and feeding it here is a hard error rather than a quiet leak.
inline TrainResult train(const LabeledEmbeddingSet& data, const AnchorPrototypes* anchors,
                         const TrainConfig& config, std::uint64_t run_seed) {
  config.validate();
  if (data.contains(Modality::kLow)) {
    throw ZeroShotViolation(
        "training input contains low-end embeddings; the low-end modality is "
        "zero-shot and must never appear in training data");
  }
  if (data.dim() != config.embed_dim) {
    throw ConfigError("encoder.embed_dim (" + std::to_string(config.embed_dim) +
                      ") does not match the data dimension (" + std::to_string(data.dim()) + ")");
  }

  PromptConfig prompt = config.prompt;
  prompt.n_classes = data.n_classes();
  PromptBank bank(prompt, mix_seed(run_seed, 0));
  const FrozenEncoder encoder(config.encoder_seed, bank.encoder_input_dim(), config.embed_dim);

  if (config.weights.anchor_weight > 0.0) {
    if (anchors == nullptr) throw ConfigError("anchor_weight > 0 requires prototypes");
    if (anchors->high.rows() != data.n_classes() || anchors->high.cols() != data.dim()) {
      throw ShapeError("prototype shape does not match the data");
    }
  }

  FewShotSample few = sample_few_shot(data, config.shots_per_class, mix_seed(run_seed, 1));
  auto [features, labels] = few.set.matrix(Modality::kHigh, Split::kTrain);
  const int n_samples = static_cast<int>(labels.size());
  const int batches_per_epoch = (n_samples + config.batch_size - 1) / config.batch_size;
  const int total_steps = config.epochs * batches_per_epoch;

  Rng order_rng(mix_seed(run_seed, 2));
  std::vector<LossBreakdown> trace;
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<std::size_t> perm = order_rng.permutation(static_cast<std::size_t>(n_samples));
    LossBreakdown epoch_mean;
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int lo = b * config.batch_size;
      const int hi = std::min(lo + config.batch_size, n_samples);
      Eigen::MatrixXd batch_x(hi - lo, features.cols());
      std::vector<int> batch_y(static_cast<std::size_t>(hi - lo));
      for (int i = lo; i < hi; ++i) {
        batch_x.row(i - lo) = features.row(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]));
        batch_y[static_cast<std::size_t>(i - lo)] = labels[perm[static_cast<std::size_t>(i)]];
      }

      const ClassEmbeddings emb = encode_prompts(bank, encoder);
      const TotalLossResult loss =
          total_loss(batch_x, batch_y, emb, anchors, config.weights, config.solver);
      if (!std::isfinite(loss.breakdown.total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + " (ce=" + std::to_string(loss.breakdown.ce) +
                           ", anchor=" + std::to_string(loss.breakdown.anchor) +
                           ", transport=" + std::to_string(loss.breakdown.transport) + ")");
      }
      const ContextGradients grads =
          encode_prompts_backward(bank, encoder, loss.grad_high, loss.grad_low);
      const double lr = lr_at(step, total_steps, config);
      for (std::size_t s = 0; s < grads.slots.size(); ++s) {
        bank.contexts()[s] -= lr * grads.slots[s];
      }
      ++step;

      epoch_mean.ce += loss.breakdown.ce;
      epoch_mean.anchor += loss.breakdown.anchor;
      epoch_mean.transport += loss.breakdown.transport;
      epoch_mean.total += loss.breakdown.total;
    }
    epoch_mean.ce /= batches_per_epoch;
    epoch_mean.anchor /= batches_per_epoch;
    epoch_mean.transport /= batches_per_epoch;
    epoch_mean.total /= batches_per_epoch;
    trace.push_back(epoch_mean);
  }

  ClassEmbeddings final_emb = encode_prompts(bank, encoder);
  return TrainResult{std::move(bank), std::move(final_emb), std::move(trace), few.shortfall,
                     std::move(few.shortfall_classes)};
}

// One toggle combination of the four components.
struct AblationCell {
  bool class_specific = true;
  bool modality_specific = true;
  bool use_anchor = true;
  bool use_transport = true;

  std::string tag() const {
    std::string s;
    s += class_specific ? '1' : '0';
    s += modality_specific ? '1' : '0';
    s += use_anchor ? '1' : '0';
    s += use_transport ? '1' : '0';
    return s;
  }
};

// The eight reported rows, in table order: from the unfactorized bare
// baseline up to the full method. The first row is the reference for the
// relative-improvement columns.
inline std::vector<AblationCell> full_ablation_grid() {
  return {
      {false, false, false, false},
      {true, false, false, false},
      {true, true, false, false},
      {true, true, true, false},
      {true, true, false, true},
      {false, true, true, true},
      {true, false, true, true},
      {true, true, true, true},
  };
}

// Percent change of `value` over `base`; undefined (NaN) for a zero base.
inline double relative_improvement(double value, double base) {
  if (base > 0.0) return 100.0 * (value - base) / base;
  return std::numeric_limits<double>::quiet_NaN();
}

struct AblationRow {
  AblationCell cell;
  double high_accuracy = 0.0;  // seed means, fractions in [0, 1]
  double low_accuracy = 0.0;
  double high_f1 = 0.0;
  double low_f1 = 0.0;
  double harmonic_accuracy = 0.0;  // mean of per-seed harmonic values
  double harmonic_f1 = 0.0;
  double harmonic_accuracy_of_means = 0.0;  // harmonic of the seed means
  double harmonic_f1_of_means = 0.0;
  double rel_improvement_acc = 0.0;  // percent vs the first row
  double rel_improvement_f1 = 0.0;
  std::vector<RunReport> reports;
};

// Trains and evaluates every cell across all configured seeds. Cells are
// independent; they run sequentially here for simplicity and determinism of
// the report order.
inline std::vector<AblationRow> run_ablation(const LabeledEmbeddingSet& data,
                                             const AnchorPrototypes* anchors,
                                             const TrainConfig& config,
                                             const std::vector<AblationCell>& cells) {
  if (cells.empty()) throw ConfigError("ablation grid must be non-empty");
  const LabeledEmbeddingSet high_only = data.filter(Modality::kHigh, std::nullopt);
  std::vector<AblationRow> rows;
  for (const auto& cell : cells) {
    TrainConfig cell_cfg = config;
    cell_cfg.prompt.class_specific = cell.class_specific;
    cell_cfg.prompt.modality_specific = cell.modality_specific;
    if (!cell.use_anchor) cell_cfg.weights.anchor_weight = 0.0;
    if (!cell.use_transport) cell_cfg.weights.transport_weight = 0.0;

    AblationRow row;
    row.cell = cell;
    const auto n_seeds = static_cast<double>(config.seeds.size());
    for (std::uint64_t seed : config.seeds) {
      const TrainResult result =
          train(high_only, cell.use_anchor ? anchors : nullptr, cell_cfg, seed);
      RunReport report;
      report.seed = seed;
      report.metrics = evaluate(data, result.embeddings, cell_cfg.weights.temperature);
      report.loss_trace = result.loss_trace;
      report.shot_shortfall = result.shot_shortfall;
      report.shortfall_classes = result.shortfall_classes;
      report.config_snapshot = {{"cell", cell.tag()}, {"seed", seed}};
      row.high_accuracy += report.metrics.high.accuracy / n_seeds;
      row.low_accuracy += report.metrics.low.accuracy / n_seeds;
      row.high_f1 += report.metrics.high.macro_f1 / n_seeds;
      row.low_f1 += report.metrics.low.macro_f1 / n_seeds;
      row.harmonic_accuracy += report.metrics.harmonic_accuracy / n_seeds;
      row.harmonic_f1 += report.metrics.harmonic_macro_f1 / n_seeds;
      row.reports.push_back(std::move(report));
    }
    row.harmonic_accuracy_of_means = harmonic_mean(row.high_accuracy, row.low_accuracy);
    row.harmonic_f1_of_means = harmonic_mean(row.high_f1, row.low_f1);
    rows.push_back(std::move(row));
  }

  const double base_acc = rows[0].harmonic_accuracy;
  const double base_f1 = rows[0].harmonic_f1;
  for (auto& row : rows) {
    row.rel_improvement_acc = relative_improvement(row.harmonic_accuracy, base_acc);
    row.rel_improvement_f1 = relative_improvement(row.harmonic_f1, base_f1);
  }
  return rows;
}

}  // namespace kmat
