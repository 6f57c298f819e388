#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "kmat/errors.hpp"
#include "kmat/rng.hpp"

namespace kmat {

enum class Modality { kHigh = 0, kLow = 1 };
inline constexpr int kNumModalities = 2;

inline const char* modality_name(Modality m) {
  return m == Modality::kHigh ? "high" : "low";
}

struct PromptConfig {
  int context_len = 4;
  int token_dim = 64;
  int n_classes = 0;
  bool class_specific = true;     // one context per class, else shared
  bool modality_specific = true;  // one context per modality, else shared

  void validate() const {
    if (context_len < 1) throw ConfigError("prompt.context_len must be at least 1");
    if (token_dim < 1) throw ConfigError("prompt.token_dim must be at least 1");
    if (n_classes < 2) throw ConfigError("prompt.n_classes must be at least 2");
  }
};

// Learnable context tokens plus frozen per-class tokens. Contexts are stored
// as one matrix (context_len x token_dim) per effective slot; whether classes
// or modalities share a slot is decided by the config, and gradient updates
// into shared slots accumulate naturally because every (class, modality)
// pair resolves to the same storage.
class PromptBank {
 public:
  PromptBank(const PromptConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    // Draw order is part of the determinism contract: context slots first
    // (slot-major, then row-major within the slot), class tokens last.
    Rng rng(seed);
    contexts_.resize(static_cast<std::size_t>(class_slots()) * modality_slots());
    for (auto& slot : contexts_) {
      slot.resize(config.context_len, config.token_dim);
      for (int r = 0; r < slot.rows(); ++r) {
        for (int c = 0; c < slot.cols(); ++c) slot(r, c) = kInitStd * rng.gaussian();
      }
    }
    class_tokens_.resize(config.n_classes, config.token_dim);
    for (int r = 0; r < class_tokens_.rows(); ++r) {
      for (int c = 0; c < class_tokens_.cols(); ++c) class_tokens_(r, c) = kInitStd * rng.gaussian();
    }
  }

  static constexpr double kInitStd = 0.02;

  const PromptConfig& config() const { return config_; }
  int class_slots() const { return config_.class_specific ? config_.n_classes : 1; }
  int modality_slots() const { return config_.modality_specific ? kNumModalities : 1; }

  int slot_index(int class_idx, Modality m) const {
    if (class_idx < 0 || class_idx >= config_.n_classes) {
      throw ShapeError("class index " + std::to_string(class_idx) + " out of range");
    }
    const int cs = config_.class_specific ? class_idx : 0;
    const int ms = config_.modality_specific ? static_cast<int>(m) : 0;
    return cs * modality_slots() + ms;
  }

  Eigen::MatrixXd& context(int class_idx, Modality m) {
    return contexts_[static_cast<std::size_t>(slot_index(class_idx, m))];
  }
  const Eigen::MatrixXd& context(int class_idx, Modality m) const {
    return contexts_[static_cast<std::size_t>(slot_index(class_idx, m))];
  }
  std::vector<Eigen::MatrixXd>& contexts() { return contexts_; }
  const std::vector<Eigen::MatrixXd>& contexts() const { return contexts_; }

  // Frozen: training must never write here.
  const Eigen::MatrixXd& class_tokens() const { return class_tokens_; }

  // Flattened encoder input for one prompt: context rows then the class token.
  Eigen::VectorXd encoder_input(int class_idx, Modality m) const {
    const auto& ctx = context(class_idx, m);
    const int ctx_len = config_.context_len;
    const int dim = config_.token_dim;
    Eigen::VectorXd v((ctx_len + 1) * dim);
    for (int r = 0; r < ctx_len; ++r) v.segment(r * dim, dim) = ctx.row(r);
    v.segment(ctx_len * dim, dim) = class_tokens_.row(class_idx);
    return v;
  }

  int encoder_input_dim() const { return (config_.context_len + 1) * config_.token_dim; }

 private:
  PromptConfig config_;
  std::vector<Eigen::MatrixXd> contexts_;
  Eigen::MatrixXd class_tokens_;
};

// Stand-in for a pretrained text/vision tower: a fixed random linear map
// followed by L2 normalization downstream. Entries ~ N(0, 1/input_dim) keep
// output scales independent of the input width. The seed is meant to be
// shared across runs (one backbone, many experiments).
class FrozenEncoder {
 public:
  FrozenEncoder(std::uint64_t seed, int input_dim, int embed_dim) {
    if (input_dim < 1 || embed_dim < 1) throw ConfigError("encoder dimensions must be positive");
    Rng rng(seed);
    weight_.resize(embed_dim, input_dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (int r = 0; r < embed_dim; ++r) {
      for (int c = 0; c < input_dim; ++c) weight_(r, c) = scale * rng.gaussian();
    }
  }

  const Eigen::MatrixXd& weight() const { return weight_; }
  int input_dim() const { return static_cast<int>(weight_.cols()); }
  int embed_dim() const { return static_cast<int>(weight_.rows()); }

 private:
  Eigen::MatrixXd weight_;
};

// Unit-norm class embeddings per modality, one row per class.
struct ClassEmbeddings {
  Eigen::MatrixXd high;
  Eigen::MatrixXd low;

  const Eigen::MatrixXd& rows(Modality m) const { return m == Modality::kHigh ? high : low; }
  Eigen::MatrixXd& rows(Modality m) { return m == Modality::kHigh ? high : low; }
};

// Unit-norm anchor directions per class and modality, built from frozen
// description embeddings. Same layout as ClassEmbeddings but never trained.
struct AnchorPrototypes {
  Eigen::MatrixXd high;
  Eigen::MatrixXd low;

  const Eigen::MatrixXd& rows(Modality m) const { return m == Modality::kHigh ? high : low; }
  Eigen::MatrixXd& rows(Modality m) { return m == Modality::kHigh ? high : low; }
};

// Per-slot gradients w.r.t. the context tokens, aligned with
// PromptBank::contexts(). Class-token gradients are intentionally dropped.
struct ContextGradients {
  std::vector<Eigen::MatrixXd> slots;
};

namespace detail {

inline constexpr double kDegenerateNorm = 1e-12;

inline void encode_one(const PromptBank& bank, const FrozenEncoder& encoder, int class_idx,
                       Modality m, Eigen::VectorXd* raw, double* norm, Eigen::VectorXd* unit) {
  const Eigen::VectorXd v = bank.encoder_input(class_idx, m);
  Eigen::VectorXd u = encoder.weight() * v;
  const double nrm = u.norm();
  if (!(nrm >= kDegenerateNorm)) {
    throw NumericError("prompt embedding for class " + std::to_string(class_idx) + " (" +
                       modality_name(m) + ") collapsed below the normalization guard");
  }
  if (raw) *raw = u;
  if (norm) *norm = nrm;
  if (unit) *unit = u / nrm;
}

}  // namespace detail

// Forward pass: every (class, modality) prompt through the frozen encoder,
// then onto the unit sphere.
inline ClassEmbeddings encode_prompts(const PromptBank& bank, const FrozenEncoder& encoder) {
  if (encoder.input_dim() != bank.encoder_input_dim()) {
    throw ShapeError("encoder input width does not match the prompt layout");
  }
  const int n = bank.config().n_classes;
  ClassEmbeddings out;
  out.high.resize(n, encoder.embed_dim());
  out.low.resize(n, encoder.embed_dim());
  Eigen::VectorXd unit;
  for (int i = 0; i < n; ++i) {
    for (Modality m : {Modality::kHigh, Modality::kLow}) {
      detail::encode_one(bank, encoder, i, m, nullptr, nullptr, &unit);
      out.rows(m).row(i) = unit;
    }
  }
  return out;
}

// Backward pass: pulls loss gradients on the unit embeddings back through the
// normalization (projecting out the radial component) and the frozen linear
// map, accumulating into context-token slots. Shared slots receive the sum of
// every (class, modality) gradient routed to them; class tokens are frozen so
// their part of the chain is discarded.
inline ContextGradients encode_prompts_backward(const PromptBank& bank,
                                                const FrozenEncoder& encoder,
                                                const Eigen::MatrixXd& grad_high,
                                                const Eigen::MatrixXd& grad_low) {
  if (encoder.input_dim() != bank.encoder_input_dim()) {
    throw ShapeError("encoder input width does not match the prompt layout");
  }
  const int n = bank.config().n_classes;
  const int d = encoder.embed_dim();
  if (grad_high.rows() != n || grad_high.cols() != d || grad_low.rows() != n || grad_low.cols() != d) {
    throw ShapeError("embedding gradient shapes do not match the bank");
  }
  ContextGradients grads;
  grads.slots.resize(bank.contexts().size());
  for (std::size_t s = 0; s < grads.slots.size(); ++s) {
    grads.slots[s] = Eigen::MatrixXd::Zero(bank.config().context_len, bank.config().token_dim);
  }
  const int ctx_len = bank.config().context_len;
  const int dim = bank.config().token_dim;
  Eigen::VectorXd raw, unit;
  double nrm = 0.0;
  for (int i = 0; i < n; ++i) {
    for (Modality m : {Modality::kHigh, Modality::kLow}) {
      detail::encode_one(bank, encoder, i, m, &raw, &nrm, &unit);
      const Eigen::VectorXd gw = (m == Modality::kHigh ? grad_high : grad_low).row(i);
      // d/du of u/|u| applied to gw: remove the component along the output.
      const Eigen::VectorXd gu = (gw - unit.dot(gw) * unit) / nrm;
      const Eigen::VectorXd gv = encoder.weight().transpose() * gu;
      auto& slot = grads.slots[static_cast<std::size_t>(bank.slot_index(i, m))];
      for (int r = 0; r < ctx_len; ++r) slot.row(r) += gv.segment(r * dim, dim);
      // gv.segment(ctx_len * dim, dim) would be the class-token gradient; frozen.
    }
  }
  return grads;
}

// Per-class, per-modality description embeddings; one matrix
// (n_descriptions x embed_dim) of unit rows per class.
struct DescriptionSet {
  std::vector<Eigen::MatrixXd> high;
  std::vector<Eigen::MatrixXd> low;
};

// Mean description direction per class and modality, re-normalized to unit
// length. A class with no descriptions, a non-unit description, or a mean
// that cancels to (near) zero is a data error.
inline AnchorPrototypes build_prototypes(const DescriptionSet& descriptions) {
  const std::size_t n = descriptions.high.size();
  if (n == 0) throw DataError("prototype build requires at least one class");
  if (descriptions.low.size() != n) {
    throw ShapeError("description sets disagree on the number of classes");
  }
  Eigen::Index dim = -1;
  AnchorPrototypes out;
  for (Modality m : {Modality::kHigh, Modality::kLow}) {
    const auto& per_class = m == Modality::kHigh ? descriptions.high : descriptions.low;
    Eigen::MatrixXd& rows = out.rows(m);
    for (std::size_t c = 0; c < n; ++c) {
      const Eigen::MatrixXd& descs = per_class[c];
      if (descs.rows() == 0) {
        throw DataError("class " + std::to_string(c) + " has no " + modality_name(m) +
                        " descriptions");
      }
      if (dim < 0) {
        dim = descs.cols();
        out.high.resize(static_cast<Eigen::Index>(n), dim);
        out.low.resize(static_cast<Eigen::Index>(n), dim);
      }
      if (descs.cols() != dim) throw ShapeError("description dimensions are inconsistent");
      for (Eigen::Index r = 0; r < descs.rows(); ++r) {
        if (std::abs(descs.row(r).norm() - 1.0) > 1e-6) {
          throw DataError("description embeddings must be unit-norm");
        }
      }
      Eigen::VectorXd mean = descs.colwise().mean();
      const double nrm = mean.norm();
      if (!(nrm >= detail::kDegenerateNorm)) {
        throw DataError("descriptions for class " + std::to_string(c) +
                        " cancel out; prototype direction is undefined");
      }
      rows.row(static_cast<Eigen::Index>(c)) = mean / nrm;
    }
  }
  return out;
}

}  // namespace kmat
