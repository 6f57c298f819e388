#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "kmat/datagen.hpp"
#include "kmat/errors.hpp"
#include "kmat/objectives.hpp"
#include "kmat/prompt_space.hpp"
#include "kmat/rng.hpp"

namespace kmat {

// Nearest-class-row prediction on cosine logits. The temperature cannot
// change an argmax but stays in the signature so callers pass the same
// parameters they trained with. Ties resolve to the lowest class index.
inline std::vector<int> predict(const Eigen::MatrixXd& features,
                                const Eigen::MatrixXd& class_rows, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("predict: temperature must be positive");
  if (features.cols() != class_rows.cols()) throw ShapeError("predict: dimension mismatch");
  if (class_rows.rows() == 0) throw ShapeError("predict: no class rows");
  std::vector<int> out(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index n = 0; n < features.rows(); ++n) {
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < class_rows.rows(); ++c) {
      const double score = features.row(n).dot(class_rows.row(c)) / temperature;
      if (score > best_score) {
        best_score = score;
        best = static_cast<int>(c);
      }
    }
    out[static_cast<std::size_t>(n)] = best;
  }
  return out;
}

// Rows are true classes, columns predicted classes.
inline Eigen::MatrixXi confusion(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                 int n_classes) {
  if (y_true.size() != y_pred.size()) throw ShapeError("confusion: label count mismatch");
  if (n_classes < 1) throw ConfigError("confusion: class count must be positive");
  Eigen::MatrixXi m = Eigen::MatrixXi::Zero(n_classes, n_classes);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] < 0 || y_true[i] >= n_classes || y_pred[i] < 0 || y_pred[i] >= n_classes) {
      throw DataError("confusion: label out of range");
    }
    m(y_true[i], y_pred[i]) += 1;
  }
  return m;
}

inline double accuracy(const Eigen::MatrixXi& confusion_matrix) {
  const long total = confusion_matrix.sum();
  if (total == 0) throw DataError("accuracy: empty confusion matrix");
  return static_cast<double>(confusion_matrix.trace()) / static_cast<double>(total);
}

// Macro F1 with the all-zero convention: a class with no true samples, no
// predictions and no false positives contributes an F1 of 0, not NaN.
inline double macro_f1(const Eigen::MatrixXi& confusion_matrix) {
  if (confusion_matrix.rows() != confusion_matrix.cols() || confusion_matrix.rows() == 0) {
    throw ShapeError("macro_f1: confusion matrix must be square and non-empty");
  }
  const int k = static_cast<int>(confusion_matrix.rows());
  double sum = 0.0;
  for (int c = 0; c < k; ++c) {
    const double tp = confusion_matrix(c, c);
    const double fp = confusion_matrix.col(c).sum() - tp;
    const double fn = confusion_matrix.row(c).sum() - tp;
    const double denom = 2.0 * tp + fp + fn;
    sum += denom > 0.0 ? 2.0 * tp / denom : 0.0;
  }
  return sum / k;
}

// Per-class recall; absent (nullopt) for classes with zero support.
inline std::vector<std::optional<double>> per_class_accuracy(const Eigen::MatrixXi& confusion_matrix) {
  std::vector<std::optional<double>> out;
  for (Eigen::Index c = 0; c < confusion_matrix.rows(); ++c) {
    const long support = confusion_matrix.row(c).sum();
    if (support == 0) {
      out.emplace_back(std::nullopt);
    } else {
      out.emplace_back(static_cast<double>(confusion_matrix(c, c)) / static_cast<double>(support));
    }
  }
  return out;
}

// 2ab/(a+b) on non-negative inputs; 0 when both inputs are 0.
inline double harmonic_mean(double a, double b) {
  if (a < 0.0 || b < 0.0) throw DataError("harmonic_mean: inputs must be non-negative");
  const double s = a + b;
  return s > 0.0 ? 2.0 * a * b / s : 0.0;
}

struct Projection {
  Eigen::MatrixXd coords;      // N x 2
  Eigen::Vector2d variance;    // variance captured along each axis
  bool rank_deficient = false;
};

namespace detail {

// Leading eigenpair of a symmetric PSD matrix by power iteration with a
// seeded (fixed) start, so projections are identical across runs.
inline std::pair<double, Eigen::VectorXd> power_eig(const Eigen::MatrixXd& sym, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::VectorXd v = gaussian_vector(rng, static_cast<int>(sym.rows()));
  v /= v.norm();
  for (int it = 0; it < 2000; ++it) {
    Eigen::VectorXd next = sym * v;
    const double nrm = next.norm();
    if (nrm < 1e-300) return {0.0, Eigen::VectorXd::Zero(sym.rows())};
    next /= nrm;
    const double delta = (next - v).norm();
    v = next;
    if (delta < 1e-14) break;
  }
  // Deterministic sign: the largest-magnitude component points positive.
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v[arg] < 0.0) v = -v;
  return {v.dot(sym * v), v};
}

}  // namespace detail

// First two principal axes of the row set via power iteration plus deflation
// on the centered covariance. A (near-)rank-1 set keeps a zero second axis
// and is flagged instead of inventing directions from noise.
inline Projection project_2d(const Eigen::MatrixXd& points) {
  if (points.rows() < 1 || points.cols() < 1) throw ShapeError("project_2d: empty input");
  const Eigen::MatrixXd centered = points.rowwise() - points.colwise().mean();
  const Eigen::MatrixXd cov =
      centered.transpose() * centered / static_cast<double>(points.rows());

  Projection out;
  out.coords.resize(points.rows(), 2);
  auto [lambda1, v1] = detail::power_eig(cov, 0x51f0u);
  const Eigen::MatrixXd deflated = cov - lambda1 * v1 * v1.transpose();
  auto [lambda2, v2] = detail::power_eig(deflated, 0x51f1u);
  const double floor = std::max(1e-12, 1e-9 * lambda1);
  if (lambda2 < floor) {
    v2.setZero();
    lambda2 = 0.0;
    out.rank_deficient = true;
  }
  if (lambda1 < 1e-12) out.rank_deficient = true;
  out.coords.col(0) = centered * v1;
  out.coords.col(1) = centered * v2;
  out.variance << lambda1, lambda2;
  return out;
}

struct ModalityMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::optional<double>> per_class;
  Eigen::MatrixXi confusion;
};

struct EvalOutcome {
  ModalityMetrics high;
  ModalityMetrics low;
  double harmonic_accuracy = 0.0;
  double harmonic_macro_f1 = 0.0;
};

// Metrics for one (modality, split) slice against the given class rows.
inline ModalityMetrics evaluate_slice(const LabeledEmbeddingSet& data, Modality m, Split split,
                                      const Eigen::MatrixXd& class_rows, double temperature) {
  auto [features, labels] = data.matrix(m, split);
  if (labels.empty()) {
    throw DataError(std::string("no ") + modality_name(m) + " records in the " +
                    split_name(split) + " split");
  }
  const std::vector<int> preds = predict(features, class_rows, temperature);
  ModalityMetrics out;
  out.confusion = confusion(labels, preds, data.n_classes());
  out.accuracy = accuracy(out.confusion);
  out.macro_f1 = macro_f1(out.confusion);
  out.per_class = per_class_accuracy(out.confusion);
  return out;
}

// Both modalities of one split, with the cross-modality harmonic summaries.
inline EvalOutcome evaluate(const LabeledEmbeddingSet& data, const ClassEmbeddings& embeddings,
                            double temperature, Split split = Split::kTest) {
  EvalOutcome out;
  out.high = evaluate_slice(data, Modality::kHigh, split, embeddings.high, temperature);
  out.low = evaluate_slice(data, Modality::kLow, split, embeddings.low, temperature);
  out.harmonic_accuracy = harmonic_mean(out.high.accuracy, out.low.accuracy);
  out.harmonic_macro_f1 = harmonic_mean(out.high.macro_f1, out.low.macro_f1);
  return out;
}

// One training run's full record: per-seed metrics, loss trace and the exact
// configuration that produced them.
struct RunReport {
  std::uint64_t seed = 0;
  EvalOutcome metrics;
  std::vector<LossBreakdown> loss_trace;  // one entry per epoch (batch means)
  bool shot_shortfall = false;
  std::vector<int> shortfall_classes;
  nlohmann::json config_snapshot;
};

inline nlohmann::json metrics_to_json(const ModalityMetrics& m) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& v : m.per_class) {
    if (v) {
      per_class.push_back(*v);
    } else {
      per_class.push_back(nullptr);
    }
  }
  std::vector<std::vector<int>> conf(static_cast<std::size_t>(m.confusion.rows()));
  for (Eigen::Index r = 0; r < m.confusion.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.confusion.cols(); ++c) {
      conf[static_cast<std::size_t>(r)].push_back(m.confusion(r, c));
    }
  }
  return {{"accuracy", m.accuracy},
          {"macro_f1", m.macro_f1},
          {"per_class_accuracy", per_class},
          {"confusion", conf}};
}

inline nlohmann::json report_to_json(const RunReport& report) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& b : report.loss_trace) {
    trace.push_back({{"ce", b.ce}, {"anchor", b.anchor}, {"transport", b.transport},
                     {"total", b.total}});
  }
  return {{"seed", report.seed},
          {"high", metrics_to_json(report.metrics.high)},
          {"low", metrics_to_json(report.metrics.low)},
          {"harmonic_accuracy", report.metrics.harmonic_accuracy},
          {"harmonic_macro_f1", report.metrics.harmonic_macro_f1},
          {"loss_trace", trace},
          {"shot_shortfall", report.shot_shortfall},
          {"shortfall_classes", report.shortfall_classes},
          {"config", report.config_snapshot}};
}

// Plot-data dump: label,modality,x,y per row.
inline void write_projection_csv(const std::string& path, const std::vector<int>& labels,
                                 const std::vector<Modality>& modalities,
                                 const Eigen::MatrixXd& coords) {
  if (labels.size() != modalities.size() ||
      static_cast<Eigen::Index>(labels.size()) != coords.rows() || coords.cols() != 2) {
    throw ShapeError("projection dump: inconsistent row counts");
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "label,modality,x,y\n";
  char buf[40];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out << labels[i] << ',' << (modalities[i] == Modality::kHigh ? 'H' : 'L');
    for (int c = 0; c < 2; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", coords(static_cast<Eigen::Index>(i), c));
      out << ',' << buf;
    }
    out << '\n';
  }
}

}  // namespace kmat
