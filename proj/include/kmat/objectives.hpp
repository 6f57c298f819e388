#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "kmat/errors.hpp"
#include "kmat/prompt_space.hpp"
#include "kmat/transport.hpp"

namespace kmat {

struct LossWeights {
  double anchor_weight = 1.0;     // pull toward description prototypes
  double transport_weight = 1.0;  // cross-modal fused-transport alignment
  double temperature = 0.07;      // softmax sharpness on cosine logits
  double structure_weight = 0.1;  // feature-vs-geometry mix inside the transport term

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("loss.temperature must be positive");
    if (anchor_weight < 0.0) throw ConfigError("loss.anchor_weight must be non-negative");
    if (transport_weight < 0.0) throw ConfigError("loss.transport_weight must be non-negative");
    if (!(structure_weight >= 0.0 && structure_weight <= 1.0)) {
      throw ConfigError("loss.structure_weight must lie in [0, 1]");
    }
  }
};

struct SolverConfig {
  double epsilon = 0.1;
  int max_inner = 100;
  int max_outer = 20;
  double tol = 1e-7;

  void validate() const {
    if (!(epsilon > 0.0)) throw ConfigError("solver.epsilon must be positive");
    if (max_inner < 1) throw ConfigError("solver.max_inner must be at least 1");
    if (max_outer < 1) throw ConfigError("solver.max_outer must be at least 1");
    if (!(tol >= 0.0)) throw ConfigError("solver.tol must be non-negative");
  }
};

// Unweighted term values; `total` carries the weighted sum actually optimized.
struct LossBreakdown {
  double ce = 0.0;
  double anchor = 0.0;
  double transport = 0.0;
  double total = 0.0;
};

struct CeLossResult {
  double value = 0.0;
  Eigen::MatrixXd grad;  // d value / d class_rows
};

// Cross-entropy over cosine logits: logits[n][c] = <x_n, w_c> / temperature.
// Inputs are expected unit-norm so the dot products are cosines; the math
// itself only needs the dots, which is what makes the descent property tests
// well-defined slightly off the sphere.
inline CeLossResult ce_loss(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                            const Eigen::MatrixXd& class_rows, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("ce_loss: temperature must be positive");
  const int batch = static_cast<int>(features.rows());
  const int n_classes = static_cast<int>(class_rows.rows());
  if (batch == 0) throw DataError("ce_loss: empty batch");
  if (static_cast<int>(labels.size()) != batch) throw ShapeError("ce_loss: label count mismatch");
  if (features.cols() != class_rows.cols()) throw ShapeError("ce_loss: feature dimension mismatch");
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw DataError("ce_loss: label out of range");
  }

  CeLossResult out;
  out.grad = Eigen::MatrixXd::Zero(n_classes, class_rows.cols());
  double loss = 0.0;
  Eigen::VectorXd logits(n_classes), probs(n_classes);
  for (int n = 0; n < batch; ++n) {
    logits = class_rows * features.row(n).transpose() / temperature;
    const double mx = logits.maxCoeff();
    double z = 0.0;
    for (int c = 0; c < n_classes; ++c) {
      probs[c] = std::exp(logits[c] - mx);
      z += probs[c];
    }
    probs /= z;
    loss += std::log(z) + mx - logits[labels[static_cast<std::size_t>(n)]];
    for (int c = 0; c < n_classes; ++c) {
      const double coef = (probs[c] - (c == labels[static_cast<std::size_t>(n)] ? 1.0 : 0.0)) /
                          (temperature * batch);
      out.grad.row(c) += coef * features.row(n);
    }
  }
  out.value = loss / batch;
  return out;
}

struct AnchorLossResult {
  double value = 0.0;
  Eigen::MatrixXd grad_high;
  Eigen::MatrixXd grad_low;
};

// Mean squared pull of every class embedding toward its frozen prototype,
// averaged over classes with a 1/2 factor so the gradient is exactly
// (embedding - prototype) / n_classes for both modalities.
inline AnchorLossResult anchoring_loss(const ClassEmbeddings& embeddings,
                                       const AnchorPrototypes& anchors) {
  const auto n = embeddings.high.rows();
  const auto d = embeddings.high.cols();
  if (embeddings.low.rows() != n || embeddings.low.cols() != d) {
    throw ShapeError("anchoring_loss: embedding modalities disagree in shape");
  }
  if (anchors.high.rows() != n || anchors.high.cols() != d || anchors.low.rows() != n ||
      anchors.low.cols() != d) {
    throw ShapeError("anchoring_loss: prototype shape does not match the embeddings");
  }
  if (n == 0) throw DataError("anchoring_loss: no classes");
  AnchorLossResult out;
  out.grad_high = (embeddings.high - anchors.high) / static_cast<double>(n);
  out.grad_low = (embeddings.low - anchors.low) / static_cast<double>(n);
  out.value = ((embeddings.high - anchors.high).squaredNorm() +
               (embeddings.low - anchors.low).squaredNorm()) /
              (2.0 * static_cast<double>(n));
  return out;
}

struct FgwLossResult {
  double value = 0.0;
  Eigen::MatrixXd grad_low;  // high-side gradient is identically zero by contract
  TransportPlan plan;
};

// Gradient of the fused objective w.r.t. the low-side rows at a fixed
// coupling (envelope rule: the coupling is treated as a constant of the
// optimization). Feature part differentiates the squared cross distances;
// structure part differentiates the target metric inside the quadratic form,
// with a zero subgradient where two rows coincide.
inline Eigen::MatrixXd fgw_grad_low(const Eigen::MatrixXd& high_rows,
                                    const Eigen::MatrixXd& low_rows,
                                    const Eigen::MatrixXd& coupling, double structure_weight) {
  const int n = static_cast<int>(high_rows.rows());
  const int m = static_cast<int>(low_rows.rows());
  if (coupling.rows() != n || coupling.cols() != m) {
    throw ShapeError("fgw_grad_low: coupling shape mismatch");
  }
  const CostMatrices costs = build_costs(high_rows, low_rows);
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(m, low_rows.cols());
  const Eigen::VectorXd col_mass = coupling.colwise().sum();

  for (int j = 0; j < m; ++j) {
    grad.row(j) += (1.0 - structure_weight) * 2.0 *
                   (col_mass[j] * low_rows.row(j) - coupling.col(j).transpose() * high_rows);
  }
  if (structure_weight > 0.0) {
    // dGW/dD_L[j,b] assembled as T = 2 (D_L .* (c c^T) - G^T D_H G), then routed
    // through dD_L[j,b]/d low_j = (low_j - low_b) / D_L[j,b].
    const Eigen::MatrixXd t =
        2.0 * (costs.target_metric.array() * (col_mass * col_mass.transpose()).array()).matrix() -
        2.0 * coupling.transpose() * costs.source_metric * coupling;
    for (int j = 0; j < m; ++j) {
      for (int b = 0; b < m; ++b) {
        if (b == j) continue;
        const double dist = costs.target_metric(j, b);
        if (dist < 1e-12) continue;  // coincident rows: zero subgradient
        grad.row(j) += structure_weight * 2.0 * t(j, b) * (low_rows.row(j) - low_rows.row(b)) / dist;
      }
    }
  }
  return grad;
}

// Fused-transport alignment loss between the two modality embeddings, with
// uniform marginals. The returned gradient only touches the low side: the
// high side is detached so alignment can never drag the trained modality.
inline FgwLossResult fgw_loss(const Eigen::MatrixXd& high_rows, const Eigen::MatrixXd& low_rows,
                              double structure_weight, const SolverConfig& solver) {
  solver.validate();
  const int n = static_cast<int>(high_rows.rows());
  const int m = static_cast<int>(low_rows.rows());
  if (n == 0 || m == 0) throw DataError("fgw_loss: empty embedding set");
  TransportProblem problem;
  const CostMatrices costs = build_costs(high_rows, low_rows);
  problem.feature_cost = costs.feature_cost;
  problem.source_metric = costs.source_metric;
  problem.target_metric = costs.target_metric;
  problem.structure_weight = structure_weight;
  problem.source_weights = Eigen::VectorXd::Constant(n, 1.0 / n);
  problem.target_weights = Eigen::VectorXd::Constant(m, 1.0 / m);
  problem.epsilon = solver.epsilon;

  FgwLossResult out;
  out.plan = fgw_solve(problem, solver.max_outer, solver.max_inner, solver.tol);
  out.value = fgw_value(costs.feature_cost, costs.source_metric, costs.target_metric,
                        structure_weight, out.plan.coupling);
  out.grad_low = fgw_grad_low(high_rows, low_rows, out.plan.coupling, structure_weight);
  return out;
}

struct TotalLossResult {
  LossBreakdown breakdown;
  Eigen::MatrixXd grad_high;
  Eigen::MatrixXd grad_low;
};

// Weighted training objective. Cross-entropy touches only the high side;
// anchoring touches both; the transport term touches only the low side.
// Terms with zero weight are skipped entirely and reported as zero.
// `anchors` may be null only when anchor_weight is zero.
inline TotalLossResult total_loss(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                                  const ClassEmbeddings& embeddings,
                                  const AnchorPrototypes* anchors, const LossWeights& weights,
                                  const SolverConfig& solver) {
  weights.validate();
  TotalLossResult out;
  out.grad_high = Eigen::MatrixXd::Zero(embeddings.high.rows(), embeddings.high.cols());
  out.grad_low = Eigen::MatrixXd::Zero(embeddings.low.rows(), embeddings.low.cols());

  const CeLossResult ce = ce_loss(features, labels, embeddings.high, weights.temperature);
  out.breakdown.ce = ce.value;
  out.grad_high += ce.grad;

  if (weights.anchor_weight > 0.0) {
    if (anchors == nullptr) {
      throw ConfigError("total_loss: anchor_weight > 0 requires prototypes");
    }
    const AnchorLossResult anc = anchoring_loss(embeddings, *anchors);
    out.breakdown.anchor = anc.value;
    out.grad_high += weights.anchor_weight * anc.grad_high;
    out.grad_low += weights.anchor_weight * anc.grad_low;
  }
  if (weights.transport_weight > 0.0) {
    const FgwLossResult fgw =
        fgw_loss(embeddings.high, embeddings.low, weights.structure_weight, solver);
    out.breakdown.transport = fgw.value;
    out.grad_low += weights.transport_weight * fgw.grad_low;
  }
  out.breakdown.total = out.breakdown.ce + weights.anchor_weight * out.breakdown.anchor +
                        weights.transport_weight * out.breakdown.transport;
  return out;
}

}  // namespace kmat
