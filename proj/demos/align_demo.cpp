// Small end-to-end tour: generate a two-modality corpus, align the class
// means with the fused transport solver, and show how the coupling locks the
// cross-modal class correspondence even under a rotation plus a shared offset.

#include <Eigen/Dense>
#include <cstdio>
#include <iostream>

#include "kmat/datagen.hpp"
#include "kmat/transport.hpp"

int main() {
  kmat::SyntheticSpec spec;
  spec.n_classes = 4;
  spec.embed_dim = 16;
  spec.train_per_class = 40;
  spec.val_per_class = 0;
  spec.test_per_class = 0;
  spec.cross_modal_rotation = 0.8;
  spec.shortcut_offset = 0.4;
  spec.seed = 7;
  const kmat::SyntheticData data = kmat::generate(spec);

  // Per-class mean embeddings, one row per class, per modality.
  Eigen::MatrixXd high = Eigen::MatrixXd::Zero(spec.n_classes, spec.embed_dim);
  Eigen::MatrixXd low = high;
  for (const auto& r : data.set.records()) {
    (r.modality == kmat::Modality::kHigh ? high : low).row(r.label) += r.x;
  }
  for (int c = 0; c < spec.n_classes; ++c) {
    high.row(c).normalize();
    low.row(c).normalize();
  }

  const kmat::CostMatrices costs = kmat::build_costs(high, low);
  kmat::TransportProblem problem;
  problem.feature_cost = costs.feature_cost;
  problem.source_metric = costs.source_metric;
  problem.target_metric = costs.target_metric;
  problem.structure_weight = 0.5;
  problem.epsilon = 0.01;
  problem.source_weights = Eigen::VectorXd::Constant(spec.n_classes, 1.0 / spec.n_classes);
  problem.target_weights = Eigen::VectorXd::Constant(spec.n_classes, 1.0 / spec.n_classes);

  const kmat::TransportPlan plan = kmat::fgw_solve(problem);
  std::cout << "fused transport objective: " << plan.objective_trace.back() << "\n";
  std::cout << "marginal violation: " << plan.marginal_violation << "\n\n";
  std::cout << "coupling (rows: high-end classes, cols: low-end classes)\n";
  for (int i = 0; i < spec.n_classes; ++i) {
    for (int j = 0; j < spec.n_classes; ++j) {
      std::printf(" %7.4f", plan.coupling(i, j));
    }
    std::printf("\n");
  }
  std::cout << "\nmass should concentrate on the diagonal: matching classes\n"
               "stay nearest neighbours under the fused feature+structure cost.\n";
  return 0;
}
