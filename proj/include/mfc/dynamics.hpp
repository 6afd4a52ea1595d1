#pragma once

#include <memory>
#include <vector>

#include "mfc/ensemble.hpp"
#include "mfc/model.hpp"
#include "mfc/rng.hpp"

namespace mfc {

/// Transition shifts sigma dW + beta dB for every (step, child node,
/// particle).  The common increment is the tree stencil branch; the
/// idiosyncratic part is drawn per (step, child node, particle, coordinate)
/// from the counter RNG, so every branch gets fresh draws and the result is
/// independent of evaluation order.
///
/// With `precompute`, levels are materialized once into a (possibly
/// file-backed) TreeField and reused on every sweep; otherwise they are
/// recomputed on the fly.  Both paths produce bitwise identical shifts.
///
/// `step_offset` and `node_base` anchor the plan inside a larger tree: draws
/// are addressed by the global step index (local k + step_offset) and global
/// node index (node_base * children^(k+1) + local jc).  A plan for the
/// subtree rooted at node (k1, j1) of a parent tree, built with the same rng
/// and anchor {k1, j1}, reproduces the parent's shifts bitwise, which makes
/// tail re-solves exact restrictions of the full problem.
class ShiftPlan {
 public:
  ShiftPlan(const ProblemSpec& spec, const ScenarioTree& tree, int particles,
            CounterRng rng, bool precompute, int step_offset = 0, std::int64_t node_base = 0);

  const ScenarioTree& tree() const { return *tree_; }
  bool has_idio() const { return has_idio_; }

  /// Per-step accessor; construct outside parallel loops, `add` is
  /// const-thread-safe.  Adds the shift for entering child node jc (level
  /// k+1) into out (dim x particles).
  class Level {
   public:
    void add(std::int64_t jc, RefMat out) const;

   private:
    friend class ShiftPlan;
    const ShiftPlan* plan_ = nullptr;
    int k_ = 0;
    std::unique_ptr<LevelStore::Pin> pin_;  // precomputed mode
  };
  Level level(int k) const;

 private:
  void compute_block(int k, std::int64_t jc, RefMat out) const;

  const ScenarioTree* tree_ = nullptr;
  int particles_ = 0;
  int dim_ = 0;
  CounterRng rng_;
  Eigen::MatrixXd sigma_;
  Eigen::MatrixXd common_;  // beta * increments, one column per branch
  bool has_idio_ = false;
  bool sigma_diagonal_ = false;
  double sqrt_dt_ = 0.0;
  int step_offset_ = 0;
  std::int64_t node_base_ = 0;
  std::vector<std::int64_t> level_scale_;  // children^(k+1) for the node_base map
  mutable std::unique_ptr<TreeField> cache_;  // levels 1..K when precomputed
};

/// Euler forward simulation X[k+1] = X[k] + dt u[k] + shift on the whole
/// tree.  Level 0 of `ens` must hold the initial particles.  When `cost_out`
/// is non-null it receives the full discrete cost of (X, u):
///   sum_k dt sum_j P_j [ mean_i l(X,u) + F(m_kj) ]
///     + sum_leaf P_j [ mean_i h(X) + F_T(m_Kj) ].
/// Throws NumericalError naming the step and node if a state or cost value
/// turns non-finite.
void simulate_forward(const ProblemSpec& spec, const ControlField& u, const ShiftPlan& shifts,
                      ParticleEnsemble& ens, double* cost_out = nullptr);

/// Cost of the control without storing the trajectory: identical arithmetic
/// to simulate_forward(cost_out), two live levels of scratch.
double simulate_cost(const ProblemSpec& spec, const ControlField& u, const ShiftPlan& shifts,
                     const ConstMat& initial_points);

/// Left-endpoint quadrature pieces shared by the cost paths and the solver.
/// `probs` are the path probabilities of the nodes at the level.
double running_cost_level(const ProblemSpec& spec, int k, const ScenarioTree& tree,
                          const double* x_level, const double* u_level, int particles,
                          const std::vector<double>& probs);
double terminal_cost_level(const ProblemSpec& spec, const ScenarioTree& tree,
                           const double* x_level, int particles,
                           const std::vector<double>& probs);

}  // namespace mfc
