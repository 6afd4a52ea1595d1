#pragma once

#include <cstdint>
#include <vector>

#include "mfc/solver.hpp"

namespace mfc {

/// Root-level costate block of a converged solve: the Hilbert-space gradient
/// of the value with respect to the initial particles, one column per
/// particle.  Throws InvalidArgument on an unconverged solution.
Eigen::MatrixXd first_derivative(const OptimalSolution& sol);

struct TaggedOptions {
  /// Quadrature points per coordinate for the tag's own idiosyncratic noise
  /// (1 degenerate, 2 binomial, 3 Gauss-Hermite), mirroring the scenario
  /// tree stencils.
  int tag_branching = 2;
  std::int64_t max_nodes = std::int64_t(1) << 26;
  SolveOptions solve;
};

struct TaggedSolution {
  double cost = 0.0;          // U: optimal tagged cost (no normalization)
  Eigen::VectorXd gradient;   // DU: the tag's costate at the root
  /// Tagged state per composed node (n x M_k, levels 0..K) and the optimal
  /// tagged control (levels 0..K-1).
  std::vector<Eigen::MatrixXd> path;
  std::vector<Eigen::MatrixXd> control;
  double grad_norm = 0.0;
  double grad_sup = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// The tagged-particle control problem: one particle pushed through the base
/// tree composed with a quadrature stencil for its own idiosyncratic noise,
/// charged l + dF/dnu(m_kj) along the way and h + dF_T/dnu(m_Kj) at the
/// leaves, with the conditional measures m_kj frozen from the base solution.
/// Its optimal cost is the functional derivative of the value (up to the
/// additive normalization) and its costate at the root is the x-gradient of
/// that derivative.
///
/// The composition keeps the tag's noise inside the branching, so the
/// minimization is over controls adapted to (common path, tag path): no
/// sample-average anticipation is possible and the optimum is the exact
/// discrete tagged value.
class TaggedProblem {
 public:
  /// Throws InvalidArgument when the base is unconverged, the running or
  /// terminal functional lacks dnu/grad_dnu, or the composed tree would
  /// exceed opts.max_nodes.
  TaggedProblem(const ProblemSpec& spec, const OptimalSolution& base, ConstVec x,
                const TaggedOptions& opts = {});

  int steps() const { return steps_; }
  int children() const { return children_; }
  std::int64_t nodes(int k) const { return counts_[static_cast<std::size_t>(k)]; }

  /// Tagged cost of a control table (levels 0..K-1 of n x nodes(k)); the
  /// same left-endpoint quadrature the solver uses.
  double cost(const std::vector<Eigen::MatrixXd>& v) const;

  /// Gradient descent on the tag's control; mirrors solve_mfc's acceptance
  /// rule and stopping metric.
  TaggedSolution solve() const;

 private:
  void forward(const std::vector<Eigen::MatrixXd>& v,
               std::vector<Eigen::MatrixXd>& path) const;
  double cost_of(const std::vector<Eigen::MatrixXd>& v,
                 const std::vector<Eigen::MatrixXd>& path) const;
  void backward(const std::vector<Eigen::MatrixXd>& path,
                const std::vector<Eigen::MatrixXd>& v,
                std::vector<Eigen::MatrixXd>& z) const;
  /// Returns (rms, sup) of the gradient written into g.
  std::pair<double, double> gradient(const std::vector<Eigen::MatrixXd>& path,
                                     const std::vector<Eigen::MatrixXd>& v,
                                     const std::vector<Eigen::MatrixXd>& z,
                                     std::vector<Eigen::MatrixXd>& g) const;

  const ProblemSpec* spec_ = nullptr;
  const OptimalSolution* base_ = nullptr;
  TaggedOptions opts_;
  int steps_ = 0;
  int dim_ = 0;
  int children_ = 0;  // composed: base children x tag stencil
  double dt_ = 0.0;
  Eigen::VectorXd x0_;
  Eigen::MatrixXd shift_;      // n x children, branch shift per composed child
  Eigen::VectorXd cprob_;      // composed branch probabilities
  std::vector<std::int64_t> counts_;             // composed nodes per level
  std::vector<std::vector<std::int64_t>> jbase_; // composed node -> base node
  std::vector<std::vector<double>> probs_;       // composed path probabilities
};

/// Convenience wrapper: build and solve the tagged problem at x.
TaggedSolution tagged_solve(const ProblemSpec& spec, const OptimalSolution& base,
                            ConstVec x, const TaggedOptions& opts = {});

/// One-pass average of the per-particle realized tagged costs along the base
/// solution: the estimate of the tagged value's mean over the measure (exact
/// at sigma = 0, Monte Carlo over realized idiosyncratic draws otherwise).
/// Subtracting it from TaggedSolution::cost normalizes the functional
/// derivative to zero mean.
double tagged_cost_average(const ProblemSpec& spec, const OptimalSolution& sol);

/// tagged cost at x minus tagged_cost_average: the normalized functional
/// derivative of the value at the base initial measure.
double normalized_tagged_value(const ProblemSpec& spec, const OptimalSolution& base,
                               ConstVec x, const TaggedOptions& opts = {});

struct SecondDirectional {
  Eigen::MatrixXd direction;  // n x N at the root
  Eigen::MatrixXd result;     // n x N: the second derivative applied to it
  double lq_value = 0.0;      // 1/2 <result, direction>_H: the minimum of the
                              // induced linear-quadratic subproblem
  double operator_bound = 0.0;  // ||result||_H / ||direction||_H
  int cg_iterations = 0;
  bool skipped = false;         // running/terminal Hessian data missing
  bool kernel_dropped = false;  // cross kernel absent, treated as zero
};

/// Directional second derivative of the value at a converged base solution:
/// solves the linearized optimality system (the strictly convex quadratic
/// subproblem in the control perturbation) by conjugate gradients in the
/// control metric and returns the root costate of the linearization.
/// Throws SolvabilityError when the convexity margin is not positive and
/// NumericalError when CG fails to reach tol; returns skipped=true when the
/// spec lacks hess_dnu on a nonzero functional.
SecondDirectional second_directional(const ProblemSpec& spec, const OptimalSolution& base,
                                     const ConstMat& dir, double tol = 1e-10,
                                     int max_iters = 500);

/// Finite-difference functional derivative of the tagged value in the
/// measure: re-solves the problem with round(eps N / (1 - eps)) equal-weight
/// copies of x1 injected into the initial ensemble (the snapped mixture
/// weight m/(N+m) replaces eps), tags x in both flows, and differences the
/// normalized tagged values.  rng must carry the same seed the base flow
/// used so the injected re-solve shares its draws.
double dU_dnu_fd(const ProblemSpec& spec, const ConstMat& initial,
                 const ScenarioTree& tree, CounterRng rng, ConstVec x, ConstVec x1,
                 double eps, const SolveOptions& sopts = {},
                 const TaggedOptions& topts = {});

}  // namespace mfc
