#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "mfc/grid.hpp"

namespace mfc {

/// Scenario tree discretizing the common noise.  Every node at level k has
/// the same child stencil: `branching` quadrature points per coordinate
/// (1 = degenerate zero increment, 2 = binomial +-sqrt(dt), 3 = Gauss-Hermite
/// with weights 1/6, 2/3, 1/6), combined as a product over the `dim`
/// coordinates, so each node has branching^dim children.  The stencil matches
/// the Gaussian increment's mean (exactly zero) and covariance (dt I within
/// rounding) at every step.
///
/// Node indexing at level k is the base-(children per node) expansion of the
/// path: child c of node j is j * children + c, the parent of j is
/// j / children, and j % children identifies the branch taken on the last
/// step.
class ScenarioTree {
 public:
  ScenarioTree() = default;
  /// Throws InvalidArgument for unsupported branching or when the leaf level
  /// would exceed max_nodes.
  ScenarioTree(const TimeGrid& grid, int branching, int dim,
               std::int64_t max_nodes = std::int64_t(1) << 26);

  const TimeGrid& grid() const { return grid_; }
  int dim() const { return dim_; }
  int branching() const { return branching_; }
  int children() const { return children_; }  // branching^dim

  std::int64_t nodes(int k) const { return node_count_[static_cast<std::size_t>(k)]; }
  std::int64_t parent(std::int64_t j) const { return j / children_; }
  std::int64_t child(std::int64_t j, int c) const { return j * children_ + c; }
  int branch_of(std::int64_t j) const { return static_cast<int>(j % children_); }

  /// Common-noise increment for branch c over one step (already scaled by
  /// sqrt(dt)); column c of an n x children matrix.
  const Eigen::MatrixXd& increments() const { return incr_; }
  /// Branch probabilities; sum to one.
  const Eigen::VectorXd& branch_probs() const { return prob_; }

  /// Path probability bookkeeping: out[child] = parent_probs[parent] * p(branch).
  void root_probs(std::vector<double>& out) const;
  void advance_probs(const std::vector<double>& parent, std::vector<double>& out) const;

  /// Topology as JSON text (stable key order).
  void write_topology_json(std::ostream& os) const;

 private:
  TimeGrid grid_;
  int dim_ = 0;
  int branching_ = 0;
  int children_ = 0;
  Eigen::MatrixXd incr_;
  Eigen::VectorXd prob_;
  std::vector<std::int64_t> node_count_;
};

}  // namespace mfc
