#pragma once

#include <Eigen/Dense>
#include <iosfwd>

#include "mfc/measure.hpp"
#include "mfc/storage.hpp"
#include "mfc/tree.hpp"

namespace mfc {

/// A per-(step, node, particle) vector field on the scenario tree, backed by
/// a LevelStore.  Level k holds nodes(k) blocks of `particles` columns of
/// `dim` doubles each, column-major: the block of node j is the column range
/// [j * particles, (j+1) * particles).
///
/// States use levels 0..K (level 0 is the single root node, so all initial
/// particles are shared); controls use levels 0..K-1.  A field indexed this
/// way can only depend on the noise revealed up to its own level, which makes
/// adaptedness structural rather than a runtime property.
class TreeField {
 public:
  TreeField() = default;
  TreeField(const ScenarioTree& tree, int particles, int levels);

  const ScenarioTree& tree() const { return *tree_; }
  int dim() const { return dim_; }
  int particles() const { return particles_; }
  int levels() const { return levels_; }
  std::int64_t nodes(int k) const { return tree_->nodes(k); }
  std::size_t level_doubles(int k) const { return store_.level_doubles(k); }

  LevelStore::Pin pin(int k) { return LevelStore::Pin(store_, k, false); }
  LevelStore::Pin pin_overwrite(int k) { return LevelStore::Pin(store_, k, true); }
  /// Read-only pin (callers must not write through it).
  LevelStore::Pin pin(int k) const {
    return LevelStore::Pin(const_cast<LevelStore&>(store_), k, false);
  }

  /// Column block of node j inside a pinned level.
  Eigen::Map<Eigen::MatrixXd> node_block(double* level, std::int64_t j) const {
    return Eigen::Map<Eigen::MatrixXd>(level + static_cast<std::size_t>(j) * block_doubles(),
                                       dim_, particles_);
  }
  Eigen::Map<const Eigen::MatrixXd> node_block(const double* level, std::int64_t j) const {
    return Eigen::Map<const Eigen::MatrixXd>(
        level + static_cast<std::size_t>(j) * block_doubles(), dim_, particles_);
  }
  std::size_t block_doubles() const {
    return static_cast<std::size_t>(dim_) * static_cast<std::size_t>(particles_);
  }

  /// Conditional (per-node) empirical measure view into a pinned level.
  MeasureView node_measure(const double* level, std::int64_t j) const {
    return MeasureView{level + static_cast<std::size_t>(j) * block_doubles(), nullptr, dim_,
                       particles_};
  }

 private:
  const ScenarioTree* tree_ = nullptr;
  int dim_ = 0;
  int particles_ = 0;
  int levels_ = 0;
  LevelStore store_;
};

/// Particle states X[k](j, i) on levels 0..K.
class ParticleEnsemble {
 public:
  ParticleEnsemble() = default;
  ParticleEnsemble(const ScenarioTree& tree, int particles)
      : field_(tree, particles, tree.grid().steps + 1) {}

  TreeField& field() { return field_; }
  const TreeField& field() const { return field_; }
  int particles() const { return field_.particles(); }
  int dim() const { return field_.dim(); }
  int steps() const { return field_.levels() - 1; }

  /// Writes the shared initial particle block (level 0 has one node).
  void set_initial(const ConstMat& points);

  /// Copy of the conditional measure at (k, j), equal weights.
  EmpiricalMeasure conditional_measure(int k, std::int64_t j) const;
  Eigen::VectorXd conditional_mean(int k, std::int64_t j) const;

 private:
  TreeField field_;
};

/// Controls u[k](j, i) on levels 0..K-1.
class ControlField {
 public:
  ControlField() = default;
  ControlField(const ScenarioTree& tree, int particles)
      : field_(tree, particles, tree.grid().steps) {}

  TreeField& field() { return field_; }
  const TreeField& field() const { return field_; }
  int particles() const { return field_.particles(); }
  int dim() const { return field_.dim(); }
  int steps() const { return field_.levels(); }

  void fill(double value);

 private:
  TreeField field_;
};

/// Adjoint states Z[k](j, i) on levels 0..K.
class AdjointField {
 public:
  AdjointField() = default;
  AdjointField(const ScenarioTree& tree, int particles)
      : field_(tree, particles, tree.grid().steps + 1) {}

  TreeField& field() { return field_; }
  const TreeField& field() const { return field_; }

 private:
  TreeField field_;
};

/// Streams "k,j,i,x1..xn" rows for all levels of a field (states, controls,
/// or adjoints; `levels` of the field decide the k range).
void write_field_csv(std::ostream& os, const TreeField& field);

/// Per-level inner product sum_j P_j (1/N) sum_i a(j,i) . b(j,i) over raw
/// level arrays (layout as in TreeField).  Deterministic chunked reduction.
double level_inner(const double* a, const double* b, const std::vector<double>& probs,
                   std::int64_t nodes, int dim, int particles);

/// Time-weighted control inner product sum_k dt sum_j P_j (1/N) sum_i a . b.
/// The square of the induced norm is what the solver's RMS stopping metric
/// normalizes by the horizon.
double control_inner(const ControlField& a, const ControlField& b);

/// Levelwise field algebra (shapes of all operands must match).
void field_copy(const TreeField& a, TreeField& dst);
/// dst = a + t * b; dst may alias a or b.
void field_axpy(const TreeField& a, double t, const TreeField& b, TreeField& dst);
double field_max_abs(const TreeField& a);
/// Max absolute entry difference, the metric for control-table agreement.
double field_max_diff(const TreeField& a, const TreeField& b);

}  // namespace mfc
