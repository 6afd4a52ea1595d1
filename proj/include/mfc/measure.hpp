#pragma once

#include <Eigen/Dense>
#include <functional>
#include <iosfwd>

namespace mfc {

using ConstVec = Eigen::Ref<const Eigen::VectorXd>;
using RefVec = Eigen::Ref<Eigen::VectorXd>;
using ConstMat = Eigen::Ref<const Eigen::MatrixXd>;
using RefMat = Eigen::Ref<Eigen::MatrixXd>;

/// Non-owning view of a weighted point cloud.  `points` is column-major
/// n x N (one column per atom); `weights` may be null for the uniform 1/N
/// case, which is the canonical representation inside the particle engine.
struct MeasureView {
  const double* points = nullptr;
  const double* weights = nullptr;
  Eigen::Index dim = 0;
  Eigen::Index atoms = 0;

  Eigen::Map<const Eigen::MatrixXd> mat() const {
    return Eigen::Map<const Eigen::MatrixXd>(points, dim, atoms);
  }
  Eigen::Map<const Eigen::VectorXd> atom(Eigen::Index i) const {
    return Eigen::Map<const Eigen::VectorXd>(points + i * dim, dim);
  }
  double weight(Eigen::Index i) const {
    return weights ? weights[i] : 1.0 / static_cast<double>(atoms);
  }
};

/// Finitely supported probability measure: atoms are columns of `points`,
/// `weights` are nonnegative and sum to one within 1e-12.
struct EmpiricalMeasure {
  Eigen::MatrixXd points;
  Eigen::VectorXd weights;

  Eigen::Index dim() const { return points.rows(); }
  Eigen::Index atoms() const { return points.cols(); }
  MeasureView view() const {
    return MeasureView{points.data(), weights.data(), points.rows(), points.cols()};
  }

  /// Throws InvalidArgument when the invariants fail (shape mismatch,
  /// negative weight, total mass off by more than 1e-12, non-finite entry).
  void validate() const;
};

/// Uniform weights over the given atoms.
EmpiricalMeasure equal_weight_measure(Eigen::MatrixXd points);

/// Mean and second moment; second_moment(m) = integral of |x|^2 dm.
Eigen::VectorXd mean(const MeasureView& m);
double second_moment(const MeasureView& m);
inline Eigen::VectorXd mean(const EmpiricalMeasure& m) { return mean(m.view()); }
inline double second_moment(const EmpiricalMeasure& m) { return second_moment(m.view()); }

/// Image measure under a pointwise map; weights carry over unchanged.
EmpiricalMeasure pushforward(const EmpiricalMeasure& m,
                             const std::function<Eigen::VectorXd(ConstVec)>& map);

/// Convex combination (1-eps) a + eps b on the union support.  Atoms closer
/// than 1e-14 in max norm are merged.  Requires eps in [0, 1].
EmpiricalMeasure mix(const EmpiricalMeasure& a, const EmpiricalMeasure& b, double eps);

/// Exact 2-Wasserstein distance between one-dimensional measures via the
/// monotone (quantile) coupling.  Throws InvalidArgument when dim != 1.
double wasserstein2_1d(const EmpiricalMeasure& a, const EmpiricalMeasure& b);

/// CSV with header "weight,x1,...,xn"; round-trips exactly (17 significant
/// digits per value).
void write_measure_csv(std::ostream& os, const EmpiricalMeasure& m);
EmpiricalMeasure read_measure_csv(std::istream& is);

}  // namespace mfc
