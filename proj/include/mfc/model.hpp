#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mfc/measure.hpp"

namespace mfc {

/// Mean-field cost functional F acting on finitely supported measures,
/// described by pointwise callbacks:
///   value(m)                 F(m)
///   dnu(m, x)                functional derivative dF/dnu(m)(x), normalized
///                            so its integral against m vanishes
///   grad_dnu(m, x, out)      x-gradient of dF/dnu(m) at x           (n)
///   hess_dnu(m, x, out)      x-Hessian of dF/dnu(m) at x            (n x n), optional
///   cross_kernel(m,x,x1,out) mixed kernel D D1 d2F/dnu2(m)(x, x1)   (n x n), optional
///
/// With atoms xi of weight wi, the exact Hessian of X -> F(emp(X)) is
///   d2F/dxi dxl = wi delta_il hess_dnu(xi) + wi wl cross_kernel(xi, xl),
/// which is what the second-order machinery consumes.  Batch entries, when
/// set, must agree with the pointwise ones; they only exist for speed.
struct MeasureFunctional {
  std::function<double(const MeasureView&)> value;
  std::function<double(const MeasureView&, ConstVec)> dnu;
  std::function<void(const MeasureView&, ConstVec, RefVec)> grad_dnu;
  std::function<void(const MeasureView&, ConstVec, RefMat)> hess_dnu;        // optional
  std::function<void(const MeasureView&, ConstVec, ConstVec, RefMat)> cross_kernel;  // optional

  /// out (n x M) <- grad_dnu(m, X.col(i)) columnwise.
  std::function<void(const MeasureView&, const ConstMat&, RefMat)> grad_dnu_batch;
  /// out.col(i) += hess_dnu(m, X.col(i)) * dir.col(i).
  std::function<void(const MeasureView&, const ConstMat&, const ConstMat&, RefMat)>
      hess_apply_batch;
  /// out.col(i) += sum_l w_l cross_kernel(m, X.col(i), m.atom(l)) * dir.col(l),
  /// where dir columns index the atoms of m.
  std::function<void(const MeasureView&, const ConstMat&, const ConstMat&, RefMat)>
      kernel_apply_batch;

  bool has_hess() const { return static_cast<bool>(hess_dnu); }
  bool has_kernel() const { return static_cast<bool>(cross_kernel); }
};

/// Engine-side evaluation helpers: use the batch callback when present,
/// otherwise fall back to the pointwise one (dense O(atoms^2) for the
/// kernel).  dir/out column counts must match X.
void functional_grad_batch(const MeasureFunctional& f, const MeasureView& m,
                           const ConstMat& X, RefMat out);
void functional_hess_apply(const MeasureFunctional& f, const MeasureView& m,
                           const ConstMat& X, const ConstMat& dir, RefMat out);
void functional_kernel_apply(const MeasureFunctional& f, const MeasureView& m,
                             const ConstMat& X, const ConstMat& dir, RefMat out);

// ============================================================================
// Moment-based functionals: F(m) = G(y) with y_s = integral of phi_s dm.
// All derivative callbacks follow by the chain rule, so one analytic basis
// yields a complete, internally consistent MeasureFunctional.
// ============================================================================

struct MomentBasis {
  int r = 0;    // number of scalar statistics
  int dim = 0;  // state dimension
  /// out (r x M): phi_s at each column of X.
  std::function<void(const ConstMat&, RefMat)> phi;
  /// out (n x M): gradient of phi_s at each column of X.
  std::function<void(const ConstMat&, int, RefMat)> dphi;
  /// out (n x n): Hessian of phi_s at a point.
  std::function<void(ConstVec, int, RefMat)> d2phi;
  /// Optional fast path: out.col(i) += sum_s coef[s] d2phi_s(X.col(i)) dir.col(i).
  std::function<void(const ConstMat&, ConstVec, const ConstMat&, RefMat)> d2phi_apply;
};

struct MomentObjective {
  std::function<double(ConstVec)> value;        // G(y)
  std::function<void(ConstVec, RefVec)> grad;   // dG
  std::function<void(ConstVec, RefMat)> hess;   // d2G, optional
};

/// Builds the full MeasureFunctional (including batch fast paths, and
/// hess_dnu / cross_kernel when the objective Hessian is present) from the
/// moment representation.
MeasureFunctional make_moment_functional(MomentBasis basis, MomentObjective objective);

/// kappa/2 * Var(m) + kappa_bar/2 * |mean(m)|^2 in any dimension.  The
/// standard quadratic interaction; its cross kernel is the constant
/// (kappa_bar - kappa) I.
MeasureFunctional make_quadratic_moment_functional(int dim, double kappa, double kappa_bar);

/// The zero functional (value, derivatives, and kernels all vanish).
MeasureFunctional make_zero_functional(int dim);

// ============================================================================
// Problem data.
// ============================================================================

/// Data of one mean field control problem:
///   J = E integral_0^T [ l(X, u) + F(m) ] dt + E [ h(X(T)) + F_T(m_T) ],
///   dX = u dt + sigma dW + beta dB,   m = conditional law given B.
///
/// Derivative callbacks are required; batch entries are optional fast paths.
/// The displacement-convexity constants declare the bounds used by the
/// solvability margin: l is lambda-convex in v, the x-blocks of l and h have
/// curvature >= -c_l_prime and -c_h_prime, and the mean-field kernels of F
/// and F_T have one-sided bounds -c_prime and -c_T_prime.
struct ProblemSpec {
  std::string name;
  int dim = 1;
  double horizon = 1.0;
  Eigen::MatrixXd sigma;  // n x n idiosyncratic loading
  Eigen::MatrixXd beta;   // n x n common-noise loading

  double lambda = 1.0;
  double c_l_prime = 0.0;
  double c_h_prime = 0.0;
  double c_prime = 0.0;
  double c_T_prime = 0.0;

  std::function<double(ConstVec, ConstVec)> l;
  std::function<void(ConstVec, ConstVec, RefVec)> l_x, l_v;
  /// Hessian blocks: (l_xx)_{ab} = d2l/dx_a dx_b, (l_xv)_{ab} = d2l/dx_a dv_b,
  /// (l_vv)_{ab} = d2l/dv_a dv_b.
  std::function<void(ConstVec, ConstVec, RefMat)> l_xx, l_xv, l_vv;
  std::function<double(ConstVec)> h;
  std::function<void(ConstVec, RefVec)> h_x;
  std::function<void(ConstVec, RefMat)> h_xx;
  MeasureFunctional running;   // F
  MeasureFunctional terminal;  // F_T

  /// Optional batch fast paths over column blocks (X, V are n x M).
  std::function<double(const ConstMat&, const ConstMat&)> l_sum_batch;
  std::function<void(const ConstMat&, const ConstMat&, RefMat)> l_x_batch, l_v_batch;
  std::function<double(const ConstMat&)> h_sum_batch;
  std::function<void(const ConstMat&, RefMat)> h_x_batch;
  /// Hessian blocks flattened columnwise: out is (n*n x M), column i holding
  /// the n x n block at (X.col(i), V.col(i)) in column-major order.
  std::function<void(const ConstMat&, const ConstMat&, RefMat)> l_xx_batch, l_xv_batch,
      l_vv_batch;
  std::function<void(const ConstMat&, RefMat)> h_xx_batch;

  /// Throws InvalidArgument if a required callback or shape is missing.
  void validate() const;
};

/// Engine-side batch evaluation with pointwise fallback.
double spec_l_sum(const ProblemSpec& s, const ConstMat& X, const ConstMat& V);
void spec_l_x(const ProblemSpec& s, const ConstMat& X, const ConstMat& V, RefMat out);
void spec_l_v(const ProblemSpec& s, const ConstMat& X, const ConstMat& V, RefMat out);
double spec_h_sum(const ProblemSpec& s, const ConstMat& X);
void spec_h_x(const ProblemSpec& s, const ConstMat& X, RefMat out);
void spec_l_xx(const ProblemSpec& s, const ConstMat& X, const ConstMat& V, RefMat out);
void spec_l_xv(const ProblemSpec& s, const ConstMat& X, const ConstMat& V, RefMat out);
void spec_l_vv(const ProblemSpec& s, const ConstMat& X, const ConstMat& V, RefMat out);
void spec_h_xx(const ProblemSpec& s, const ConstMat& X, RefMat out);

/// Displacement-convexity margin
///   lambda - T (c_T' + c_h') - (c' + c_l') T^2 / 2.
/// Positive margin certifies strong convexity of the control problem, hence
/// a unique optimizer reachable by gradient descent.
double check_convexity_margin(const ProblemSpec& spec);

// ============================================================================
// Validators.
// ============================================================================

struct FunctionalDerivativeReport {
  std::vector<double> eps;
  std::vector<double> error;  // |F(mix) - F(m) - eps * pairing|
  double observed_order = 0;  // log-log slope of error vs eps
  double scale = 0;           // magnitude used for the error floor
  bool pass = false;
};

/// Checks F((1-eps) m + eps m') - F(m) against eps * integral dF/dnu d(m'-m)
/// over a grid of eps.  A correct derivative leaves an O(eps^2) remainder
/// (observed order about 2); a wrong one leaves O(eps), so the pass threshold
/// sits at order >= 1.3, with an absolute floor for exactly-linear F.
FunctionalDerivativeReport validate_functional_derivative(
    const MeasureFunctional& f, const EmpiricalMeasure& m, const EmpiricalMeasure& mprime,
    std::vector<double> eps_grid = {0.1, 0.05, 0.025, 0.0125, 0.00625});

struct GradientCheckReport {
  double max_rel_error = 0;
  std::string worst_callback;
  int trials = 0;
  bool pass = false;
};

/// Central-difference audit of l_x, l_v, h_x (against l, h) and of l_xx,
/// l_xv, l_vv, h_xx (against the first derivatives) at random points.
GradientCheckReport validate_pointwise_gradients(const ProblemSpec& spec, int trials = 20,
                                                 std::uint64_t seed = 0x5eed,
                                                 double step = 1e-5, double tol = 1e-6);

}  // namespace mfc
