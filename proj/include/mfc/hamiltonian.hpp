#pragma once

#include <Eigen/Dense>

#include "mfc/model.hpp"

namespace mfc {

/// Result of the pointwise control minimization
///   L(x, v, p) = l(x, v) + v . p,   H(x, p) = min_v L(x, v, p).
/// Envelope identities: H_p = u_star and H_x = l_x(x, u_star), so the
/// optimal feedback is the p-gradient of H.
struct HamiltonianEval {
  Eigen::VectorXd u_star;
  double H = 0.0;
  Eigen::VectorXd H_p;
  Eigen::VectorXd H_x;
  int newton_iters = 0;
};

/// Minimizes v -> l(x, v) + v . p to ||l_v(x, v) + p|| <= tol by damped
/// Newton (Armijo backtracking).  l_vv >= lambda I makes the objective
/// strongly convex, so the minimizer is unique and any descent direction
/// makes progress; when a Newton step is unusable (singular or inaccurate
/// curvature) the iteration falls back to curvature-floor gradient steps
/// with bisected line search.  Throws NumericalError with diagnostics if
/// the residual still exceeds tol.  `warm` seeds the iteration, otherwise
/// -p / lambda (exact for the pure control penalty lambda/2 |v|^2).
HamiltonianEval argmin_lagrangian(const ProblemSpec& spec, ConstVec x, ConstVec p,
                                  double tol = 1e-10, const Eigen::VectorXd* warm = nullptr);

/// Applies u(j, i) = argmin_v [ l(x(j, i), v) + v . p(j, i) ] across a whole
/// level stored in TreeField layout (dim x particles blocks per node).  Each
/// column is warm-started from the value already in u_level, so sweeps that
/// reuse the previous step's feedback converge in a step or two.
void feedback_level(const ProblemSpec& spec, const double* x_level, const double* p_level,
                    double* u_level, std::int64_t node_count, int particles, double tol = 1e-10);

}  // namespace mfc
