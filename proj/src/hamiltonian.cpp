#include "mfc/hamiltonian.hpp"

#include <cmath>
#include <sstream>

#include "mfc/errors.hpp"
#include "mfc/parallel.hpp"

namespace mfc {

namespace {

constexpr int kMaxNewton = 50;
constexpr int kMaxFallback = 400;
constexpr int kMaxBacktracks = 60;
constexpr double kArmijo = 1e-4;

struct Workspace {
  Eigen::VectorXd v, g, gt, d, trial;
  Eigen::MatrixXd hvv;
  void resize(int n) {
    v.resize(n);
    g.resize(n);
    gt.resize(n);
    d.resize(n);
    trial.resize(n);
    hvv.resize(n, n);
  }
};

/// Bisected line search on the residual norm along ws.d.  l_vv >= lambda I
/// makes the gradient field strongly monotone, so both the Newton direction
/// and -g / lambda strictly decrease ||l_v + p|| for small enough steps; the
/// residual stays numerically meaningful down to machine zero, unlike
/// objective-value differences, which drown in rounding near the minimum.
bool line_step(const ProblemSpec& spec, ConstVec x, ConstVec p, Workspace& ws, double& res) {
  double t = 1.0;
  for (int b = 0; b < kMaxBacktracks; ++b) {
    ws.trial = ws.v + t * ws.d;
    spec.l_v(x, ws.trial, ws.gt);
    ws.gt += p;
    const double res_new = ws.gt.norm();
    if (std::isfinite(res_new) && res_new <= (1.0 - kArmijo * t) * res) {
      ws.v = ws.trial;
      ws.g = ws.gt;
      res = res_new;
      return true;
    }
    t *= 0.5;
  }
  return false;
}

/// Core solve into ws.v; returns {residual, newton iterations}.
std::pair<double, int> minimize(const ProblemSpec& spec, ConstVec x, ConstVec p, double tol,
                                Workspace& ws) {
  spec.l_v(x, ws.v, ws.g);
  ws.g += p;
  double res = ws.g.norm();
  int iters = 0;
  while (res > tol && iters < kMaxNewton) {
    spec.l_vv(x, ws.v, ws.hvv);
    ws.d = -ws.hvv.ldlt().solve(ws.g);
    if (!ws.d.allFinite()) ws.d = -ws.g / spec.lambda;
    if (!line_step(spec, x, p, ws, res)) break;
    ++iters;
  }
  // Gradient fallback with the curvature floor as the step scale; used only
  // when the Newton model is singular or inconsistent with l_v.
  for (int k = 0; res > tol && k < kMaxFallback; ++k) {
    ws.d = -ws.g / spec.lambda;
    if (!line_step(spec, x, p, ws, res)) break;
  }
  return {res, iters};
}

}  // namespace

HamiltonianEval argmin_lagrangian(const ProblemSpec& spec, ConstVec x, ConstVec p, double tol,
                                  const Eigen::VectorXd* warm) {
  if (!(spec.lambda > 0.0))
    throw InvalidArgument("argmin_lagrangian: spec.lambda must be positive");
  if (!(tol > 0.0)) throw InvalidArgument("argmin_lagrangian: tol must be positive");
  Workspace ws;
  ws.resize(spec.dim);
  ws.v = warm ? *warm : Eigen::VectorXd(-p / spec.lambda);
  const auto [res, iters] = minimize(spec, x, p, tol, ws);
  if (!(res <= tol)) {
    std::ostringstream msg;
    msg << "argmin_lagrangian: residual " << res << " > tol " << tol << " after " << iters
        << " Newton iterations plus gradient fallback (|x| = " << x.norm()
        << ", |p| = " << p.norm() << ")";
    throw NumericalError(msg.str());
  }
  HamiltonianEval out;
  out.u_star = ws.v;
  out.H = spec.l(x, ws.v) + ws.v.dot(p);
  out.H_p = ws.v;
  out.H_x.resize(spec.dim);
  spec.l_x(x, ws.v, out.H_x);
  out.newton_iters = iters;
  return out;
}

void feedback_level(const ProblemSpec& spec, const double* x_level, const double* p_level,
                    double* u_level, std::int64_t node_count, int particles, double tol) {
  const int n = spec.dim;
  const std::size_t columns =
      static_cast<std::size_t>(node_count) * static_cast<std::size_t>(particles);
  parallel_chunks(columns, kDefaultGrain / static_cast<std::size_t>(std::max(1, n)),
                  [&](std::size_t, std::size_t b, std::size_t e) {
    Workspace ws;
    ws.resize(n);
    for (std::size_t col = b; col < e; ++col) {
      const std::size_t off = col * static_cast<std::size_t>(n);
      Eigen::Map<const Eigen::VectorXd> x(x_level + off, n);
      Eigen::Map<const Eigen::VectorXd> p(p_level + off, n);
      Eigen::Map<Eigen::VectorXd> u(u_level + off, n);
      ws.v = u;
      if (!ws.v.allFinite()) ws.v = -p / spec.lambda;
      const auto [res, iters] = minimize(spec, x, p, tol, ws);
      (void)iters;
      if (!(res <= tol)) {
        std::ostringstream msg;
        msg << "feedback_level: residual " << res << " > tol " << tol << " at column " << col;
        throw NumericalError(msg.str());
      }
      u = ws.v;
    }
  });
}

}  // namespace mfc
