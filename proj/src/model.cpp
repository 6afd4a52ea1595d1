#include "mfc/model.hpp"

#include <cmath>
#include <limits>
#include <memory>

#include "mfc/errors.hpp"
#include "mfc/rng.hpp"

namespace mfc {

// ============================================================================
// Batch helpers with pointwise fallbacks.
// ============================================================================

void functional_grad_batch(const MeasureFunctional& f, const MeasureView& m,
                           const ConstMat& X, RefMat out) {
  if (f.grad_dnu_batch) {
    f.grad_dnu_batch(m, X, out);
    return;
  }
  Eigen::VectorXd g(X.rows());
  for (Eigen::Index i = 0; i < X.cols(); ++i) {
    f.grad_dnu(m, X.col(i), g);
    out.col(i) = g;
  }
}

void functional_hess_apply(const MeasureFunctional& f, const MeasureView& m,
                           const ConstMat& X, const ConstMat& dir, RefMat out) {
  if (f.hess_apply_batch) {
    f.hess_apply_batch(m, X, dir, out);
    return;
  }
  Eigen::MatrixXd hess(X.rows(), X.rows());
  for (Eigen::Index i = 0; i < X.cols(); ++i) {
    f.hess_dnu(m, X.col(i), hess);
    out.col(i) += hess * dir.col(i);
  }
}

void functional_kernel_apply(const MeasureFunctional& f, const MeasureView& m,
                             const ConstMat& X, const ConstMat& dir, RefMat out) {
  if (f.kernel_apply_batch) {
    f.kernel_apply_batch(m, X, dir, out);
    return;
  }
  Eigen::MatrixXd kernel(X.rows(), X.rows());
  for (Eigen::Index i = 0; i < X.cols(); ++i) {
    for (Eigen::Index l = 0; l < m.atoms; ++l) {
      f.cross_kernel(m, X.col(i), m.atom(l), kernel);
      out.col(i) += m.weight(l) * (kernel * dir.col(l));
    }
  }
}

// ============================================================================
// Moment functionals.
// ============================================================================

namespace {

struct MomentData {
  MomentBasis basis;
  MomentObjective objective;

  Eigen::VectorXd moments(const MeasureView& m) const {
    Eigen::MatrixXd phi(basis.r, m.atoms);
    basis.phi(m.mat(), phi);
    if (m.weights)
      return phi * Eigen::Map<const Eigen::VectorXd>(m.weights, m.atoms);
    return phi.rowwise().sum() / static_cast<double>(m.atoms);
  }

  Eigen::VectorXd grad_at(const Eigen::VectorXd& y) const {
    Eigen::VectorXd dG(basis.r);
    objective.grad(y, dG);
    return dG;
  }

  /// Columns are dphi_s(x), s = 0..r-1.
  Eigen::MatrixXd dphi_point(const Eigen::VectorXd& x) const {
    Eigen::MatrixXd cols(basis.dim, basis.r);
    Eigen::MatrixXd xm = x;
    Eigen::MatrixXd tmp(basis.dim, 1);
    for (int s = 0; s < basis.r; ++s) {
      basis.dphi(xm, s, tmp);
      cols.col(s) = tmp;
    }
    return cols;
  }
};

}  // namespace

MeasureFunctional make_moment_functional(MomentBasis basis, MomentObjective objective) {
  if (basis.r <= 0 || basis.dim <= 0 || !basis.phi || !basis.dphi || !basis.d2phi)
    throw InvalidArgument("moment functional: incomplete basis");
  if (!objective.value || !objective.grad)
    throw InvalidArgument("moment functional: incomplete objective");
  auto d = std::make_shared<MomentData>(MomentData{std::move(basis), std::move(objective)});

  MeasureFunctional f;
  f.value = [d](const MeasureView& m) { return d->objective.value(d->moments(m)); };

  f.dnu = [d](const MeasureView& m, ConstVec x) {
    const Eigen::VectorXd y = d->moments(m);
    const Eigen::VectorXd dG = d->grad_at(y);
    Eigen::MatrixXd phix(d->basis.r, 1);
    Eigen::MatrixXd xm = x;
    d->basis.phi(xm, phix);
    return dG.dot(phix.col(0) - y);
  };

  f.grad_dnu = [d](const MeasureView& m, ConstVec x, RefVec out) {
    const Eigen::VectorXd dG = d->grad_at(d->moments(m));
    out = d->dphi_point(x) * dG;
  };

  f.grad_dnu_batch = [d](const MeasureView& m, const ConstMat& X, RefMat out) {
    const Eigen::VectorXd dG = d->grad_at(d->moments(m));
    out.setZero();
    Eigen::MatrixXd tmp(X.rows(), X.cols());
    for (int s = 0; s < d->basis.r; ++s) {
      if (dG[s] == 0.0) continue;
      d->basis.dphi(X, s, tmp);
      out += dG[s] * tmp;
    }
  };

  if (d->objective.hess) {
    f.hess_dnu = [d](const MeasureView& m, ConstVec x, RefMat out) {
      const Eigen::VectorXd dG = d->grad_at(d->moments(m));
      out.setZero();
      Eigen::MatrixXd hs(d->basis.dim, d->basis.dim);
      for (int s = 0; s < d->basis.r; ++s) {
        if (dG[s] == 0.0) continue;
        d->basis.d2phi(x, s, hs);
        out += dG[s] * hs;
      }
    };

    f.cross_kernel = [d](const MeasureView& m, ConstVec x, ConstVec x1, RefMat out) {
      const Eigen::VectorXd y = d->moments(m);
      Eigen::MatrixXd H(d->basis.r, d->basis.r);
      d->objective.hess(y, H);
      out = d->dphi_point(x) * H * d->dphi_point(x1).transpose();
    };

    f.hess_apply_batch = [d](const MeasureView& m, const ConstMat& X, const ConstMat& dir,
                             RefMat out) {
      const Eigen::VectorXd dG = d->grad_at(d->moments(m));
      if (d->basis.d2phi_apply) {
        d->basis.d2phi_apply(X, dG, dir, out);
        return;
      }
      Eigen::MatrixXd hs(d->basis.dim, d->basis.dim);
      Eigen::MatrixXd acc(d->basis.dim, d->basis.dim);
      for (Eigen::Index i = 0; i < X.cols(); ++i) {
        acc.setZero();
        for (int s = 0; s < d->basis.r; ++s) {
          if (dG[s] == 0.0) continue;
          d->basis.d2phi(X.col(i), s, hs);
          acc += dG[s] * hs;
        }
        out.col(i) += acc * dir.col(i);
      }
    };

    // Low-rank identity: sum_l w_l K(x, xi_l) d_l
    //   = Dphi(x) * d2G * g   with   g_t = sum_l w_l dphi_t(xi_l) . d_l,
    // so the kernel application costs O(atoms * r * n), never O(atoms^2).
    f.kernel_apply_batch = [d](const MeasureView& m, const ConstMat& X, const ConstMat& dir,
                               RefMat out) {
      const Eigen::VectorXd y = d->moments(m);
      Eigen::MatrixXd H(d->basis.r, d->basis.r);
      d->objective.hess(y, H);
      Eigen::VectorXd g = Eigen::VectorXd::Zero(d->basis.r);
      Eigen::MatrixXd tmp(d->basis.dim, m.atoms);
      for (int t = 0; t < d->basis.r; ++t) {
        d->basis.dphi(m.mat(), t, tmp);
        double acc = 0.0;
        for (Eigen::Index l = 0; l < m.atoms; ++l)
          acc += m.weight(l) * tmp.col(l).dot(dir.col(l));
        g[t] = acc;
      }
      const Eigen::VectorXd c = H * g;
      Eigen::MatrixXd tx(X.rows(), X.cols());
      for (int s = 0; s < d->basis.r; ++s) {
        if (c[s] == 0.0) continue;
        d->basis.dphi(X, s, tx);
        out += c[s] * tx;
      }
    };
  }
  return f;
}

MeasureFunctional make_quadratic_moment_functional(int dim, double kappa, double kappa_bar) {
  MomentBasis basis;
  basis.r = dim + 1;  // moments: mean components, then second moment |x|^2
  basis.dim = dim;
  basis.phi = [dim](const ConstMat& X, RefMat out) {
    out.topRows(dim) = X;
    out.row(dim) = X.colwise().squaredNorm();
  };
  basis.dphi = [dim](const ConstMat& X, int s, RefMat out) {
    if (s < dim) {
      out.setZero();
      out.row(s).setOnes();
    } else {
      out = 2.0 * X;
    }
  };
  basis.d2phi = [dim](ConstVec, int s, RefMat out) {
    if (s < dim)
      out.setZero();
    else
      out = 2.0 * Eigen::MatrixXd::Identity(dim, dim);
  };
  basis.d2phi_apply = [dim](const ConstMat&, ConstVec coef, const ConstMat& dir, RefMat out) {
    out += (2.0 * coef[dim]) * dir;
  };

  MomentObjective obj;
  obj.value = [dim, kappa, kappa_bar](ConstVec y) {
    const double mean_sq = y.head(dim).squaredNorm();
    return 0.5 * kappa * (y[dim] - mean_sq) + 0.5 * kappa_bar * mean_sq;
  };
  obj.grad = [dim, kappa, kappa_bar](ConstVec y, RefVec out) {
    out.head(dim) = (kappa_bar - kappa) * y.head(dim);
    out[dim] = 0.5 * kappa;
  };
  obj.hess = [dim, kappa, kappa_bar](ConstVec, RefMat out) {
    out.setZero();
    out.topLeftCorner(dim, dim) =
        (kappa_bar - kappa) * Eigen::MatrixXd::Identity(dim, dim);
  };
  return make_moment_functional(std::move(basis), std::move(obj));
}

MeasureFunctional make_zero_functional(int dim) {
  MeasureFunctional f;
  f.value = [](const MeasureView&) { return 0.0; };
  f.dnu = [](const MeasureView&, ConstVec) { return 0.0; };
  f.grad_dnu = [](const MeasureView&, ConstVec, RefVec out) { out.setZero(); };
  f.grad_dnu_batch = [](const MeasureView&, const ConstMat&, RefMat out) { out.setZero(); };
  f.hess_dnu = [](const MeasureView&, ConstVec, RefMat out) { out.setZero(); };
  f.cross_kernel = [](const MeasureView&, ConstVec, ConstVec, RefMat out) { out.setZero(); };
  f.hess_apply_batch = [](const MeasureView&, const ConstMat&, const ConstMat&, RefMat) {};
  f.kernel_apply_batch = [](const MeasureView&, const ConstMat&, const ConstMat&, RefMat) {};
  (void)dim;
  return f;
}

// ============================================================================
// ProblemSpec.
// ============================================================================

void ProblemSpec::validate() const {
  if (dim < 1) throw InvalidArgument("problem: dim must be >= 1");
  if (!(horizon > 0)) throw InvalidArgument("problem: horizon must be positive");
  if (!(lambda > 0)) throw InvalidArgument("problem: lambda must be positive");
  if (sigma.rows() != dim || sigma.cols() != dim)
    throw InvalidArgument("problem: sigma must be dim x dim");
  if (beta.rows() != dim || beta.cols() != dim)
    throw InvalidArgument("problem: beta must be dim x dim");
  if (!l || !l_x || !l_v || !l_xx || !l_xv || !l_vv)
    throw InvalidArgument("problem: running cost callbacks incomplete");
  if (!h || !h_x || !h_xx) throw InvalidArgument("problem: terminal cost callbacks incomplete");
  if (!running.value || !running.dnu || !running.grad_dnu)
    throw InvalidArgument("problem: running mean-field functional incomplete");
  if (!terminal.value || !terminal.dnu || !terminal.grad_dnu)
    throw InvalidArgument("problem: terminal mean-field functional incomplete");
}

double spec_l_sum(const ProblemSpec& s, const ConstMat& X, const ConstMat& V) {
  if (s.l_sum_batch) return s.l_sum_batch(X, V);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < X.cols(); ++i) acc += s.l(X.col(i), V.col(i));
  return acc;
}

void spec_l_x(const ProblemSpec& s, const ConstMat& X, const ConstMat& V, RefMat out) {
  if (s.l_x_batch) {
    s.l_x_batch(X, V, out);
    return;
  }
  Eigen::VectorXd g(X.rows());
  for (Eigen::Index i = 0; i < X.cols(); ++i) {
    s.l_x(X.col(i), V.col(i), g);
    out.col(i) = g;
  }
}

void spec_l_v(const ProblemSpec& s, const ConstMat& X, const ConstMat& V, RefMat out) {
  if (s.l_v_batch) {
    s.l_v_batch(X, V, out);
    return;
  }
  Eigen::VectorXd g(X.rows());
  for (Eigen::Index i = 0; i < X.cols(); ++i) {
    s.l_v(X.col(i), V.col(i), g);
    out.col(i) = g;
  }
}

double spec_h_sum(const ProblemSpec& s, const ConstMat& X) {
  if (s.h_sum_batch) return s.h_sum_batch(X);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < X.cols(); ++i) acc += s.h(X.col(i));
  return acc;
}

void spec_h_x(const ProblemSpec& s, const ConstMat& X, RefMat out) {
  if (s.h_x_batch) {
    s.h_x_batch(X, out);
    return;
  }
  Eigen::VectorXd g(X.rows());
  for (Eigen::Index i = 0; i < X.cols(); ++i) {
    s.h_x(X.col(i), g);
    out.col(i) = g;
  }
}

namespace {

template <typename Pointwise>
void hess_blocks(const ConstMat& X, const ConstMat& V, RefMat out, Pointwise&& point) {
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd block(n, n);
  for (Eigen::Index i = 0; i < X.cols(); ++i) {
    point(X.col(i), V.col(i), block);
    out.col(i) = Eigen::Map<const Eigen::VectorXd>(block.data(), n * n);
  }
}

}  // namespace

void spec_l_xx(const ProblemSpec& s, const ConstMat& X, const ConstMat& V, RefMat out) {
  if (s.l_xx_batch) {
    s.l_xx_batch(X, V, out);
    return;
  }
  hess_blocks(X, V, out, [&](ConstVec x, ConstVec v, RefMat b) { s.l_xx(x, v, b); });
}

void spec_l_xv(const ProblemSpec& s, const ConstMat& X, const ConstMat& V, RefMat out) {
  if (s.l_xv_batch) {
    s.l_xv_batch(X, V, out);
    return;
  }
  hess_blocks(X, V, out, [&](ConstVec x, ConstVec v, RefMat b) { s.l_xv(x, v, b); });
}

void spec_l_vv(const ProblemSpec& s, const ConstMat& X, const ConstMat& V, RefMat out) {
  if (s.l_vv_batch) {
    s.l_vv_batch(X, V, out);
    return;
  }
  hess_blocks(X, V, out, [&](ConstVec x, ConstVec v, RefMat b) { s.l_vv(x, v, b); });
}

void spec_h_xx(const ProblemSpec& s, const ConstMat& X, RefMat out) {
  if (s.h_xx_batch) {
    s.h_xx_batch(X, out);
    return;
  }
  hess_blocks(X, X, out, [&](ConstVec x, ConstVec, RefMat b) { s.h_xx(x, b); });
}

double check_convexity_margin(const ProblemSpec& spec) {
  const double T = spec.horizon;
  return spec.lambda - T * (spec.c_T_prime + spec.c_h_prime) -
         0.5 * (spec.c_prime + spec.c_l_prime) * T * T;
}

// ============================================================================
// Validators.
// ============================================================================

FunctionalDerivativeReport validate_functional_derivative(const MeasureFunctional& f,
                                                          const EmpiricalMeasure& m,
                                                          const EmpiricalMeasure& mprime,
                                                          std::vector<double> eps_grid) {
  m.validate();
  mprime.validate();
  if (eps_grid.size() < 2) throw InvalidArgument("derivative check: need at least two eps");

  const MeasureView mv = m.view();
  double pairing = 0.0;
  for (Eigen::Index j = 0; j < mprime.atoms(); ++j)
    pairing += mprime.weights[j] * f.dnu(mv, mprime.points.col(j));
  for (Eigen::Index i = 0; i < m.atoms(); ++i)
    pairing -= m.weights[i] * f.dnu(mv, m.points.col(i));

  const double base = f.value(mv);
  FunctionalDerivativeReport report;
  report.eps = eps_grid;
  report.scale = std::max({std::abs(base), std::abs(pairing), 1.0});
  const double floor = 1e-13 * report.scale;

  for (double eps : eps_grid) {
    const double value = f.value(mix(m, mprime, eps).view());
    report.error.push_back(std::abs(value - base - eps * pairing));
  }

  // Log-log slope over the points above the noise floor.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int count = 0;
  for (std::size_t k = 0; k < eps_grid.size(); ++k) {
    if (report.error[k] <= floor) continue;
    const double lx = std::log(eps_grid[k]);
    const double ly = std::log(report.error[k]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++count;
  }
  if (count < 2) {
    // Remainder at machine precision for every eps: exactly linear F.
    report.observed_order = std::numeric_limits<double>::infinity();
    report.pass = true;
    return report;
  }
  report.observed_order = (count * sxy - sx * sy) / (count * sxx - sx * sx);
  // A correct derivative leaves an O(eps^2) remainder; a broken one leaves
  // O(eps).  1.3 separates the two regimes with slack for curvature noise.
  report.pass = report.observed_order >= 1.3;
  return report;
}

GradientCheckReport validate_pointwise_gradients(const ProblemSpec& spec, int trials,
                                                 std::uint64_t seed, double step, double tol) {
  spec.validate();
  const int n = spec.dim;
  CounterRng rng(seed);
  GradientCheckReport report;
  report.trials = trials;

  auto update = [&](double err, const char* what) {
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_callback = what;
    }
  };

  Eigen::VectorXd gp(n), gm(n);
  Eigen::MatrixXd H(n, n);
  for (int t = 0; t < trials; ++t) {
    Eigen::VectorXd x(n), v(n);
    for (int d = 0; d < n; ++d) {
      x[d] = rng.normal(0, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(d),
                        rng_channel::kProbe);
      v[d] = rng.normal(1, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(d),
                        rng_channel::kProbe);
    }

    auto check_grad = [&](auto&& value, auto&& grad, Eigen::VectorXd& at, const char* what) {
      Eigen::VectorXd analytic(n);
      grad(analytic);
      const double denom = std::max(1.0, analytic.cwiseAbs().maxCoeff());
      for (int d = 0; d < n; ++d) {
        const double keep = at[d];
        at[d] = keep + step;
        const double up = value();
        at[d] = keep - step;
        const double dn = value();
        at[d] = keep;
        update(std::abs((up - dn) / (2 * step) - analytic[d]) / denom, what);
      }
    };

    check_grad([&] { return spec.l(x, v); }, [&](RefVec out) { spec.l_x(x, v, out); }, x, "l_x");
    check_grad([&] { return spec.l(x, v); }, [&](RefVec out) { spec.l_v(x, v, out); }, v, "l_v");
    check_grad([&] { return spec.h(x); }, [&](RefVec out) { spec.h_x(x, out); }, x, "h_x");

    auto check_hess = [&](auto&& grad, auto&& hess, Eigen::VectorXd& at, const char* what) {
      hess(H);
      const double denom = std::max(1.0, H.cwiseAbs().maxCoeff());
      for (int d = 0; d < n; ++d) {
        const double keep = at[d];
        at[d] = keep + step;
        grad(gp);
        at[d] = keep - step;
        grad(gm);
        at[d] = keep;
        // Column d of the Hessian in the (row: gradient component) layout.
        for (int r = 0; r < n; ++r)
          update(std::abs((gp[r] - gm[r]) / (2 * step) - H(r, d)) / denom, what);
      }
    };

    // (l_xx)_{rd} = d2 l / dx_r dx_d, (l_xv)_{rd} = d2 l / dx_r dv_d: vary the
    // second index, differentiate the first-derivative component r.
    check_hess([&](RefVec out) { spec.l_x(x, v, out); },
               [&](RefMat out) { spec.l_xx(x, v, out); }, x, "l_xx");
    check_hess([&](RefVec out) { spec.l_x(x, v, out); },
               [&](RefMat out) { spec.l_xv(x, v, out); }, v, "l_xv");
    check_hess([&](RefVec out) { spec.l_v(x, v, out); },
               [&](RefMat out) { spec.l_vv(x, v, out); }, v, "l_vv");
    check_hess([&](RefVec out) { spec.h_x(x, out); }, [&](RefMat out) { spec.h_xx(x, out); },
               x, "h_xx");
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace mfc
