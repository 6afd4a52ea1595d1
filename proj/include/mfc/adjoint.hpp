#pragma once

#include "mfc/dynamics.hpp"
#include "mfc/ensemble.hpp"
#include "mfc/model.hpp"

namespace mfc {

/// Backward adjoint recursion along the tree, driven by exact child
/// probabilities:
///   Z[K](j,i) = h_x(X[K]) + grad dF_T/dnu(m_Kj)(X[K](j,i)),
///   Z[k](j,i) = sum_c p_c Z[k+1](child c of j, i)
///               + dt [ l_x(X[k], u[k]) + grad dF/dnu(m_kj)(X[k](j,i)) ].
/// With the left-endpoint cost quadrature this makes Z[k] the exact gradient
/// of the discrete cost with respect to X[k] in the per-node H_m pairing; in
/// particular Z[0] is the exact derivative of the value with respect to the
/// initial particles.
AdjointField solve_bsde(const ProblemSpec& spec, const ParticleEnsemble& ens,
                        const ControlField& u);

struct GradientNorms {
  double rms = 0.0;  // sqrt(<G,G> / horizon), the solver's stopping metric
  double sup = 0.0;  // max-abs entry across the tree
};

/// Exact gradient of the discrete cost with respect to the control field:
///   G[k](j,i) = l_v(X[k], u[k]) + sum_c p_c Z[k+1](child c of j, i).
/// One fused backward sweep, two live adjoint levels; no adjoint field is
/// stored.  When grad_out is null, only the norms are computed.
GradientNorms cost_gradient(const ProblemSpec& spec, const ParticleEnsemble& ens,
                            const ControlField& u, ControlField* grad_out);

}  // namespace mfc
