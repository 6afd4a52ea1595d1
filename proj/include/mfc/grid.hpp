#pragma once

#include "mfc/errors.hpp"

namespace mfc {

/// Uniform time grid t_k = t0 + k dt, k = 0..K, with dt = (T - t0) / K.
struct TimeGrid {
  double t0 = 0.0;
  double horizon = 1.0;  // T
  int steps = 1;         // K

  TimeGrid() = default;
  TimeGrid(double t0_, double horizon_, int steps_) : t0(t0_), horizon(horizon_), steps(steps_) {
    if (steps < 1) throw InvalidArgument("time grid: need at least one step");
    if (!(horizon > t0)) throw InvalidArgument("time grid: horizon must exceed t0");
  }

  double dt() const { return (horizon - t0) / steps; }
  double t(int k) const { return t0 + k * dt(); }
};

}  // namespace mfc
