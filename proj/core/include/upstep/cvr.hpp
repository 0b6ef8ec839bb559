#pragma once

#include <cstdint>

#include "upstep/tensor.hpp"

namespace upstep {

// What the gate compares the current center magnitude against.
enum class GateReference { PreviousBatch, LastAccepted };

struct GateDecision {
  bool update = false;
  double reference = 0.0;  // the magnitude that was compared against
};

// Center-vector regularization state. prev_mag starts at 1 (the sphere's
// radius) so the first step always passes the gate.
struct CvrState {
  double eta0 = 0.03;
  double s_phi = 0.5;
  double lambda = 1.0;
  GateReference reference_mode = GateReference::PreviousBatch;

  double prev_mag = 1.0;
  std::uint64_t steps_total = 0;
  std::uint64_t steps_updated = 0;
  std::uint64_t steps_skipped = 0;

  double skip_fraction() const {
    return steps_total ? static_cast<double>(steps_skipped) / static_cast<double>(steps_total)
                       : 0.0;
  }
};

// Mean of the row-normalized feature batch: [B, d] -> [d]. Differentiable;
// NumericError if any feature row has zero norm.
Tensor center_vector(const Tensor& features);

// | ||s|| - s_phi | as a scalar on the tape. s_phi must lie in [0, 1].
Tensor cv_loss(const Tensor& center, double s_phi);

// eta0 * (1 - s_mag). s_mag must lie in [0, 1] up to 1e-9 slack
// (ContractError otherwise); it is clamped before use.
double regulated_lr(const CvrState& state, double s_mag);

// Gate: update iff s_mag < reference. Advances counters; the reference moves
// to s_mag unconditionally in PreviousBatch mode, only on accepted steps in
// LastAccepted mode.
GateDecision gate(CvrState& state, double s_mag);

// Toggle-off path: records the step as updated and tracks the reference so
// metrics stay comparable.
void gate_bypass(CvrState& state, double s_mag);

}  // namespace upstep
