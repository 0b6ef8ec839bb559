#include "upstep/cvr.hpp"

#include <cmath>
#include <string>

namespace upstep {

Tensor center_vector(const Tensor& features) {
  if (features.ndim() != 2)
    throw ShapeError("center_vector: expected [batch, dim] features, got " +
                     shape_str(features.shape()));
  return mean(normalize_rows(features), 0);
}

Tensor cv_loss(const Tensor& center, double s_phi) {
  if (s_phi < 0.0 || s_phi > 1.0)
    throw ContractError("cv_loss: s_phi must lie in [0, 1], got " + std::to_string(s_phi));
  return abs(sub(l2_norm(center), s_phi));
}

namespace {

double checked_mag(const char* op, double s_mag) {
  if (!(s_mag >= -1e-9 && s_mag <= 1.0 + 1e-9))
    throw ContractError(std::string(op) + ": center magnitude " + std::to_string(s_mag) +
                        " outside [0, 1]");
  return std::min(1.0, std::max(0.0, s_mag));
}

}  // namespace

double regulated_lr(const CvrState& state, double s_mag) {
  return state.eta0 * (1.0 - checked_mag("regulated_lr", s_mag));
}

GateDecision gate(CvrState& state, double s_mag) {
  s_mag = checked_mag("gate", s_mag);
  const double reference = state.prev_mag;
  const bool update = s_mag < reference;
  ++state.steps_total;
  if (update)
    ++state.steps_updated;
  else
    ++state.steps_skipped;
  if (state.reference_mode == GateReference::PreviousBatch || update) state.prev_mag = s_mag;
  return {update, reference};
}

void gate_bypass(CvrState& state, double s_mag) {
  s_mag = checked_mag("gate", s_mag);
  ++state.steps_total;
  ++state.steps_updated;
  state.prev_mag = s_mag;
}

}  // namespace upstep
