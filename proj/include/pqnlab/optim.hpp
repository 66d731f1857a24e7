#pragma once
#include <cstdint>

#include "pqnlab/net.hpp"

namespace pqnlab {

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Flat-vector optimiser state shared by adam/radam; sgd ignores it.
struct OptimState {
  Vector m, v;
  long t = 0;
  OptimConfig hp;
};

OptimState make_optim_state(Eigen::Index n, OptimConfig hp = {});

// Rescales grads in place when their l2 norm exceeds max_norm; returns the
// pre-clip norm. max_norm <= 0 disables clipping.
double clip_global_norm(Vector& grads, double max_norm);

// Linear decay lr0 * (1 - step/total) clamped at zero; constant when off.
double lr_at(double lr0, long step, long total_steps, bool linear_decay);

// All steps use the descent convention: params -= update(loss gradient).
void sgd_step(Vector& params, const Vector& grads, double lr);
void adam_step(OptimState& st, Vector& params, const Vector& grads, double lr);
// Rectified Adam: falls back to the plain bias-corrected momentum step while
// the variance estimate is untrustworthy (rho_t <= 4), then switches to the
// variance-rectified adaptive step.
void radam_step(OptimState& st, Vector& params, const Vector& grads,
                double lr);

// Gradient of (coeff/2) * ||W_final||^2: a flat vector equal to coeff * W on
// the final dense weight block and zero elsewhere. Added to the loss gradient
// before the optimiser step.
Vector l2_final_layer_term(const NetworkParams& params, double coeff);

}  // namespace pqnlab
