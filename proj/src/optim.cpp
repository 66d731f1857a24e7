#include "pqnlab/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace pqnlab {

OptimState make_optim_state(Eigen::Index n, OptimConfig hp) {
  OptimState st;
  st.m = Vector::Zero(n);
  st.v = Vector::Zero(n);
  st.t = 0;
  st.hp = hp;
  return st;
}

double clip_global_norm(Vector& grads, double max_norm) {
  const double norm = grads.norm();
  if (max_norm > 0.0 && norm > max_norm) grads *= max_norm / norm;
  return norm;
}

double lr_at(double lr0, long step, long total_steps, bool linear_decay) {
  if (!linear_decay) return lr0;
  if (total_steps <= 0) throw std::invalid_argument("total_steps must be > 0");
  const double frac = 1.0 - double(step) / double(total_steps);
  return lr0 * (frac > 0.0 ? frac : 0.0);
}

void sgd_step(Vector& params, const Vector& grads, double lr) {
  params -= lr * grads;
}

static void moment_update(OptimState& st, const Vector& grads) {
  if (st.m.size() != grads.size())
    throw std::invalid_argument("optimiser state size mismatch");
  st.t += 1;
  st.m = st.hp.beta1 * st.m + (1.0 - st.hp.beta1) * grads;
  st.v = st.hp.beta2 * st.v +
         (1.0 - st.hp.beta2) * grads.cwiseProduct(grads);
}

void adam_step(OptimState& st, Vector& params, const Vector& grads,
               double lr) {
  moment_update(st, grads);
  const double bc1 = 1.0 - std::pow(st.hp.beta1, double(st.t));
  const double bc2 = 1.0 - std::pow(st.hp.beta2, double(st.t));
  params -= (lr / bc1) *
            (st.m.array() / ((st.v.array() / bc2).sqrt() + st.hp.eps))
                .matrix();
}

void radam_step(OptimState& st, Vector& params, const Vector& grads,
                double lr) {
  moment_update(st, grads);
  const double bc1 = 1.0 - std::pow(st.hp.beta1, double(st.t));
  const double b2t = std::pow(st.hp.beta2, double(st.t));
  const double bc2 = 1.0 - b2t;
  const double rho_inf = 2.0 / (1.0 - st.hp.beta2) - 1.0;
  const double rho = rho_inf - 2.0 * double(st.t) * b2t / bc2;
  if (rho > 4.0) {
    const double r = std::sqrt(((rho - 4.0) * (rho - 2.0) * rho_inf) /
                               ((rho_inf - 4.0) * (rho_inf - 2.0) * rho));
    params -= (lr * r / bc1) *
              (st.m.array() / ((st.v.array() / bc2).sqrt() + st.hp.eps))
                  .matrix();
  } else {
    params -= (lr / bc1) * st.m;
  }
}

Vector l2_final_layer_term(const NetworkParams& params, double coeff) {
  Vector out = Vector::Zero(params.param_count());
  const int fd = params.final_dense();
  if (fd < 0 || coeff == 0.0) return out;
  NetworkGrads g = zero_grads(params);
  g[size_t(fd)].W = coeff * params.layers[size_t(fd)].W;
  return gradient_vector(params, g);
}

}  // namespace pqnlab
