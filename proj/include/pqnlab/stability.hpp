#pragma once
#include <complex>
#include <cstdint>
#include <limits>
#include <vector>

#include "pqnlab/envs.hpp"
#include "pqnlab/net.hpp"
#include "pqnlab/rng.hpp"

namespace pqnlab {

// Exact derivative of the expected TD-error vector delta(phi) on an
// enumerable MDP, split into the two matrices whose definiteness governs
// stability, plus an optional l2 pull of -eta^2 (gamma/2)^2 I restricted to
// the final-layer weight block.
struct JacobianReport {
  Matrix jacobian;        // P x P: off_policy_term + curvature_term + l2 part
  Matrix off_policy_term;  // E[grad Q(x) (gamma grad Q(x') - grad Q(x))^T]
  Matrix curvature_term;   // E[(r + gamma Q(x') - Q(x)) H(x)]
  std::vector<std::complex<double>> eigenvalues;
  double max_real = 0.0;
};

// Enumerates every (s, a) pair weighted by sampling.d, with successors
// s' ~ P[a](s, .) and a' ~ pi(s', .) — no Monte Carlo anywhere. The network
// consumes mdp.feature_row(s); out_dim must be mdp.A (Q-network, gradient
// taken at action a) or 1 (state-value network; actions only pick
// successors). Curvature columns come from analytic Hessian-vector products.
// Throws when the parameter count exceeds 5000.
JacobianReport td_jacobian(const TabularMDP& mdp,
                           const SamplingDistribution& sampling,
                           const NetworkParams& params, double gamma,
                           double l2_eta);

// delta(phi) itself under the same enumeration and the same l2 pull; the
// Jacobian above is its exact derivative, which the tests verify by finite
// differences. Also drives exact expected-update training on tiny MDPs.
Vector expected_td_error(const TabularMDP& mdp,
                         const SamplingDistribution& sampling,
                         const NetworkParams& params, double gamma,
                         double l2_eta);

// Full spectrum of a square real matrix (LAPACK dgeev). Tests cross-check
// against an independent solver.
std::vector<std::complex<double>> eig_spectrum(const Matrix& m);
double max_real_eig(const Matrix& m);

// Exact sup over test vectors v of [gamma (v.g')(v.g) - (v.g)^2] / |v|^2
// given p = |g|^2, q = |g'|^2, c = g.g'. The quotient depends on v only
// through (v.g, v.g'), so the sup lives in span{g, g'} and reduces to a 2x2
// generalized eigenproblem; vectors orthogonal to both approach 0, hence the
// result is never negative.
double pencil_sup(double p, double q, double c, double gamma);

// Worst observed normalised off-policy statistic over paired transition rows
// (x, x'): max of [gamma v'grad Q(x') grad Q(x)'v - (v'grad Q(x))^2] / |v|^2
// across v_draws Gaussian test vectors per pair, the gradients themselves,
// and the exact span supremum. Requires a single-output network.
double off_policy_probe(const NetworkParams& params, const Matrix& x,
                        const Matrix& xp, int v_draws, double gamma,
                        std::uint64_t seed);

// Regression guard for the probe on the single-hidden-layer architecture:
// measured statistic stays below (gamma/2)^2 + guard / sqrt(k). Calibrated
// once at k = 16 (measured excess 0.69 * sqrt(16) = 2.8, with headroom) and
// frozen.
inline constexpr double kOffPolicyProbeGuard = 4.0;

// One sweep row per value of the swept variable (hidden width k, or batch
// size N). monotone_decreasing and the fitted log-log exponent are computed
// on statistic - reference.
struct ProbeResult {
  std::vector<double> sweep_values;
  std::vector<double> statistic;
  std::vector<double> reference;
  std::vector<long> samples;
  // Raw per-trial values behind each statistic row (statistic is their max
  // for the width sweeps, their median for the batch-statistics probe).
  std::vector<std::vector<double>> trial_values;
  // Batch-statistics probe only: estimated E[one-step operator applied to Q]
  // with its standard error, and the exact expected immediate reward it
  // should converge to.
  std::vector<double> estimate_mean;
  std::vector<double> estimate_se;
  double expected_reward = std::numeric_limits<double>::quiet_NaN();
  double fitted_exponent = std::numeric_limits<double>::quiet_NaN();
  bool monotone_decreasing = false;
};

// Width sweep of the off-policy statistic on Q = w'relu(layernorm(Mx)) with
// i.i.d. standard normal parameters: per width, the max over trials of the
// exact span supremum for random correlated input pairs. reference is
// (gamma/2)^2; the excess should shrink roughly like 1/sqrt(k).
ProbeResult off_policy_width_sweep(const std::vector<int>& widths, int trials,
                                   double gamma, std::uint64_t seed,
                                   int input_dim = 8);

// |v'Hv| / |v|^2 for the Hessian of the single network output at input row
// x, by central finite differences of the analytic gradient (step h). Falls
// back to the analytic directional second derivative when the relu gate
// pattern flips inside the step, where the difference quotient is garbage.
double curvature_quadform(const NetworkParams& params, const RowVector& x,
                          const Vector& v, double h = 1e-5);

// Width sweep of the curvature statistic
//   |r + gamma Q(x') - Q(x)| * max_v |v'H(x)v| / |v|^2
// on the same architecture and draw design as off_policy_width_sweep, with
// r ~ U(-1, 1). Test vectors: 8 Gaussian draws plus one power-iteration
// draw. reference is 0; the statistic should shrink roughly like 1/sqrt(k).
ProbeResult curvature_width_sweep(const std::vector<int>& widths, int trials,
                                  double gamma, std::uint64_t seed,
                                  int input_dim = 8);

// Per batch size N: draw N successor states from the uniform behaviour
// policy's stationary distribution, freeze the column statistics of the
// given features over that batch, and measure the bootstrap term
// gamma * w'(E[f] - batch mean)/batch sigma with the expectation enumerated
// exactly. statistic is the median |bootstrap| per N (reference 0);
// estimate_mean/estimate_se track E[reward] + bootstrap against the exact
// expected_reward. w is drawn N(0, 1) from the seed. Throws when any N < 2.
ProbeResult batchnorm_myopia_probe(const TabularMDP& mdp,
                                   const Matrix& features,
                                   const std::vector<int>& batch_sizes,
                                   int trials, double gamma,
                                   std::uint64_t seed);

// Stationary distribution of a row-stochastic matrix (direct linear solve).
Vector stationary_distribution(const Matrix& transition);

// d = stationary-state distribution of pi, times pi itself: the sampling
// regime in which classical linear TD is provably stable.
SamplingDistribution on_policy_sampling(const TabularMDP& mdp,
                                        const Matrix& pi);

}  // namespace pqnlab
