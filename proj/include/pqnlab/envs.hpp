#pragma once
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pqnlab/net.hpp"
#include "pqnlab/rng.hpp"

namespace pqnlab {

// Finite MDP with explicit transition tensors. P[a] is the S x S
// row-stochastic matrix for action a; rewards are deterministic per (s, a).
// An empty feature matrix means one-hot state features.
struct TabularMDP {
  int S = 0;
  int A = 0;
  std::vector<Matrix> P;  // A matrices, each S x S
  Matrix R;               // S x A
  Vector P0;              // initial state distribution
  double gamma = 0.99;
  double r_max = 1.0;
  Matrix features;        // S x d, optional

  void validate() const;  // throws on violated contracts
  int feature_dim() const {
    return features.size() > 0 ? int(features.cols()) : S;
  }
  RowVector feature_row(int s) const;
};

// Data distribution for off-policy evaluation probes: d weights state-action
// pairs, mu is the behaviour policy and pi the target policy (rows sum to 1).
struct SamplingDistribution {
  Matrix d;   // S x A, sums to 1
  Matrix mu;  // S x A
  Matrix pi;  // S x A
  void validate(const TabularMDP& mdp) const;
};

// Optimal action values via value iteration. Stops when a Bellman sweep
// changes no entry by more than tol; throws if max_sweeps is exhausted.
Matrix value_iteration(const TabularMDP& mdp, double tol,
                       long max_sweeps = 1000000);

// Plain-text format (whitespace separated, '#' starts a comment line):
//   S A gamma
//   P0 (S numbers)
//   A blocks of S rows x S columns (transitions per action)
//   S rows x A columns (rewards)
//   optionally: "features" d, then S rows x d columns
TabularMDP load_tabular_mdp(const std::string& path);
TabularMDP parse_tabular_mdp(std::istream& in);

// The classic 7-state star counterexample for off-policy TD: two actions
// (0 scatters uniformly over the six outer states, 1 jumps to the hub), zero
// reward, gamma 0.99, and the canonical 8-dimensional features. d carries the
// importance-corrected pair weights (uniform states times the target policy);
// mu is the 6/7-scatter 1/7-hub behaviour that motivates them.
struct BairdProblem {
  TabularMDP mdp;
  SamplingDistribution sampling;
  Matrix features;  // same matrix as mdp.features
};
BairdProblem baird_build();

// Canonical divergence-prone starting point for the star problem: value
// weights (1,1,1,1,1,1,10,1).
Vector baird_init_weights();

struct StepResult {
  Matrix obs;                      // B x obs_dim, after auto-reset
  Vector reward;                   // B
  std::vector<std::uint8_t> done;  // B
  // Pre-reset successor observation per row; equals obs where done is 0.
  // Bootstrap targets must read this matrix, never obs, at done rows.
  Matrix terminal_obs;
};

// Synchronous vectorised environment. Instance i draws randomness only from
// Rng::stream(seed, instance_base + i), so a B-sized env is bit-identical to
// B size-1 envs constructed with matching instance bases.
class VecEnv {
 public:
  virtual ~VecEnv() = default;
  virtual int num_envs() const = 0;
  virtual int obs_dim() const = 0;
  virtual int num_actions() const = 0;
  virtual Matrix vec_reset(std::uint64_t seed) = 0;
  virtual StepResult vec_step(const std::vector<int>& actions) = 0;

  // One-hot index views of the latest obs / terminal_obs, when the
  // observation space supports them (enables the sparse network fast path).
  virtual const std::vector<int>* obs_onehot() const { return nullptr; }
  virtual const std::vector<int>* terminal_onehot() const { return nullptr; }
};

// Rollouts through an explicit TabularMDP (continuing: done is never set).
class TabularVecEnv : public VecEnv {
 public:
  TabularVecEnv(TabularMDP mdp, int num_envs, int instance_base = 0);
  int num_envs() const override { return B_; }
  int obs_dim() const override { return mdp_.feature_dim(); }
  int num_actions() const override { return mdp_.A; }
  Matrix vec_reset(std::uint64_t seed) override;
  StepResult vec_step(const std::vector<int>& actions) override;
  const std::vector<int>& states() const { return state_; }

 private:
  TabularMDP mdp_;
  int B_;
  int base_;
  std::vector<int> state_;
  std::vector<Rng> rng_;
};

// N x N grid: the diver descends one row per step, pressing "right" costs
// 0.01/N, and reaching the bottom-right cell pays 1. Observations are one-hot
// over cells; rows after the final one observe all zeros. The raw-action ->
// direction map is flipped per cell from the reset seed, as is conventional
// for this problem, so a constant raw action is not a shortcut.
class DeepSeaVecEnv : public VecEnv {
 public:
  DeepSeaVecEnv(int depth, int num_envs, int instance_base = 0,
                bool randomize_actions = true);
  int num_envs() const override { return B_; }
  int obs_dim() const override { return N_ * N_; }
  int num_actions() const override { return 2; }
  Matrix vec_reset(std::uint64_t seed) override;
  StepResult vec_step(const std::vector<int>& actions) override;

  // One-hot indices of the current observations (-1 never occurs here).
  const std::vector<int>& obs_indices() const { return obs_index_; }
  // Indices matching the latest terminal_obs rows (-1 for the all-zero row).
  const std::vector<int>& terminal_indices() const { return term_index_; }
  const std::vector<int>* obs_onehot() const override { return &obs_index_; }
  const std::vector<int>* terminal_onehot() const override {
    return &term_index_;
  }
  int depth() const { return N_; }

 private:
  int cell(int row, int col) const { return row * N_ + col; }
  int N_, B_, base_;
  std::vector<int> row_, col_;
  std::vector<std::uint8_t> flip_;  // per cell: swap the raw action meaning
  std::vector<int> obs_index_, term_index_;
};

// Cart-pole balancing with the standard constants (gravity 9.8, cart mass
// 1.0, pole mass 0.1, half-length 0.5, force 10, Euler step 0.02 s). Episode
// ends when |x| > 2.4, |theta| > 12 degrees, or after 500 steps; every step
// pays +1.
class CartPoleVecEnv : public VecEnv {
 public:
  CartPoleVecEnv(int num_envs, int instance_base = 0, int max_steps = 500);
  int num_envs() const override { return B_; }
  int obs_dim() const override { return 4; }
  int num_actions() const override { return 2; }
  Matrix vec_reset(std::uint64_t seed) override;
  StepResult vec_step(const std::vector<int>& actions) override;

 private:
  Vector fresh_state(int i);
  int B_, base_, max_steps_;
  Matrix state_;  // B x 4: x, x_dot, theta, theta_dot
  std::vector<int> steps_;
  std::vector<Rng> rng_;
};

// Two-link underactuated pendulum with torque in {-1, 0, +1} on the second
// joint, RK4 integrated at dt 0.2 s. Reward -1 per step until the tip rises
// above one link length; 500-step cutoff. Observation is
// [cos t1, sin t1, cos t2, sin t2, t1_dot, t2_dot].
class AcrobotVecEnv : public VecEnv {
 public:
  AcrobotVecEnv(int num_envs, int instance_base = 0, int max_steps = 500);
  int num_envs() const override { return B_; }
  int obs_dim() const override { return 6; }
  int num_actions() const override { return 3; }
  Matrix vec_reset(std::uint64_t seed) override;
  StepResult vec_step(const std::vector<int>& actions) override;

 private:
  Vector fresh_state(int i);
  RowVector observe(const Vector& s) const;
  int B_, base_, max_steps_;
  Matrix state_;  // B x 4: theta1, theta2, dtheta1, dtheta2
  std::vector<int> steps_;
  std::vector<Rng> rng_;
};

// Builds the TabularMDP equivalent of DeepSeaVecEnv (canonical action
// semantics, one absorbing state) for exact value checks.
TabularMDP deepsea_mdp(int depth, double gamma);

std::unique_ptr<VecEnv> make_env(const std::string& name, int num_envs,
                                 int depth = 10);

}  // namespace pqnlab
