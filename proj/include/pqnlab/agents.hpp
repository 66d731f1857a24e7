#pragma once
#include <cstdint>
#include <limits>
#include <vector>

#include "pqnlab/envs.hpp"
#include "pqnlab/net.hpp"
#include "pqnlab/optim.hpp"
#include "pqnlab/rng.hpp"

namespace pqnlab {

enum class NormType { None, Layer, Batch };

// Online vectorised Q-learning without replay or target networks: collect a
// short rollout from B parallel envs, turn it into lambda-returns once, then
// take num_epochs passes of disjoint random minibatch steps over it.
struct PqnConfig {
  int num_envs = 128;
  int num_steps = 16;
  long total_timesteps = 500000;
  double eps_start = 1.0;
  double eps_finish = 0.05;
  double eps_decay = 0.15;  // fraction of total steps spent annealing
  int num_epochs = 4;
  int num_minibatches = 8;
  double gamma = 0.99;
  double lambda = 0.65;
  double lr = 1e-3;
  double max_grad_norm = 10.0;
  bool lr_linear_decay = true;
  NormType norm_type = NormType::Layer;
  NormVariant norm_variant = NormVariant::Affine;
  int hidden_size = 128;
  int num_layers = 2;
  // Weight of the final-layer l2 pull, expressed as the multiplier eta; the
  // resulting coefficient is eta^2 (gamma/2)^2. 0 disables it.
  double l2_eta = 0.0;

  void validate() const;
  long iterations() const {
    return total_timesteps / (long(num_envs) * num_steps);
  }
};

// Per-hidden-layer pattern: dense -> norm (if any) -> relu; final dense head.
std::vector<LayerSpec> q_network_specs(int obs_dim, int num_actions,
                                       const PqnConfig& cfg);

// Linear anneal from eps_start to eps_finish over eps_decay*total_timesteps
// env steps, constant afterwards.
double epsilon_at(long step, const PqnConfig& cfg);

// Row-wise epsilon-greedy; greedy ties break toward the lowest action index.
std::vector<int> select_actions(const Matrix& q, double eps, Rng& rng);

// Time-major rollout storage. Row t of each member describes transition t:
// states/actions produce rewards(t, i), dones(t, i) flags terminal
// transitions, and max_next_q(t, i) is max_a Q(successor) where the successor
// is the true next observation even when auto-reset replaced it in obs.
struct TrajectoryBatch {
  int T = 0, B = 0;
  std::vector<Matrix> states;
  std::vector<std::vector<int>> actions;
  Matrix rewards;
  Matrix dones;
  Matrix max_next_q;
};

// r + gamma * (1 - done) * max_next_q, elementwise.
Matrix one_step_targets(const Matrix& rewards, const Matrix& dones,
                        const Matrix& max_next_q, double gamma);

// Peng-style lambda returns, computed backward in one sweep:
//   R_{T-1} = r + gamma (1-d) maxQ'
//   R_t     = r_t + gamma (1-d_t) (lambda R_{t+1} + (1-lambda) maxQ'_t)
// A terminal transition cuts the entire bootstrap, so R_t = r_t there.
// lambda = 0 reduces to one-step targets; lambda = 1 on a terminated episode
// reproduces the discounted Monte-Carlo return of the suffix.
Matrix q_lambda_targets(const TrajectoryBatch& batch, double gamma,
                        double lambda);

struct LossGrads {
  double loss = 0.0;
  NetworkGrads grads;
  ForwardCache cache;  // for commit_running_stats when batchnorm is present
};

// Weighted mean squared TD error against constant targets:
//   loss = sum_i w_i (Q(s_i, a_i) - y_i)^2 / sum_i w_i.
// weights = nullptr means uniform. onehot, when given, routes through the
// sparse first-layer path (states is then ignored).
LossGrads td_loss_and_grads(const NetworkParams& params, const Matrix& states,
                            const std::vector<int>& actions,
                            const Vector& targets, NetMode mode,
                            const Vector* weights = nullptr,
                            const std::vector<int>* onehot = nullptr);

struct MetricsRecord {
  long step = 0;  // cumulative env steps
  double episodic_return_mean = std::numeric_limits<double>::quiet_NaN();
  long episodic_return_count = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double epsilon = 0.0;
  double lr = 0.0;
  double wall_clock_s = 0.0;
};

struct EvalRecord {
  long step = 0;
  double return_mean = 0.0;
  int episodes = 0;
};

struct TrainResult {
  NetworkParams params;
  std::vector<MetricsRecord> metrics;
  std::vector<EvalRecord> evals;
  long grad_steps = 0;
  long env_steps = 0;
  double wall_clock_s = 0.0;
};

// Greedy rollout (eps = 0): mean return over the first completed episode of
// every env instance.
EvalRecord greedy_eval(const NetworkParams& params, VecEnv& env,
                       std::uint64_t seed, long at_step);

struct EvalHook {
  VecEnv* env = nullptr;
  long every = 0;  // env steps between evals; 0 disables
  std::uint64_t seed = 1234567;
  // Training stops right after an eval whose mean return reaches this
  // (time-to-solution runs); NaN never triggers.
  double stop_return = std::numeric_limits<double>::quiet_NaN();
};

TrainResult pqn_train(const PqnConfig& cfg, VecEnv& env, std::uint64_t seed,
                      const EvalHook& eval = {});

// Uniform replay buffer with a circular overwrite policy.
class ReplayBuffer {
 public:
  ReplayBuffer(int capacity, int obs_dim);
  void push(const RowVector& s, int a, double r, const RowVector& s2,
            bool done);
  int size() const { return size_; }
  struct Batch {
    Matrix s, s2;
    std::vector<int> a;
    Vector r;
    std::vector<std::uint8_t> done;
  };
  Batch sample(int n, Rng& rng) const;  // throws when size() < n

 private:
  int capacity_, pos_ = 0, size_ = 0;
  Matrix s_, s2_;
  std::vector<int> a_;
  Vector r_;
  std::vector<std::uint8_t> done_;
};

// Classic baseline: replay buffer plus a frozen target copy.
struct DqnConfig {
  PqnConfig base;  // net shape, schedules, gamma, lr; lambda is ignored
  int buffer_size = 100000;
  int batch_size = 64;
  long target_update_every = 1000;  // env steps between target copies
  int train_every = 4;              // vec steps between gradient updates
  long learning_starts = 1000;      // env steps before the first update
  long metrics_every = 2048;        // env steps between metric records

  void validate() const;
};

TrainResult dqn_train(const DqnConfig& cfg, VecEnv& env, std::uint64_t seed,
                      const EvalHook& eval = {});

// Bootstrapped ensemble with additive frozen random priors and a shared
// replay stream; the per-episode active member drives behaviour greedily.
struct EnsembleConfig {
  int ensemble_size = 20;
  double prior_scale = 3.0;
  double mask_prob = 0.5;
  int buffer_size = 10000;
  int batch_size = 128;
  int train_every = 1;  // vec steps between shared-batch updates
  double lr = 1e-3;
  double gamma = 0.99;
  NormType norm_type = NormType::Layer;
  int hidden_size = 50;
  // Eval: bootstrap values come from running statistics. Train: predictions
  // and bootstrap values share one train-mode batch, so batchnorm targets
  // see the minibatch statistics (the style under study here).
  NetMode target_mode = NetMode::Eval;
  long max_episodes = 50000;
  double solve_threshold = 0.9;
  int solve_window = 1000;
  // Multiplier on the fan-in initialisation of the frozen prior networks
  // (1.0 keeps prior outputs roughly on the unit reward scale).
  double prior_weight_std = 1.0;
  // Diagnostic: seed every member identically (with mask_prob = 1 the
  // members must then remain bit-identical forever).
  bool identical_members = false;

  void validate() const;
};

struct EnsembleResult {
  bool solved = false;
  long episodes = 0;
  long env_steps = 0;
  double window_mean = 0.0;  // mean return over the final solve_window
  std::vector<MetricsRecord> metrics;
  std::vector<NetworkParams> members;
  double wall_clock_s = 0.0;
};

EnsembleResult ensemble_train(const EnsembleConfig& cfg, VecEnv& env,
                              std::uint64_t seed);

}  // namespace pqnlab
