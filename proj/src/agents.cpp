#include "pqnlab/agents.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <stdexcept>

namespace pqnlab {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t tag) {
  return Rng::stream(seed, tag).next_u64();
}

double seconds_since(
    const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

int argmax_row(const Matrix& q, int row) {
  int best = 0;
  double bv = q(row, 0);
  for (int a = 1; a < q.cols(); ++a) {
    if (q(row, a) > bv) {
      bv = q(row, a);
      best = a;
    }
  }
  return best;
}

void fisher_yates(std::vector<int>& idx, Rng& rng) {
  for (int i = int(idx.size()) - 1; i > 0; --i)
    std::swap(idx[size_t(i)], idx[size_t(rng.uniform_int(i + 1))]);
}

// Rolling tracker for completed-episode returns inside one metrics window.
struct EpisodeTracker {
  Vector acc;
  std::vector<double> completed;
  explicit EpisodeTracker(int b) : acc(Vector::Zero(b)) {}
  void observe(const StepResult& r) {
    for (int i = 0; i < r.reward.size(); ++i) {
      acc(i) += r.reward(i);
      if (r.done[size_t(i)]) {
        completed.push_back(acc(i));
        acc(i) = 0.0;
      }
    }
  }
  void fill(MetricsRecord& rec) {
    rec.episodic_return_count = long(completed.size());
    if (!completed.empty()) {
      double s = 0.0;
      for (double v : completed) s += v;
      rec.episodic_return_mean = s / double(completed.size());
    }
    completed.clear();
  }
};

}  // namespace

void PqnConfig::validate() const {
  require(num_envs >= 1 && num_steps >= 1, "num_envs and num_steps >= 1");
  require(total_timesteps >= long(num_envs) * num_steps,
          "total_timesteps must cover at least one rollout");
  require(num_epochs >= 1 && num_minibatches >= 1, "epochs/minibatches >= 1");
  require((long(num_envs) * num_steps) % num_minibatches == 0,
          "num_minibatches = " + std::to_string(num_minibatches) +
              " must divide num_envs * num_steps = " +
              std::to_string(long(num_envs) * num_steps));
  require(gamma > 0.0 && gamma <= 1.0, "gamma in (0, 1]");
  require(lambda >= 0.0 && lambda <= 1.0, "lambda in [0, 1]");
  require(lr > 0.0, "lr must be positive");
  require(eps_start >= 0.0 && eps_start <= 1.0 && eps_finish >= 0.0 &&
              eps_finish <= 1.0,
          "epsilons in [0, 1]");
  require(eps_decay > 0.0 && eps_decay <= 1.0, "eps_decay in (0, 1]");
  require(hidden_size >= 2 && num_layers >= 1, "network too small");
  require(l2_eta >= 0.0, "l2_eta must be >= 0");
  if (norm_type == NormType::Batch)
    require(long(num_envs) * num_steps / num_minibatches >= 2,
            "batchnorm needs minibatches of at least 2 rows");
}

std::vector<LayerSpec> q_network_specs(int obs_dim, int num_actions,
                                       const PqnConfig& cfg) {
  std::vector<LayerSpec> specs;
  int prev = obs_dim;
  for (int i = 0; i < cfg.num_layers; ++i) {
    specs.push_back(LayerSpec::dense(prev, cfg.hidden_size));
    if (cfg.norm_type == NormType::Layer)
      specs.push_back(LayerSpec::layer_norm(cfg.hidden_size, cfg.norm_variant));
    else if (cfg.norm_type == NormType::Batch)
      specs.push_back(LayerSpec::batch_norm(cfg.hidden_size, cfg.norm_variant));
    specs.push_back(LayerSpec::relu(cfg.hidden_size));
    prev = cfg.hidden_size;
  }
  specs.push_back(LayerSpec::dense(prev, num_actions));
  return specs;
}

double epsilon_at(long step, const PqnConfig& cfg) {
  const double anneal = cfg.eps_decay * double(cfg.total_timesteps);
  const double frac = std::min(1.0, double(step) / anneal);
  return cfg.eps_start + frac * (cfg.eps_finish - cfg.eps_start);
}

std::vector<int> select_actions(const Matrix& q, double eps, Rng& rng) {
  std::vector<int> actions(size_t(q.rows()));
  for (int i = 0; i < q.rows(); ++i) {
    if (rng.uniform() < eps)
      actions[size_t(i)] = rng.uniform_int(int(q.cols()));
    else
      actions[size_t(i)] = argmax_row(q, i);
  }
  return actions;
}

Matrix one_step_targets(const Matrix& rewards, const Matrix& dones,
                        const Matrix& max_next_q, double gamma) {
  return rewards.array() +
         gamma * (1.0 - dones.array()) * max_next_q.array();
}

Matrix q_lambda_targets(const TrajectoryBatch& batch, double gamma,
                        double lambda) {
  const int T = batch.T;
  require(T >= 1 && batch.rewards.rows() == T, "empty trajectory batch");
  Matrix R(T, batch.B);
  R.row(T - 1) = batch.rewards.row(T - 1).array() +
                 gamma * (1.0 - batch.dones.row(T - 1).array()) *
                     batch.max_next_q.row(T - 1).array();
  for (int t = T - 2; t >= 0; --t) {
    R.row(t) = batch.rewards.row(t).array() +
               gamma * (1.0 - batch.dones.row(t).array()) *
                   (lambda * R.row(t + 1).array() +
                    (1.0 - lambda) * batch.max_next_q.row(t).array());
  }
  return R;
}

LossGrads td_loss_and_grads(const NetworkParams& params, const Matrix& states,
                            const std::vector<int>& actions,
                            const Vector& targets, NetMode mode,
                            const Vector* weights,
                            const std::vector<int>* onehot) {
  LossGrads out;
  const Matrix q = onehot
                       ? network_forward_onehot(params, *onehot, mode,
                                                &out.cache)
                       : network_forward(params, states, mode, &out.cache);
  const int n = int(q.rows());
  require(int(actions.size()) == n && targets.size() == n,
          "actions/targets must match the batch");
  double wsum = 0.0;
  for (int i = 0; i < n; ++i)
    wsum += weights ? (*weights)(i) : 1.0;
  if (wsum <= 0.0) {
    out.grads = zero_grads(params);
    return out;
  }
  Matrix upstream = Matrix::Zero(n, q.cols());
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const int a = actions[size_t(i)];
    require(a >= 0 && a < q.cols(), "action out of range");
    const double w = weights ? (*weights)(i) : 1.0;
    const double diff = q(i, a) - targets(i);
    loss += w * diff * diff;
    upstream(i, a) = 2.0 * w * diff / wsum;
  }
  out.loss = loss / wsum;
  out.grads = network_backward(params, out.cache, upstream);
  return out;
}

EvalRecord greedy_eval(const NetworkParams& params, VecEnv& env,
                       std::uint64_t seed, long at_step) {
  const int B = env.num_envs();
  Matrix obs = env.vec_reset(seed);
  std::vector<std::uint8_t> finished(size_t(B), 0);
  Vector acc = Vector::Zero(B), returns = Vector::Zero(B);
  Rng rng(derive(seed, 17));
  int remaining = B;
  for (long t = 0; t < 100000 && remaining > 0; ++t) {
    const Matrix q = network_forward(params, obs, NetMode::Eval);
    const std::vector<int> actions = select_actions(q, 0.0, rng);
    const StepResult r = env.vec_step(actions);
    for (int i = 0; i < B; ++i) {
      if (finished[size_t(i)]) continue;
      acc(i) += r.reward(i);
      if (r.done[size_t(i)]) {
        returns(i) = acc(i);
        finished[size_t(i)] = 1;
        --remaining;
      }
    }
    obs = r.obs;
  }
  EvalRecord rec;
  rec.step = at_step;
  rec.episodes = B - remaining;
  rec.return_mean = rec.episodes > 0
                        ? returns.sum() / double(rec.episodes)
                        : std::numeric_limits<double>::quiet_NaN();
  return rec;
}

TrainResult pqn_train(const PqnConfig& cfg, VecEnv& env, std::uint64_t seed,
                      const EvalHook& eval) {
  cfg.validate();
  require(env.num_envs() == cfg.num_envs,
          "env instance count must match num_envs");
  const int B = cfg.num_envs, T = cfg.num_steps;
  const int rows = B * T;
  const int mb_rows = rows / cfg.num_minibatches;
  const bool has_bn = cfg.norm_type == NormType::Batch;
  const double l2_coeff =
      cfg.l2_eta * cfg.l2_eta * (cfg.gamma / 2.0) * (cfg.gamma / 2.0);

  TrainResult res;
  res.params =
      init_params(q_network_specs(env.obs_dim(), env.num_actions(), cfg),
                  derive(seed, 1));
  OptimState opt = make_optim_state(res.params.param_count());
  Rng act_rng(derive(seed, 3));
  Rng shuffle_rng(derive(seed, 4));
  Matrix obs = env.vec_reset(derive(seed, 2));
  EpisodeTracker episodes(B);
  const auto t0 = std::chrono::steady_clock::now();
  long gstep = 0;
  long next_eval = eval.env && eval.every > 0 ? eval.every
                                              : std::numeric_limits<long>::max();
  int eval_round = 0;
  if (eval.env && eval.every > 0)
    res.evals.push_back(
        greedy_eval(res.params, *eval.env, derive(eval.seed, 0), 0));

  TrajectoryBatch batch;
  batch.T = T;
  batch.B = B;
  batch.states.resize(size_t(T));
  batch.actions.resize(size_t(T));
  batch.rewards.resize(T, B);
  batch.dones.resize(T, B);
  batch.max_next_q.resize(T, B);
  Matrix successors(rows, env.obs_dim());

  const long iters = cfg.iterations();
  for (long iter = 0; iter < iters; ++iter) {
    double eps = 0.0;
    for (int t = 0; t < T; ++t) {
      eps = epsilon_at(gstep, cfg);
      const Matrix q = network_forward(res.params, obs, NetMode::Eval);
      std::vector<int> actions = select_actions(q, eps, act_rng);
      const StepResult sr = env.vec_step(actions);
      batch.states[size_t(t)] = obs;
      batch.actions[size_t(t)] = std::move(actions);
      for (int i = 0; i < B; ++i) {
        batch.rewards(t, i) = sr.reward(i);
        batch.dones(t, i) = sr.done[size_t(i)] ? 1.0 : 0.0;
      }
      successors.middleRows(t * B, B) = sr.terminal_obs;
      episodes.observe(sr);
      obs = sr.obs;
      gstep += B;
    }
    // One batched pass over every successor; the net is frozen here, so this
    // matches T per-step evaluations exactly.
    const Matrix qsucc =
        network_forward(res.params, successors, NetMode::Eval);
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < B; ++i)
        batch.max_next_q(t, i) = qsucc.row(t * B + i).maxCoeff();

    const Matrix targets = q_lambda_targets(batch, cfg.gamma, cfg.lambda);

    Matrix all_states(rows, env.obs_dim());
    std::vector<int> all_actions(rows);
    Vector all_targets(rows);
    for (int t = 0; t < T; ++t) {
      all_states.middleRows(t * B, B) = batch.states[size_t(t)];
      for (int i = 0; i < B; ++i) {
        all_actions[size_t(t * B + i)] = batch.actions[size_t(t)][size_t(i)];
        all_targets(t * B + i) = targets(t, i);
      }
    }

    double loss_sum = 0.0;
    double lr = cfg.lr;
    std::vector<int> perm(rows);
    for (int i = 0; i < rows; ++i) perm[size_t(i)] = i;
    Matrix mb_states(mb_rows, env.obs_dim());
    std::vector<int> mb_actions(mb_rows);
    Vector mb_targets(mb_rows);
    for (int epoch = 0; epoch < cfg.num_epochs; ++epoch) {
      fisher_yates(perm, shuffle_rng);
      for (int mb = 0; mb < cfg.num_minibatches; ++mb) {
        for (int j = 0; j < mb_rows; ++j) {
          const int src = perm[size_t(mb * mb_rows + j)];
          mb_states.row(j) = all_states.row(src);
          mb_actions[size_t(j)] = all_actions[size_t(src)];
          mb_targets(j) = all_targets(src);
        }
        LossGrads lg = td_loss_and_grads(res.params, mb_states, mb_actions,
                                         mb_targets, NetMode::Train);
        Vector flat = gradient_vector(res.params, lg.grads);
        if (l2_coeff > 0.0)
          flat += l2_final_layer_term(res.params, l2_coeff);
        clip_global_norm(flat, cfg.max_grad_norm);
        // Anneal from the iteration's starting step so the final iteration
        // still trains at lr0 / iterations instead of exactly zero.
        lr = lr_at(cfg.lr, iter * long(rows), cfg.total_timesteps,
                   cfg.lr_linear_decay);
        Vector theta = params_vector(res.params);
        radam_step(opt, theta, flat, lr);
        set_params_vector(res.params, theta);
        if (has_bn) commit_running_stats(res.params, lg.cache);
        loss_sum += lg.loss;
        res.grad_steps += 1;
      }
    }

    MetricsRecord rec;
    rec.step = gstep;
    rec.loss = loss_sum / double(cfg.num_epochs * cfg.num_minibatches);
    rec.epsilon = eps;
    rec.lr = lr;
    rec.wall_clock_s = seconds_since(t0);
    episodes.fill(rec);
    res.metrics.push_back(rec);

    bool stop = false;
    while (gstep >= next_eval) {
      res.evals.push_back(greedy_eval(res.params, *eval.env,
                                      derive(eval.seed, ++eval_round), gstep));
      next_eval += eval.every;
      if (std::isfinite(eval.stop_return) &&
          res.evals.back().return_mean >= eval.stop_return) {
        stop = true;
        break;
      }
    }
    if (stop) break;
  }
  res.env_steps = gstep;
  res.wall_clock_s = seconds_since(t0);
  return res;
}

ReplayBuffer::ReplayBuffer(int capacity, int obs_dim)
    : capacity_(capacity),
      s_(capacity, obs_dim),
      s2_(capacity, obs_dim),
      a_(size_t(capacity)),
      r_(capacity),
      done_(size_t(capacity)) {
  require(capacity >= 1, "capacity must be positive");
}

void ReplayBuffer::push(const RowVector& s, int a, double r,
                        const RowVector& s2, bool done) {
  s_.row(pos_) = s;
  s2_.row(pos_) = s2;
  a_[size_t(pos_)] = a;
  r_(pos_) = r;
  done_[size_t(pos_)] = done ? 1 : 0;
  pos_ = (pos_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

ReplayBuffer::Batch ReplayBuffer::sample(int n, Rng& rng) const {
  if (size_ < n)
    throw std::runtime_error(
        "replay buffer holds fewer transitions than the batch size");
  Batch b;
  b.s.resize(n, s_.cols());
  b.s2.resize(n, s_.cols());
  b.a.resize(size_t(n));
  b.r.resize(n);
  b.done.resize(size_t(n));
  for (int i = 0; i < n; ++i) {
    const int j = rng.uniform_int(size_);
    b.s.row(i) = s_.row(j);
    b.s2.row(i) = s2_.row(j);
    b.a[size_t(i)] = a_[size_t(j)];
    b.r(i) = r_(j);
    b.done[size_t(i)] = done_[size_t(j)];
  }
  return b;
}

void DqnConfig::validate() const {
  // base.num_steps / num_epochs / num_minibatches / lambda are rollout
  // machinery this trainer does not use, so only the shared fields matter.
  require(base.num_envs >= 1 && base.total_timesteps >= 1, "bad sizes");
  require(base.gamma > 0.0 && base.gamma <= 1.0 && base.lr > 0.0,
          "bad gamma or lr");
  require(base.eps_decay > 0.0 && base.eps_decay <= 1.0, "eps_decay in (0,1]");
  require(base.hidden_size >= 2 && base.num_layers >= 1, "network too small");
  require(batch_size >= 1, "batch_size >= 1");
  require(buffer_size >= batch_size, "buffer must hold at least one batch");
  require(target_update_every >= 1, "target_update_every >= 1");
  require(train_every >= 1 && learning_starts >= 0 && metrics_every >= 1,
          "bad cadence settings");
  if (base.norm_type == NormType::Batch)
    require(batch_size >= 2, "batchnorm needs batches of at least 2 rows");
}

TrainResult dqn_train(const DqnConfig& cfg, VecEnv& env, std::uint64_t seed,
                      const EvalHook& eval) {
  cfg.validate();
  require(env.num_envs() == cfg.base.num_envs,
          "env instance count must match num_envs");
  const int B = cfg.base.num_envs;
  const bool has_bn = cfg.base.norm_type == NormType::Batch;

  TrainResult res;
  res.params = init_params(
      q_network_specs(env.obs_dim(), env.num_actions(), cfg.base),
      derive(seed, 1));
  NetworkParams target = res.params;
  OptimState opt = make_optim_state(res.params.param_count());
  Rng act_rng(derive(seed, 3));
  Rng train_rng(derive(seed, 4));
  ReplayBuffer buf(cfg.buffer_size, env.obs_dim());
  Matrix obs = env.vec_reset(derive(seed, 2));
  EpisodeTracker episodes(B);
  const auto t0 = std::chrono::steady_clock::now();

  long gstep = 0, vec_steps = 0;
  long next_target = cfg.target_update_every;
  long next_metric = cfg.metrics_every;
  long next_eval = eval.env && eval.every > 0 ? eval.every
                                              : std::numeric_limits<long>::max();
  int eval_round = 0;
  if (eval.env && eval.every > 0)
    res.evals.push_back(
        greedy_eval(res.params, *eval.env, derive(eval.seed, 0), 0));
  double last_loss = std::numeric_limits<double>::quiet_NaN();
  double eps = cfg.base.eps_start, lr = cfg.base.lr;

  while (gstep < cfg.base.total_timesteps) {
    eps = epsilon_at(gstep, cfg.base);
    const Matrix q = network_forward(res.params, obs, NetMode::Eval);
    const std::vector<int> actions = select_actions(q, eps, act_rng);
    const StepResult sr = env.vec_step(actions);
    for (int i = 0; i < B; ++i)
      buf.push(obs.row(i), actions[size_t(i)], sr.reward(i),
               sr.terminal_obs.row(i), sr.done[size_t(i)] != 0);
    episodes.observe(sr);
    obs = sr.obs;
    gstep += B;
    vec_steps += 1;

    if (gstep >= cfg.learning_starts && buf.size() >= cfg.batch_size &&
        vec_steps % cfg.train_every == 0) {
      const ReplayBuffer::Batch bt = buf.sample(cfg.batch_size, train_rng);
      const Matrix qn = network_forward(target, bt.s2, NetMode::Eval);
      Vector y(cfg.batch_size);
      for (int i = 0; i < cfg.batch_size; ++i)
        y(i) = bt.r(i) + cfg.base.gamma * (bt.done[size_t(i)] ? 0.0 : 1.0) *
                             qn.row(i).maxCoeff();
      LossGrads lg =
          td_loss_and_grads(res.params, bt.s, bt.a, y, NetMode::Train);
      Vector flat = gradient_vector(res.params, lg.grads);
      clip_global_norm(flat, cfg.base.max_grad_norm);
      lr = lr_at(cfg.base.lr, gstep - B, cfg.base.total_timesteps,
                 cfg.base.lr_linear_decay);
      Vector theta = params_vector(res.params);
      adam_step(opt, theta, flat, lr);
      set_params_vector(res.params, theta);
      if (has_bn) commit_running_stats(res.params, lg.cache);
      last_loss = lg.loss;
      res.grad_steps += 1;
    }

    if (gstep >= next_target) {
      target = res.params;
      next_target += cfg.target_update_every;
    }
    if (gstep >= next_metric) {
      MetricsRecord rec;
      rec.step = gstep;
      rec.loss = last_loss;
      rec.epsilon = eps;
      rec.lr = lr;
      rec.wall_clock_s = seconds_since(t0);
      episodes.fill(rec);
      res.metrics.push_back(rec);
      next_metric += cfg.metrics_every;
    }
    bool stop = false;
    while (gstep >= next_eval) {
      res.evals.push_back(greedy_eval(res.params, *eval.env,
                                      derive(eval.seed, ++eval_round), gstep));
      next_eval += eval.every;
      if (std::isfinite(eval.stop_return) &&
          res.evals.back().return_mean >= eval.stop_return) {
        stop = true;
        break;
      }
    }
    if (stop) break;
  }
  res.env_steps = gstep;
  res.wall_clock_s = seconds_since(t0);
  return res;
}

void EnsembleConfig::validate() const {
  require(ensemble_size >= 1 && ensemble_size <= 32,
          "ensemble_size must fit the 32-bit mask");
  require(prior_scale >= 0.0, "prior_scale >= 0");
  require(mask_prob > 0.0 && mask_prob <= 1.0, "mask_prob in (0, 1]");
  require(batch_size >= 2 && buffer_size >= batch_size,
          "buffer must hold at least one batch");
  require(train_every >= 1, "train_every >= 1");
  require(lr > 0.0 && gamma > 0.0 && gamma <= 1.0, "bad lr or gamma");
  require(hidden_size >= 2, "hidden_size >= 2");
  require(max_episodes >= 1 && solve_window >= 1, "bad stopping settings");
  require(prior_weight_std > 0.0, "prior_weight_std > 0");
}

namespace {

// Replay storage for the ensemble. Observations are kept as one-hot indices
// when the env provides them (essential for wide one-hot spaces); otherwise
// full rows are stored.
struct MaskedReplay {
  int capacity, obs_dim;
  bool indexed;
  std::vector<int> s_idx, s2_idx;
  Matrix s, s2;
  std::vector<int> a;
  std::vector<double> r;
  std::vector<std::uint8_t> done;
  std::vector<std::uint32_t> mask;
  // The priors are frozen, so their contribution to each transition never
  // changes: cache beta * prior Q at the taken action (per member) and the
  // full successor row (per member, per action) once at push time.
  Matrix prior_sa;  // capacity x K
  Matrix prior_s2;  // capacity x (K * A)
  int pos = 0, size = 0;

  MaskedReplay(int cap, int dim, bool use_index, int members, int actions)
      : capacity(cap), obs_dim(dim), indexed(use_index) {
    a.resize(size_t(cap));
    r.resize(size_t(cap));
    done.resize(size_t(cap));
    mask.resize(size_t(cap));
    prior_sa = Matrix::Zero(cap, members);
    prior_s2 = Matrix::Zero(cap, members * actions);
    if (indexed) {
      s_idx.resize(size_t(cap));
      s2_idx.resize(size_t(cap));
    } else {
      s.resize(cap, dim);
      s2.resize(cap, dim);
    }
  }
  void push(int si, const RowVector* srow, int ai, double ri, int s2i,
            const RowVector* s2row, bool d, std::uint32_t m,
            const RowVector& psa, const RowVector& ps2) {
    if (indexed) {
      s_idx[size_t(pos)] = si;
      s2_idx[size_t(pos)] = s2i;
    } else {
      s.row(pos) = *srow;
      s2.row(pos) = *s2row;
    }
    a[size_t(pos)] = ai;
    r[size_t(pos)] = ri;
    done[size_t(pos)] = d ? 1 : 0;
    mask[size_t(pos)] = m;
    prior_sa.row(pos) = psa;
    prior_s2.row(pos) = ps2;
    pos = (pos + 1) % capacity;
    size = std::min(size + 1, capacity);
  }
};

}  // namespace

EnsembleResult ensemble_train(const EnsembleConfig& cfg, VecEnv& env,
                              std::uint64_t seed) {
  cfg.validate();
  const int B = env.num_envs();
  const int K = cfg.ensemble_size;
  const int A = env.num_actions();
  const int obs_dim = env.obs_dim();
  const bool indexed = env.obs_onehot() != nullptr;
  const double beta = cfg.prior_scale;
  const bool shared_batch_targets = cfg.target_mode == NetMode::Train;

  // Q networks: two dense layers with normalisation ahead of the final
  // linear head. Priors are plain MLPs of the same depth, frozen at init.
  std::vector<LayerSpec> qspecs = {
      LayerSpec::dense(obs_dim, cfg.hidden_size),
      LayerSpec::relu(cfg.hidden_size),
      LayerSpec::dense(cfg.hidden_size, cfg.hidden_size)};
  if (cfg.norm_type == NormType::Layer)
    qspecs.push_back(LayerSpec::layer_norm(cfg.hidden_size));
  else if (cfg.norm_type == NormType::Batch)
    qspecs.push_back(
        LayerSpec::batch_norm(cfg.hidden_size, NormVariant::Scaled));
  else
    qspecs.push_back(LayerSpec::relu(cfg.hidden_size));
  qspecs.push_back(LayerSpec::dense(cfg.hidden_size, A));
  const std::vector<LayerSpec> pspecs = {
      LayerSpec::dense(obs_dim, cfg.hidden_size),
      LayerSpec::relu(cfg.hidden_size),
      LayerSpec::dense(cfg.hidden_size, cfg.hidden_size),
      LayerSpec::relu(cfg.hidden_size),
      LayerSpec::dense(cfg.hidden_size, A)};

  EnsembleResult res;
  std::vector<NetworkParams> priors;
  std::vector<OptimState> opts;
  const bool has_bn = cfg.norm_type == NormType::Batch;
  for (int k = 0; k < K; ++k) {
    const std::uint64_t tag = cfg.identical_members ? 0 : std::uint64_t(k);
    res.members.push_back(init_params(qspecs, derive(seed, 10 + tag)));
    // Fan-in initialisation keeps prior outputs on the reward scale;
    // prior_weight_std then multiplies every weight as a diversity knob.
    priors.push_back(init_params(pspecs, derive(seed, 1000 + tag)));
    if (cfg.prior_weight_std != 1.0) {
      Vector pv = params_vector(priors.back()) * cfg.prior_weight_std;
      set_params_vector(priors.back(), pv);
    }
    opts.push_back(make_optim_state(res.members[size_t(k)].param_count()));
  }

  Rng behaviour_rng(derive(seed, 3));
  Rng mask_rng(derive(seed, 4));
  Rng train_rng(derive(seed, 5));
  Matrix obs = env.vec_reset(derive(seed, 2));
  std::vector<int> obs_idx =
      indexed ? *env.obs_onehot() : std::vector<int>();
  std::vector<int> member(B);
  for (int i = 0; i < B; ++i) member[size_t(i)] = behaviour_rng.uniform_int(K);

  MaskedReplay buf(cfg.buffer_size, obs_dim, indexed, K, A);
  Vector ep_acc = Vector::Zero(B);
  std::deque<double> window;
  double window_sum = 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  long vec_steps = 0;
  long next_metrics_episode = 250;
  double last_loss = std::numeric_limits<double>::quiet_NaN();

  std::vector<Matrix> qps(static_cast<size_t>(K));
  std::vector<Matrix> qps2(static_cast<size_t>(K));
  while (res.episodes < cfg.max_episodes && !res.solved) {
    // beta-scaled prior values on the current observations, shared by action
    // selection and the replay cache (the priors never change).
    if (beta > 0.0) {
      for (int k = 0; k < K; ++k)
        qps[size_t(k)] =
            beta * (indexed ? network_forward_onehot(priors[size_t(k)],
                                                     obs_idx, NetMode::Eval)
                            : network_forward(priors[size_t(k)], obs,
                                              NetMode::Eval));
    }

    // Greedy actions from each instance's active member.
    std::vector<int> actions(B);
    for (int k = 0; k < K; ++k) {
      std::vector<int> rows;
      for (int i = 0; i < B; ++i)
        if (member[size_t(i)] == k) rows.push_back(i);
      if (rows.empty()) continue;
      std::vector<int> sub_idx;
      Matrix sub_rows;
      if (indexed) {
        for (int i : rows) sub_idx.push_back(obs_idx[size_t(i)]);
      } else {
        sub_rows.resize(int(rows.size()), obs_dim);
        for (size_t j = 0; j < rows.size(); ++j)
          sub_rows.row(Eigen::Index(j)) = obs.row(rows[j]);
      }
      Matrix q = indexed ? network_forward_onehot(res.members[size_t(k)],
                                                  sub_idx, NetMode::Eval)
                         : network_forward(res.members[size_t(k)], sub_rows,
                                           NetMode::Eval);
      if (beta > 0.0)
        for (size_t j = 0; j < rows.size(); ++j)
          q.row(Eigen::Index(j)) += qps[size_t(k)].row(rows[j]);
      for (size_t j = 0; j < rows.size(); ++j)
        actions[size_t(rows[j])] = argmax_row(q, int(j));
    }

    const StepResult sr = env.vec_step(actions);
    const std::vector<int>* term_idx = indexed ? env.terminal_onehot() : nullptr;
    if (beta > 0.0) {
      for (int k = 0; k < K; ++k)
        qps2[size_t(k)] =
            beta * (indexed ? network_forward_onehot(priors[size_t(k)],
                                                     *term_idx, NetMode::Eval)
                            : network_forward(priors[size_t(k)],
                                              sr.terminal_obs, NetMode::Eval));
    }
    RowVector psa(K), ps2(K * A);
    for (int i = 0; i < B; ++i) {
      std::uint32_t m = 0;
      for (int k = 0; k < K; ++k)
        if (mask_rng.bernoulli(cfg.mask_prob)) m |= (1u << k);
      if (beta > 0.0) {
        for (int k = 0; k < K; ++k) {
          psa(k) = qps[size_t(k)](i, actions[size_t(i)]);
          ps2.segment(k * A, A) = qps2[size_t(k)].row(i);
        }
      } else {
        psa.setZero();
        ps2.setZero();
      }
      const RowVector srow = obs.row(i);
      const RowVector s2row = sr.terminal_obs.row(i);
      buf.push(indexed ? obs_idx[size_t(i)] : -1, &srow,
               actions[size_t(i)], sr.reward(i),
               indexed ? (*term_idx)[size_t(i)] : -1, &s2row,
               sr.done[size_t(i)] != 0, m, psa, ps2);
      ep_acc(i) += sr.reward(i);
      if (sr.done[size_t(i)]) {
        window.push_back(ep_acc(i));
        window_sum += ep_acc(i);
        if (int(window.size()) > cfg.solve_window) {
          window_sum -= window.front();
          window.pop_front();
        }
        ep_acc(i) = 0.0;
        res.episodes += 1;
        member[size_t(i)] = behaviour_rng.uniform_int(K);
        if (int(window.size()) == cfg.solve_window &&
            window_sum / double(cfg.solve_window) > cfg.solve_threshold) {
          res.solved = true;
        }
      }
    }
    obs = sr.obs;
    if (indexed) obs_idx = *env.obs_onehot();
    res.env_steps += B;
    vec_steps += 1;

    if (buf.size >= cfg.batch_size && vec_steps % cfg.train_every == 0) {
      // One shared minibatch; every member trains on its masked view.
      std::vector<int> pick(size_t(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i)
        pick[size_t(i)] = train_rng.uniform_int(buf.size);
      std::vector<int> bs_idx(size_t(cfg.batch_size)),
          bs2_idx(size_t(cfg.batch_size)), ba(size_t(cfg.batch_size));
      Matrix bs, bs2;
      if (!indexed) {
        bs.resize(cfg.batch_size, obs_dim);
        bs2.resize(cfg.batch_size, obs_dim);
      }
      Vector br(cfg.batch_size);
      std::vector<std::uint8_t> bd(size_t(cfg.batch_size));
      std::vector<std::uint32_t> bm(size_t(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i) {
        const int j = pick[size_t(i)];
        if (indexed) {
          bs_idx[size_t(i)] = buf.s_idx[size_t(j)];
          bs2_idx[size_t(i)] = buf.s2_idx[size_t(j)];
        } else {
          bs.row(i) = buf.s.row(j);
          bs2.row(i) = buf.s2.row(j);
        }
        ba[size_t(i)] = buf.a[size_t(j)];
        br(i) = buf.r[size_t(j)];
        bd[size_t(i)] = buf.done[size_t(j)];
        bm[size_t(i)] = buf.mask[size_t(j)];
      }

      double loss_sum = 0.0;
      int loss_n = 0;
      for (int k = 0; k < K; ++k) {
        Vector w(cfg.batch_size);
        double wsum = 0.0;
        for (int i = 0; i < cfg.batch_size; ++i) {
          w(i) = (bm[size_t(i)] >> k) & 1u ? 1.0 : 0.0;
          wsum += w(i);
        }
        if (wsum == 0.0) continue;
        NetworkParams& net = res.members[size_t(k)];
        // beta-scaled prior values were cached at push time.
        Vector qp1(cfg.batch_size);
        Matrix qp2(cfg.batch_size, A);
        for (int i = 0; i < cfg.batch_size; ++i) {
          const int j = pick[size_t(i)];
          qp1(i) = buf.prior_sa(j, k);
          qp2.row(i) = buf.prior_s2.row(j).segment(k * A, A);
        }

        ForwardCache cache;
        Matrix q_pred, q_next;
        if (shared_batch_targets) {
          // Predictions and bootstrap values share one train-mode batch, so
          // any batchnorm statistics come from this minibatch.
          std::vector<int> cat_idx;
          Matrix cat_rows;
          if (indexed) {
            cat_idx = bs_idx;
            cat_idx.insert(cat_idx.end(), bs2_idx.begin(), bs2_idx.end());
          } else {
            cat_rows.resize(2 * cfg.batch_size, obs_dim);
            cat_rows.topRows(cfg.batch_size) = bs;
            cat_rows.bottomRows(cfg.batch_size) = bs2;
          }
          const Matrix qall =
              indexed
                  ? network_forward_onehot(net, cat_idx, NetMode::Train,
                                           &cache)
                  : network_forward(net, cat_rows, NetMode::Train, &cache);
          q_pred = qall.topRows(cfg.batch_size);
          q_next = qall.bottomRows(cfg.batch_size);
          Matrix upstream = Matrix::Zero(2 * cfg.batch_size, A);
          double loss = 0.0;
          for (int i = 0; i < cfg.batch_size; ++i) {
            const Matrix qtot_next = q_next.row(i) + qp2.row(i);
            const double boot =
                bd[size_t(i)] ? 0.0 : qtot_next.maxCoeff();
            const double y = br(i) + cfg.gamma * boot;
            const int a = ba[size_t(i)];
            const double diff = q_pred(i, a) + qp1(i) - y;
            loss += w(i) * diff * diff;
            upstream(i, a) = 2.0 * w(i) * diff / wsum;
          }
          NetworkGrads grads = network_backward(net, cache, upstream);
          Vector flat = gradient_vector(net, grads);
          clip_global_norm(flat, 10.0);
          Vector theta = params_vector(net);
          adam_step(opts[size_t(k)], theta, flat, cfg.lr);
          set_params_vector(net, theta);
          if (has_bn) commit_running_stats(net, cache);
          loss_sum += loss / wsum;
          ++loss_n;
        } else {
          q_next = indexed
                       ? network_forward_onehot(net, bs2_idx, NetMode::Eval)
                       : network_forward(net, bs2, NetMode::Eval);
          Vector y(cfg.batch_size);
          for (int i = 0; i < cfg.batch_size; ++i) {
            const Matrix qtot_next = q_next.row(i) + qp2.row(i);
            const double boot =
                bd[size_t(i)] ? 0.0 : qtot_next.maxCoeff();
            y(i) = br(i) + cfg.gamma * boot;
            // The prior's contribution at (s, a) is constant; folding it
            // into the target keeps the trained head comparable.
            y(i) -= qp1(i);
          }
          LossGrads lg = td_loss_and_grads(
              net, bs, ba, y, NetMode::Train, &w, indexed ? &bs_idx : nullptr);
          Vector flat = gradient_vector(net, lg.grads);
          clip_global_norm(flat, 10.0);
          Vector theta = params_vector(net);
          adam_step(opts[size_t(k)], theta, flat, cfg.lr);
          set_params_vector(net, theta);
          if (has_bn) commit_running_stats(net, lg.cache);
          loss_sum += lg.loss;
          ++loss_n;
        }
      }
      if (loss_n > 0) last_loss = loss_sum / double(loss_n);
    }

    if (res.episodes >= next_metrics_episode || res.solved ||
        res.episodes >= cfg.max_episodes) {
      MetricsRecord rec;
      rec.step = res.env_steps;
      rec.loss = last_loss;
      rec.episodic_return_count = long(window.size());
      if (!window.empty())
        rec.episodic_return_mean = window_sum / double(window.size());
      rec.lr = cfg.lr;
      rec.wall_clock_s = seconds_since(t0);
      res.metrics.push_back(rec);
      next_metrics_episode = res.episodes + 250;
    }
  }
  res.window_mean =
      window.empty() ? 0.0 : window_sum / double(window.size());
  res.wall_clock_s = seconds_since(t0);
  return res;
}

}  // namespace pqnlab
