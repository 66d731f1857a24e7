#include "pqnlab/envs.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pqnlab {

namespace {

constexpr double kPi = 3.14159265358979323846;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

int sample_discrete(const RowVector& p, double u) {
  double acc = 0.0;
  int last_positive = -1;
  for (int i = 0; i < p.size(); ++i) {
    if (p(i) <= 0.0) continue;
    last_positive = i;
    acc += p(i);
    if (u < acc) return i;
  }
  return last_positive;  // u landed in roundoff slack at the top
}

}  // namespace

RowVector TabularMDP::feature_row(int s) const {
  if (features.size() > 0) return features.row(s);
  RowVector r = RowVector::Zero(S);
  r(s) = 1.0;
  return r;
}

void TabularMDP::validate() const {
  require(S >= 1 && A >= 1, "mdp needs at least one state and action");
  require(int(P.size()) == A, "one transition matrix per action");
  for (int a = 0; a < A; ++a) {
    require(P[a].rows() == S && P[a].cols() == S, "transition matrix shape");
    require((P[a].array() >= 0.0).all(), "transition probabilities >= 0");
    for (int s = 0; s < S; ++s)
      require(std::abs(P[a].row(s).sum() - 1.0) <= 1e-12,
              "transition rows must sum to 1");
  }
  require(R.rows() == S && R.cols() == A, "reward matrix shape");
  require(R.cwiseAbs().maxCoeff() <= r_max + 1e-12, "|R| exceeds r_max");
  require(P0.size() == S, "initial distribution size");
  require((P0.array() >= 0.0).all() && std::abs(P0.sum() - 1.0) <= 1e-12,
          "initial distribution must sum to 1");
  require(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0, 1]");
  if (features.size() > 0)
    require(features.rows() == S, "feature rows must match state count");
}

void SamplingDistribution::validate(const TabularMDP& mdp) const {
  require(d.rows() == mdp.S && d.cols() == mdp.A, "d shape");
  require((d.array() >= 0.0).all() && std::abs(d.sum() - 1.0) <= 1e-12,
          "d must be a distribution over state-action pairs");
  for (const Matrix* m : {&mu, &pi}) {
    require(m->rows() == mdp.S && m->cols() == mdp.A, "policy shape");
    require((m->array() >= 0.0).all(), "policy probabilities >= 0");
    for (int s = 0; s < mdp.S; ++s)
      require(std::abs(m->row(s).sum() - 1.0) <= 1e-12,
              "policy rows must sum to 1");
  }
}

Matrix value_iteration(const TabularMDP& mdp, double tol, long max_sweeps) {
  mdp.validate();
  require(tol > 0.0, "tol must be positive");
  Matrix Q = Matrix::Zero(mdp.S, mdp.A);
  for (long sweep = 0; sweep < max_sweeps; ++sweep) {
    const Vector V = Q.rowwise().maxCoeff();
    Matrix Qn(mdp.S, mdp.A);
    for (int a = 0; a < mdp.A; ++a)
      Qn.col(a) = mdp.R.col(a) + mdp.gamma * (mdp.P[a] * V);
    const double change = (Qn - Q).cwiseAbs().maxCoeff();
    Q = std::move(Qn);
    if (change < tol) return Q;
  }
  throw std::runtime_error("value iteration did not converge");
}

TabularMDP parse_tabular_mdp(std::istream& in) {
  // Strip comments, then read one whitespace-separated token stream.
  std::stringstream clean;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    clean << line << '\n';
  }
  auto next_num = [&clean](const char* what) {
    double v;
    if (!(clean >> v))
      throw std::invalid_argument(std::string("mdp file: missing ") + what);
    return v;
  };
  TabularMDP m;
  m.S = int(next_num("state count"));
  m.A = int(next_num("action count"));
  m.gamma = next_num("gamma");
  require(m.S >= 1 && m.A >= 1, "mdp file: bad sizes");
  m.P0.resize(m.S);
  for (int s = 0; s < m.S; ++s) m.P0(s) = next_num("initial distribution");
  m.P.assign(m.A, Matrix(m.S, m.S));
  for (int a = 0; a < m.A; ++a)
    for (int s = 0; s < m.S; ++s)
      for (int t = 0; t < m.S; ++t) m.P[a](s, t) = next_num("transition");
  m.R.resize(m.S, m.A);
  for (int s = 0; s < m.S; ++s)
    for (int a = 0; a < m.A; ++a) m.R(s, a) = next_num("reward");
  m.r_max = std::max(1.0, m.R.cwiseAbs().maxCoeff());
  std::string word;
  if (clean >> word) {
    require(word == "features", "mdp file: unexpected trailing token");
    const int d = int(next_num("feature dim"));
    m.features.resize(m.S, d);
    for (int s = 0; s < m.S; ++s)
      for (int j = 0; j < d; ++j) m.features(s, j) = next_num("feature");
  }
  m.validate();
  return m;
}

TabularMDP load_tabular_mdp(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open mdp file: " + path);
  return parse_tabular_mdp(f);
}

BairdProblem baird_build() {
  BairdProblem b;
  TabularMDP& m = b.mdp;
  m.S = 7;
  m.A = 2;
  m.gamma = 0.99;
  m.r_max = 1.0;
  m.P.assign(2, Matrix::Zero(7, 7));
  for (int s = 0; s < 7; ++s) {
    for (int t = 0; t < 6; ++t) m.P[0](s, t) = 1.0 / 6.0;  // scatter
    m.P[1](s, 6) = 1.0;                                    // hub
  }
  m.R = Matrix::Zero(7, 2);
  m.P0 = Vector::Constant(7, 1.0 / 7.0);
  m.features = Matrix::Zero(7, 8);
  for (int s = 0; s < 6; ++s) {
    m.features(s, s) = 2.0;
    m.features(s, 7) = 1.0;
  }
  m.features(6, 6) = 1.0;
  m.features(6, 7) = 2.0;
  m.validate();

  SamplingDistribution& sd = b.sampling;
  sd.mu = Matrix(7, 2);
  sd.pi = Matrix(7, 2);
  sd.d = Matrix(7, 2);
  for (int s = 0; s < 7; ++s) {
    sd.mu(s, 0) = 6.0 / 7.0;
    sd.mu(s, 1) = 1.0 / 7.0;
    sd.pi(s, 0) = 0.0;
    sd.pi(s, 1) = 1.0;
    // Importance-corrected pair weights: uniform over states, and the ratio
    // pi/mu moves all mass onto the hub action.
    sd.d(s, 0) = 0.0;
    sd.d(s, 1) = 1.0 / 7.0;
  }
  sd.validate(m);
  b.features = m.features;
  return b;
}

Vector baird_init_weights() {
  Vector w = Vector::Ones(8);
  w(6) = 10.0;
  return w;
}

TabularVecEnv::TabularVecEnv(TabularMDP mdp, int num_envs, int instance_base)
    : mdp_(std::move(mdp)), B_(num_envs), base_(instance_base) {
  mdp_.validate();
  require(B_ >= 1, "need at least one env instance");
}

Matrix TabularVecEnv::vec_reset(std::uint64_t seed) {
  rng_.clear();
  state_.assign(size_t(B_), 0);
  Matrix obs(B_, mdp_.feature_dim());
  for (int i = 0; i < B_; ++i) {
    rng_.push_back(Rng::stream(seed, std::uint64_t(base_ + i)));
    state_[size_t(i)] =
        sample_discrete(mdp_.P0.transpose(), rng_.back().uniform());
    obs.row(i) = mdp_.feature_row(state_[size_t(i)]);
  }
  return obs;
}

StepResult TabularVecEnv::vec_step(const std::vector<int>& actions) {
  require(int(actions.size()) == B_, "one action per env instance");
  require(!rng_.empty(), "vec_reset must run before vec_step");
  StepResult r;
  r.obs.resize(B_, mdp_.feature_dim());
  r.reward.resize(B_);
  r.done.assign(size_t(B_), 0);
  for (int i = 0; i < B_; ++i) {
    const int a = actions[size_t(i)];
    require(a >= 0 && a < mdp_.A, "action out of range");
    const int s = state_[size_t(i)];
    r.reward(i) = mdp_.R(s, a);
    const int t =
        sample_discrete(mdp_.P[a].row(s), rng_[size_t(i)].uniform());
    state_[size_t(i)] = t;
    r.obs.row(i) = mdp_.feature_row(t);
  }
  r.terminal_obs = r.obs;
  return r;
}

DeepSeaVecEnv::DeepSeaVecEnv(int depth, int num_envs, int instance_base,
                             bool randomize_actions)
    : N_(depth), B_(num_envs), base_(instance_base) {
  require(N_ >= 2, "depth must be at least 2");
  require(B_ >= 1, "need at least one env instance");
  flip_.assign(size_t(N_ * N_), randomize_actions ? 2 : 0);  // 2 = undrawn
}

Matrix DeepSeaVecEnv::vec_reset(std::uint64_t seed) {
  if (!flip_.empty() && flip_[0] == 2) {
    // The action map is shared across instances and fixed for the env's
    // lifetime; draw it from a stream no instance uses.
    Rng map_rng = Rng::stream(seed, 1000003);
    for (auto& f : flip_) f = map_rng.bernoulli(0.5) ? 1 : 0;
  }
  row_.assign(size_t(B_), 0);
  col_.assign(size_t(B_), 0);
  obs_index_.assign(size_t(B_), cell(0, 0));
  term_index_.assign(size_t(B_), cell(0, 0));
  Matrix obs = Matrix::Zero(B_, N_ * N_);
  obs.col(cell(0, 0)).setOnes();
  return obs;
}

StepResult DeepSeaVecEnv::vec_step(const std::vector<int>& actions) {
  require(int(actions.size()) == B_, "one action per env instance");
  require(!row_.empty(), "vec_reset must run before vec_step");
  StepResult r;
  r.obs = Matrix::Zero(B_, N_ * N_);
  r.terminal_obs = Matrix::Zero(B_, N_ * N_);
  r.reward.setZero(B_);
  r.done.assign(size_t(B_), 0);
  for (int i = 0; i < B_; ++i) {
    const int a = actions[size_t(i)];
    require(a == 0 || a == 1, "action out of range");
    const int rw = row_[size_t(i)], cl = col_[size_t(i)];
    const bool right = (a == 1) != (flip_[size_t(cell(rw, cl))] == 1);
    double reward = 0.0;
    if (right) {
      reward -= 0.01 / double(N_);
      if (rw == N_ - 1 && cl == N_ - 1) reward += 1.0;
    }
    const int ncol =
        right ? std::min(cl + 1, N_ - 1) : std::max(cl - 1, 0);
    const int nrow = rw + 1;
    r.reward(i) = reward;
    if (nrow == N_) {
      r.done[size_t(i)] = 1;
      term_index_[size_t(i)] = -1;  // all-zero terminal observation
      row_[size_t(i)] = 0;
      col_[size_t(i)] = 0;
    } else {
      row_[size_t(i)] = nrow;
      col_[size_t(i)] = ncol;
      const int idx = cell(nrow, ncol);
      term_index_[size_t(i)] = idx;
      r.terminal_obs(i, idx) = 1.0;
    }
    const int oidx = cell(row_[size_t(i)], col_[size_t(i)]);
    obs_index_[size_t(i)] = oidx;
    r.obs(i, oidx) = 1.0;
  }
  return r;
}

CartPoleVecEnv::CartPoleVecEnv(int num_envs, int instance_base, int max_steps)
    : B_(num_envs), base_(instance_base), max_steps_(max_steps) {
  require(B_ >= 1, "need at least one env instance");
  require(max_steps_ >= 1, "max_steps must be positive");
}

Vector CartPoleVecEnv::fresh_state(int i) {
  Vector s(4);
  for (int j = 0; j < 4; ++j) s(j) = rng_[size_t(i)].uniform(-0.05, 0.05);
  return s;
}

Matrix CartPoleVecEnv::vec_reset(std::uint64_t seed) {
  rng_.clear();
  steps_.assign(size_t(B_), 0);
  state_.resize(B_, 4);
  for (int i = 0; i < B_; ++i) {
    rng_.push_back(Rng::stream(seed, std::uint64_t(base_ + i)));
    state_.row(i) = fresh_state(i).transpose();
  }
  return state_;
}

StepResult CartPoleVecEnv::vec_step(const std::vector<int>& actions) {
  require(int(actions.size()) == B_, "one action per env instance");
  require(!rng_.empty(), "vec_reset must run before vec_step");
  constexpr double kGravity = 9.8, kMassCart = 1.0, kMassPole = 0.1;
  constexpr double kTotalMass = kMassCart + kMassPole;
  constexpr double kLength = 0.5;  // half the pole
  constexpr double kPoleMassLength = kMassPole * kLength;
  constexpr double kForceMag = 10.0, kTau = 0.02;
  constexpr double kXLimit = 2.4;
  const double kThetaLimit = 12.0 * 2.0 * kPi / 360.0;

  StepResult r;
  r.obs.resize(B_, 4);
  r.terminal_obs.resize(B_, 4);
  r.reward.setConstant(B_, 1.0);
  r.done.assign(size_t(B_), 0);
  for (int i = 0; i < B_; ++i) {
    const int a = actions[size_t(i)];
    require(a == 0 || a == 1, "action out of range");
    double x = state_(i, 0), xd = state_(i, 1);
    double th = state_(i, 2), thd = state_(i, 3);
    const double force = a == 1 ? kForceMag : -kForceMag;
    const double costh = std::cos(th), sinth = std::sin(th);
    const double temp =
        (force + kPoleMassLength * thd * thd * sinth) / kTotalMass;
    const double thacc =
        (kGravity * sinth - costh * temp) /
        (kLength * (4.0 / 3.0 - kMassPole * costh * costh / kTotalMass));
    const double xacc = temp - kPoleMassLength * thacc * costh / kTotalMass;
    x += kTau * xd;
    xd += kTau * xacc;
    th += kTau * thd;
    thd += kTau * thacc;
    steps_[size_t(i)] += 1;
    const bool fell =
        x < -kXLimit || x > kXLimit || th < -kThetaLimit || th > kThetaLimit;
    const bool out_of_time = steps_[size_t(i)] >= max_steps_;
    Vector ns(4);
    ns << x, xd, th, thd;
    r.terminal_obs.row(i) = ns.transpose();
    if (fell || out_of_time) {
      r.done[size_t(i)] = 1;
      steps_[size_t(i)] = 0;
      state_.row(i) = fresh_state(i).transpose();
    } else {
      state_.row(i) = ns.transpose();
    }
    r.obs.row(i) = state_.row(i);
  }
  return r;
}

namespace {

// Equations of motion for the two-link pendulum; s = (t1, t2, d1, d2).
Eigen::Vector4d acrobot_dsdt(const Eigen::Vector4d& s, double torque) {
  constexpr double m1 = 1.0, m2 = 1.0, l1 = 1.0, lc1 = 0.5, lc2 = 0.5;
  constexpr double I1 = 1.0, I2 = 1.0, g = 9.8;
  const double t1 = s(0), t2 = s(1), dt1 = s(2), dt2 = s(3);
  const double d1 =
      m1 * lc1 * lc1 +
      m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * std::cos(t2)) + I1 + I2;
  const double d2 = m2 * (lc2 * lc2 + l1 * lc2 * std::cos(t2)) + I2;
  const double phi2 = m2 * lc2 * g * std::cos(t1 + t2 - kPi / 2.0);
  const double phi1 = -m2 * l1 * lc2 * dt2 * dt2 * std::sin(t2) -
                      2.0 * m2 * l1 * lc2 * dt2 * dt1 * std::sin(t2) +
                      (m1 * lc1 + m2 * l1) * g * std::cos(t1 - kPi / 2.0) +
                      phi2;
  const double ddt2 =
      (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dt1 * dt1 * std::sin(t2) -
       phi2) /
      (m2 * lc2 * lc2 + I2 - d2 * d2 / d1);
  const double ddt1 = -(d2 * ddt2 + phi1) / d1;
  return {dt1, dt2, ddt1, ddt2};
}

double wrap_pi(double x) {
  x = std::fmod(x + kPi, 2.0 * kPi);
  if (x < 0.0) x += 2.0 * kPi;
  return x - kPi;
}

}  // namespace

AcrobotVecEnv::AcrobotVecEnv(int num_envs, int instance_base, int max_steps)
    : B_(num_envs), base_(instance_base), max_steps_(max_steps) {
  require(B_ >= 1, "need at least one env instance");
}

Vector AcrobotVecEnv::fresh_state(int i) {
  Vector s(4);
  for (int j = 0; j < 4; ++j) s(j) = rng_[size_t(i)].uniform(-0.1, 0.1);
  return s;
}

RowVector AcrobotVecEnv::observe(const Vector& s) const {
  RowVector o(6);
  o << std::cos(s(0)), std::sin(s(0)), std::cos(s(1)), std::sin(s(1)), s(2),
      s(3);
  return o;
}

Matrix AcrobotVecEnv::vec_reset(std::uint64_t seed) {
  rng_.clear();
  steps_.assign(size_t(B_), 0);
  state_.resize(B_, 4);
  Matrix obs(B_, 6);
  for (int i = 0; i < B_; ++i) {
    rng_.push_back(Rng::stream(seed, std::uint64_t(base_ + i)));
    state_.row(i) = fresh_state(i).transpose();
    obs.row(i) = observe(state_.row(i).transpose());
  }
  return obs;
}

StepResult AcrobotVecEnv::vec_step(const std::vector<int>& actions) {
  require(int(actions.size()) == B_, "one action per env instance");
  require(!rng_.empty(), "vec_reset must run before vec_step");
  constexpr double kDt = 0.2;
  const double kMaxVel1 = 4.0 * kPi, kMaxVel2 = 9.0 * kPi;

  StepResult r;
  r.obs.resize(B_, 6);
  r.terminal_obs.resize(B_, 6);
  r.reward.resize(B_);
  r.done.assign(size_t(B_), 0);
  for (int i = 0; i < B_; ++i) {
    const int a = actions[size_t(i)];
    require(a >= 0 && a < 3, "action out of range");
    const double torque = double(a - 1);
    Eigen::Vector4d y = state_.row(i).transpose();
    const Eigen::Vector4d k1 = acrobot_dsdt(y, torque);
    const Eigen::Vector4d k2 = acrobot_dsdt(y + 0.5 * kDt * k1, torque);
    const Eigen::Vector4d k3 = acrobot_dsdt(y + 0.5 * kDt * k2, torque);
    const Eigen::Vector4d k4 = acrobot_dsdt(y + kDt * k3, torque);
    Eigen::Vector4d ns = y + kDt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    ns(0) = wrap_pi(ns(0));
    ns(1) = wrap_pi(ns(1));
    ns(2) = std::clamp(ns(2), -kMaxVel1, kMaxVel1);
    ns(3) = std::clamp(ns(3), -kMaxVel2, kMaxVel2);
    steps_[size_t(i)] += 1;
    const bool reached = -std::cos(ns(0)) - std::cos(ns(1) + ns(0)) > 1.0;
    const bool out_of_time = steps_[size_t(i)] >= max_steps_;
    r.reward(i) = reached ? 0.0 : -1.0;
    r.terminal_obs.row(i) = observe(ns);
    if (reached || out_of_time) {
      r.done[size_t(i)] = 1;
      steps_[size_t(i)] = 0;
      state_.row(i) = fresh_state(i).transpose();
    } else {
      state_.row(i) = ns.transpose();
    }
    r.obs.row(i) = observe(state_.row(i).transpose());
  }
  return r;
}

TabularMDP deepsea_mdp(int depth, double gamma) {
  require(depth >= 2, "depth must be at least 2");
  const int N = depth;
  const int S = N * N + 1;  // plus one absorbing state
  const int absorbing = N * N;
  TabularMDP m;
  m.S = S;
  m.A = 2;  // canonical semantics: 0 = left, 1 = right
  m.gamma = gamma;
  m.P.assign(2, Matrix::Zero(S, S));
  m.R = Matrix::Zero(S, 2);
  const double cost = 0.01 / double(N);
  for (int row = 0; row < N; ++row) {
    for (int col = 0; col < N; ++col) {
      const int s = row * N + col;
      const int cl = std::max(col - 1, 0);
      const int cr = std::min(col + 1, N - 1);
      if (row == N - 1) {
        m.P[0](s, absorbing) = 1.0;
        m.P[1](s, absorbing) = 1.0;
      } else {
        m.P[0](s, (row + 1) * N + cl) = 1.0;
        m.P[1](s, (row + 1) * N + cr) = 1.0;
      }
      m.R(s, 1) = -cost;
      if (row == N - 1 && col == N - 1) m.R(s, 1) += 1.0;
    }
  }
  m.P[0](absorbing, absorbing) = 1.0;
  m.P[1](absorbing, absorbing) = 1.0;
  m.P0 = Vector::Zero(S);
  m.P0(0) = 1.0;
  m.r_max = 1.0;
  m.validate();
  return m;
}

std::unique_ptr<VecEnv> make_env(const std::string& name, int num_envs,
                                 int depth) {
  if (name == "cartpole")
    return std::make_unique<CartPoleVecEnv>(num_envs);
  if (name == "acrobot") return std::make_unique<AcrobotVecEnv>(num_envs);
  if (name == "deepsea")
    return std::make_unique<DeepSeaVecEnv>(depth, num_envs);
  throw std::invalid_argument("unknown env: " + name);
}

}  // namespace pqnlab
