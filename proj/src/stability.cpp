#include "pqnlab/stability.hpp"

#include <lapacke.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pqnlab/optim.hpp"

namespace pqnlab {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

struct EvalPoint {
  double q = 0.0;
  Vector g;
};

EvalPoint eval_point(const NetworkParams& params, const RowVector& x,
                     int col) {
  Matrix xm(1, x.size());
  xm.row(0) = x;
  ForwardCache cache;
  const Matrix out = network_forward(params, xm, NetMode::Eval, &cache);
  Matrix up = Matrix::Zero(1, out.cols());
  up(0, col) = 1.0;
  EvalPoint p;
  p.q = out(0, col);
  p.g = gradient_vector(params, network_backward(params, cache, up));
  return p;
}

// Flat [offset, offset + count) span of the final dense layer's weights in
// the canonical parameter order.
std::pair<int, int> final_weight_span(const NetworkParams& params) {
  const int fd = params.final_dense();
  require(fd >= 0, "network has no dense layer");
  int off = 0;
  for (int i = 0; i < fd; ++i) {
    const LayerParams& lp = params.layers[size_t(i)];
    off += int(lp.W.size() + lp.b.size() + lp.scale.size() + lp.shift.size());
  }
  return {off, int(params.layers[size_t(fd)].W.size())};
}

int sample_discrete(const Vector& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  int last = 0;
  for (int i = 0; i < probs.size(); ++i) {
    if (probs(i) <= 0.0) continue;
    acc += probs(i);
    last = i;
    if (u < acc) return i;
  }
  return last;
}

// Least-squares slope of log(y) against log(x); NaN unless every y > 0.
void finalize_fit(ProbeResult& res) {
  const size_t n = res.sweep_values.size();
  res.monotone_decreasing = n >= 2;
  std::vector<double> ex(n);
  bool positive = true;
  for (size_t i = 0; i < n; ++i) {
    ex[i] = res.statistic[i] - res.reference[i];
    positive = positive && ex[i] > 0.0;
    if (i > 0 && !(ex[i] < ex[i - 1])) res.monotone_decreasing = false;
  }
  if (!positive || n < 2) return;
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += std::log(res.sweep_values[i]);
    my += std::log(ex[i]);
  }
  mx /= double(n);
  my /= double(n);
  double sxx = 0.0, sxy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double dx = std::log(res.sweep_values[i]) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(ex[i]) - my);
  }
  if (sxx > 0.0) res.fitted_exponent = sxy / sxx;
}

std::vector<LayerSpec> sweep_specs(int input_dim, int k) {
  return {LayerSpec::dense(input_dim, k, false),
          LayerSpec::layer_norm(k, NormVariant::Scaled),
          LayerSpec::relu(k), LayerSpec::dense(k, 1, false)};
}

}  // namespace

std::vector<std::complex<double>> eig_spectrum(const Matrix& m) {
  require(m.rows() == m.cols() && m.rows() > 0, "matrix must be square");
  require(m.allFinite(), "matrix must be finite");
  const int n = int(m.rows());
  // Row-major copy; dgeev destroys its input.
  std::vector<double> a(size_t(n) * size_t(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a[size_t(i) * n + j] = m(i, j);
  std::vector<double> wr(static_cast<size_t>(n)), wi(static_cast<size_t>(n));
  const int info =
      LAPACKE_dgeev(LAPACK_ROW_MAJOR, 'N', 'N', n, a.data(), n, wr.data(),
                    wi.data(), nullptr, n, nullptr, n);
  if (info != 0)
    throw std::runtime_error("eigenvalue iteration failed to converge");
  std::vector<std::complex<double>> ev(wr.size());
  for (int i = 0; i < n; ++i) ev[size_t(i)] = {wr[size_t(i)], wi[size_t(i)]};
  return ev;
}

double max_real_eig(const Matrix& m) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& e : eig_spectrum(m)) best = std::max(best, e.real());
  return best;
}

JacobianReport td_jacobian(const TabularMDP& mdp,
                           const SamplingDistribution& sampling,
                           const NetworkParams& params, double gamma,
                           double l2_eta) {
  mdp.validate();
  sampling.validate(mdp);
  const int P = int(params.param_count());
  require(P >= 1 && P <= 5000, "parameter count too large to enumerate");
  const int S = mdp.S, A = mdp.A;
  const int out = params.out_dim();
  require(out == 1 || out == A,
          "network must output one value or one per action");
  require(params.in_dim() == mdp.feature_dim(),
          "network input must match the feature dimension");
  require(gamma >= 0.0 && gamma <= 1.0 && l2_eta >= 0.0, "bad gamma or eta");
  const int C = out;
  auto col_of = [&](int a) { return out == 1 ? 0 : a; };

  std::vector<std::vector<EvalPoint>> pts(static_cast<size_t>(S));
  for (int s = 0; s < S; ++s)
    for (int c = 0; c < C; ++c)
      pts[size_t(s)].push_back(eval_point(params, mdp.feature_row(s), c));

  JacobianReport rep;
  rep.off_policy_term = Matrix::Zero(P, P);
  Matrix coeff = Matrix::Zero(S, C);  // accumulated d(x) * E[td | x]
  for (int s = 0; s < S; ++s) {
    for (int a = 0; a < A; ++a) {
      const double w = sampling.d(s, a);
      if (w == 0.0) continue;
      Vector gbar = Vector::Zero(P);
      double qbar = 0.0;
      for (int s2 = 0; s2 < S; ++s2) {
        const double pt = mdp.P[size_t(a)](s, s2);
        if (pt == 0.0) continue;
        for (int a2 = 0; a2 < A; ++a2) {
          const double pp = pt * sampling.pi(s2, a2);
          if (pp == 0.0) continue;
          const EvalPoint& nxt = pts[size_t(s2)][size_t(col_of(a2))];
          gbar += pp * nxt.g;
          qbar += pp * nxt.q;
        }
      }
      const EvalPoint& e = pts[size_t(s)][size_t(col_of(a))];
      rep.off_policy_term +=
          w * (gamma * (e.g * gbar.transpose()) - e.g * e.g.transpose());
      coeff(s, col_of(a)) += w * (mdp.R(s, a) + gamma * qbar - e.q);
    }
  }

  rep.curvature_term = Matrix::Zero(P, P);
  for (int s = 0; s < S; ++s) {
    for (int c = 0; c < C; ++c) {
      if (coeff(s, c) == 0.0) continue;
      Matrix xm(1, params.in_dim());
      xm.row(0) = mdp.feature_row(s);
      Matrix up = Matrix::Zero(1, out);
      up(0, c) = 1.0;
      Vector ej = Vector::Zero(P);
      for (int j = 0; j < P; ++j) {
        ej(j) = 1.0;
        rep.curvature_term.col(j) += coeff(s, c) * hvp(params, xm, up, ej);
        ej(j) = 0.0;
      }
    }
  }

  rep.jacobian = rep.off_policy_term + rep.curvature_term;
  if (l2_eta > 0.0) {
    const auto [off, cnt] = final_weight_span(params);
    const double pull = l2_eta * l2_eta * (gamma / 2.0) * (gamma / 2.0);
    for (int i = 0; i < cnt; ++i) rep.jacobian(off + i, off + i) -= pull;
  }
  rep.eigenvalues = eig_spectrum(rep.jacobian);
  rep.max_real = -std::numeric_limits<double>::infinity();
  for (const auto& e : rep.eigenvalues)
    rep.max_real = std::max(rep.max_real, e.real());
  return rep;
}

Vector expected_td_error(const TabularMDP& mdp,
                         const SamplingDistribution& sampling,
                         const NetworkParams& params, double gamma,
                         double l2_eta) {
  mdp.validate();
  sampling.validate(mdp);
  const int P = int(params.param_count());
  const int S = mdp.S, A = mdp.A;
  const int out = params.out_dim();
  require(out == 1 || out == A,
          "network must output one value or one per action");
  require(params.in_dim() == mdp.feature_dim(),
          "network input must match the feature dimension");
  auto col_of = [&](int a) { return out == 1 ? 0 : a; };
  std::vector<std::vector<EvalPoint>> pts(static_cast<size_t>(S));
  for (int s = 0; s < S; ++s)
    for (int c = 0; c < out; ++c)
      pts[size_t(s)].push_back(eval_point(params, mdp.feature_row(s), c));
  Vector delta = Vector::Zero(P);
  for (int s = 0; s < S; ++s) {
    for (int a = 0; a < A; ++a) {
      const double w = sampling.d(s, a);
      if (w == 0.0) continue;
      double qbar = 0.0;
      for (int s2 = 0; s2 < S; ++s2) {
        const double pt = mdp.P[size_t(a)](s, s2);
        if (pt == 0.0) continue;
        for (int a2 = 0; a2 < A; ++a2)
          qbar +=
              pt * sampling.pi(s2, a2) * pts[size_t(s2)][size_t(col_of(a2))].q;
      }
      const EvalPoint& e = pts[size_t(s)][size_t(col_of(a))];
      delta += w * (mdp.R(s, a) + gamma * qbar - e.q) * e.g;
    }
  }
  if (l2_eta > 0.0)
    delta -= l2_final_layer_term(
        params, l2_eta * l2_eta * (gamma / 2.0) * (gamma / 2.0));
  return delta;
}

double pencil_sup(double p, double q, double c, double gamma) {
  require(p >= 0.0 && q >= 0.0, "gram diagonal must be nonnegative");
  if (p == 0.0) return 0.0;  // statistic is identically 0 when grad Q(x) = 0
  const double n00 = gamma * p * c - p * p;
  const double n01 = 0.5 * gamma * (p * q + c * c) - p * c;
  const double n11 = gamma * c * q - c * c;
  const double ridge = 1e-12 * (p + q);
  const double g00 = p + ridge, g01 = c, g11 = q + ridge;
  // det(N - lambda G) = a lambda^2 - b lambda + d with G positive definite.
  const double a = g00 * g11 - g01 * g01;
  const double b = n00 * g11 + n11 * g00 - 2.0 * n01 * g01;
  const double d = n00 * n11 - n01 * n01;
  double disc = b * b - 4.0 * a * d;
  if (disc < 0.0) disc = 0.0;  // symmetric pencil: roots are real
  const double root = (b + std::sqrt(disc)) / (2.0 * a);
  return std::max(root, 0.0);
}

double off_policy_probe(const NetworkParams& params, const Matrix& x,
                        const Matrix& xp, int v_draws, double gamma,
                        std::uint64_t seed) {
  require(params.out_dim() == 1, "probe expects a single-output network");
  require(x.rows() == xp.rows() && x.rows() >= 1, "paired transitions");
  require(v_draws >= 0, "v_draws must be nonnegative");
  const int P = int(params.param_count());
  const auto [woff, wcnt] = final_weight_span(params);
  Rng rng(Rng::stream(seed, 0).next_u64());
  double best = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < x.rows(); ++i) {
    const EvalPoint e = eval_point(params, x.row(i), 0);
    const EvalPoint ep = eval_point(params, xp.row(i), 0);
    auto stat = [&](const Vector& v) {
      const double vg = v.dot(e.g), vgp = v.dot(ep.g);
      return (gamma * vgp * vg - vg * vg) / v.squaredNorm();
    };
    for (int t = 0; t < v_draws; ++t) {
      Vector v(P);
      for (int j = 0; j < P; ++j) v(j) = rng.normal();
      best = std::max(best, stat(v));
    }
    // Structured draws: the gradients themselves, the final-layer slice of
    // the gradient, and the exact supremum over their span.
    if (e.g.squaredNorm() > 0.0) best = std::max(best, stat(e.g));
    if (ep.g.squaredNorm() > 0.0) best = std::max(best, stat(ep.g));
    Vector vf = Vector::Zero(P);
    vf.segment(woff, wcnt) = e.g.segment(woff, wcnt);
    if (vf.squaredNorm() > 0.0) best = std::max(best, stat(vf));
    best = std::max(best, pencil_sup(e.g.squaredNorm(), ep.g.squaredNorm(),
                                     e.g.dot(ep.g), gamma));
  }
  return best;
}

ProbeResult off_policy_width_sweep(const std::vector<int>& widths, int trials,
                                   double gamma, std::uint64_t seed,
                                   int input_dim) {
  require(!widths.empty() && trials >= 1 && input_dim >= 1, "empty sweep");
  ProbeResult res;
  const double ref = (gamma / 2.0) * (gamma / 2.0);
  for (size_t ki = 0; ki < widths.size(); ++ki) {
    const int k = widths[ki];
    require(k >= 2, "width must be at least 2");
    NetworkParams net = init_params(sweep_specs(input_dim, k), 0);
    const int P = int(net.param_count());
    Rng rng(Rng::stream(seed, 7000 + ki).next_u64());
    double best = 0.0;
    std::vector<double> per_trial;
    per_trial.reserve(size_t(trials));
    Vector theta(P), xv(input_dim), xi(input_dim);
    for (int t = 0; t < trials; ++t) {
      for (int j = 0; j < P; ++j) theta(j) = rng.normal();
      set_params_vector(net, theta);
      for (int j = 0; j < input_dim; ++j) xv(j) = rng.normal();
      const double rho = rng.uniform(-1.0, 1.0);
      for (int j = 0; j < input_dim; ++j) xi(j) = rng.normal();
      const Vector xpv = rho * xv + std::sqrt(1.0 - rho * rho) * xi;
      const EvalPoint e = eval_point(net, xv.transpose(), 0);
      const EvalPoint ep = eval_point(net, xpv.transpose(), 0);
      const double val = pencil_sup(e.g.squaredNorm(), ep.g.squaredNorm(),
                                    e.g.dot(ep.g), gamma);
      per_trial.push_back(val);
      best = std::max(best, val);
    }
    res.sweep_values.push_back(double(k));
    res.statistic.push_back(best);
    res.reference.push_back(ref);
    res.samples.push_back(trials);
    res.trial_values.push_back(std::move(per_trial));
  }
  finalize_fit(res);
  return res;
}

double curvature_quadform(const NetworkParams& params, const RowVector& x,
                          const Vector& v, double h) {
  require(params.out_dim() == 1, "probe expects a single-output network");
  require(v.size() == Eigen::Index(params.param_count()), "bad vector size");
  Matrix xm(1, x.size());
  xm.row(0) = x;
  Matrix up = Matrix::Ones(1, 1);
  bool flipped = false;
  Vector hv = hvp_fd(params, xm, up, v, h, &flipped);
  if (flipped) hv = hvp(params, xm, up, v);
  return std::abs(v.dot(hv)) / v.squaredNorm();
}

ProbeResult curvature_width_sweep(const std::vector<int>& widths, int trials,
                                  double gamma, std::uint64_t seed,
                                  int input_dim) {
  require(!widths.empty() && trials >= 1 && input_dim >= 1, "empty sweep");
  ProbeResult res;
  for (size_t ki = 0; ki < widths.size(); ++ki) {
    const int k = widths[ki];
    require(k >= 2, "width must be at least 2");
    NetworkParams net = init_params(sweep_specs(input_dim, k), 0);
    const int P = int(net.param_count());
    Rng rng(Rng::stream(seed, 8000 + ki).next_u64());
    double best = 0.0;
    std::vector<double> per_trial;
    per_trial.reserve(size_t(trials));
    Vector theta(P), xv(input_dim), xi(input_dim), v(P);
    Matrix up = Matrix::Ones(1, 1);
    for (int t = 0; t < trials; ++t) {
      for (int j = 0; j < P; ++j) theta(j) = rng.normal();
      set_params_vector(net, theta);
      for (int j = 0; j < input_dim; ++j) xv(j) = rng.normal();
      const double rho = rng.uniform(-1.0, 1.0);
      for (int j = 0; j < input_dim; ++j) xi(j) = rng.normal();
      const Vector xpv = rho * xv + std::sqrt(1.0 - rho * rho) * xi;
      const double r = rng.uniform(-1.0, 1.0);
      Matrix xm(1, input_dim);
      xm.row(0) = xv.transpose();
      const double q0 = network_forward(net, xm, NetMode::Eval)(0, 0);
      xm.row(0) = xpv.transpose();
      const double q1 = network_forward(net, xm, NetMode::Eval)(0, 0);
      const double td = std::abs(r + gamma * q1 - q0);
      double quad = 0.0;
      for (int dr = 0; dr < 8; ++dr) {
        for (int j = 0; j < P; ++j) v(j) = rng.normal();
        quad = std::max(quad, curvature_quadform(net, xv.transpose(), v));
      }
      // One power-iteration draw chases the dominant Hessian direction.
      xm.row(0) = xv.transpose();
      for (int j = 0; j < P; ++j) v(j) = rng.normal();
      v /= v.norm();
      for (int it = 0; it < 8; ++it) {
        Vector hv = hvp(net, xm, up, v);
        const double n = hv.norm();
        if (n < 1e-300) break;
        v = hv / n;
      }
      quad = std::max(quad, curvature_quadform(net, xv.transpose(), v));
      per_trial.push_back(td * quad);
      best = std::max(best, td * quad);
    }
    res.sweep_values.push_back(double(k));
    res.statistic.push_back(best);
    res.reference.push_back(0.0);
    res.samples.push_back(trials);
    res.trial_values.push_back(std::move(per_trial));
  }
  finalize_fit(res);
  return res;
}

Vector stationary_distribution(const Matrix& transition) {
  const int n = int(transition.rows());
  require(n >= 1 && transition.cols() == n, "matrix must be square");
  for (int i = 0; i < n; ++i)
    require(std::abs(transition.row(i).sum() - 1.0) < 1e-9,
            "rows must sum to 1");
  // Solve x'P = x' with sum(x) = 1: replace one balance equation by the
  // normalisation row.
  Matrix a = transition.transpose() - Matrix::Identity(n, n);
  a.row(n - 1).setOnes();
  Vector b = Vector::Zero(n);
  b(n - 1) = 1.0;
  const Vector x = a.fullPivLu().solve(b);
  require((a * x - b).lpNorm<Eigen::Infinity>() < 1e-8,
          "stationary distribution solve failed (chain may be reducible)");
  Vector out = x;
  for (int i = 0; i < n; ++i) {
    require(out(i) > -1e-10, "stationary distribution must be nonnegative");
    out(i) = std::max(out(i), 0.0);
  }
  out /= out.sum();
  return out;
}

SamplingDistribution on_policy_sampling(const TabularMDP& mdp,
                                        const Matrix& pi) {
  mdp.validate();
  require(pi.rows() == mdp.S && pi.cols() == mdp.A, "policy shape mismatch");
  Matrix ppi = Matrix::Zero(mdp.S, mdp.S);
  for (int a = 0; a < mdp.A; ++a)
    for (int s = 0; s < mdp.S; ++s)
      ppi.row(s) += pi(s, a) * mdp.P[size_t(a)].row(s);
  const Vector dstat = stationary_distribution(ppi);
  SamplingDistribution out;
  out.d = dstat.asDiagonal() * pi;
  out.mu = pi;
  out.pi = pi;
  out.validate(mdp);
  return out;
}

ProbeResult batchnorm_myopia_probe(const TabularMDP& mdp,
                                   const Matrix& features,
                                   const std::vector<int>& batch_sizes,
                                   int trials, double gamma,
                                   std::uint64_t seed) {
  mdp.validate();
  require(features.rows() == mdp.S && features.cols() >= 1,
          "feature matrix must have one row per state");
  require(!batch_sizes.empty() && trials >= 2, "need batches and trials");
  for (int n : batch_sizes)
    require(n >= 2, "batch statistics need at least 2 samples");
  const int S = mdp.S, k = int(features.cols());
  const double eps = 1e-5;

  // Uniform behaviour policy; its stationary distribution is also the
  // marginal successor distribution the batches are drawn from.
  Matrix pmu = Matrix::Zero(S, S);
  for (int a = 0; a < mdp.A; ++a) pmu += mdp.P[size_t(a)];
  pmu /= double(mdp.A);
  const Vector dstat = stationary_distribution(pmu);
  double expected_r = 0.0;
  for (int s = 0; s < S; ++s)
    expected_r += dstat(s) * mdp.R.row(s).mean();
  const Vector ef = features.transpose() * dstat;  // exact E[f(x')]

  Rng wrng(Rng::stream(seed, 0).next_u64());
  Vector w(k);
  for (int i = 0; i < k; ++i) w(i) = wrng.normal();

  ProbeResult res;
  res.expected_reward = expected_r;
  std::vector<long> counts(static_cast<size_t>(S));
  for (size_t ni = 0; ni < batch_sizes.size(); ++ni) {
    const int N = batch_sizes[ni];
    Rng rng(Rng::stream(seed, 10 + ni).next_u64());
    std::vector<double> mags;
    mags.reserve(size_t(trials));
    double sum = 0.0, sumsq = 0.0;
    for (int t = 0; t < trials; ++t) {
      std::fill(counts.begin(), counts.end(), 0L);
      for (int n = 0; n < N; ++n) ++counts[size_t(sample_discrete(dstat, rng))];
      Vector mu = Vector::Zero(k);
      for (int s = 0; s < S; ++s)
        if (counts[size_t(s)] > 0)
          mu += (double(counts[size_t(s)]) / N) * features.row(s).transpose();
      Vector var = Vector::Zero(k);
      for (int s = 0; s < S; ++s)
        if (counts[size_t(s)] > 0)
          var += (double(counts[size_t(s)]) / N) *
                 (features.row(s).transpose() - mu).array().square().matrix();
      double boot = 0.0;
      for (int i = 0; i < k; ++i)
        boot += w(i) * (ef(i) - mu(i)) / std::sqrt(var(i) + eps);
      boot *= gamma;
      mags.push_back(std::abs(boot));
      sum += boot;
      sumsq += boot * boot;
    }
    std::vector<double> sorted = mags;
    std::sort(sorted.begin(), sorted.end());
    const double median =
        trials % 2 == 1
            ? sorted[size_t(trials / 2)]
            : 0.5 *
                  (sorted[size_t(trials / 2 - 1)] + sorted[size_t(trials / 2)]);
    const double mean = sum / trials;
    const double sd =
        std::sqrt(std::max(0.0, (sumsq - trials * mean * mean) / (trials - 1)));
    res.sweep_values.push_back(double(N));
    res.statistic.push_back(median);
    res.reference.push_back(0.0);
    res.samples.push_back(trials);
    res.trial_values.push_back(std::move(mags));
    res.estimate_mean.push_back(expected_r + mean);
    res.estimate_se.push_back(sd / std::sqrt(double(trials)));
  }
  finalize_fit(res);
  return res;
}

}  // namespace pqnlab
