#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "pqnlab/net.hpp"
#include "pqnlab/rng.hpp"

using namespace pqnlab;

namespace {

// A grab bag of architectures covering every layer kind and variant.
std::vector<std::vector<LayerSpec>> zoo() {
  return {
      {LayerSpec::dense(3, 5), LayerSpec::relu(5), LayerSpec::dense(5, 2)},
      {LayerSpec::dense(4, 6), LayerSpec::layer_norm(6), LayerSpec::relu(6),
       LayerSpec::dense(6, 3)},
      {LayerSpec::dense(4, 6),
       LayerSpec::layer_norm(6, NormVariant::Affine), LayerSpec::relu(6),
       LayerSpec::dense(6, 3)},
      {LayerSpec::dense(5, 8), LayerSpec::relu(8),
       LayerSpec::batch_norm(8, NormVariant::Affine), LayerSpec::dense(8, 2)},
      {LayerSpec::dense(5, 8), LayerSpec::relu(8),
       LayerSpec::batch_norm(8, NormVariant::Scaled), LayerSpec::dense(8, 2)},
      {LayerSpec::dense(2, 7, false), LayerSpec::layer_norm(7),
       LayerSpec::relu(7), LayerSpec::dense(7, 4, false)},
  };
}

Matrix random_matrix(int n, int k, Rng& rng, double scale = 1.0) {
  Matrix m(n, k);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) m(i, j) = rng.normal(0.0, scale);
  return m;
}

double scalar_loss(const NetworkParams& p, const Matrix& x,
                   const Matrix& upstream, NetMode mode) {
  return (network_forward(p, x, mode).array() * upstream.array()).sum();
}

}  // namespace

TEST_CASE("layernorm matches hand-computed values") {
  Matrix x(1, 4);
  x << 1.0, 2.0, 3.0, 4.0;
  const Matrix y = layernorm_forward(x, NormVariant::Scaled, 1e-5);
  const double want[4] = {-0.670817709984463, -0.223605903328154,
                          0.223605903328154, 0.670817709984463};
  for (int j = 0; j < 4; ++j) CHECK(y(0, j) == doctest::Approx(want[j]).epsilon(1e-12));

  Vector scale(4), shift(4);
  scale << 1.0, 2.0, 3.0, 4.0;
  shift << 0.5, -0.5, 0.25, 0.0;
  const Matrix ya = layernorm_forward(x, NormVariant::Affine, 1e-5, &scale, &shift);
  const double want_a[4] = {-0.841635419968927, -1.394423613312618,
                            1.591635419968927, 5.366541679875708};
  for (int j = 0; j < 4; ++j)
    CHECK(ya(0, j) == doctest::Approx(want_a[j]).epsilon(1e-12));

  // The affine variant with scale 1/sqrt(k) and zero shift reproduces the
  // scaled variant exactly.
  Vector s2 = Vector::Constant(4, 0.5), z2 = Vector::Zero(4);
  const Matrix yb = layernorm_forward(x, NormVariant::Affine, 1e-5, &s2, &z2);
  CHECK((yb - y).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("layernorm is invariant to per-row constant shifts") {
  Rng rng(7);
  Matrix x = random_matrix(16, 9, rng, 2.0);
  Matrix shifted = x;
  for (int i = 0; i < x.rows(); ++i)
    shifted.row(i).array() += rng.uniform(-5.0, 5.0);
  const Matrix a = layernorm_forward(x, NormVariant::Scaled, 1e-5);
  const Matrix b = layernorm_forward(shifted, NormVariant::Scaled, 1e-5);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("scaled layernorm outputs never leave the unit ball") {
  Rng rng(11);
  for (int k : {2, 3, 8, 31, 256}) {
    for (double eps : {1e-8, 1e-5, 1e-2}) {
      Matrix x = random_matrix(64, k, rng, 10.0);
      x.row(0).setConstant(3.14);  // degenerate row: zero variance
      const Matrix y = layernorm_forward(x, NormVariant::Scaled, eps);
      CHECK(y.rowwise().norm().maxCoeff() <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("batchnorm train mode matches hand-computed values") {
  Matrix x(3, 2);
  x << 1.0, 2.0, 3.0, 4.0, 5.0, 8.0;
  Vector rm = Vector::Zero(2), rv = Vector::Ones(2);
  const Matrix z = batchnorm_forward(x, NetMode::Train, 1e-5, 0.1, rm, rv);
  Matrix want(3, 2);
  want << -1.224742575001414, -1.069044108596741, 0.0, -0.267261027149185,
      1.224742575001414, 1.336305135745926;
  CHECK((z - want).cwiseAbs().maxCoeff() < 1e-12);

  // EMA commit: momentum 0.1 on the batch mean and the unbiased variance.
  CHECK(rm(0) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(rm(1) == doctest::Approx(0.466666666666667).epsilon(1e-12));
  CHECK(rv(0) == doctest::Approx(1.3).epsilon(1e-12));
  CHECK(rv(1) == doctest::Approx(1.833333333333333).epsilon(1e-12));

  Matrix probe(1, 2);
  probe << 2.0, 3.0;
  const Matrix ev = batchnorm_forward(probe, NetMode::Eval, 1e-5, 0.1, rm, rv);
  CHECK(ev(0, 0) == doctest::Approx(1.490992898244907).epsilon(1e-12));
  CHECK(ev(0, 1) == doctest::Approx(1.870985560204924).epsilon(1e-12));
}

TEST_CASE("batchnorm train output has centred columns") {
  Rng rng(3);
  Matrix x = random_matrix(128, 6, rng, 4.0);
  x.array() += 17.0;
  Vector rm = Vector::Zero(6), rv = Vector::Ones(6);
  const Matrix z = batchnorm_forward(x, NetMode::Train, 1e-5, 0.1, rm, rv);
  CHECK(z.colwise().mean().cwiseAbs().maxCoeff() < 1e-8);
  const RowVector var = z.array().square().colwise().mean();
  CHECK((var.array() - 1.0).abs().maxCoeff() < 1e-3);
}

TEST_CASE("batchnorm rejects train batches smaller than two") {
  Matrix x(1, 3);
  x << 1.0, 2.0, 3.0;
  Vector rm = Vector::Zero(3), rv = Vector::Ones(3);
  CHECK_THROWS_AS(batchnorm_forward(x, NetMode::Train, 1e-5, 0.1, rm, rv),
                  std::invalid_argument);
}

TEST_CASE("spec validation catches bad wiring") {
  CHECK_THROWS_AS(validate_specs({}), std::invalid_argument);
  CHECK_THROWS_AS(validate_specs({LayerSpec::dense(3, 4), LayerSpec::relu(5)}),
                  std::invalid_argument);
  CHECK_THROWS_AS(validate_specs({LayerSpec::layer_norm(1)}),
                  std::invalid_argument);
}

TEST_CASE("init_params is deterministic and scales with fan-in") {
  const auto specs = zoo()[1];
  const NetworkParams a = init_params(specs, 42);
  const NetworkParams b = init_params(specs, 42);
  CHECK((params_vector(a) - params_vector(b)).cwiseAbs().maxCoeff() == 0.0);
  const NetworkParams c = init_params(specs, 43);
  CHECK((params_vector(a) - params_vector(c)).cwiseAbs().maxCoeff() > 0.0);

  // Empirical weight std tracks 1/sqrt(fan_in).
  const auto wide = std::vector<LayerSpec>{LayerSpec::dense(400, 400)};
  const NetworkParams w = init_params(wide, 1);
  const double emp = std::sqrt(w.layers[0].W.array().square().mean());
  CHECK(emp == doctest::Approx(1.0 / 20.0).epsilon(0.02));

  const NetworkParams fixed = init_params(wide, 1, 0.7);
  const double emp2 = std::sqrt(fixed.layers[0].W.array().square().mean());
  CHECK(emp2 == doctest::Approx(0.7).epsilon(0.02));
  CHECK(fixed.layers[0].b.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("flatten and unflatten round-trip in canonical order") {
  Rng rng(5);
  for (const auto& specs : zoo()) {
    NetworkParams p = init_params(specs, 9);
    const int n = p.param_count();
    Vector flat(n);
    for (int i = 0; i < n; ++i) flat(i) = rng.normal();
    const NetworkGrads g = unflatten_gradient(p, flat);
    const Vector back = gradient_vector(p, g);
    CHECK((back - flat).cwiseAbs().maxCoeff() == 0.0);

    const Vector theta = params_vector(p);
    NetworkParams q = p;
    set_params_vector(q, theta);
    CHECK((params_vector(q) - theta).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("backward gradients match central finite differences") {
  Rng rng(123);
  for (const auto& specs : zoo()) {
    NetworkParams p = init_params(specs, rng.next_u64());
    const int n_in = specs.front().in_dim;
    const int n_out = specs.back().out_dim;
    const Matrix x = random_matrix(6, n_in, rng);
    Matrix upstream = random_matrix(6, n_out, rng);
    // Train mode exercises the batch-stat path; running stats stay untouched
    // because the forward is pure.
    const NetMode mode = NetMode::Train;

    // Keep the loss magnitude small so FD roundoff stays far below the 1e-8
    // denominator floor (some gradients, e.g. a bias feeding batchnorm, are
    // exactly zero and would otherwise compare against pure noise).
    const double l0 = std::abs(scalar_loss(p, x, upstream, mode));
    if (l0 > 0.05) upstream *= 0.05 / l0;

    ForwardCache cache;
    network_forward(p, x, mode, &cache);
    const Vector g = gradient_vector(p, network_backward(p, cache, upstream));

    const Vector theta = params_vector(p);
    const double h = 1e-5;
    double worst = 0.0;
    for (int j = 0; j < theta.size(); ++j) {
      NetworkParams q = p;
      Vector t = theta;
      t(j) += h;
      set_params_vector(q, t);
      const double lp = scalar_loss(q, x, upstream, mode);
      t(j) = theta(j) - h;
      set_params_vector(q, t);
      const double lm = scalar_loss(q, x, upstream, mode);
      const double fd = (lp - lm) / (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(g(j)), 1e-8});
      worst = std::max(worst, std::abs(fd - g(j)) / denom);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("batchnorm eval backward uses frozen statistics") {
  Rng rng(77);
  const auto specs = zoo()[3];
  NetworkParams p = init_params(specs, 2);
  // Give the running stats some non-trivial values first.
  ForwardCache warm;
  network_forward(p, random_matrix(32, 5, rng), NetMode::Train, &warm);
  commit_running_stats(p, warm);

  const Matrix x = random_matrix(4, 5, rng);
  const Matrix upstream = random_matrix(4, 2, rng);
  ForwardCache cache;
  network_forward(p, x, NetMode::Eval, &cache);
  const Vector g = gradient_vector(p, network_backward(p, cache, upstream));

  const Vector theta = params_vector(p);
  const double h = 1e-6;
  for (int j = 0; j < theta.size(); j += 7) {
    NetworkParams q = p;
    Vector t = theta;
    t(j) += h;
    set_params_vector(q, t);
    const double lp = scalar_loss(q, x, upstream, NetMode::Eval);
    t(j) = theta(j) - h;
    set_params_vector(q, t);
    const double lm = scalar_loss(q, x, upstream, NetMode::Eval);
    const double fd = (lp - lm) / (2.0 * h);
    CHECK(std::abs(fd - g(j)) <=
          1e-4 * std::max({std::abs(fd), std::abs(g(j)), 1e-8}));
  }
}

TEST_CASE("forward is pure: running stats move only on commit") {
  Rng rng(19);
  const auto specs = zoo()[3];
  NetworkParams p = init_params(specs, 4);
  const Vector rm0 = p.layers[2].running_mean;
  const Vector rv0 = p.layers[2].running_var;
  ForwardCache cache;
  network_forward(p, random_matrix(16, 5, rng), NetMode::Train, &cache);
  CHECK((p.layers[2].running_mean - rm0).cwiseAbs().maxCoeff() == 0.0);
  CHECK((p.layers[2].running_var - rv0).cwiseAbs().maxCoeff() == 0.0);

  commit_running_stats(p, cache);
  const Vector want_mean =
      0.9 * rm0 + 0.1 * cache.mean[2].transpose();
  const Vector want_var =
      0.9 * rv0 + 0.1 * (cache.var[2].transpose() * 16.0 / 15.0);
  CHECK((p.layers[2].running_mean - want_mean).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((p.layers[2].running_var - want_var).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("one-hot fast path is bit-identical to the dense forward") {
  Rng rng(31);
  const std::vector<LayerSpec> specs = {
      LayerSpec::dense(12, 9), LayerSpec::layer_norm(9), LayerSpec::relu(9),
      LayerSpec::dense(9, 3)};
  NetworkParams p = init_params(specs, 6);
  std::vector<int> active;
  Matrix dense = Matrix::Zero(7, 12);
  for (int r = 0; r < 7; ++r) {
    const int j = rng.uniform_int(12);
    active.push_back(j);
    dense(r, j) = 1.0;
  }
  ForwardCache ca, cb;
  const Matrix ya = network_forward(p, dense, NetMode::Eval, &ca);
  const Matrix yb = network_forward_onehot(p, active, NetMode::Eval, &cb);
  CHECK((ya - yb).cwiseAbs().maxCoeff() == 0.0);

  const Matrix upstream = random_matrix(7, 3, rng);
  const Vector ga = gradient_vector(p, network_backward(p, ca, upstream));
  const Vector gb = gradient_vector(p, network_backward(p, cb, upstream));
  CHECK((ga - gb).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("hvp matches the closed form on a bilinear network") {
  // Two stacked linear maps: loss(t) = sum(u .* (W2 + tV2)(W1 + tV1) x) is a
  // quadratic in t, so d/dt grad has the exact value 2 * d/dt^2 terms.
  Rng rng(55);
  const std::vector<LayerSpec> specs = {LayerSpec::dense(3, 4, false),
                                        LayerSpec::dense(4, 2, false)};
  NetworkParams p = init_params(specs, 8);
  const Matrix x = random_matrix(5, 3, rng);
  const Matrix u = random_matrix(5, 2, rng);
  Vector v(p.param_count());
  for (int i = 0; i < v.size(); ++i) v(i) = rng.normal();

  const Vector got = hvp(p, x, u, v);
  const NetworkGrads vb = unflatten_gradient(p, v);
  // d/dt grad_W2 = (u x^T V1^T)-shaped term; d/dt grad_W1 = V2^T u x pattern.
  NetworkGrads want = zero_grads(p);
  want[1].W = u.transpose() * (x * vb[0].W.transpose());
  want[0].W = (u * vb[1].W).transpose() * x;
  const Vector wv = gradient_vector(p, want);
  CHECK((got - wv).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("hvp agrees with finite differences away from relu kinks") {
  Rng rng(91);
  const std::vector<std::vector<LayerSpec>> nets = {
      {LayerSpec::dense(4, 16, false), LayerSpec::layer_norm(16),
       LayerSpec::relu(16), LayerSpec::dense(16, 1, false)},
      {LayerSpec::dense(3, 8), LayerSpec::layer_norm(8, NormVariant::Affine),
       LayerSpec::relu(8), LayerSpec::dense(8, 2)},
  };
  for (const auto& specs : nets) {
    NetworkParams p = init_params(specs, rng.next_u64());
    const Matrix x = random_matrix(3, specs.front().in_dim, rng);
    const Matrix u = random_matrix(3, specs.back().out_dim, rng);
    for (int trial = 0; trial < 8; ++trial) {
      Vector v(p.param_count());
      for (int i = 0; i < v.size(); ++i) v(i) = rng.normal();
      v.normalize();
      bool flipped = false;
      const Vector fd = hvp_fd(p, x, u, v, 1e-5, &flipped);
      if (flipped) continue;
      const Vector an = hvp(p, x, u, v);
      const double rel =
          (fd - an).norm() / std::max(1e-8, std::max(fd.norm(), an.norm()));
      CHECK(rel < 1e-3);
    }
  }
}

TEST_CASE("train and eval forward agree when no batchnorm is present") {
  Rng rng(101);
  const auto specs = zoo()[1];
  NetworkParams p = init_params(specs, 12);
  const Matrix x = random_matrix(9, 4, rng);
  const Matrix a = network_forward(p, x, NetMode::Train);
  const Matrix b = network_forward(p, x, NetMode::Eval);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}
