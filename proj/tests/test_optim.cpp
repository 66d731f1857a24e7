#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "pqnlab/net.hpp"
#include "pqnlab/optim.hpp"
#include "pqnlab/rng.hpp"

using namespace pqnlab;

TEST_CASE("clip_global_norm rescales only above the threshold") {
  Vector g(2);
  g << 3.0, 4.0;
  const double norm = clip_global_norm(g, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(g(0) == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(g(1) == doctest::Approx(0.8).epsilon(1e-14));

  Vector h(2);
  h << 0.3, 0.4;
  clip_global_norm(h, 1.0);
  CHECK(h(0) == 0.3);
  CHECK(h(1) == 0.4);

  Vector k(2);
  k << 30.0, 40.0;
  clip_global_norm(k, 0.0);  // disabled
  CHECK(k(0) == 30.0);
}

TEST_CASE("lr_at decays linearly to zero") {
  CHECK(lr_at(2.5e-4, 0, 1000, true) == doctest::Approx(2.5e-4));
  CHECK(lr_at(2.5e-4, 500, 1000, true) == doctest::Approx(1.25e-4));
  CHECK(lr_at(2.5e-4, 1000, 1000, true) == 0.0);
  CHECK(lr_at(2.5e-4, 2000, 1000, true) == 0.0);
  CHECK(lr_at(2.5e-4, 900, 1000, false) == 2.5e-4);
}

TEST_CASE("adam matches a scalar hand computation") {
  const std::vector<double> g = {0.5, -0.3, 0.8, 0.1, 0.4, -0.2, 0.6, 0.05};
  const std::vector<double> want = {
      0.900000002,       0.880850198941775, 0.820496563682866,
      0.765464063479192, 0.701944271075473, 0.657716742082127,
      0.599447666454171, 0.546127991649577};
  OptimState st = make_optim_state(1);
  Vector theta = Vector::Ones(1);
  for (size_t i = 0; i < g.size(); ++i) {
    Vector grad = Vector::Constant(1, g[i]);
    adam_step(st, theta, grad, 0.1);
    CHECK(theta(0) == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("radam matches a scalar hand computation") {
  // With beta2 = 0.999 the rectification threshold rho > 4 is first crossed
  // at t = 5, so the trace covers both the momentum and rectified regimes.
  const std::vector<double> g = {0.5, -0.3, 0.8, 0.1, 0.4, -0.2, 0.6, 0.05};
  const std::vector<double> want = {
      0.95,              0.942105263157895, 0.907603418139444,
      0.880226273620689, 0.879126650533368, 0.877984646518284,
      0.87607698606546,  0.874011473732272};
  OptimState st = make_optim_state(1);
  Vector theta = Vector::Ones(1);
  for (size_t i = 0; i < g.size(); ++i) {
    Vector grad = Vector::Constant(1, g[i]);
    radam_step(st, theta, grad, 0.1);
    CHECK(theta(0) == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("doubling the lr doubles the step at equal state") {
  Rng rng(4);
  Vector g(6), p0 = Vector::Zero(6);
  for (int i = 0; i < 6; ++i) g(i) = rng.normal();

  Vector a = p0, b = p0;
  sgd_step(a, g, 0.01);
  sgd_step(b, g, 0.02);
  CHECK((b - 2.0 * a).cwiseAbs().maxCoeff() < 1e-15);

  for (auto step : {adam_step, radam_step}) {
    OptimState sa = make_optim_state(6), sb = make_optim_state(6);
    Vector pa = p0, pb = p0;
    for (int t = 0; t < 7; ++t) {
      // Same gradient stream, so moments stay identical; deltas must stay
      // proportional and collinear.
      Vector da = pa, db = pb;
      step(sa, pa, g, 0.01);
      step(sb, pb, g, 0.02);
      da = pa - da;
      db = pb - db;
      CHECK((db - 2.0 * da).norm() <= 1e-12 * da.norm());
    }
  }
}

TEST_CASE("optimiser steps keep parameters finite") {
  Rng rng(9);
  OptimState st = make_optim_state(32);
  Vector p = Vector::Zero(32);
  for (int t = 0; t < 200; ++t) {
    Vector g(32);
    for (int i = 0; i < 32; ++i) g(i) = rng.normal(0.0, 100.0);
    radam_step(st, p, g, 1e-2);
    CHECK(p.allFinite());
  }
}

TEST_CASE("l2 term touches only the final dense weight block") {
  const std::vector<LayerSpec> specs = {
      LayerSpec::dense(3, 4), LayerSpec::layer_norm(4, NormVariant::Affine),
      LayerSpec::relu(4), LayerSpec::dense(4, 2)};
  NetworkParams p = init_params(specs, 3);
  const double coeff = 0.245025;  // (0.99 / 2)^2
  const Vector term = l2_final_layer_term(p, coeff);
  const NetworkGrads blocks = unflatten_gradient(p, term);
  CHECK((blocks[3].W - coeff * p.layers[3].W).cwiseAbs().maxCoeff() == 0.0);
  CHECK(blocks[3].b.cwiseAbs().maxCoeff() == 0.0);
  CHECK(blocks[0].W.cwiseAbs().maxCoeff() == 0.0);
  CHECK(blocks[1].scale.cwiseAbs().maxCoeff() == 0.0);

  // Finite differences of (coeff/2) ||W_final||^2 agree.
  const Vector theta = params_vector(p);
  const int off = int(theta.size()) - 2 * 4 - 2;  // first final-W entry
  NetworkParams q = p;
  Vector t2 = theta;
  const double h = 1e-6;
  t2(off) += h;
  set_params_vector(q, t2);
  double lp = 0.5 * coeff * q.layers[3].W.squaredNorm();
  t2(off) = theta(off) - h;
  set_params_vector(q, t2);
  double lm = 0.5 * coeff * q.layers[3].W.squaredNorm();
  CHECK((lp - lm) / (2 * h) == doctest::Approx(term(off)).epsilon(1e-6));
}
