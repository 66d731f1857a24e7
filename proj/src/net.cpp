#include "pqnlab/net.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "pqnlab/rng.hpp"

namespace pqnlab {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

bool is_norm(LayerKind k) {
  return k == LayerKind::LayerNorm || k == LayerKind::BatchNorm;
}

bool has_affine(const LayerSpec& s) {
  return is_norm(s.kind) && s.variant == NormVariant::Affine;
}

}  // namespace

LayerSpec LayerSpec::dense(int in, int out, bool with_bias) {
  LayerSpec s;
  s.kind = LayerKind::Dense;
  s.in_dim = in;
  s.out_dim = out;
  s.bias = with_bias;
  return s;
}

LayerSpec LayerSpec::relu(int dim) {
  LayerSpec s;
  s.kind = LayerKind::Relu;
  s.in_dim = dim;
  s.out_dim = dim;
  return s;
}

LayerSpec LayerSpec::layer_norm(int dim, NormVariant v, double eps) {
  LayerSpec s;
  s.kind = LayerKind::LayerNorm;
  s.in_dim = dim;
  s.out_dim = dim;
  s.variant = v;
  s.eps = eps;
  return s;
}

LayerSpec LayerSpec::batch_norm(int dim, NormVariant v, double eps,
                                double momentum) {
  LayerSpec s;
  s.kind = LayerKind::BatchNorm;
  s.in_dim = dim;
  s.out_dim = dim;
  s.variant = v;
  s.eps = eps;
  s.momentum = momentum;
  return s;
}

void validate_specs(const std::vector<LayerSpec>& specs) {
  require(!specs.empty(), "network needs at least one layer");
  for (size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    require(s.in_dim > 0 && s.out_dim > 0, "layer dims must be positive");
    if (i > 0)
      require(s.in_dim == specs[i - 1].out_dim,
              "layer " + std::to_string(i) + " input dim mismatch");
    if (s.kind != LayerKind::Dense)
      require(s.in_dim == s.out_dim, "non-dense layers preserve width");
    if (is_norm(s.kind)) {
      require(s.in_dim >= 2, "normalisation needs width >= 2");
      require(s.eps > 0.0, "norm eps must be positive");
    }
    if (s.kind == LayerKind::BatchNorm)
      require(s.momentum > 0.0 && s.momentum <= 1.0,
              "batchnorm momentum must lie in (0, 1]");
  }
}

int NetworkParams::param_count() const {
  int n = 0;
  for (const LayerSpec& s : specs) {
    if (s.kind == LayerKind::Dense) {
      n += s.in_dim * s.out_dim;
      if (s.bias) n += s.out_dim;
    } else if (has_affine(s)) {
      n += 2 * s.out_dim;
    }
  }
  return n;
}

int NetworkParams::final_dense() const {
  for (int i = static_cast<int>(specs.size()) - 1; i >= 0; --i)
    if (specs[i].kind == LayerKind::Dense) return i;
  return -1;
}

static NetworkParams init_impl(const std::vector<LayerSpec>& specs,
                               std::uint64_t seed, double weight_std,
                               bool per_fan_in) {
  validate_specs(specs);
  NetworkParams p;
  p.specs = specs;
  p.layers.resize(specs.size());
  for (size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    LayerParams& l = p.layers[i];
    if (s.kind == LayerKind::Dense) {
      Rng rng = Rng::stream(seed, i);
      const double sd = per_fan_in ? 1.0 / std::sqrt(double(s.in_dim))
                                   : weight_std;
      l.W.resize(s.out_dim, s.in_dim);
      for (int r = 0; r < s.out_dim; ++r)
        for (int c = 0; c < s.in_dim; ++c) l.W(r, c) = rng.normal(0.0, sd);
      if (s.bias) l.b = Vector::Zero(s.out_dim);
    } else if (is_norm(s.kind)) {
      if (s.variant == NormVariant::Affine) {
        l.scale = Vector::Ones(s.out_dim);
        l.shift = Vector::Zero(s.out_dim);
      }
      if (s.kind == LayerKind::BatchNorm) {
        l.running_mean = Vector::Zero(s.out_dim);
        l.running_var = Vector::Ones(s.out_dim);
      }
    }
  }
  return p;
}

NetworkParams init_params(const std::vector<LayerSpec>& specs,
                          std::uint64_t seed, double weight_std) {
  require(weight_std > 0.0, "weight std must be positive");
  return init_impl(specs, seed, weight_std, false);
}

NetworkParams init_params(const std::vector<LayerSpec>& specs,
                          std::uint64_t seed) {
  return init_impl(specs, seed, 0.0, true);
}

Matrix layernorm_forward(const Matrix& x, NormVariant variant, double eps,
                         const Vector* scale, const Vector* shift) {
  const int k = static_cast<int>(x.cols());
  require(k >= 2, "layernorm needs width >= 2");
  const Vector mu = x.rowwise().mean();
  Matrix dev = x.colwise() - mu;
  const Eigen::ArrayXd sigma =
      (dev.array().square().rowwise().mean() + eps).sqrt();
  Matrix z = (dev.array().colwise() / sigma).matrix();
  if (variant == NormVariant::Scaled) return z / std::sqrt(double(k));
  require(scale != nullptr && shift != nullptr,
          "affine layernorm needs scale and shift");
  return ((z.array().rowwise() * scale->transpose().array()).rowwise() +
          shift->transpose().array())
      .matrix();
}

Matrix batchnorm_forward(const Matrix& x, NetMode mode, double eps,
                         double momentum, Vector& running_mean,
                         Vector& running_var, const Vector* scale,
                         const Vector* shift) {
  const int n = static_cast<int>(x.rows());
  const int k = static_cast<int>(x.cols());
  require(k >= 2, "batchnorm needs width >= 2");
  require(running_mean.size() == k && running_var.size() == k,
          "running stat size mismatch");
  RowVector mu, sig;
  if (mode == NetMode::Train) {
    require(n >= 2, "batchnorm train mode needs batch size >= 2");
    mu = x.colwise().mean();
    const RowVector var =
        (x.rowwise() - mu).array().square().colwise().mean();
    sig = (var.array() + eps).sqrt();
    running_mean = (1.0 - momentum) * running_mean + momentum * mu.transpose();
    running_var = (1.0 - momentum) * running_var +
                  momentum * (var.transpose() * double(n) / double(n - 1));
  } else {
    mu = running_mean.transpose();
    sig = (running_var.transpose().array() + eps).sqrt();
  }
  Matrix z =
      ((x.rowwise() - mu).array().rowwise() / sig.array()).matrix();
  if (scale == nullptr) return z;
  require(shift != nullptr, "affine batchnorm needs scale and shift");
  return ((z.array().rowwise() * scale->transpose().array()).rowwise() +
          shift->transpose().array())
      .matrix();
}

namespace {

struct LayerEval {
  Matrix y;       // output
  Matrix z;       // norm layers
  Matrix sig;     // layernorm: Nx1; batchnorm: 1xk
  Matrix mu;      // batchnorm train
  Matrix var;     // batchnorm train, biased
};

LayerEval eval_layer(const LayerSpec& s, const LayerParams& l, const Matrix& x,
                     NetMode mode) {
  LayerEval out;
  switch (s.kind) {
    case LayerKind::Dense: {
      out.y = x * l.W.transpose();
      if (s.bias) out.y.rowwise() += l.b.transpose();
      break;
    }
    case LayerKind::Relu: {
      out.y = x.cwiseMax(0.0);
      break;
    }
    case LayerKind::LayerNorm: {
      const Vector mu = x.rowwise().mean();
      Matrix dev = x.colwise() - mu;
      const Eigen::ArrayXd sigma =
          (dev.array().square().rowwise().mean() + s.eps).sqrt();
      out.z = (dev.array().colwise() / sigma).matrix();
      out.sig = sigma.matrix();
      if (s.variant == NormVariant::Scaled) {
        out.y = out.z / std::sqrt(double(s.out_dim));
      } else {
        out.y = ((out.z.array().rowwise() * l.scale.transpose().array())
                     .rowwise() +
                 l.shift.transpose().array())
                    .matrix();
      }
      break;
    }
    case LayerKind::BatchNorm: {
      RowVector mu, sig;
      if (mode == NetMode::Train) {
        require(x.rows() >= 2, "batchnorm train mode needs batch size >= 2");
        mu = x.colwise().mean();
        const RowVector var =
            (x.rowwise() - mu).array().square().colwise().mean();
        sig = (var.array() + s.eps).sqrt();
        out.mu = mu;
        out.var = var;
      } else {
        mu = l.running_mean.transpose();
        sig = (l.running_var.transpose().array() + s.eps).sqrt();
      }
      out.z = ((x.rowwise() - mu).array().rowwise() / sig.array()).matrix();
      out.sig = sig;
      if (s.variant == NormVariant::Scaled) {
        out.y = out.z;
      } else {
        out.y = ((out.z.array().rowwise() * l.scale.transpose().array())
                     .rowwise() +
                 l.shift.transpose().array())
                    .matrix();
      }
      break;
    }
  }
  return out;
}

Matrix forward_impl(const NetworkParams& params, const Matrix& first_input,
                    const std::vector<int>* onehot, NetMode mode,
                    ForwardCache* cache) {
  validate_specs(params.specs);
  const size_t L = params.specs.size();
  if (cache) {
    cache->mode = mode;
    cache->inputs.assign(L, Matrix());
    cache->normed.assign(L, Matrix());
    cache->sigma.assign(L, Matrix());
    cache->mean.assign(L, Matrix());
    cache->var.assign(L, Matrix());
    cache->onehot.clear();
  }
  Matrix x;
  size_t start = 0;
  if (onehot) {
    const LayerSpec& s0 = params.specs[0];
    require(s0.kind == LayerKind::Dense,
            "one-hot fast path needs a dense first layer");
    const LayerParams& l0 = params.layers[0];
    const int n = static_cast<int>(onehot->size());
    x.resize(n, s0.out_dim);
    for (int r = 0; r < n; ++r) {
      const int j = (*onehot)[r];
      require(j >= -1 && j < s0.in_dim, "one-hot index out of range");
      if (j < 0)  // -1 stands for the all-zero row
        x.row(r).setZero();
      else
        x.row(r) = l0.W.col(j).transpose();
    }
    if (s0.bias) x.rowwise() += l0.b.transpose();
    if (cache) cache->onehot = *onehot;
    start = 1;
  } else {
    require(first_input.cols() == params.in_dim(),
            "input width does not match the first layer");
    x = first_input;
  }
  for (size_t i = start; i < L; ++i) {
    if (cache) cache->inputs[i] = x;
    LayerEval ev = eval_layer(params.specs[i], params.layers[i], x, mode);
    if (cache) {
      cache->normed[i] = std::move(ev.z);
      cache->sigma[i] = std::move(ev.sig);
      cache->mean[i] = std::move(ev.mu);
      cache->var[i] = std::move(ev.var);
    }
    x = std::move(ev.y);
  }
  if (cache) cache->output = x;
  return x;
}

}  // namespace

Matrix network_forward(const NetworkParams& params, const Matrix& states,
                       NetMode mode, ForwardCache* cache) {
  return forward_impl(params, states, nullptr, mode, cache);
}

Matrix network_forward_onehot(const NetworkParams& params,
                              const std::vector<int>& active, NetMode mode,
                              ForwardCache* cache) {
  return forward_impl(params, Matrix(), &active, mode, cache);
}

void commit_running_stats(NetworkParams& params, const ForwardCache& cache) {
  if (cache.mode != NetMode::Train) return;
  for (size_t i = 0; i < params.specs.size(); ++i) {
    const LayerSpec& s = params.specs[i];
    if (s.kind != LayerKind::BatchNorm || cache.mean[i].size() == 0) continue;
    LayerParams& l = params.layers[i];
    const double n = double(cache.inputs[i].rows());
    const Vector mu = cache.mean[i].transpose();
    const Vector var_unbiased = cache.var[i].transpose() * (n / (n - 1.0));
    l.running_mean = (1.0 - s.momentum) * l.running_mean + s.momentum * mu;
    l.running_var =
        (1.0 - s.momentum) * l.running_var + s.momentum * var_unbiased;
  }
}

NetworkGrads zero_grads(const NetworkParams& params) {
  NetworkGrads g(params.specs.size());
  for (size_t i = 0; i < params.specs.size(); ++i) {
    const LayerSpec& s = params.specs[i];
    if (s.kind == LayerKind::Dense) {
      g[i].W = Matrix::Zero(s.out_dim, s.in_dim);
      if (s.bias) g[i].b = Vector::Zero(s.out_dim);
    } else if (has_affine(s)) {
      g[i].scale = Vector::Zero(s.out_dim);
      g[i].shift = Vector::Zero(s.out_dim);
    }
  }
  return g;
}

namespace {

// Shared core of the norm backward: given Ghat (upstream already folded with
// the variant's scale), z and sigma, produce the input gradient
//   (Ghat - mean(Ghat) - z * mean(Ghat .* z)) / sigma
// with means over rows (layernorm) or columns (batchnorm train).
Matrix norm_input_grad_rows(const Matrix& ghat, const Matrix& z,
                            const Matrix& sigma) {
  const Eigen::ArrayXd m1 = ghat.rowwise().mean().array();
  const Eigen::ArrayXd m2 = (ghat.array() * z.array()).rowwise().mean();
  return (((ghat.array().colwise() - m1) - z.array().colwise() * m2)
              .colwise() /
          sigma.col(0).array())
      .matrix();
}

Matrix norm_input_grad_cols(const Matrix& ghat, const Matrix& z,
                            const Matrix& sigma) {
  const Eigen::RowVectorXd m1 = ghat.colwise().mean();
  const Eigen::RowVectorXd m2 = (ghat.array() * z.array()).colwise().mean();
  return (((ghat.rowwise() - m1).array() -
           z.array().rowwise() * m2.array())
              .rowwise() /
          sigma.row(0).array())
      .matrix();
}

}  // namespace

NetworkGrads network_backward(const NetworkParams& params,
                              const ForwardCache& cache,
                              const Matrix& upstream) {
  const size_t L = params.specs.size();
  require(cache.inputs.size() == L, "cache does not match the network");
  require(upstream.rows() == cache.output.rows() &&
              upstream.cols() == cache.output.cols(),
          "upstream shape does not match the output");
  NetworkGrads grads = zero_grads(params);
  Matrix g = upstream;
  for (int i = static_cast<int>(L) - 1; i >= 0; --i) {
    const LayerSpec& s = params.specs[i];
    const LayerParams& l = params.layers[i];
    const bool onehot_first = (i == 0 && !cache.onehot.empty());
    const Matrix& x = cache.inputs[i];
    switch (s.kind) {
      case LayerKind::Dense: {
        if (onehot_first) {
          for (int r = 0; r < g.rows(); ++r) {
            const int j = cache.onehot[size_t(r)];
            if (j >= 0) grads[i].W.col(j) += g.row(r).transpose();
          }
        } else {
          grads[i].W = g.transpose() * x;
        }
        if (s.bias) grads[i].b = g.colwise().sum().transpose();
        if (i > 0) g = g * l.W;
        break;
      }
      case LayerKind::Relu: {
        g = (g.array() * (x.array() > 0.0).cast<double>()).matrix();
        break;
      }
      case LayerKind::LayerNorm: {
        const Matrix& z = cache.normed[i];
        Matrix ghat;
        if (s.variant == NormVariant::Scaled) {
          ghat = g / std::sqrt(double(s.out_dim));
        } else {
          grads[i].scale = (g.array() * z.array()).colwise().sum().transpose();
          grads[i].shift = g.colwise().sum().transpose();
          ghat = (g.array().rowwise() * l.scale.transpose().array()).matrix();
        }
        g = norm_input_grad_rows(ghat, z, cache.sigma[i]);
        break;
      }
      case LayerKind::BatchNorm: {
        const Matrix& z = cache.normed[i];
        Matrix ghat;
        if (s.variant == NormVariant::Scaled) {
          ghat = g;
        } else {
          grads[i].scale = (g.array() * z.array()).colwise().sum().transpose();
          grads[i].shift = g.colwise().sum().transpose();
          ghat = (g.array().rowwise() * l.scale.transpose().array()).matrix();
        }
        if (cache.mode == NetMode::Train) {
          g = norm_input_grad_cols(ghat, z, cache.sigma[i]);
        } else {
          // Running stats are constants: the map is a per-column rescale.
          g = (ghat.array().rowwise() / cache.sigma[i].row(0).array())
                  .matrix();
        }
        break;
      }
    }
  }
  return grads;
}

namespace {

template <typename Fn>
void walk_blocks(const std::vector<LayerSpec>& specs, Fn&& fn) {
  for (size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    if (s.kind == LayerKind::Dense) {
      fn(i, 'W');
      if (s.bias) fn(i, 'b');
    } else if (has_affine(s)) {
      fn(i, 's');
      fn(i, 't');
    }
  }
}

}  // namespace

Vector gradient_vector(const NetworkParams& params, const NetworkGrads& grads) {
  Vector flat(params.param_count());
  int pos = 0;
  walk_blocks(params.specs, [&](size_t i, char block) {
    const LayerParams& g = grads[i];
    switch (block) {
      case 'W':
        for (int r = 0; r < g.W.rows(); ++r)
          for (int c = 0; c < g.W.cols(); ++c) flat(pos++) = g.W(r, c);
        break;
      case 'b':
        flat.segment(pos, g.b.size()) = g.b;
        pos += static_cast<int>(g.b.size());
        break;
      case 's':
        flat.segment(pos, g.scale.size()) = g.scale;
        pos += static_cast<int>(g.scale.size());
        break;
      case 't':
        flat.segment(pos, g.shift.size()) = g.shift;
        pos += static_cast<int>(g.shift.size());
        break;
    }
  });
  return flat;
}

NetworkGrads unflatten_gradient(const NetworkParams& params,
                                const Vector& flat) {
  require(flat.size() == params.param_count(),
          "flat vector size does not match the parameter count");
  NetworkGrads g = zero_grads(params);
  int pos = 0;
  walk_blocks(params.specs, [&](size_t i, char block) {
    switch (block) {
      case 'W':
        for (int r = 0; r < g[i].W.rows(); ++r)
          for (int c = 0; c < g[i].W.cols(); ++c) g[i].W(r, c) = flat(pos++);
        break;
      case 'b':
        g[i].b = flat.segment(pos, g[i].b.size());
        pos += static_cast<int>(g[i].b.size());
        break;
      case 's':
        g[i].scale = flat.segment(pos, g[i].scale.size());
        pos += static_cast<int>(g[i].scale.size());
        break;
      case 't':
        g[i].shift = flat.segment(pos, g[i].shift.size());
        pos += static_cast<int>(g[i].shift.size());
        break;
    }
  });
  return g;
}

Vector params_vector(const NetworkParams& params) {
  return gradient_vector(params, params.layers);
}

void set_params_vector(NetworkParams& params, const Vector& flat) {
  NetworkGrads g = unflatten_gradient(params, flat);
  for (size_t i = 0; i < params.specs.size(); ++i) {
    const LayerSpec& s = params.specs[i];
    if (s.kind == LayerKind::Dense) {
      params.layers[i].W = g[i].W;
      if (s.bias) params.layers[i].b = g[i].b;
    } else if (has_affine(s)) {
      params.layers[i].scale = g[i].scale;
      params.layers[i].shift = g[i].shift;
    }
  }
}

Vector hvp(const NetworkParams& params, const Matrix& x,
           const Matrix& upstream, const Vector& v) {
  const size_t L = params.specs.size();
  for (const LayerSpec& s : params.specs)
    require(s.kind != LayerKind::BatchNorm,
            "analytic hvp does not support batchnorm layers");
  const NetworkGrads vb = unflatten_gradient(params, v);

  // Forward sweep carrying (activation, directional perturbation).
  std::vector<Matrix> xs(L), dxs(L), zs(L), dzs(L);
  std::vector<Eigen::ArrayXd> sig(L), dsig(L);
  Matrix a = x;
  Matrix da = Matrix::Zero(x.rows(), x.cols());
  for (size_t i = 0; i < L; ++i) {
    const LayerSpec& s = params.specs[i];
    const LayerParams& l = params.layers[i];
    xs[i] = a;
    dxs[i] = da;
    switch (s.kind) {
      case LayerKind::Dense: {
        Matrix y = a * l.W.transpose();
        Matrix dy = da * l.W.transpose() + a * vb[i].W.transpose();
        if (s.bias) {
          y.rowwise() += l.b.transpose();
          dy.rowwise() += vb[i].b.transpose();
        }
        a = std::move(y);
        da = std::move(dy);
        break;
      }
      case LayerKind::Relu: {
        const Eigen::ArrayXXd gate = (a.array() > 0.0).cast<double>();
        a = (a.array() * gate).matrix();
        da = (da.array() * gate).matrix();
        break;
      }
      case LayerKind::LayerNorm: {
        const double k = double(s.out_dim);
        const Vector mu = a.rowwise().mean();
        const Vector dmu = da.rowwise().mean();
        Matrix dev = a.colwise() - mu;
        Matrix ddev = da.colwise() - dmu;
        sig[i] = (dev.array().square().rowwise().mean() + s.eps).sqrt();
        dsig[i] =
            (dev.array() * ddev.array()).rowwise().mean() / sig[i];
        zs[i] = (dev.array().colwise() / sig[i]).matrix();
        dzs[i] = ((ddev.array().colwise() / sig[i]) -
                  zs[i].array().colwise() * (dsig[i] / sig[i]))
                     .matrix();
        if (s.variant == NormVariant::Scaled) {
          const double rk = 1.0 / std::sqrt(k);
          a = zs[i] * rk;
          da = dzs[i] * rk;
        } else {
          const auto sc = l.scale.transpose().array();
          a = ((zs[i].array().rowwise() * sc).rowwise() +
               l.shift.transpose().array())
                  .matrix();
          Matrix dy =
              (dzs[i].array().rowwise() * sc +
               zs[i].array().rowwise() * vb[i].scale.transpose().array())
                  .matrix();
          dy.rowwise() += vb[i].shift.transpose();
          da = std::move(dy);
        }
        break;
      }
      case LayerKind::BatchNorm:
        break;  // rejected above
    }
  }

  // Reverse sweep carrying (grad, directional perturbation of the grad).
  NetworkGrads dgrads = zero_grads(params);
  Matrix g = upstream;
  Matrix dg = Matrix::Zero(upstream.rows(), upstream.cols());
  for (int i = static_cast<int>(L) - 1; i >= 0; --i) {
    const LayerSpec& s = params.specs[i];
    const LayerParams& l = params.layers[i];
    switch (s.kind) {
      case LayerKind::Dense: {
        dgrads[i].W = dg.transpose() * xs[i] + g.transpose() * dxs[i];
        if (s.bias) dgrads[i].b = dg.colwise().sum().transpose();
        if (i > 0) {
          Matrix gin = g * l.W;
          dg = dg * l.W + g * vb[i].W;
          g = std::move(gin);
        }
        break;
      }
      case LayerKind::Relu: {
        const Eigen::ArrayXXd gate = (xs[i].array() > 0.0).cast<double>();
        g = (g.array() * gate).matrix();
        dg = (dg.array() * gate).matrix();
        break;
      }
      case LayerKind::LayerNorm: {
        const Matrix& z = zs[i];
        const Matrix& dz = dzs[i];
        Matrix ghat, dghat;
        if (s.variant == NormVariant::Scaled) {
          const double rk = 1.0 / std::sqrt(double(s.out_dim));
          ghat = g * rk;
          dghat = dg * rk;
        } else {
          dgrads[i].scale = ((dg.array() * z.array()) + (g.array() * dz.array()))
                                .colwise()
                                .sum()
                                .transpose();
          dgrads[i].shift = dg.colwise().sum().transpose();
          const auto sc = l.scale.transpose().array();
          ghat = (g.array().rowwise() * sc).matrix();
          dghat = (dg.array().rowwise() * sc +
                   g.array().rowwise() * vb[i].scale.transpose().array())
                      .matrix();
        }
        const Eigen::ArrayXd m1 = ghat.rowwise().mean().array();
        const Eigen::ArrayXd m2 = (ghat.array() * z.array()).rowwise().mean();
        const Eigen::ArrayXd dm1 = dghat.rowwise().mean().array();
        const Eigen::ArrayXd dm2 =
            (dghat.array() * z.array() + ghat.array() * dz.array())
                .rowwise()
                .mean();
        Matrix core =
            ((ghat.array().colwise() - m1) - z.array().colwise() * m2)
                .matrix();
        Matrix dcore = ((dghat.array().colwise() - dm1) -
                        dz.array().colwise() * m2 -
                        z.array().colwise() * dm2)
                           .matrix();
        Matrix gin = (core.array().colwise() / sig[i]).matrix();
        dg = ((dcore.array() - gin.array().colwise() * dsig[i]).colwise() /
              sig[i])
                 .matrix();
        g = std::move(gin);
        break;
      }
      case LayerKind::BatchNorm:
        break;
    }
  }
  return gradient_vector(params, dgrads);
}

Vector hvp_fd(const NetworkParams& params, const Matrix& x,
              const Matrix& upstream, const Vector& v, double h,
              bool* gates_changed) {
  const Vector theta = params_vector(params);
  NetworkParams p = params;
  ForwardCache cp, cm;
  set_params_vector(p, theta + h * v);
  network_forward(p, x, NetMode::Eval, &cp);
  const Vector gp = gradient_vector(p, network_backward(p, cp, upstream));
  set_params_vector(p, theta - h * v);
  network_forward(p, x, NetMode::Eval, &cm);
  const Vector gm = gradient_vector(p, network_backward(p, cm, upstream));
  if (gates_changed) {
    *gates_changed = false;
    for (size_t i = 0; i < params.specs.size(); ++i) {
      if (params.specs[i].kind != LayerKind::Relu) continue;
      if (((cp.inputs[i].array() > 0.0) != (cm.inputs[i].array() > 0.0))
              .any()) {
        *gates_changed = true;
        break;
      }
    }
  }
  return (gp - gm) / (2.0 * h);
}

}  // namespace pqnlab
