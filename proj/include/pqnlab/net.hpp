#pragma once
#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace pqnlab {

// Batch convention throughout: rows are samples, columns are features.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class LayerKind { Dense, Relu, LayerNorm, BatchNorm };

// Scaled: parameter-free normalisation; layernorm additionally divides by
// sqrt(width) so every output row lands inside the unit ball.
// Affine: learnable per-feature scale and shift, no sqrt(width) factor.
enum class NormVariant { Scaled, Affine };

enum class NetMode { Train, Eval };

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  int in_dim = 0;
  int out_dim = 0;  // equals in_dim for everything except dense
  NormVariant variant = NormVariant::Scaled;
  double eps = 1e-5;
  bool bias = true;       // dense only
  double momentum = 0.1;  // batchnorm running-stat EMA weight on the new batch

  static LayerSpec dense(int in, int out, bool with_bias = true);
  static LayerSpec relu(int dim);
  static LayerSpec layer_norm(int dim, NormVariant v = NormVariant::Scaled,
                              double eps = 1e-5);
  static LayerSpec batch_norm(int dim, NormVariant v = NormVariant::Affine,
                              double eps = 1e-5, double momentum = 0.1);
};

// Trainable blocks for one layer. The same struct is reused as the gradient
// container; gradients leave the running-stat buffers empty.
struct LayerParams {
  Matrix W;             // dense: out_dim x in_dim
  Vector b;             // dense bias
  Vector scale, shift;  // affine norm parameters
  Vector running_mean, running_var;  // batchnorm buffers, not trainable
};

using NetworkGrads = std::vector<LayerParams>;

struct NetworkParams {
  std::vector<LayerSpec> specs;
  std::vector<LayerParams> layers;

  int param_count() const;
  int final_dense() const;  // index of the last dense layer, -1 if none
  int in_dim() const { return specs.empty() ? 0 : specs.front().in_dim; }
  int out_dim() const { return specs.empty() ? 0 : specs.back().out_dim; }
};

struct ForwardCache {
  NetMode mode = NetMode::Eval;
  std::vector<Matrix> inputs;  // input seen by each layer
  std::vector<Matrix> normed;  // norm layers: z = (x - mean) / sigma
  std::vector<Matrix> sigma;   // layernorm: Nx1 per-row; batchnorm: 1xk per-col
  std::vector<Matrix> mean;    // batchnorm train: 1xk batch mean
  std::vector<Matrix> var;     // batchnorm train: 1xk biased batch variance
  std::vector<int> onehot;     // active column per row when the layer-0
                               // one-hot fast path was used (inputs[0] empty)
  Matrix output;
};

void validate_specs(const std::vector<LayerSpec>& specs);

// Dense weights iid N(0, weight_std^2), biases zero, affine scale 1 / shift 0,
// running stats (0, 1). The two-argument overload uses 1/sqrt(fan_in) per
// dense layer. Deterministic in (specs, seed).
NetworkParams init_params(const std::vector<LayerSpec>& specs,
                          std::uint64_t seed, double weight_std);
NetworkParams init_params(const std::vector<LayerSpec>& specs,
                          std::uint64_t seed);

// Standalone norm ops (row-wise / column-wise respectively).
Matrix layernorm_forward(const Matrix& x, NormVariant variant, double eps,
                         const Vector* scale = nullptr,
                         const Vector* shift = nullptr);
// Train mode normalises by batch statistics and folds them into the running
// stats via EMA (biased variance in the normaliser, unbiased in the buffer).
// Eval mode reads the buffers and never writes.
Matrix batchnorm_forward(const Matrix& x, NetMode mode, double eps,
                         double momentum, Vector& running_mean,
                         Vector& running_var, const Vector* scale = nullptr,
                         const Vector* shift = nullptr);

// Pure forward pass: never touches running stats. Training loops apply
// commit_running_stats afterwards so gradient checks can re-run the forward
// without perturbing state.
Matrix network_forward(const NetworkParams& params, const Matrix& states,
                       NetMode mode, ForwardCache* cache = nullptr);

// Fast path for one-hot inputs given as active-column indices (one per row).
// Bit-identical to network_forward on the equivalent dense matrix. An index
// of -1 stands for the all-zero input row.
Matrix network_forward_onehot(const NetworkParams& params,
                              const std::vector<int>& active, NetMode mode,
                              ForwardCache* cache = nullptr);

void commit_running_stats(NetworkParams& params, const ForwardCache& cache);

// Exact gradients of sum(upstream .* output) with respect to every trainable
// block, computed from a cached forward pass.
NetworkGrads network_backward(const NetworkParams& params,
                              const ForwardCache& cache,
                              const Matrix& upstream);

NetworkGrads zero_grads(const NetworkParams& params);

// Canonical flat order: layers ascending; dense W row-major then b; affine
// scale then shift. Running stats are buffers and excluded.
Vector gradient_vector(const NetworkParams& params, const NetworkGrads& grads);
NetworkGrads unflatten_gradient(const NetworkParams& params,
                                const Vector& flat);
Vector params_vector(const NetworkParams& params);
void set_params_vector(NetworkParams& params, const Vector& flat);

// Directional derivative of the flat gradient: d/dt grad(theta + t v) at t=0
// for the loss sum(upstream .* output), holding upstream constant. Analytic
// forward-over-reverse; supports dense / relu / layernorm layers.
Vector hvp(const NetworkParams& params, const Matrix& x,
           const Matrix& upstream, const Vector& v);

// Central finite difference of the same quantity. Sets *gates_changed when
// the relu active set differs between the two evaluations, which makes the
// estimate unreliable near a kink.
Vector hvp_fd(const NetworkParams& params, const Matrix& x,
              const Matrix& upstream, const Vector& v, double h,
              bool* gates_changed = nullptr);

}  // namespace pqnlab
