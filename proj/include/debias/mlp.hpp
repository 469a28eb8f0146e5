#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "debias/matrix.hpp"

namespace debias {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Dense feed-forward classifier. Hidden layers are rectified, the last layer
// is linear (logits). Weights are stored row-major as (in x out) per layer.
struct Mlp {
  std::vector<std::size_t> layer_dims;        // input, hidden..., num_classes
  std::vector<std::vector<double>> weights;   // [l]: layer_dims[l] * layer_dims[l+1]
  std::vector<std::vector<double>> biases;    // [l]: layer_dims[l+1]

  // Uniform(-1,1)/sqrt(fan_in) init, seeded.
  static Mlp init(std::vector<std::size_t> dims, std::uint64_t seed);

  std::size_t num_layers() const { return weights.size(); }
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t output_dim() const { return layer_dims.back(); }
  std::size_t param_count() const;
  bool finite() const;
};

// Post-activation values per layer; acts[0] is the input batch,
// acts[num_layers] the logits. Enough to run backward.
struct ForwardCache {
  std::vector<DMatrix> acts;
};

DMatrix forward(const Mlp& model, const Matrix& batch);
DMatrix forward(const Mlp& model, const Matrix& batch, ForwardCache& cache);

struct Gradients {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;

  static Gradients zeros_like(const Mlp& model);
  void scale(double s);
  void add(const Gradients& other);
  bool finite() const;
};

// Reverse-mode pass. `dlogits` is dLoss/dLogits for the batch the cache was
// produced from; returns gradients shaped like the parameters.
Gradients backward(const Mlp& model, const ForwardCache& cache, const DMatrix& dlogits);

struct AdamState {
  AdamConfig cfg;
  std::vector<std::vector<double>> m_w, v_w;
  std::vector<std::vector<double>> m_b, v_b;
  std::uint64_t step = 0;

  static AdamState init(const Mlp& model, AdamConfig cfg = {});
};

// One bias-corrected Adam update. Throws on shape mismatch or non-finite
// gradients.
void adam_step(Mlp& model, const Gradients& grads, AdamState& state);

// Shift-stable softmax over each row of `logits`. Throws on non-finite input.
DMatrix softmax_rows(const DMatrix& logits);
std::vector<double> softmax_row(std::span<const double> logits);

// Scalar loss of a batch plus its gradient w.r.t. the logits.
struct LossEval {
  double loss = 0.0;
  DMatrix dlogits;
};
using LogitLoss = std::function<LossEval(const DMatrix& logits)>;

// Compares analytic gradients against central finite differences (step h)
// on up to `samples_per_tensor` randomly chosen entries of every parameter
// tensor. Returns max |analytic-numeric| / max(|analytic|,|numeric|,1e-8).
double grad_check(const Mlp& model, const LogitLoss& loss, const Matrix& batch,
                  std::size_t samples_per_tensor = 20, double h = 1e-4,
                  std::uint64_t seed = 0);

// Checkpoint format "DBMW": layer dims + float32 parameter blobs.
void save_model(const Mlp& model, const std::string& path);
Mlp load_model(const std::string& path);

}  // namespace debias
