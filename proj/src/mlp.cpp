#include "debias/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "debias/rng.hpp"
#include "debias/tensor_io.hpp"

namespace debias {

Mlp Mlp::init(std::vector<std::size_t> dims, std::uint64_t seed) {
  if (dims.size() < 2)
    throw std::invalid_argument("Mlp needs at least input and output dims");
  for (std::size_t d : dims)
    if (d == 0) throw std::invalid_argument("Mlp layer dims must be positive");

  Mlp model;
  model.layer_dims = std::move(dims);
  const std::size_t layers = model.layer_dims.size() - 1;
  model.weights.resize(layers);
  model.biases.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = model.layer_dims[l];
    const std::size_t out = model.layer_dims[l + 1];
    Rng rng = Rng::derive(seed, stream_tag("init"), l);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    model.weights[l].resize(in * out);
    for (double& w : model.weights[l]) w = (2.0 * rng.uniform01() - 1.0) * scale;
    model.biases[l].assign(out, 0.0);
  }
  return model;
}

std::size_t Mlp::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < num_layers(); ++l)
    n += weights[l].size() + biases[l].size();
  return n;
}

bool Mlp::finite() const {
  for (std::size_t l = 0; l < num_layers(); ++l) {
    for (double w : weights[l])
      if (!std::isfinite(w)) return false;
    for (double b : biases[l])
      if (!std::isfinite(b)) return false;
  }
  return true;
}

// y = x W + b for one layer; x is n x in, W in x out.
static void affine(const DMatrix& x, const std::vector<double>& w,
                   const std::vector<double>& b, std::size_t in, std::size_t out,
                   DMatrix& y) {
  y = DMatrix(x.rows, out);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xr = x.row(i);
    double* yr = y.row(i);
    std::copy(b.begin(), b.end(), yr);
    for (std::size_t k = 0; k < in; ++k) {
      const double xe = xr[k];
      if (xe == 0.0) continue;
      const double* wr = w.data() + k * out;
      for (std::size_t j = 0; j < out; ++j) yr[j] += xe * wr[j];
    }
  }
}

static void relu_inplace(DMatrix& m) {
  for (double& v : m.data) v = v > 0.0 ? v : 0.0;
}

DMatrix forward(const Mlp& model, const Matrix& batch, ForwardCache& cache) {
  if (batch.cols != model.input_dim())
    throw std::invalid_argument("forward: batch has " + std::to_string(batch.cols) +
                                " columns, model expects " +
                                std::to_string(model.input_dim()));
  const std::size_t layers = model.num_layers();
  cache.acts.assign(layers + 1, DMatrix{});

  DMatrix& input = cache.acts[0];
  input = DMatrix(batch.rows, batch.cols);
  for (std::size_t i = 0; i < batch.data.size(); ++i)
    input.data[i] = static_cast<double>(batch.data[i]);

  for (std::size_t l = 0; l < layers; ++l) {
    affine(cache.acts[l], model.weights[l], model.biases[l], model.layer_dims[l],
           model.layer_dims[l + 1], cache.acts[l + 1]);
    if (l + 1 < layers) relu_inplace(cache.acts[l + 1]);
  }
  return cache.acts[layers];
}

DMatrix forward(const Mlp& model, const Matrix& batch) {
  ForwardCache cache;
  return forward(model, batch, cache);
}

Gradients Gradients::zeros_like(const Mlp& model) {
  Gradients g;
  g.weights.resize(model.num_layers());
  g.biases.resize(model.num_layers());
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    g.weights[l].assign(model.weights[l].size(), 0.0);
    g.biases[l].assign(model.biases[l].size(), 0.0);
  }
  return g;
}

void Gradients::scale(double s) {
  for (auto& t : weights)
    for (double& v : t) v *= s;
  for (auto& t : biases)
    for (double& v : t) v *= s;
}

void Gradients::add(const Gradients& other) {
  if (weights.size() != other.weights.size())
    throw std::invalid_argument("Gradients::add: layer count mismatch");
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].size() != other.weights[l].size() ||
        biases[l].size() != other.biases[l].size())
      throw std::invalid_argument("Gradients::add: shape mismatch");
    for (std::size_t i = 0; i < weights[l].size(); ++i)
      weights[l][i] += other.weights[l][i];
    for (std::size_t i = 0; i < biases[l].size(); ++i)
      biases[l][i] += other.biases[l][i];
  }
}

bool Gradients::finite() const {
  for (const auto& t : weights)
    for (double v : t)
      if (!std::isfinite(v)) return false;
  for (const auto& t : biases)
    for (double v : t)
      if (!std::isfinite(v)) return false;
  return true;
}

Gradients backward(const Mlp& model, const ForwardCache& cache, const DMatrix& dlogits) {
  const std::size_t layers = model.num_layers();
  if (cache.acts.size() != layers + 1)
    throw std::invalid_argument("backward: cache does not match model");
  if (dlogits.rows != cache.acts[0].rows || dlogits.cols != model.output_dim())
    throw std::invalid_argument("backward: upstream gradient shape mismatch");

  Gradients grads = Gradients::zeros_like(model);
  DMatrix delta = dlogits;  // dLoss/dZ of the current layer

  for (std::size_t l = layers; l-- > 0;) {
    const std::size_t in = model.layer_dims[l];
    const std::size_t out = model.layer_dims[l + 1];
    const DMatrix& a_prev = cache.acts[l];

    std::vector<double>& dw = grads.weights[l];
    std::vector<double>& db = grads.biases[l];
    for (std::size_t i = 0; i < delta.rows; ++i) {
      const double* ar = a_prev.row(i);
      const double* dr = delta.row(i);
      for (std::size_t j = 0; j < out; ++j) db[j] += dr[j];
      for (std::size_t k = 0; k < in; ++k) {
        const double ae = ar[k];
        if (ae == 0.0) continue;
        double* dwr = dw.data() + k * out;
        for (std::size_t j = 0; j < out; ++j) dwr[j] += ae * dr[j];
      }
    }

    if (l == 0) break;
    // delta_prev = (delta . W^T) masked by the rectifier of layer l-1.
    DMatrix prev(delta.rows, in);
    const std::vector<double>& w = model.weights[l];
    for (std::size_t i = 0; i < delta.rows; ++i) {
      const double* dr = delta.row(i);
      const double* ar = a_prev.row(i);
      double* pr = prev.row(i);
      for (std::size_t k = 0; k < in; ++k) {
        if (ar[k] <= 0.0) { pr[k] = 0.0; continue; }
        const double* wr = w.data() + k * out;
        double acc = 0.0;
        for (std::size_t j = 0; j < out; ++j) acc += dr[j] * wr[j];
        pr[k] = acc;
      }
    }
    delta = std::move(prev);
  }
  return grads;
}

AdamState AdamState::init(const Mlp& model, AdamConfig cfg) {
  AdamState s;
  s.cfg = cfg;
  const std::size_t layers = model.num_layers();
  s.m_w.resize(layers);
  s.v_w.resize(layers);
  s.m_b.resize(layers);
  s.v_b.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    s.m_w[l].assign(model.weights[l].size(), 0.0);
    s.v_w[l].assign(model.weights[l].size(), 0.0);
    s.m_b[l].assign(model.biases[l].size(), 0.0);
    s.v_b[l].assign(model.biases[l].size(), 0.0);
  }
  return s;
}

static void adam_update(std::vector<double>& param, const std::vector<double>& grad,
                        std::vector<double>& m, std::vector<double>& v,
                        const AdamConfig& cfg, double bc1, double bc2) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    param[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

void adam_step(Mlp& model, const Gradients& grads, AdamState& state) {
  const std::size_t layers = model.num_layers();
  if (grads.weights.size() != layers || state.m_w.size() != layers)
    throw std::invalid_argument("adam_step: layer count mismatch");
  for (std::size_t l = 0; l < layers; ++l)
    if (grads.weights[l].size() != model.weights[l].size() ||
        grads.biases[l].size() != model.biases[l].size())
      throw std::invalid_argument("adam_step: gradient shape mismatch");
  if (!grads.finite())
    throw std::invalid_argument("adam_step: non-finite gradient");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.cfg.beta2, static_cast<double>(state.step));
  for (std::size_t l = 0; l < layers; ++l) {
    adam_update(model.weights[l], grads.weights[l], state.m_w[l], state.v_w[l],
                state.cfg, bc1, bc2);
    adam_update(model.biases[l], grads.biases[l], state.m_b[l], state.v_b[l],
                state.cfg, bc1, bc2);
  }
}

std::vector<double> softmax_row(std::span<const double> logits) {
  double max = -std::numeric_limits<double>::infinity();
  for (double z : logits) {
    if (!std::isfinite(z))
      throw std::invalid_argument("softmax: non-finite logit");
    max = std::max(max, z);
  }
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out[j] = std::exp(logits[j] - max);
    sum += out[j];
  }
  for (double& p : out) p /= sum;
  return out;
}

DMatrix softmax_rows(const DMatrix& logits) {
  DMatrix probs(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    std::vector<double> row = softmax_row(logits.row_span(i));
    std::copy(row.begin(), row.end(), probs.row(i));
  }
  return probs;
}

double grad_check(const Mlp& model, const LogitLoss& loss, const Matrix& batch,
                  std::size_t samples_per_tensor, double h, std::uint64_t seed) {
  ForwardCache cache;
  const DMatrix logits = forward(model, batch, cache);
  const LossEval eval = loss(logits);
  const Gradients analytic = backward(model, cache, eval.dlogits);

  Mlp probe = model;
  auto eval_loss = [&]() { return loss(forward(probe, batch)).loss; };

  double max_err = 0.0;
  Rng rng = Rng::derive(seed, stream_tag("grad_check"));
  auto check_tensor = [&](std::vector<double>& param, const std::vector<double>& grad) {
    const std::size_t n = param.size();
    const std::size_t count = std::min(samples_per_tensor, n);
    for (std::size_t s = 0; s < count; ++s) {
      const std::size_t idx = rng.uniform_index(n);
      const double saved = param[idx];
      param[idx] = saved + h;
      const double up = eval_loss();
      param[idx] = saved - h;
      const double down = eval_loss();
      param[idx] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = grad[idx];
      const double err = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_err = std::max(max_err, err);
    }
  };
  for (std::size_t l = 0; l < probe.num_layers(); ++l) {
    check_tensor(probe.weights[l], analytic.weights[l]);
    check_tensor(probe.biases[l], analytic.biases[l]);
  }
  return max_err;
}

void save_model(const Mlp& model, const std::string& path) {
  ByteWriter w(path);
  w.bytes({kModelMagic, 4});
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(model.layer_dims.size()));
  for (std::size_t d : model.layer_dims) w.u64(d);
  std::vector<float> blob;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    blob.assign(model.weights[l].begin(), model.weights[l].end());
    w.f32_array(blob);
    blob.assign(model.biases[l].begin(), model.biases[l].end());
    w.f32_array(blob);
  }
  w.close();
}

Mlp load_model(const std::string& path) {
  ByteReader r(path);
  r.expect_magic(kModelMagic);
  const std::uint64_t version_at = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw FormatError("unsupported version " + std::to_string(version), version_at);
  const std::uint32_t n_dims = r.u32();
  if (n_dims < 2) throw FormatError("model needs at least 2 dims", r.offset());
  Mlp model;
  model.layer_dims.resize(n_dims);
  for (std::size_t& d : model.layer_dims) d = static_cast<std::size_t>(r.u64());
  const std::size_t layers = n_dims - 1;
  model.weights.resize(layers);
  model.biases.resize(layers);
  std::vector<float> blob;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = model.layer_dims[l];
    const std::size_t out = model.layer_dims[l + 1];
    blob.resize(in * out);
    r.f32_array(blob);
    model.weights[l].assign(blob.begin(), blob.end());
    blob.resize(out);
    r.f32_array(blob);
    model.biases[l].assign(blob.begin(), blob.end());
  }
  if (!r.at_eof()) throw FormatError("trailing bytes after payload", r.offset());
  return model;
}

}  // namespace debias
