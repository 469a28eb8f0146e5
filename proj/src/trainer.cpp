#include "debias/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace debias {

using json = nlohmann::json;

std::string to_string(Method m) {
  switch (m) {
    case Method::vanilla: return "vanilla";
    case Method::reweight: return "reweight";
    case Method::hybrid: return "hybrid";
  }
  throw std::logic_error("bad Method");
}

std::string to_string(SelectionMode m) {
  switch (m) {
    case SelectionMode::top_ratio: return "top_ratio";
    case SelectionMode::mean_threshold: return "mean_threshold";
    case SelectionMode::fixed_threshold: return "fixed_threshold";
  }
  throw std::logic_error("bad SelectionMode");
}

std::string to_string(Reduction r) {
  return r == Reduction::mean ? "mean" : "sum";
}

Method method_from_string(const std::string& s) {
  if (s == "vanilla") return Method::vanilla;
  if (s == "reweight") return Method::reweight;
  if (s == "hybrid") return Method::hybrid;
  throw std::invalid_argument("unknown method: " + s);
}

SelectionMode selection_mode_from_string(const std::string& s) {
  if (s == "top_ratio") return SelectionMode::top_ratio;
  if (s == "mean_threshold") return SelectionMode::mean_threshold;
  if (s == "fixed_threshold") return SelectionMode::fixed_threshold;
  throw std::invalid_argument("unknown selection mode: " + s);
}

Reduction reduction_from_string(const std::string& s) {
  if (s == "mean") return Reduction::mean;
  if (s == "sum") return Reduction::sum;
  throw std::invalid_argument("unknown reduction: " + s);
}

void DebiasConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("DebiasConfig.alpha must be in [0,1]");
  if (!(beta >= 0.0))
    throw std::invalid_argument("DebiasConfig.beta must be >= 0");
  if (selection_mode == SelectionMode::top_ratio && !(t_bc >= 0.0 && t_bc < 1.0))
    throw std::invalid_argument("DebiasConfig.t_bc must be in [0,1) for top_ratio");
  if (selection_mode == SelectionMode::fixed_threshold &&
      !(threshold >= 0.0 && threshold <= 1.0))
    throw std::invalid_argument("DebiasConfig.threshold must be in [0,1]");
  if (epochs == 0) throw std::invalid_argument("DebiasConfig.epochs must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("DebiasConfig.batch_size must be >= 1");
  if (!(adam.lr > 0.0)) throw std::invalid_argument("DebiasConfig.adam.lr must be > 0");
  loss.validate();
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
select_conflicting(const ReweightVector& rw, const DebiasConfig& cfg) {
  const std::size_t n = rw.size();
  if (n == 0) throw std::invalid_argument("select_conflicting: empty batch");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (rw.r[a] != rw.r[b]) return rw.r[a] > rw.r[b];
    return a < b;
  });

  std::size_t k = 0;
  switch (cfg.selection_mode) {
    case SelectionMode::top_ratio: {
      const double raw = static_cast<double>(n) * (1.0 - cfg.t_bc);
      k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(raw)));
      k = std::min(k, n);
      break;
    }
    case SelectionMode::mean_threshold: {
      const double mean = std::accumulate(rw.r.begin(), rw.r.end(), 0.0) /
                          static_cast<double>(n);
      while (k < n && rw.r[order[k]] > mean) ++k;
      break;
    }
    case SelectionMode::fixed_threshold: {
      while (k < n && rw.r[order[k]] > cfg.threshold) ++k;
      break;
    }
  }

  std::vector<std::size_t> bc(order.begin(), order.begin() + k);
  std::vector<std::size_t> ba(order.begin() + k, order.end());
  std::sort(ba.begin(), ba.end());
  return {std::move(bc), std::move(ba)};
}

HybridBatch synthesize_hybrids(const Matrix& batch, std::span<const std::uint32_t> labels,
                               std::span<const std::size_t> bc_indices,
                               std::span<const std::size_t> ba_indices,
                               double alpha, Rng& rng) {
  HybridBatch out;
  if (bc_indices.empty()) return out;

  std::uint32_t max_label = 0;
  for (std::uint32_t y : labels) max_label = std::max(max_label, y);
  std::vector<std::vector<std::size_t>> ba_by_class(max_label + 1);
  for (std::size_t i : ba_indices) ba_by_class[labels[i]].push_back(i);

  const std::size_t d = batch.cols;
  std::vector<float> rows;
  for (std::size_t bc : bc_indices) {
    const auto& partners = ba_by_class[labels[bc]];
    if (partners.empty()) continue;  // no same-class partner; caller counts the skip
    const std::size_t ba = partners[rng.uniform_index(partners.size())];
    const float* xbc = batch.row(bc);
    const float* xba = batch.row(ba);
    for (std::size_t j = 0; j < d; ++j) {
      const double v = alpha * static_cast<double>(xbc[j]) +
                       (1.0 - alpha) * static_cast<double>(xba[j]);
      rows.push_back(static_cast<float>(v));
    }
    out.labels.push_back(labels[bc]);
    out.sources.emplace_back(bc, ba);
  }

  out.features = Matrix(out.labels.size(), d);
  std::copy(rows.begin(), rows.end(), out.features.data.begin());
  return out;
}

// Shared by the public op and the training step, which already has the
// probability matrices at hand.
static void fill_hybrid_reweights(const DMatrix& probs_b, const DMatrix& probs_d,
                                  HybridBatch& hybrids, const LossConfig& cfg) {
  const std::size_t n = hybrids.size();
  hybrids.lb.resize(n);
  hybrids.ld.resize(n);
  hybrids.reweights.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    hybrids.lb[i] = cross_entropy(probs_b.row_span(i), hybrids.labels[i], cfg.prob_floor);
    hybrids.ld[i] = cross_entropy(probs_d.row_span(i), hybrids.labels[i], cfg.prob_floor);
    hybrids.reweights[i] = reweighting_factor(hybrids.lb[i], hybrids.ld[i], cfg.rw_eps);
  }
}

void hybrid_reweights(const Mlp& model_b, const Mlp& model_d, HybridBatch& hybrids,
                      const LossConfig& cfg) {
  if (hybrids.size() == 0) return;
  const DMatrix probs_b = softmax_rows(forward(model_b, hybrids.features));
  const DMatrix probs_d = softmax_rows(forward(model_d, hybrids.features));
  fill_hybrid_reweights(probs_b, probs_d, hybrids, cfg);
}

static double reduce(double sum, std::size_t n, Reduction reduction) {
  if (reduction == Reduction::sum) return sum;
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

double biased_loss(const DMatrix& probs_b, std::span<const std::uint32_t> labels,
                   double q, Reduction reduction) {
  if (probs_b.rows != labels.size())
    throw std::invalid_argument("biased_loss: row/label count mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    sum += gce(probs_b.row_span(i), labels[i], q);
  return reduce(sum, labels.size(), reduction);
}

double debiased_loss(std::span<const double> ce, std::span<const double> r,
                     std::span<const double> ce_h, std::span<const double> r_h,
                     double beta, Reduction reduction) {
  if (ce.size() != r.size() || ce_h.size() != r_h.size())
    throw std::invalid_argument("debiased_loss: length mismatch");
  double batch_sum = 0.0;
  for (std::size_t i = 0; i < ce.size(); ++i) batch_sum += ce[i] * r[i];
  double hybrid_sum = 0.0;
  for (std::size_t i = 0; i < ce_h.size(); ++i) hybrid_sum += ce_h[i] * r_h[i];
  return reduce(batch_sum, ce.size(), reduction) +
         beta * reduce(hybrid_sum, ce_h.size(), reduction);
}

// dCE/dlogits rows scaled per sample: w_i * (p_i - onehot(y_i)).
static DMatrix weighted_ce_dlogits(const DMatrix& probs,
                                   std::span<const std::uint32_t> labels,
                                   std::span<const double> weights) {
  DMatrix d(probs.rows, probs.cols);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    const double w = weights[i];
    const double* p = probs.row(i);
    double* dr = d.row(i);
    for (std::size_t j = 0; j < probs.cols; ++j) dr[j] = w * p[j];
    dr[labels[i]] -= w;
  }
  return d;
}

static std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

static void accumulate_group_stats(StepStats& stats, const ReweightVector& rw,
                                   std::span<const std::uint8_t> aligned_flags) {
  for (std::size_t i = 0; i < rw.size(); ++i) {
    if (aligned_flags[i]) {
      stats.n_aligned += 1;
      stats.sum_lb_aligned += rw.lb[i];
      stats.sum_ld_aligned += rw.ld[i];
      stats.sum_r_aligned += rw.r[i];
    } else {
      stats.n_conflicting += 1;
      stats.sum_lb_conflicting += rw.lb[i];
      stats.sum_ld_conflicting += rw.ld[i];
      stats.sum_r_conflicting += rw.r[i];
    }
  }
}

StepStats train_step(DualModel& dual, const Matrix& batch,
                     std::span<const std::uint32_t> labels,
                     std::span<const std::uint8_t> aligned_flags,
                     const DebiasConfig& cfg, bool with_hybrids, Rng& partner_rng) {
  const std::size_t n = batch.rows;
  if (n == 0) throw std::invalid_argument("train_step: empty batch");
  if (labels.size() != n || aligned_flags.size() != n)
    throw std::invalid_argument("train_step: label/flag count mismatch");

  // (1) Forward both models; detached per-sample CE and reweighting factors.
  ForwardCache cache_b, cache_d;
  const DMatrix probs_b = softmax_rows(forward(dual.model_b, batch, cache_b));
  const DMatrix probs_d = softmax_rows(forward(dual.model_d, batch, cache_d));
  const ReweightVector rw = compute_reweights(probs_b, probs_d, labels, cfg.loss);

  StepStats stats;
  stats.batch_size = n;
  accumulate_group_stats(stats, rw, aligned_flags);
  for (std::size_t i = 0; i < n; ++i)
    if (argmax_row(probs_d.row_span(i)) == labels[i]) stats.correct += 1;

  // (2)+(3) Likely bias-conflicting selection and hybrid synthesis.
  HybridBatch hybrids;
  if (with_hybrids) {
    auto [bc, ba] = select_conflicting(rw, cfg);
    stats.selected_bc = bc.size();
    for (std::size_t i : bc)
      if (aligned_flags[i]) stats.fp_selected += 1;
    hybrids = synthesize_hybrids(batch, labels, bc, ba, cfg.alpha, partner_rng);
    stats.hybrids = hybrids.size();
    stats.skipped = bc.size() - hybrids.size();
  }

  // (4) Reweighting factors for the hybrids (detached); the M_D forward is
  // cached because the same pass feeds the gradient below.
  ForwardCache cache_h;
  DMatrix probs_dh;
  if (hybrids.size() > 0) {
    const DMatrix probs_bh = softmax_rows(forward(dual.model_b, hybrids.features));
    probs_dh = softmax_rows(forward(dual.model_d, hybrids.features, cache_h));
    fill_hybrid_reweights(probs_bh, probs_dh, hybrids, cfg.loss);
  }

  // (5) Composite reweighted loss; one Adam step on M_D.
  const double batch_scale =
      cfg.loss_reduction == Reduction::mean ? 1.0 / static_cast<double>(n) : 1.0;
  std::vector<double> weights(n);
  for (std::size_t i = 0; i < n; ++i) weights[i] = rw.r[i] * batch_scale;
  Gradients grads_d = backward(dual.model_d, cache_d,
                               weighted_ce_dlogits(probs_d, labels, weights));
  if (hybrids.size() > 0 && cfg.beta != 0.0) {
    const double hybrid_scale =
        cfg.beta * (cfg.loss_reduction == Reduction::mean
                        ? 1.0 / static_cast<double>(hybrids.size())
                        : 1.0);
    std::vector<double> hw(hybrids.size());
    for (std::size_t i = 0; i < hybrids.size(); ++i)
      hw[i] = hybrids.reweights[i] * hybrid_scale;
    grads_d.add(backward(dual.model_d, cache_h,
                         weighted_ce_dlogits(probs_dh, hybrids.labels, hw)));
  }
  stats.loss_d = debiased_loss(rw.ld, rw.r, hybrids.ld, hybrids.reweights, cfg.beta,
                               cfg.loss_reduction);
  adam_step(dual.model_d, grads_d, dual.opt_d);

  // (6) GCE loss on the regular batch only; one Adam step on M_B.
  DMatrix dlogits_b(n, probs_b.cols);
  for (std::size_t i = 0; i < n; ++i) {
    const double p_label =
        std::clamp(probs_b.at(i, labels[i]), cfg.loss.prob_floor, 1.0);
    const double w = std::pow(p_label, cfg.loss.q) * batch_scale;
    const double* p = probs_b.row(i);
    double* dr = dlogits_b.row(i);
    for (std::size_t j = 0; j < probs_b.cols; ++j) dr[j] = w * p[j];
    dr[labels[i]] -= w;
  }
  stats.loss_b = biased_loss(probs_b, labels, cfg.loss.q, cfg.loss_reduction);
  adam_step(dual.model_b, backward(dual.model_b, cache_b, dlogits_b), dual.opt_b);

  return stats;
}

// Plain CE step for the vanilla baseline.
static StepStats vanilla_step(Mlp& model, AdamState& opt, const Matrix& batch,
                              std::span<const std::uint32_t> labels,
                              std::span<const std::uint8_t> aligned_flags,
                              const DebiasConfig& cfg) {
  const std::size_t n = batch.rows;
  ForwardCache cache;
  const DMatrix probs = softmax_rows(forward(model, batch, cache));

  StepStats stats;
  stats.batch_size = n;
  double loss_sum = 0.0;
  const double scale =
      cfg.loss_reduction == Reduction::mean ? 1.0 / static_cast<double>(n) : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ce = cross_entropy(probs.row_span(i), labels[i], cfg.loss.prob_floor);
    loss_sum += ce;
    if (aligned_flags[i]) {
      stats.n_aligned += 1;
      stats.sum_ld_aligned += ce;
    } else {
      stats.n_conflicting += 1;
      stats.sum_ld_conflicting += ce;
    }
    if (argmax_row(probs.row_span(i)) == labels[i]) stats.correct += 1;
  }
  stats.loss_d = reduce(loss_sum, n, cfg.loss_reduction);

  std::vector<double> weights(n, scale);
  adam_step(model, backward(model, cache, weighted_ce_dlogits(probs, labels, weights)),
            opt);
  return stats;
}

static double safe_ratio(double num, double den) {
  return den > 0.0 ? num / den : std::numeric_limits<double>::quiet_NaN();
}

TrainResult train(Method method, const LabeledDataset& train_ds, const DebiasConfig& cfg) {
  cfg.validate();
  const std::size_t n = train_ds.size();
  if (n == 0) throw std::invalid_argument("train: empty dataset");
  const std::size_t num_classes = train_ds.spec.num_classes;
  for (std::uint32_t y : train_ds.labels)
    if (y >= num_classes) throw std::invalid_argument("train: label out of range");

  std::vector<std::size_t> dims;
  dims.push_back(train_ds.features.cols);
  dims.insert(dims.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
  dims.push_back(num_classes);

  DualModel dual;
  dual.model_d = Mlp::init(dims, hash_combine(cfg.seed, stream_tag("model_d")));
  dual.opt_d = AdamState::init(dual.model_d, cfg.adam);
  const bool dual_model = method != Method::vanilla;
  if (dual_model) {
    dual.model_b = Mlp::init(dims, hash_combine(cfg.seed, stream_tag("model_b")));
    dual.opt_b = AdamState::init(dual.model_b, cfg.adam);
  }

  const std::size_t d = train_ds.features.cols;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.history.reserve(cfg.epochs);

  Matrix batch;
  std::vector<std::uint32_t> batch_labels;
  std::vector<std::uint8_t> batch_flags;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = Rng::derive(cfg.seed, stream_tag("shuffle"), epoch);
    shuffle_rng.shuffle(order);
    Rng partner_rng = Rng::derive(cfg.seed, stream_tag("partner"), epoch);

    EpochStats es;
    es.epoch = epoch;
    double loss_b_sum = 0.0, loss_d_sum = 0.0;
    double sum_lb_al = 0.0, sum_lb_cf = 0.0, sum_ld_al = 0.0, sum_ld_cf = 0.0;
    double sum_r_al = 0.0, sum_r_cf = 0.0;
    std::size_t n_al = 0, n_cf = 0, fp = 0, correct = 0;

    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t size = std::min(cfg.batch_size, n - start);
      batch = Matrix(size, d);
      batch_labels.resize(size);
      batch_flags.resize(size);
      for (std::size_t i = 0; i < size; ++i) {
        const std::size_t src = order[start + i];
        std::copy(train_ds.features.row(src), train_ds.features.row(src) + d,
                  batch.row(i));
        batch_labels[i] = train_ds.labels[src];
        batch_flags[i] = train_ds.aligned_flags[src];
      }

      StepStats s;
      if (method == Method::vanilla) {
        s = vanilla_step(dual.model_d, dual.opt_d, batch, batch_labels, batch_flags, cfg);
      } else {
        s = train_step(dual, batch, batch_labels, batch_flags, cfg,
                       method == Method::hybrid, partner_rng);
      }

      const double wt =
          cfg.loss_reduction == Reduction::mean ? static_cast<double>(s.batch_size) : 1.0;
      loss_b_sum += s.loss_b * wt;
      loss_d_sum += s.loss_d * wt;
      sum_lb_al += s.sum_lb_aligned;
      sum_lb_cf += s.sum_lb_conflicting;
      sum_ld_al += s.sum_ld_aligned;
      sum_ld_cf += s.sum_ld_conflicting;
      sum_r_al += s.sum_r_aligned;
      sum_r_cf += s.sum_r_conflicting;
      n_al += s.n_aligned;
      n_cf += s.n_conflicting;
      fp += s.fp_selected;
      correct += s.correct;
      es.selected_bc += s.selected_bc;
      es.hybrids += s.hybrids;
      es.skipped += s.skipped;
    }

    const double denom =
        cfg.loss_reduction == Reduction::mean ? static_cast<double>(n) : 1.0;
    es.loss_d = loss_d_sum / denom;
    es.loss_b = dual_model ? loss_b_sum / denom
                           : std::numeric_limits<double>::quiet_NaN();
    es.loss_d_aligned = safe_ratio(sum_ld_al, static_cast<double>(n_al));
    es.loss_d_conflicting = safe_ratio(sum_ld_cf, static_cast<double>(n_cf));
    if (dual_model) {
      es.loss_b_aligned = safe_ratio(sum_lb_al, static_cast<double>(n_al));
      es.loss_b_conflicting = safe_ratio(sum_lb_cf, static_cast<double>(n_cf));
      es.mean_r_aligned = safe_ratio(sum_r_al, static_cast<double>(n_al));
      es.mean_r_conflicting = safe_ratio(sum_r_cf, static_cast<double>(n_cf));
    }
    if (method == Method::hybrid)
      es.fpr = n_al > 0 ? static_cast<double>(fp) / static_cast<double>(n_al) : 0.0;
    es.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    result.history.push_back(es);
  }

  result.model_d = std::move(dual.model_d);
  if (dual_model) result.model_b = std::move(dual.model_b);
  return result;
}

static json nan_to_null(double v) {
  if (std::isnan(v)) return nullptr;
  return v;
}

std::string history_to_jsonl(std::span<const EpochStats> history) {
  std::string out;
  for (const EpochStats& es : history) {
    json j;
    j["epoch"] = es.epoch;
    j["loss_b"] = nan_to_null(es.loss_b);
    j["loss_d"] = nan_to_null(es.loss_d);
    j["loss_b_aligned"] = nan_to_null(es.loss_b_aligned);
    j["loss_b_conflicting"] = nan_to_null(es.loss_b_conflicting);
    j["loss_d_aligned"] = nan_to_null(es.loss_d_aligned);
    j["loss_d_conflicting"] = nan_to_null(es.loss_d_conflicting);
    j["mean_r_aligned"] = nan_to_null(es.mean_r_aligned);
    j["mean_r_conflicting"] = nan_to_null(es.mean_r_conflicting);
    j["fpr"] = nan_to_null(es.fpr);
    j["train_acc"] = nan_to_null(es.train_acc);
    j["selected_bc"] = es.selected_bc;
    j["hybrids"] = es.hybrids;
    j["skipped"] = es.skipped;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace debias
