#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "debias/dataset.hpp"
#include "debias/losses.hpp"
#include "debias/matrix.hpp"
#include "debias/mlp.hpp"
#include "debias/rng.hpp"

namespace debias {

enum class Method { vanilla, reweight, hybrid };
enum class SelectionMode { top_ratio, mean_threshold, fixed_threshold };
enum class Reduction { mean, sum };

std::string to_string(Method m);
std::string to_string(SelectionMode m);
std::string to_string(Reduction r);
Method method_from_string(const std::string& s);
SelectionMode selection_mode_from_string(const std::string& s);
Reduction reduction_from_string(const std::string& s);

struct DebiasConfig {
  double alpha = 0.9;   // hybrid mixing coefficient, [0,1]
  double beta = 1.0;    // hybrid-loss weight, >= 0
  double t_bc = 0.95;   // filtering ratio, [0,1) in top_ratio mode
  SelectionMode selection_mode = SelectionMode::top_ratio;
  double threshold = 0.5;  // tau, fixed_threshold mode only
  Reduction loss_reduction = Reduction::mean;
  LossConfig loss;      // GCE exponent q and numeric guards
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::vector<std::size_t> hidden_dims = {100, 100, 100};

  void validate() const;
};

// Hybrid samples x_h = alpha*x_bc + (1-alpha)*x_ba with the shared label.
// Features are computed in double and stored as float32; each value lies
// inside the elementwise [min,max] envelope of its parents.
struct HybridBatch {
  Matrix features;
  std::vector<std::uint32_t> labels;
  std::vector<std::pair<std::size_t, std::size_t>> sources;  // (bc, ba) batch indices
  std::vector<double> lb, ld;       // CE losses of both models (detached)
  std::vector<double> reweights;    // R(x_h)

  std::size_t size() const { return labels.size(); }
};

// Per-step diagnostics. Group sums are keyed by the ground-truth alignment
// flags, which feed evaluation only, never the update itself.
struct StepStats {
  std::size_t batch_size = 0;
  double loss_b = std::numeric_limits<double>::quiet_NaN();  // Eq-4 style GCE objective
  double loss_d = std::numeric_limits<double>::quiet_NaN();  // composite reweighted objective
  std::size_t selected_bc = 0;
  std::size_t hybrids = 0;
  std::size_t skipped = 0;   // selected bc without a same-class ba partner
  std::size_t fp_selected = 0;  // selected but ground-truth aligned
  std::size_t n_aligned = 0;
  std::size_t n_conflicting = 0;
  double sum_lb_aligned = 0.0, sum_lb_conflicting = 0.0;  // per-sample CE of M_B
  double sum_ld_aligned = 0.0, sum_ld_conflicting = 0.0;  // per-sample CE of M_D
  double sum_r_aligned = 0.0, sum_r_conflicting = 0.0;
  std::size_t correct = 0;  // argmax(M_D) == label, before the update
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss_b = std::numeric_limits<double>::quiet_NaN();
  double loss_d = std::numeric_limits<double>::quiet_NaN();
  double loss_b_aligned = std::numeric_limits<double>::quiet_NaN();
  double loss_b_conflicting = std::numeric_limits<double>::quiet_NaN();
  double loss_d_aligned = std::numeric_limits<double>::quiet_NaN();
  double loss_d_conflicting = std::numeric_limits<double>::quiet_NaN();
  double mean_r_aligned = std::numeric_limits<double>::quiet_NaN();
  double mean_r_conflicting = std::numeric_limits<double>::quiet_NaN();
  double fpr = std::numeric_limits<double>::quiet_NaN();
  double train_acc = std::numeric_limits<double>::quiet_NaN();
  std::size_t selected_bc = 0;
  std::size_t hybrids = 0;
  std::size_t skipped = 0;
};

// One JSON object per epoch, NaN fields emitted as null.
std::string history_to_jsonl(std::span<const EpochStats> history);

struct DualModel {
  Mlp model_b;
  Mlp model_d;
  AdamState opt_b;
  AdamState opt_d;
};

struct TrainResult {
  Mlp model_d;
  std::optional<Mlp> model_b;
  std::vector<EpochStats> history;
};

// Splits a batch into likely bias-conflicting (bc) and likely bias-aligned
// (ba) indices from the reweighting factors. top_ratio keeps the
// max(1, floor(N*(1-t_bc))) highest-r samples, ties broken by lower index;
// mean_threshold keeps r > mean(r); fixed_threshold keeps r > tau. The bc
// list is ordered by descending r (ties ascending index), ba ascending.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
select_conflicting(const ReweightVector& rw, const DebiasConfig& cfg);

// One hybrid per bc index, partner drawn uniformly (with replacement) from
// the same-class ba indices; bc samples without a partner are skipped and
// counted via StepStats.
HybridBatch synthesize_hybrids(const Matrix& batch, std::span<const std::uint32_t> labels,
                               std::span<const std::size_t> bc_indices,
                               std::span<const std::size_t> ba_indices,
                               double alpha, Rng& rng);

// Fills lb/ld/reweights from fresh forward passes of both models. No
// gradient is retained.
void hybrid_reweights(const Mlp& model_b, const Mlp& model_d, HybridBatch& hybrids,
                      const LossConfig& cfg = {});

// Reduction over per-sample GCE values.
double biased_loss(const DMatrix& probs_b, std::span<const std::uint32_t> labels,
                   double q, Reduction reduction);

// reduce(ce .* r) + beta * reduce(ce_h .* r_h); hybrid term is 0 when empty.
double debiased_loss(std::span<const double> ce, std::span<const double> r,
                     std::span<const double> ce_h, std::span<const double> r_h,
                     double beta, Reduction reduction);

// One dual-model update: forward both models, reweight, (optionally) select
// and synthesize hybrids, step M_D on the composite loss, then step M_B on
// the GCE loss of the regular batch. Neither model receives gradient
// through the reweighting factors, and M_B never sees hybrids.
StepStats train_step(DualModel& dual, const Matrix& batch,
                     std::span<const std::uint32_t> labels,
                     std::span<const std::uint8_t> aligned_flags,
                     const DebiasConfig& cfg, bool with_hybrids, Rng& partner_rng);

// Full training loop for one of the three methods. Mini-batches are
// reshuffled every epoch; everything is deterministic given cfg.seed.
TrainResult train(Method method, const LabeledDataset& train_ds, const DebiasConfig& cfg);

}  // namespace debias
