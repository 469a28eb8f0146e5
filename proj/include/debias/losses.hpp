#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "debias/matrix.hpp"

namespace debias {

struct LossConfig {
  double q = 0.7;            // GCE exponent, in (0,1]
  double prob_floor = 1e-12; // clamp applied before log/power
  double rw_eps = 1e-12;     // guard for the reweighting denominator

  void validate() const;
};

// Per-sample losses of the biased and debiased models and the resulting
// relative-difficulty weights r_i = lb_i / (lb_i + ld_i).
struct ReweightVector {
  std::vector<double> lb;
  std::vector<double> ld;
  std::vector<double> r;

  std::size_t size() const { return r.size(); }
};

// -ln(clamp(p_label)). `probs` must be a probability row.
double cross_entropy(std::span<const double> probs, std::size_t label,
                     double prob_floor = 1e-12);

// Generalized cross-entropy (1 - p_label^q) / q. Decreasing in p_label,
// bounded by 1/q, and -> cross_entropy as q -> 0.
double gce(std::span<const double> probs, std::size_t label, double q,
           double prob_floor = 1e-12);

// lb / (lb + ld), or 0.5 when both losses vanish. Inputs must be >= 0.
double reweighting_factor(double lb, double ld, double rw_eps = 1e-12);

// Per-sample cross-entropies of both models plus their reweighting factors.
ReweightVector compute_reweights(const DMatrix& probs_b, const DMatrix& probs_d,
                                 std::span<const std::uint32_t> labels,
                                 const LossConfig& cfg = {});

}  // namespace debias
