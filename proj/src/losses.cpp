#include "debias/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace debias {

void LossConfig::validate() const {
  if (!(q > 0.0 && q <= 1.0))
    throw std::invalid_argument("LossConfig.q must be in (0,1], got " + std::to_string(q));
  if (!(prob_floor > 0.0))
    throw std::invalid_argument("LossConfig.prob_floor must be positive");
  if (!(rw_eps > 0.0))
    throw std::invalid_argument("LossConfig.rw_eps must be positive");
}

static double clamped_label_prob(std::span<const double> probs, std::size_t label,
                                 double prob_floor) {
  if (label >= probs.size())
    throw std::out_of_range("label " + std::to_string(label) +
                            " out of range for " + std::to_string(probs.size()) +
                            " classes");
  return std::clamp(probs[label], prob_floor, 1.0);
}

double cross_entropy(std::span<const double> probs, std::size_t label,
                     double prob_floor) {
  return -std::log(clamped_label_prob(probs, label, prob_floor));
}

double gce(std::span<const double> probs, std::size_t label, double q,
           double prob_floor) {
  if (!(q > 0.0 && q <= 1.0))
    throw std::invalid_argument("gce exponent q must be in (0,1], got " + std::to_string(q));
  const double p = clamped_label_prob(probs, label, prob_floor);
  return (1.0 - std::pow(p, q)) / q;
}

double reweighting_factor(double lb, double ld, double rw_eps) {
  if (lb < 0.0 || ld < 0.0)
    throw std::invalid_argument("reweighting_factor requires non-negative losses");
  const double denom = lb + ld;
  if (denom < rw_eps) return 0.5;  // both models fit the sample; neutral weight
  return lb / denom;
}

ReweightVector compute_reweights(const DMatrix& probs_b, const DMatrix& probs_d,
                                 std::span<const std::uint32_t> labels,
                                 const LossConfig& cfg) {
  if (probs_b.rows != probs_d.rows || probs_b.rows != labels.size())
    throw std::invalid_argument("compute_reweights: row/label count mismatch");
  ReweightVector rw;
  const std::size_t n = labels.size();
  rw.lb.resize(n);
  rw.ld.resize(n);
  rw.r.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    rw.lb[i] = cross_entropy(probs_b.row_span(i), labels[i], cfg.prob_floor);
    rw.ld[i] = cross_entropy(probs_d.row_span(i), labels[i], cfg.prob_floor);
    rw.r[i] = reweighting_factor(rw.lb[i], rw.ld[i], cfg.rw_eps);
  }
  return rw;
}

}  // namespace debias
