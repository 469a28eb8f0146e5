#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "debias/matrix.hpp"

namespace debias {

// Parameters of the procedural biased dataset. Each class k has a fixed
// binary shape template (the intrinsic attribute); foreground pixels are
// painted with palette color k for bias-aligned samples and with a uniformly
// drawn other color for bias-conflicting ones, so color is an easy shortcut
// attribute spuriously correlated with the label.
struct DatasetSpec {
  std::size_t num_classes = 10;
  std::size_t height = 12;
  std::size_t width = 12;
  std::size_t channels = 3;           // fixed
  std::size_t samples_per_class = 0;
  double sigma = 0.0;                 // bias-conflicting ratio, [0,1]
  double p = 1.0;                     // reduction fraction, (0,1]
  double template_density = 0.35;     // fraction of foreground pixels
  double pixel_flip_prob = 0.05;      // per-pixel template jitter
  double color_noise_std = 0.05;      // additive Gaussian noise on foreground
  std::uint64_t seed = 0;

  std::size_t feature_dim() const { return channels * height * width; }
  void validate() const;  // throws std::invalid_argument naming the bad field
  bool operator==(const DatasetSpec&) const = default;
};

struct LabeledDataset {
  Matrix features;                        // n x d, values in [0,1]
  std::vector<std::uint32_t> labels;      // class indices
  std::vector<std::uint8_t> aligned_flags;  // 1 = bias-aligned (ground truth)
  DatasetSpec spec;

  std::size_t size() const { return labels.size(); }
  std::size_t conflicting_count() const;
  bool operator==(const LabeledDataset&) const = default;
};

// Ten fixed, well-separated RGB palette colors (see README for the list).
const std::array<std::array<float, 3>, 10>& palette();

// Per class: exactly round(samples_per_class * sigma) bias-conflicting
// samples. Deterministic given the spec; per-sample streams are derived from
// (seed, class, index) so generation order does not matter.
LabeledDataset generate_dataset(const DatasetSpec& spec);

// Keeps round(n_class * p) samples per class, drawn uniformly without
// replacement. Sigma is preserved in expectation only.
LabeledDataset reduce_dataset(const LabeledDataset& ds, double p, std::uint64_t seed);

// Unbiased test split: colors drawn uniformly over all classes, so roughly
// (num_classes-1)/num_classes of the samples are bias-conflicting. `n` must
// be divisible by num_classes.
LabeledDataset make_unbiased_test(const DatasetSpec& spec, std::size_t n,
                                  std::uint64_t seed);

// "DBDS" file format; round-trips bit-exactly.
void write_dataset(const LabeledDataset& ds, const std::string& path);
LabeledDataset read_dataset(const std::string& path);

std::string spec_to_json(const DatasetSpec& spec);
DatasetSpec spec_from_json(const std::string& json_text);

}  // namespace debias
