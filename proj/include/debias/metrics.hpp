#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "debias/dataset.hpp"
#include "debias/mlp.hpp"

namespace debias {

// Accuracy split by the ground-truth alignment flags. Group accuracies are
// absent when the group is empty; overall is always present.
struct EvalReport {
  double overall_acc = 0.0;
  std::optional<double> aligned_acc;
  std::optional<double> conflicting_acc;
  std::size_t n = 0;
  std::size_t n_aligned = 0;
  std::size_t n_conflicting = 0;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

// Argmax-of-logits classification over the dataset.
EvalReport accuracy(const Mlp& model, const LabeledDataset& ds);

std::vector<std::uint32_t> predict(const Mlp& model, const Matrix& features);

// FP / #ground-truth-aligned, where FP counts selected samples that are
// actually bias-aligned. Returns 0 when the batch has no aligned samples.
double selection_fpr(std::span<const std::size_t> selected_indices,
                     std::span<const std::uint8_t> aligned_flags);

// Last-hidden-layer activations for every sample.
Matrix hidden_features(const Mlp& model, const Matrix& features);

// Writes activations + labels + flags as a "DBFT" tensor file, for external
// embedding/plotting tools.
void export_features(const Mlp& model, const LabeledDataset& ds, const std::string& path);

}  // namespace debias
