#include "debias/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "debias/rng.hpp"
#include "debias/tensor_io.hpp"

namespace debias {

using json = nlohmann::json;

void DatasetSpec::validate() const {
  if (num_classes < 2)
    throw std::invalid_argument("DatasetSpec.num_classes must be >= 2");
  if (num_classes > palette().size())
    throw std::invalid_argument("DatasetSpec.num_classes exceeds palette size " +
                                std::to_string(palette().size()));
  if (height == 0 || width == 0)
    throw std::invalid_argument("DatasetSpec.height/width must be positive");
  if (channels != 3)
    throw std::invalid_argument("DatasetSpec.channels must be 3");
  if (!(sigma >= 0.0 && sigma <= 1.0))
    throw std::invalid_argument("DatasetSpec.sigma must be in [0,1]");
  if (!(p > 0.0 && p <= 1.0))
    throw std::invalid_argument("DatasetSpec.p must be in (0,1]");
  if (!(template_density > 0.0 && template_density <= 1.0))
    throw std::invalid_argument("DatasetSpec.template_density must be in (0,1]");
  if (!(pixel_flip_prob >= 0.0 && pixel_flip_prob <= 1.0))
    throw std::invalid_argument("DatasetSpec.pixel_flip_prob must be in [0,1]");
  if (!(color_noise_std >= 0.0))
    throw std::invalid_argument("DatasetSpec.color_noise_std must be >= 0");
}

std::size_t LabeledDataset::conflicting_count() const {
  std::size_t n = 0;
  for (std::uint8_t f : aligned_flags) n += (f == 0);
  return n;
}

const std::array<std::array<float, 3>, 10>& palette() {
  static const std::array<std::array<float, 3>, 10> colors = {{
      {1.0f, 0.0f, 0.0f},   // red
      {0.0f, 1.0f, 0.0f},   // green
      {0.0f, 0.0f, 1.0f},   // blue
      {1.0f, 1.0f, 0.0f},   // yellow
      {1.0f, 0.0f, 1.0f},   // magenta
      {0.0f, 1.0f, 1.0f},   // cyan
      {1.0f, 1.0f, 1.0f},   // white
      {1.0f, 0.5f, 0.0f},   // orange
      {0.5f, 0.0f, 1.0f},   // violet
      {0.0f, 1.0f, 0.5f},   // spring green
  }};
  return colors;
}

// Fixed foreground mask for class k: a seeded choice of
// round(density * H * W) pixels.
static std::vector<std::uint8_t> class_template(const DatasetSpec& spec, std::size_t k) {
  const std::size_t pixels = spec.height * spec.width;
  const auto fg = static_cast<std::size_t>(
      std::llround(spec.template_density * static_cast<double>(pixels)));
  std::vector<std::size_t> order(pixels);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(spec.seed, stream_tag("template"), k);
  rng.shuffle(order);
  std::vector<std::uint8_t> mask(pixels, 0);
  for (std::size_t i = 0; i < fg && i < pixels; ++i) mask[order[i]] = 1;
  return mask;
}

// Jitters the class template and paints foreground pixels with the palette
// color plus Gaussian noise; channel-major layout, everything clamped to
// [0,1]. The caller hands in a per-sample RNG stream.
static void render_sample(const DatasetSpec& spec, const std::vector<std::uint8_t>& mask,
                          std::size_t color_idx, Rng& rng, float* out) {
  const std::size_t pixels = spec.height * spec.width;
  const auto& color = palette()[color_idx];
  std::vector<std::uint8_t> fg(pixels);
  for (std::size_t px = 0; px < pixels; ++px) {
    const bool flip = rng.bernoulli(spec.pixel_flip_prob);
    fg[px] = mask[px] ^ static_cast<std::uint8_t>(flip);
  }
  for (std::size_t c = 0; c < spec.channels; ++c) {
    for (std::size_t px = 0; px < pixels; ++px) {
      double v = 0.0;
      if (fg[px])
        v = static_cast<double>(color[c]) + spec.color_noise_std * rng.normal();
      out[c * pixels + px] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
}

static std::size_t conflicting_color(std::size_t k, std::size_t num_classes, Rng& rng) {
  const std::size_t u = rng.uniform_index(num_classes - 1);
  return u >= k ? u + 1 : u;
}

LabeledDataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  const std::size_t n = spec.num_classes * spec.samples_per_class;
  const std::size_t d = spec.feature_dim();
  const auto conflicting_per_class = static_cast<std::size_t>(
      std::llround(static_cast<double>(spec.samples_per_class) * spec.sigma));

  LabeledDataset ds;
  ds.spec = spec;
  ds.features = Matrix(n, d);
  ds.labels.resize(n);
  ds.aligned_flags.resize(n);

  std::size_t row = 0;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    const std::vector<std::uint8_t> mask = class_template(spec, k);
    for (std::size_t i = 0; i < spec.samples_per_class; ++i, ++row) {
      Rng rng = Rng::derive(spec.seed, stream_tag("sample"), k, i);
      const bool conflicting = i < conflicting_per_class;
      const std::size_t color_idx =
          conflicting ? conflicting_color(k, spec.num_classes, rng) : k;
      render_sample(spec, mask, color_idx, rng, ds.features.row(row));
      ds.labels[row] = static_cast<std::uint32_t>(k);
      ds.aligned_flags[row] = conflicting ? 0 : 1;
    }
  }
  return ds;
}

LabeledDataset reduce_dataset(const LabeledDataset& ds, double p, std::uint64_t seed) {
  if (!(p > 0.0 && p <= 1.0))
    throw std::invalid_argument("reduce_dataset: p must be in (0,1]");

  std::vector<std::vector<std::size_t>> by_class(ds.spec.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

  std::vector<std::size_t> kept;
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& members = by_class[k];
    Rng rng = Rng::derive(seed, stream_tag("reduce"), k);
    rng.shuffle(members);
    const auto keep = static_cast<std::size_t>(
        std::llround(static_cast<double>(members.size()) * p));
    kept.insert(kept.end(), members.begin(), members.begin() + std::min(keep, members.size()));
  }
  std::sort(kept.begin(), kept.end());

  LabeledDataset out;
  out.spec = ds.spec;
  out.spec.p = p;
  const std::size_t d = ds.features.cols;
  out.features = Matrix(kept.size(), d);
  out.labels.resize(kept.size());
  out.aligned_flags.resize(kept.size());
  for (std::size_t j = 0; j < kept.size(); ++j) {
    const std::size_t i = kept[j];
    std::copy(ds.features.row(i), ds.features.row(i) + d, out.features.row(j));
    out.labels[j] = ds.labels[i];
    out.aligned_flags[j] = ds.aligned_flags[i];
  }
  return out;
}

LabeledDataset make_unbiased_test(const DatasetSpec& spec, std::size_t n,
                                  std::uint64_t seed) {
  spec.validate();
  if (n % spec.num_classes != 0)
    throw std::invalid_argument("make_unbiased_test: n must be divisible by num_classes");
  const std::size_t per_class = n / spec.num_classes;
  const std::size_t d = spec.feature_dim();

  LabeledDataset ds;
  ds.spec = spec;
  ds.spec.samples_per_class = per_class;
  ds.spec.sigma = static_cast<double>(spec.num_classes - 1) /
                  static_cast<double>(spec.num_classes);
  ds.features = Matrix(n, d);
  ds.labels.resize(n);
  ds.aligned_flags.resize(n);

  std::size_t row = 0;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    const std::vector<std::uint8_t> mask = class_template(spec, k);
    for (std::size_t i = 0; i < per_class; ++i, ++row) {
      Rng rng = Rng::derive(seed, stream_tag("test_sample"), k, i);
      const std::size_t color_idx = rng.uniform_index(spec.num_classes);
      render_sample(spec, mask, color_idx, rng, ds.features.row(row));
      ds.labels[row] = static_cast<std::uint32_t>(k);
      ds.aligned_flags[row] = color_idx == k ? 1 : 0;
    }
  }
  return ds;
}

std::string spec_to_json(const DatasetSpec& spec) {
  json j;
  j["num_classes"] = spec.num_classes;
  j["height"] = spec.height;
  j["width"] = spec.width;
  j["channels"] = spec.channels;
  j["samples_per_class"] = spec.samples_per_class;
  j["sigma"] = spec.sigma;
  j["p"] = spec.p;
  j["template_density"] = spec.template_density;
  j["pixel_flip_prob"] = spec.pixel_flip_prob;
  j["color_noise_std"] = spec.color_noise_std;
  j["seed"] = spec.seed;
  return j.dump();
}

DatasetSpec spec_from_json(const std::string& json_text) {
  const json j = json::parse(json_text);
  DatasetSpec spec;
  spec.num_classes = j.at("num_classes").get<std::size_t>();
  spec.height = j.at("height").get<std::size_t>();
  spec.width = j.at("width").get<std::size_t>();
  spec.channels = j.at("channels").get<std::size_t>();
  spec.samples_per_class = j.at("samples_per_class").get<std::size_t>();
  spec.sigma = j.at("sigma").get<double>();
  spec.p = j.at("p").get<double>();
  spec.template_density = j.at("template_density").get<double>();
  spec.pixel_flip_prob = j.at("pixel_flip_prob").get<double>();
  spec.color_noise_std = j.at("color_noise_std").get<double>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  return spec;
}

void write_dataset(const LabeledDataset& ds, const std::string& path) {
  TensorFile file;
  std::copy(kDatasetMagic, kDatasetMagic + 4, file.magic.begin());
  file.version = kFormatVersion;
  file.num_classes = static_cast<std::uint32_t>(ds.spec.num_classes);
  file.data = ds.features;
  file.labels = ds.labels;
  file.flags = ds.aligned_flags;
  file.meta_json = spec_to_json(ds.spec);
  write_tensor_file(file, path);
}

LabeledDataset read_dataset(const std::string& path) {
  TensorFile file = read_tensor_file(path, kDatasetMagic);
  LabeledDataset ds;
  ds.features = std::move(file.data);
  ds.labels = std::move(file.labels);
  ds.aligned_flags = std::move(file.flags);
  ds.spec = spec_from_json(file.meta_json);
  return ds;
}

}  // namespace debias
