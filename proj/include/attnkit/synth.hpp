#pragma once

// Synthetic segmentation data: images of Gaussian blobs over noise, with
// binary masks marking the blob cores. Everything is derived from one RNG
// stream, so a fixed seed reproduces the dataset byte for byte.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnkit/common.hpp"
#include "attnkit/tensor.hpp"
#include "attnkit/tensor_io.hpp"

namespace attnkit {

struct SynthConfig {
  Index count = 8;
  Index image_size = 32;
  std::uint64_t seed = 0;
  int min_blobs = 1;
  int max_blobs = 3;
  double noise_stddev = 0.05;
  double mask_threshold = 0.35;  // on the noiseless signal

  void validate() const {
    if (count < 1) throw config_error(msg("gen-data: count must be >= 1, got ", count));
    if (image_size < 4) throw config_error(msg("gen-data: image size must be >= 4, got ", image_size));
    if (min_blobs < 1 || max_blobs < min_blobs)
      throw config_error(msg("gen-data: bad blob range [", min_blobs, ", ", max_blobs, "]"));
    if (noise_stddev < 0) throw config_error("gen-data: noise stddev must be non-negative");
    if (mask_threshold <= 0 || mask_threshold >= 1) throw config_error("gen-data: mask threshold must be in (0, 1)");
  }
};

template <class Scalar>
struct SynthSample {
  Tensor<Scalar> image;  // (H, W, 1), values in [0, 1]
  Tensor<Scalar> mask;   // (H, W), values in {0, 1}
};

// One image: 1..max_blobs isotropic Gaussians plus pixel noise, clipped to
// [0, 1]. The mask thresholds the clean signal, so it stays binary no
// matter how strong the noise is.
template <class Scalar>
SynthSample<Scalar> synth_sample(const SynthConfig& cfg, Rng& rng) {
  const Index s = cfg.image_size;
  const double fs = static_cast<double>(s);
  std::uniform_int_distribution<int> blob_count(cfg.min_blobs, cfg.max_blobs);
  std::uniform_real_distribution<double> center(0.2 * fs, 0.8 * fs);
  std::uniform_real_distribution<double> sigma(fs / 12.0, fs / 6.0);
  std::uniform_real_distribution<double> amplitude(0.6, 1.0);

  struct Blob {
    double cy, cx, sg, amp;
  };
  std::vector<Blob> blobs(static_cast<std::size_t>(blob_count(rng)));
  for (auto& b : blobs) {
    b.cy = center(rng);
    b.cx = center(rng);
    b.sg = sigma(rng);
    b.amp = amplitude(rng);
  }

  SynthSample<Scalar> out;
  out.image = Tensor<Scalar>({s, s, 1});
  out.mask = Tensor<Scalar>({s, s});
  std::normal_distribution<double> noise(0.0, cfg.noise_stddev);
  for (Index y = 0; y < s; ++y) {
    for (Index x = 0; x < s; ++x) {
      double signal = 0.0;
      for (const auto& b : blobs) {
        const double dy = (static_cast<double>(y) - b.cy) / b.sg;
        const double dx = (static_cast<double>(x) - b.cx) / b.sg;
        signal += b.amp * std::exp(-0.5 * (dy * dy + dx * dx));
      }
      const double pixel = std::clamp(signal + noise(rng), 0.0, 1.0);
      out.image[(y * s + x)] = static_cast<Scalar>(pixel);
      out.mask[y * s + x] = signal >= cfg.mask_threshold ? Scalar(1) : Scalar(0);
    }
  }
  return out;
}

template <class Scalar>
std::vector<SynthSample<Scalar>> synth_dataset(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<SynthSample<Scalar>> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (Index i = 0; i < cfg.count; ++i) out.push_back(synth_sample<Scalar>(cfg, rng));
  return out;
}

namespace detail {
inline std::string sample_file(const char* kind, Index i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04d.tnsr", kind, static_cast<int>(i));
  return buf;
}
}  // namespace detail

// Writes image_NNNN.tnsr / mask_NNNN.tnsr plus manifest.json into dir.
template <class Scalar>
void write_dataset(const std::filesystem::path& dir, const std::vector<SynthSample<Scalar>>& samples,
                   const SynthConfig& cfg) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error(msg("cannot create dataset directory ", dir.string(), ": ", ec.message()));

  nlohmann::json manifest;
  manifest["format"] = "attnkit-dataset-v1";
  manifest["count"] = samples.size();
  manifest["image_size"] = cfg.image_size;
  manifest["seed"] = cfg.seed;
  manifest["dtype"] = Tensor<Scalar>::dtype() == DType::f32 ? "f32" : "f64";
  auto& list = manifest["samples"];
  list = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto img = detail::sample_file("image", static_cast<Index>(i));
    const auto msk = detail::sample_file("mask", static_cast<Index>(i));
    save_tensor(dir / img, samples[i].image);
    save_tensor(dir / msk, samples[i].mask);
    list.push_back({{"image", img}, {"mask", msk}});
  }

  std::ofstream os(dir / "manifest.json");
  if (!os) throw io_error(msg("cannot write dataset manifest in ", dir.string()));
  os << manifest.dump(2) << "\n";
}

template <class Scalar>
std::vector<SynthSample<Scalar>> load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw io_error(msg("cannot open dataset manifest in ", dir.string()));
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw io_error(msg("malformed dataset manifest in ", dir.string(), ": ", e.what()));
  }
  if (manifest.value("format", "") != "attnkit-dataset-v1")
    throw io_error(msg("not an attnkit dataset: ", dir.string()));

  std::vector<SynthSample<Scalar>> out;
  try {
    for (const auto& entry : manifest.at("samples")) {
      SynthSample<Scalar> s;
      s.image = load_tensor<Scalar>(dir / entry.at("image").template get<std::string>());
      s.mask = load_tensor<Scalar>(dir / entry.at("mask").template get<std::string>());
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw io_error(msg("malformed dataset manifest in ", dir.string(), ": ", e.what()));
  }
  return out;
}

}  // namespace attnkit
