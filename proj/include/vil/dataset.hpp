#pragma once

// Raw on-disk image datasets and the synthetic corner-marker task.
//
// Binary image format: magic "VILIMG1", then little-endian u32
// count/height/width/channels, then 8-bit pixel payloads sample-major.
// Labels live in a separate newline-delimited integer file.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vil/tensor.hpp"

namespace vil {

// Deterministic per-stream seed derivation (splitmix64 over seed ^ stream).
uint64_t mix_seed(uint64_t seed, uint64_t stream);

struct ImageDataset {
  int64_t count = 0;
  int64_t height = 0;
  int64_t width = 0;
  int64_t channels = 0;
  std::vector<uint8_t> pixels;
  std::vector<int64_t> labels;

  std::span<const uint8_t> image(int64_t i) const;
  // {h,w,3} tensor scaled to [0,1]
  template <typename T>
  TensorT<T> image_tensor(int64_t i) const;
};

void save_dataset(const ImageDataset& ds, const std::string& images_path,
                  const std::string& labels_path);
ImageDataset load_dataset(const std::string& images_path, const std::string& labels_path);

struct DatasetSpec {
  int64_t image_size = 32;
  int64_t num_classes = 8;
  int64_t marker_size = 16;
  int64_t train_size = 512;
  int64_t eval_size = 256;
};

// Corner-marker task: a top-left marker tl and bottom-right marker br (both
// uniform over classes) fill their corner patches with distinct intensities;
// the label is (tl + br) mod num_classes, everything else is uniform noise.
// Sample i depends only on (seed, i).
ImageDataset synthesize_corners(const DatasetSpec& spec, uint64_t seed, int64_t count);

// Marker intensity encode/decode (8-bit), exact round-trip for any class.
uint8_t marker_intensity(int64_t v, int64_t num_classes);
int64_t marker_value(uint8_t intensity, int64_t num_classes);

// Re-derives the label of sample i from its corner pixels alone.
int64_t derive_label_from_pixels(const ImageDataset& ds, int64_t i, int64_t marker_size,
                                 int64_t num_classes);

}  // namespace vil
