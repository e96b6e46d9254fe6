#include "vil/dataset.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "vil/errors.hpp"

namespace vil {

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed ^ (stream * 0x9E3779B97F4A7C15ULL);
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::span<const uint8_t> ImageDataset::image(int64_t i) const {
  check<UsageError>(i >= 0 && i < count, "image index ", i, " outside [0, ", count, ")");
  const size_t stride = static_cast<size_t>(height * width * channels);
  return {pixels.data() + static_cast<size_t>(i) * stride, stride};
}

template <typename T>
TensorT<T> ImageDataset::image_tensor(int64_t i) const {
  check<UsageError>(channels == 3, "image_tensor expects 3 channels, dataset has ", channels);
  auto src = image(i);
  std::vector<T> vals(src.size());
  for (size_t j = 0; j < src.size(); ++j) vals[j] = static_cast<T>(src[j]) / T(255);
  return TensorT<T>::from_values({height, width, channels}, std::move(vals));
}

template TensorT<float> ImageDataset::image_tensor<float>(int64_t) const;
template TensorT<double> ImageDataset::image_tensor<double>(int64_t) const;

namespace {

constexpr char kImageMagic[7] = {'V', 'I', 'L', 'I', 'M', 'G', '1'};

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  check<ConfigError>(static_cast<bool>(is), "truncated dataset file while reading ", what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_dataset(const ImageDataset& ds, const std::string& images_path,
                  const std::string& labels_path) {
  check<UsageError>(static_cast<int64_t>(ds.pixels.size()) ==
                        ds.count * ds.height * ds.width * ds.channels,
                    "pixel buffer size does not match dataset dims");
  check<UsageError>(static_cast<int64_t>(ds.labels.size()) == ds.count,
                    "label count does not match dataset count");
  std::ofstream img(images_path, std::ios::binary);
  check<ConfigError>(img.good(), "cannot open '", images_path, "' for writing");
  img.write(kImageMagic, sizeof(kImageMagic));
  write_u32(img, static_cast<uint32_t>(ds.count));
  write_u32(img, static_cast<uint32_t>(ds.height));
  write_u32(img, static_cast<uint32_t>(ds.width));
  write_u32(img, static_cast<uint32_t>(ds.channels));
  img.write(reinterpret_cast<const char*>(ds.pixels.data()),
            static_cast<std::streamsize>(ds.pixels.size()));
  check<ConfigError>(img.good(), "failed writing '", images_path, "'");

  std::ofstream lab(labels_path);
  check<ConfigError>(lab.good(), "cannot open '", labels_path, "' for writing");
  for (int64_t l : ds.labels) lab << l << "\n";
  check<ConfigError>(lab.good(), "failed writing '", labels_path, "'");
}

ImageDataset load_dataset(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  check<ConfigError>(img.good(), "cannot open '", images_path, "'");
  char magic[sizeof(kImageMagic)];
  img.read(magic, sizeof(magic));
  check<ConfigError>(img && std::memcmp(magic, kImageMagic, sizeof(magic)) == 0,
                     "'", images_path, "' is not a VILIMG1 file");
  ImageDataset ds;
  ds.count = read_u32(img, "count");
  ds.height = read_u32(img, "height");
  ds.width = read_u32(img, "width");
  ds.channels = read_u32(img, "channels");
  const int64_t payload = ds.count * ds.height * ds.width * ds.channels;
  ds.pixels.resize(static_cast<size_t>(payload));
  img.read(reinterpret_cast<char*>(ds.pixels.data()), static_cast<std::streamsize>(payload));
  check<ConfigError>(static_cast<bool>(img), "'", images_path, "' truncated: expected ", payload,
                     " pixel bytes");

  std::ifstream lab(labels_path);
  check<ConfigError>(lab.good(), "cannot open '", labels_path, "'");
  std::string line;
  int64_t lineno = 0;
  while (std::getline(lab, line)) {
    ++lineno;
    if (line.empty()) continue;
    size_t used = 0;
    int64_t value = 0;
    try {
      value = std::stoll(line, &used);
    } catch (const std::exception&) {
      fail<ConfigError>(labels_path, ":", lineno, ": not an integer label: '", line, "'");
    }
    check<ConfigError>(used == line.size(), labels_path, ":", lineno, ": trailing characters in '",
                       line, "'");
    ds.labels.push_back(value);
  }
  check<ConfigError>(static_cast<int64_t>(ds.labels.size()) == ds.count, labels_path, " holds ",
                     ds.labels.size(), " labels for ", ds.count, " images");
  return ds;
}

uint8_t marker_intensity(int64_t v, int64_t num_classes) {
  // 255/(K+1) must stay >= 1 for distinct class intensities to survive the
  // byte quantization round trip.
  check<ConfigError>(num_classes >= 2 && num_classes <= 127, "num_classes must be in [2, 127], got ",
                     num_classes);
  check<UsageError>(v >= 0 && v < num_classes, "marker value ", v, " outside [0, ", num_classes,
                    ")");
  const double x = 255.0 * static_cast<double>(v + 1) / static_cast<double>(num_classes + 1);
  return static_cast<uint8_t>(std::llround(x));
}

int64_t marker_value(uint8_t intensity, int64_t num_classes) {
  const double x =
      static_cast<double>(intensity) * static_cast<double>(num_classes + 1) / 255.0;
  int64_t v = std::llround(x) - 1;
  check<DomainError>(v >= 0 && v < num_classes, "intensity ", static_cast<int>(intensity),
                     " does not decode to a marker under ", num_classes, " classes");
  return v;
}

ImageDataset synthesize_corners(const DatasetSpec& spec, uint64_t seed, int64_t count) {
  check<ConfigError>(spec.image_size >= 1 && spec.num_classes >= 2 && spec.marker_size >= 1,
                     "invalid dataset spec");
  check<ConfigError>(spec.marker_size * 2 <= spec.image_size, "marker size ", spec.marker_size,
                     " too large for image ", spec.image_size, " (corners would overlap)");
  check<ConfigError>(spec.num_classes <= 127, "at most 127 classes encodable in 8-bit markers");
  check<ConfigError>(count >= 0, "negative sample count");
  const int64_t h = spec.image_size, w = spec.image_size, K = spec.num_classes;
  const int64_t ms = spec.marker_size;
  ImageDataset ds;
  ds.count = count;
  ds.height = h;
  ds.width = w;
  ds.channels = 3;
  ds.pixels.resize(static_cast<size_t>(count * h * w * 3));
  ds.labels.resize(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(i)));
    const int64_t tl = static_cast<int64_t>(rng() % static_cast<uint64_t>(K));
    const int64_t label = static_cast<int64_t>(rng() % static_cast<uint64_t>(K));
    const int64_t br = (label - tl + K) % K;
    const uint8_t tl_px = marker_intensity(tl, K);
    const uint8_t br_px = marker_intensity(br, K);
    uint8_t* img = ds.pixels.data() + i * h * w * 3;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        uint8_t* px = img + (y * w + x) * 3;
        if (y < ms && x < ms) {
          px[0] = px[1] = px[2] = tl_px;
        } else if (y >= h - ms && x >= w - ms) {
          px[0] = px[1] = px[2] = br_px;
        } else {
          px[0] = static_cast<uint8_t>(rng() % 256);
          px[1] = static_cast<uint8_t>(rng() % 256);
          px[2] = static_cast<uint8_t>(rng() % 256);
        }
      }
    ds.labels[static_cast<size_t>(i)] = (tl + br) % K;
  }
  return ds;
}

int64_t derive_label_from_pixels(const ImageDataset& ds, int64_t i, int64_t marker_size,
                                 int64_t num_classes) {
  auto img = ds.image(i);
  check<UsageError>(marker_size >= 1 && marker_size <= ds.height && marker_size <= ds.width,
                    "bad marker size");
  const int64_t tl = marker_value(img[0], num_classes);
  const size_t br_off =
      static_cast<size_t>(((ds.height - 1) * ds.width + (ds.width - 1)) * ds.channels);
  const int64_t br = marker_value(img[br_off], num_classes);
  return (tl + br) % num_classes;
}

}  // namespace vil
