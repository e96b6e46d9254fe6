#include "vil/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "vil/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads assume a little-endian host");

namespace vil {

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

namespace {

constexpr char kMagic[8] = {'V', 'I', 'L', 'C', 'K', 'P', 'T', '1'};

template <typename U>
void write_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U read_le(std::istream& is, const char* what) {
  unsigned char b[sizeof(U)];
  is.read(reinterpret_cast<char*>(b), sizeof(U));
  check<ConfigError>(static_cast<bool>(is), "truncated checkpoint while reading ", what);
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path, uint64_t digest,
                      const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  check<ConfigError>(os.good(), "cannot open '", path, "' for writing");
  os.write(kMagic, sizeof(kMagic));
  write_le<uint64_t>(os, digest);
  write_le<uint32_t>(os, static_cast<uint32_t>(entries.size()));
  for (const auto& e : entries) {
    check<UsageError>(shape_numel(e.shape) == static_cast<int64_t>(e.data.size()),
                      "entry '", e.name, "' payload does not match its shape");
    write_le<uint32_t>(os, static_cast<uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_le<uint32_t>(os, static_cast<uint32_t>(e.shape.size()));
    for (int64_t extent : e.shape) write_le<uint64_t>(os, static_cast<uint64_t>(extent));
    os.write(reinterpret_cast<const char*>(e.data.data()),
             static_cast<std::streamsize>(e.data.size() * sizeof(float)));
  }
  check<ConfigError>(os.good(), "failed writing '", path, "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check<ConfigError>(is.good(), "cannot open '", path, "'");
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  check<ConfigError>(is && std::memcmp(magic, kMagic, sizeof(magic)) == 0, "'", path,
                     "' is not a VILCKPT1 file");
  Checkpoint ckpt;
  ckpt.digest = read_le<uint64_t>(is, "config digest");
  const uint32_t n = read_le<uint32_t>(is, "entry count");
  ckpt.entries.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    auto& e = ckpt.entries[i];
    const uint32_t name_len = read_le<uint32_t>(is, "name length");
    e.name.resize(name_len);
    is.read(e.name.data(), name_len);
    check<ConfigError>(static_cast<bool>(is), "truncated checkpoint in entry name");
    const uint32_t rank = read_le<uint32_t>(is, "rank");
    e.shape.resize(rank);
    for (uint32_t r = 0; r < rank; ++r)
      e.shape[r] = static_cast<int64_t>(read_le<uint64_t>(is, "extent"));
    const int64_t numel = shape_numel(e.shape);
    e.data.resize(static_cast<size_t>(numel));
    is.read(reinterpret_cast<char*>(e.data.data()),
            static_cast<std::streamsize>(e.data.size() * sizeof(float)));
    check<ConfigError>(static_cast<bool>(is), "truncated checkpoint in payload of '", e.name, "'");
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const ViLModel& model) {
  std::vector<CheckpointEntry> entries;
  entries.reserve(model.params().size());
  for (const auto& [name, p] : model.params()) {
    entries.push_back(
        {name, p.shape(), std::vector<float>(p.values().begin(), p.values().end())});
  }
  write_checkpoint(path, fnv1a64(canonical_config_string(model.config())), entries);
}

void load_checkpoint(const std::string& path, ViLModel& model) {
  Checkpoint ckpt = read_checkpoint(path);
  const uint64_t expect = fnv1a64(canonical_config_string(model.config()));
  check<ConfigError>(ckpt.digest == expect, "'", path,
                     "' was written for a different configuration (digest mismatch)");
  check<ConfigError>(ckpt.entries.size() == model.params().size(), "'", path, "' holds ",
                     ckpt.entries.size(), " tensors, model has ", model.params().size());
  for (size_t i = 0; i < ckpt.entries.size(); ++i) {
    auto& e = ckpt.entries[i];
    auto& [name, p] = model.params()[i];
    check<ConfigError>(e.name == name, "checkpoint entry ", i, " is '", e.name,
                       "', expected '", name, "'");
    check<ConfigError>(e.shape == p.shape(), "checkpoint entry '", e.name, "' has shape ",
                       shape_str(e.shape), ", model expects ", shape_str(p.shape()));
    std::copy(e.data.begin(), e.data.end(), p.values_mut().begin());
  }
}

}  // namespace vil
