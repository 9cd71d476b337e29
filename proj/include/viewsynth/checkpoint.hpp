#pragma once

// Checkpoint container, little-endian:
//
//   char[8]  magic "VSYNCKPT"
//   u32      format version (1)
//   u32      parameter count
//   per parameter:
//     u32 name length, name bytes
//     u32 rank, u64 extent[rank]
//     i64 optimizer step
//     f64 values[numel], f64 first_moment[numel], f64 second_moment[numel]

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "viewsynth/optim.hpp"

namespace viewsynth {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'V', 'S', 'Y', 'N', 'C', 'K', 'P', 'T'};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("checkpoint truncated");
  return v;
}

inline void write_doubles(std::ostream& os, std::span<const double> v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_doubles(std::istream& is, std::span<double> v) {
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!is) throw FormatError("checkpoint truncated");
}

}  // namespace detail

inline void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path.string());
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(os, kCheckpointVersion);
  detail::write_pod(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::write_pod(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_pod(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) detail::write_pod(os, static_cast<std::uint64_t>(d));
    detail::write_pod(os, static_cast<std::int64_t>(p.step));
    detail::write_doubles(os, p.tensor.values());
    detail::write_doubles(os, p.first_moment);
    detail::write_doubles(os, p.second_moment);
  }
  if (!os) throw FormatError("failed writing checkpoint: " + path.string());
}

/// Loads values and optimizer state into an existing parameter set. Every
/// stored name must exist with an identical shape, and vice versa.
inline void load_checkpoint(ParameterSet& params, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw FormatError("not a checkpoint file: " + path.string());
  }
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = detail::read_pod<std::uint32_t>(is);
  if (count != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                      std::to_string(params.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw FormatError("checkpoint truncated");
    Parameter& p = params.at(name);
    const auto rank = detail::read_pod<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is));
    if (shape != p.tensor.shape()) {
      throw FormatError("shape mismatch for " + name + ": " + shape_string(shape) + " vs " +
                        shape_string(p.tensor.shape()));
    }
    p.step = detail::read_pod<std::int64_t>(is);
    detail::read_doubles(is, p.tensor.mutable_values());
    detail::read_doubles(is, p.first_moment);
    detail::read_doubles(is, p.second_moment);
  }
}

}  // namespace viewsynth
