#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "structkd/common.hpp"
#include "structkd/tensor.hpp"

namespace structkd {
namespace io {

// Binary tensor container: magic "STKD", u8 version (1), u8 dtype (0 = f32),
// u8 ndim, ndim little-endian u32 dims, then the row-major little-endian f32
// payload. The code assumes a little-endian host.

inline constexpr char kMagic[4] = {'S', 'T', 'K', 'D'};
inline constexpr uint8_t kVersion = 1;
inline constexpr uint8_t kDtypeF32 = 0;

inline void write_tensor(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  SKD_CHECK(f.good(), Io, "cannot open " << path << " for writing");
  f.write(kMagic, 4);
  f.put(static_cast<char>(kVersion));
  f.put(static_cast<char>(kDtypeF32));
  f.put(static_cast<char>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) {
    const uint32_t d = static_cast<uint32_t>(t.dim(i));
    f.write(reinterpret_cast<const char*>(&d), 4);
  }
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(float)));
  SKD_CHECK(f.good(), Io, "write failed for " << path);
}

inline Tensor read_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  SKD_CHECK(f.good(), Io, "cannot open " << path << " for reading");
  char magic[4];
  f.read(magic, 4);
  SKD_CHECK(f.good() && std::memcmp(magic, kMagic, 4) == 0, Io,
            path << " is not a tensor file (bad magic)");
  const int version = f.get();
  SKD_CHECK(version == kVersion, Io,
            path << ": unsupported version " << version);
  const int dtype = f.get();
  SKD_CHECK(dtype == kDtypeF32, Io, path << ": unsupported dtype " << dtype);
  const int ndim = f.get();
  SKD_CHECK(ndim >= 1 && ndim <= 8, Io, path << ": bad rank " << ndim);
  Shape shape(static_cast<size_t>(ndim));
  for (int i = 0; i < ndim; ++i) {
    uint32_t d = 0;
    f.read(reinterpret_cast<char*>(&d), 4);
    SKD_CHECK(f.good() && d >= 1, Io, path << ": bad dimension " << d);
    shape[static_cast<size_t>(i)] = static_cast<int>(d);
  }
  std::vector<float> vals(static_cast<size_t>(numel(shape)));
  f.read(reinterpret_cast<char*>(vals.data()),
         static_cast<std::streamsize>(vals.size() * sizeof(float)));
  SKD_CHECK(f.good(), Io, path << ": truncated payload");
  return Tensor::from(std::move(shape), std::move(vals));
}

/// FNV-1a over the raw payload bytes; used for manifest integrity lines.
inline uint64_t tensor_hash(const Tensor& t) {
  return fnv1a(t.data(), static_cast<size_t>(t.size()) * sizeof(float));
}

inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc);
  SKD_CHECK(f.good(), Io, "cannot open " << path << " for writing");
  f << content;
  SKD_CHECK(f.good(), Io, "write failed for " << path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream f(path);
  SKD_CHECK(f.good(), Io, "cannot open " << path << " for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Splits on whitespace runs; empty tokens never appear.
inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

inline void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  SKD_CHECK(!ec, Io, "cannot create directory " << path << ": "
                                                << ec.message());
}

}  // namespace io
}  // namespace structkd
