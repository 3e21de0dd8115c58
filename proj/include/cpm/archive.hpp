#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cpm/config.hpp"
#include "cpm/linalg.hpp"

// Named-tensor archive. Layout (all integers little-endian):
//   8 bytes   magic "CPMARCH\0"
//   u32       format version
//   u64       header length L
//   L bytes   UTF-8 JSON header: {"meta": {...}, "tensors": [{name, rows, cols, offset}]}
//   payload   float64 values, row-major, at the recorded element offsets
namespace cpm::archive {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Tensor {
  std::string name;
  Matrix value;
};

struct Archive {
  json meta = json::object();
  std::vector<Tensor> tensors;

  const Matrix& at(const std::string& name) const;  // throws ParseError
  bool contains(const std::string& name) const;
};

void save(const Archive& archive, const std::filesystem::path& path);  // throws IoError
Archive load(const std::filesystem::path& path);                         // throws IoError / ParseError

std::string to_bytes(const Archive& archive);
Archive from_bytes(const std::string& bytes);

}  // namespace cpm::archive
