#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>

#include "ftpg/random.hpp"
#include "ftpg/tensor.hpp"

namespace ftpg::testing {

inline Matrix gaussian(SplitMix64& rng, Eigen::Index r, Eigen::Index c, double sd = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = sd * rng.gaussian();
  return m;
}

inline Matrix unit_rows(SplitMix64& rng, Eigen::Index r, Eigen::Index c) {
  Matrix m = gaussian(rng, r, c);
  m.rowwise().normalize();
  return m;
}

template <typename A, typename B>
bool bitwise(const A& a, const B& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (std::bit_cast<std::uint64_t>(a(i, j)) != std::bit_cast<std::uint64_t>(b(i, j)))
        return false;
  return true;
}

inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "ftpg_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace ftpg::testing
