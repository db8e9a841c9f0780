#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mtci/rng.hpp"
#include "mtci/tensor.hpp"

namespace mtci::testing {

/// Values in [-2, 2], kept at least 1e-3 away from 0 (the relu/abs kink).
inline Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    do {
      x = rng.uniform(-2.0, 2.0);
    } while (std::abs(x) < 1e-3);
  }
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("mtci-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<double> to_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace mtci::testing
