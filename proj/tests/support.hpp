// Shared helpers for the unit tests.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedalign/numerics/tensor.hpp"
#include "fedalign/rng.hpp"

namespace fedalign::testing {

inline std::vector<double> normals(Rng& rng, std::size_t n, double sd = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, sd);
  return v;
}

inline numerics::Tensor random_param(Rng& rng, numerics::Shape shape, double sd = 1.0) {
  const auto n = numerics::numel(shape);
  return numerics::Tensor::parameter(std::move(shape), normals(rng, n, sd));
}

inline numerics::Tensor random_const(Rng& rng, numerics::Shape shape, double sd = 1.0) {
  const auto n = numerics::numel(shape);
  return numerics::Tensor::constant(std::move(shape), normals(rng, n, sd));
}

// Rows drawn from a softmax of random logits, as a constant [rows, cols].
inline numerics::Tensor random_probs(Rng& rng, std::size_t rows, std::size_t cols, double spread = 1.5) {
  std::vector<double> v(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (v[r * cols + c] = std::exp(rng.normal(0.0, spread)));
    for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] /= s;
  }
  return numerics::Tensor::constant({rows, cols}, std::move(v));
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("fedalign_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace fedalign::testing
