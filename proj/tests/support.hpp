#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unistd.h>

#include "txm/random.hpp"
#include "txm/stack.hpp"

namespace testing {

// Scratch directory removed on scope exit.
class TempDir {
public:
  TempDir()
  {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("txm_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir()
  {
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

inline std::vector<char> read_bytes(const std::filesystem::path& p)
{
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed)
{
  txm::Rng rng(seed);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  return m;
}

// Orthonormal columns from a seeded Gaussian matrix.
inline Eigen::MatrixXd random_orthonormal(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed)
{
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian_matrix(rows, cols, seed));
  return qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
}

inline txm::ImageStack random_stack(std::size_t w, std::size_t h, std::size_t t, std::uint64_t seed, double scale = 100.0)
{
  txm::Rng rng(seed);
  std::vector<float> data(w * h * t);
  for (float& v : data) v = static_cast<float>(scale * rng.uniform());
  return {w, h, t, std::move(data)};
}

inline txm::ImageStack add_noise(const txm::ImageStack& s, double sigma, std::uint64_t seed)
{
  txm::Rng rng(seed);
  std::vector<float> data(s.data().begin(), s.data().end());
  for (float& v : data) v = static_cast<float>(v + sigma * rng.normal());
  return s.with_data(std::move(data));
}

} // namespace testing
