#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "txm/denoisers.hpp"
#include "txm/stack.hpp"
#include "txm/subspace.hpp"

namespace txm {

struct Factorization {
  enum class Kind { exact, randomized };
  Kind kind = Kind::exact;
  Index rank = 20;
  Index oversampling = 10;
  int power_iterations = 2;
  std::uint64_t seed = 0;

  static Factorization exact() { return {}; }
  static Factorization randomized(Index k, Index p = 10, int q = 2, std::uint64_t seed = 0)
  {
    return {Kind::randomized, k, p, q, seed};
  }
  // "exact" or "rsvd:k,p,q,seed" (trailing fields optional).
  static Factorization parse(std::string_view text);
  std::string to_string() const;
};

/// Frames of a stack container as matrix columns, read on demand.
class StackFileSource final : public ColumnSource {
public:
  explicit StackFileSource(FrameReader& reader);
  Index rows() const override;
  Index cols() const override;
  void read(Index first, Index count, Eigen::MatrixXd& block) override;

private:
  FrameReader& reader_;
  std::vector<float> buffer_;
};

struct SumConfig {
  DenoiserSpec denoiser;
  ThresholdConfig threshold;
  std::optional<double> sigma; // estimated from the data when absent
  Factorization factorization;
  Index block_columns = 16;    // frames per read in the randomized passes
};

struct SumReport {
  Index k = 0;
  double delta = 0.0;
  NoiseModel noise;
  std::string denoiser;
  std::string factorization;
  std::vector<double> denoise_seconds; // one entry per retained coefficient image
  double factorize_seconds = 0.0;
  double reconstruct_seconds = 0.0;
  double total_seconds = 0.0;
  bool empty_subspace = false;
  SureReport sure;
};

struct SumResult {
  ImageStack stack;
  SumReport report;
};

/// Factorize, pick the subspace, denoise each retained spatial coefficient
/// image s_k * U_k (reshaped to the frame grid) and reconstruct against V.
/// K = 0 returns the zero stack with report.empty_subspace set.
SumResult sum_denoise(const ImageStack& stack, const SumConfig& cfg);

/// Same computation with a randomized factorization that reads the input
/// container in frame blocks and writes the output frame by frame. For a
/// given config the output is bitwise equal to sum_denoise.
SumReport sum_denoise_streaming(const std::filesystem::path& input, const std::filesystem::path& output, const SumConfig& cfg);

nlohmann::ordered_json to_json(const SumReport& report);

} // namespace txm
