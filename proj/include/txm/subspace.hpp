#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "txm/stack.hpp"

namespace txm {

using Index = Eigen::Index;

/// A = U diag(s) V^T with orthonormal columns in U and V and s non-increasing.
/// For randomized factorizations only the leading `rank()` triplets are
/// present; `full_rank` and `tail_energy` describe what was left out.
struct SubspaceDecomposition {
  Eigen::MatrixXd U;
  Eigen::VectorXd s;
  Eigen::MatrixXd V;
  Index full_rank = 0;      // min(rows, cols) of the factorized matrix
  double tail_energy = 0.0; // sum of squared singular values not in s

  Index rows() const { return U.rows(); }
  Index cols() const { return V.rows(); }
  Index rank() const { return s.size(); }
  bool exact() const { return rank() == full_rank; }
};

/// Exact thin SVD. Tall inputs go through a Householder QR followed by an SVD of
/// the small triangular factor; wide inputs are transposed. Each U column is
/// signed so that its largest-magnitude entry is positive.
SubspaceDecomposition svd_thin(const StackMatrix& A);

/// Sum of the leading K rank-one terms.
StackMatrix truncate(const SubspaceDecomposition& d, Index K);

/// Frames (columns) of a matrix visited in blocks; lets the randomized SVD
/// run without holding the matrix in memory.
class ColumnSource {
public:
  virtual ~ColumnSource() = default;
  virtual Index rows() const = 0;
  virtual Index cols() const = 0;
  /// Fill `block` (rows x count) with columns [first, first + count).
  virtual void read(Index first, Index count, Eigen::MatrixXd& block) = 0;
};

class MatrixColumnSource final : public ColumnSource {
public:
  explicit MatrixColumnSource(const StackMatrix& m) : m_(m) {}
  Index rows() const override { return m_.rows(); }
  Index cols() const override { return m_.cols(); }
  void read(Index first, Index count, Eigen::MatrixXd& block) override { block = m_.middleCols(first, count); }

private:
  const StackMatrix& m_;
};

struct RandomizedSvdOptions {
  Index rank = 20;
  Index oversampling = 10;
  int power_iterations = 2;
  std::uint64_t seed = 0;
  Index block_columns = 16;
};

/// Randomized range finder with power iterations. The result only depends on
/// the options (not on block_columns): every pass accumulates column by column.
SubspaceDecomposition randomized_svd(ColumnSource& source, const RandomizedSvdOptions& options);
SubspaceDecomposition randomized_svd(const StackMatrix& A, Index k, Index p, int q, std::uint64_t seed);

/// Singular values nudged apart so that no two are closer than 1e-9 * s_max.
/// Input must be sorted non-increasing.
std::vector<double> separate_ties(std::span<const double> s);

/// Divergence of singular-value hard thresholding at delta for an m x n matrix
/// whose singular values are s (all min(m, n) of them).
double hard_threshold_divergence(std::span<const double> s, Index m, Index n, double delta);

/// Stein's unbiased estimate of ||hard_threshold(Y, delta) - X||_F^2.
double sure_hard_threshold(std::span<const double> s, Index m, Index n, double sigma, double delta);

struct ThresholdConfig {
  enum class Mode { sure_auto, fixed_rank, fixed_threshold };
  Mode mode = Mode::sure_auto;
  Index rank = 0;
  double threshold = 0.0;

  static ThresholdConfig sure_auto() { return {}; }
  static ThresholdConfig fixed_rank(Index k) { return {Mode::fixed_rank, k, 0.0}; }
  static ThresholdConfig fixed_threshold(double delta) { return {Mode::fixed_threshold, 0, delta}; }
};

struct SureReport {
  std::vector<double> delta; // candidate thresholds, ascending
  std::vector<double> sure;  // SURE at each candidate (empty when sigma == 0)
  std::vector<Index> rank;   // retained count at each candidate
  std::optional<std::vector<double>> mse;
  double selected_delta = 0.0;
  Index selected_k = 0;
  bool empty_subspace = false;
};

/// Candidate grid: one point below the smallest singular value, midpoints of
/// consecutive values, one point above the largest. The minimizer of SURE is
/// selected, ties going to the larger threshold.
SureReport select_rank(const SubspaceDecomposition& d, double sigma, const ThresholdConfig& cfg);

/// ||truncate(d, K(delta)) - truth||_F^2 for every candidate in the report.
std::vector<double> true_mse_curve(const SubspaceDecomposition& d, const StackMatrix& truth, const SureReport& report);

nlohmann::ordered_json to_json(const SureReport& report);

} // namespace txm
