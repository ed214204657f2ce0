#include "txm/subspace.hpp"

#include <algorithm>
#include <cmath>

#include "txm/error.hpp"
#include "txm/random.hpp"

namespace txm {

namespace {

void fix_signs(Eigen::MatrixXd& U, Eigen::MatrixXd& V)
{
  for (Index k = 0; k < U.cols(); ++k) {
    Index imax = 0;
    U.col(k).cwiseAbs().maxCoeff(&imax);
    if (U(imax, k) < 0.0) {
      U.col(k) = -U.col(k);
      V.col(k) = -V.col(k);
    }
  }
}

Eigen::MatrixXd thin_q(const Eigen::MatrixXd& Y)
{
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(Y);
  return qr.householderQ() * Eigen::MatrixXd::Identity(Y.rows(), Y.cols());
}

// Everything SURE needs that does not depend on delta.
struct SureTerms {
  std::vector<double> s;   // tie-separated, non-increasing
  std::vector<double> row; // sum_{j != i} s_i^2 / (s_i^2 - s_j^2), tail included
  double m = 0, n = 0;
  double tail_energy = 0.0;
};

SureTerms make_terms(std::span<const double> s, Index m, Index n, Index tail_count, double tail_energy)
{
  SureTerms t;
  t.s = separate_ties(s);
  t.m = static_cast<double>(m);
  t.n = static_cast<double>(n);
  t.tail_energy = tail_energy;
  const std::size_t r = t.s.size();
  const double tail_sq = tail_count > 0 ? tail_energy / static_cast<double>(tail_count) : 0.0;
  t.row.assign(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    const double si2 = t.s[i] * t.s[i];
    double acc = 0.0;
    for (std::size_t j = 0; j < r; ++j)
      if (j != i) acc += si2 / (si2 - t.s[j] * t.s[j]);
    if (tail_count > 0 && si2 != tail_sq) acc += static_cast<double>(tail_count) * si2 / (si2 - tail_sq);
    t.row[i] = acc;
  }
  return t;
}

double divergence(const SureTerms& t, double delta)
{
  const double per_component = 1.0 + std::abs(t.m - t.n);
  double div = 0.0;
  for (std::size_t i = 0; i < t.s.size(); ++i)
    if (t.s[i] > delta) div += per_component + 2.0 * t.row[i];
  return div;
}

double sure_value(const SureTerms& t, double sigma, double delta)
{
  double residual = t.tail_energy;
  for (double v : t.s)
    if (v <= delta) residual += v * v;
  const double s2 = sigma * sigma;
  return -t.m * t.n * s2 + residual + 2.0 * s2 * divergence(t, delta);
}

Index count_above(std::span<const double> s, double delta)
{
  return static_cast<Index>(std::count_if(s.begin(), s.end(), [delta](double v) { return v > delta; }));
}

std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

} // namespace

SubspaceDecomposition svd_thin(const StackMatrix& A)
{
  if (A.size() == 0) throw InvalidArgument("cannot factorize an empty matrix");
  if (!A.allFinite()) throw Error("matrix contains non-finite values");
  if (A.rows() < A.cols()) {
    SubspaceDecomposition t = svd_thin(A.transpose());
    SubspaceDecomposition d;
    d.U = std::move(t.V);
    d.V = std::move(t.U);
    d.s = std::move(t.s);
    d.full_rank = t.full_rank;
    fix_signs(d.U, d.V);
    return d;
  }

  const Index m = A.rows(), n = A.cols();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
  const Eigen::MatrixXd R = qr.matrixQR().topRows(n).triangularView<Eigen::Upper>();
  Eigen::BDCSVD<Eigen::MatrixXd> small(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
  if (small.info() != Eigen::Success) throw Error("SVD of the triangular factor did not converge");

  SubspaceDecomposition d;
  Eigen::MatrixXd lifted = Eigen::MatrixXd::Zero(m, n);
  lifted.topRows(n) = small.matrixU();
  d.U = qr.householderQ() * lifted;
  d.s = small.singularValues().cwiseMax(0.0);
  d.V = small.matrixV();
  d.full_rank = n;
  fix_signs(d.U, d.V);
  return d;
}

StackMatrix truncate(const SubspaceDecomposition& d, Index K)
{
  if (K < 1 || K > d.rank())
    throw InvalidArgument("truncation rank " + std::to_string(K) + " outside [1, " + std::to_string(d.rank()) + "]");
  return d.U.leftCols(K) * d.s.head(K).asDiagonal() * d.V.leftCols(K).transpose();
}

SubspaceDecomposition randomized_svd(ColumnSource& source, const RandomizedSvdOptions& opt)
{
  const Index m = source.rows(), n = source.cols();
  const Index k = opt.rank, l = opt.rank + opt.oversampling;
  if (k < 1 || opt.oversampling < 0 || l > std::min(m, n))
    throw InvalidArgument("randomized SVD needs 1 <= k and k + p <= min(rows, cols); got k=" + std::to_string(k) +
                          " p=" + std::to_string(opt.oversampling));
  if (opt.power_iterations < 0) throw InvalidArgument("power iterations must be >= 0");
  const Index block = std::max<Index>(1, opt.block_columns);

  Rng rng(opt.seed);
  Eigen::MatrixXd omega(n, l);
  for (Index t = 0; t < n; ++t)
    for (Index j = 0; j < l; ++j) omega(t, j) = rng.normal();

  double frob2 = 0.0;
  bool count_energy = true;
  Eigen::MatrixXd buffer;
  Eigen::VectorXd column(m);

  // A * right, accumulated one column of A at a time so that the sum order is
  // independent of the block size.
  auto times = [&](const Eigen::MatrixXd& right) {
    Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(m, l);
    for (Index first = 0; first < n; first += block) {
      const Index count = std::min(block, n - first);
      source.read(first, count, buffer);
      for (Index c = 0; c < count; ++c) {
        column = buffer.col(c);
        if (!column.allFinite()) throw Error("matrix contains non-finite values");
        if (count_energy) frob2 += column.squaredNorm();
        Y.noalias() += column * right.row(first + c);
      }
    }
    count_energy = false;
    return Y;
  };
  // A^T * Q, one row per column of A.
  auto transpose_times = [&](const Eigen::MatrixXd& Q) {
    Eigen::MatrixXd Z(n, Q.cols());
    for (Index first = 0; first < n; first += block) {
      const Index count = std::min(block, n - first);
      source.read(first, count, buffer);
      for (Index c = 0; c < count; ++c) {
        column = buffer.col(c);
        Z.row(first + c).noalias() = column.transpose() * Q;
      }
    }
    return Z;
  };

  Eigen::MatrixXd Y = times(omega);
  for (int i = 0; i < opt.power_iterations; ++i) {
    const Eigen::MatrixXd Qz = thin_q(transpose_times(thin_q(Y)));
    Y = times(Qz);
  }
  const Eigen::MatrixXd Q = thin_q(Y);
  const Eigen::MatrixXd B = transpose_times(Q).transpose(); // l x n

  Eigen::BDCSVD<Eigen::MatrixXd> small(B, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (small.info() != Eigen::Success) throw Error("SVD of the projected matrix did not converge");

  SubspaceDecomposition d;
  d.U = Q * small.matrixU().leftCols(k);
  d.s = small.singularValues().head(k).cwiseMax(0.0);
  d.V = small.matrixV().leftCols(k);
  d.full_rank = std::min(m, n);
  d.tail_energy = std::max(0.0, frob2 - d.s.squaredNorm());
  fix_signs(d.U, d.V);
  return d;
}

SubspaceDecomposition randomized_svd(const StackMatrix& A, Index k, Index p, int q, std::uint64_t seed)
{
  MatrixColumnSource source(A);
  return randomized_svd(source, {k, p, q, seed, 16});
}

std::vector<double> separate_ties(std::span<const double> s)
{
  std::vector<double> out(s.begin(), s.end());
  if (out.empty()) return out;
  const double s_max = *std::max_element(out.begin(), out.end());
  const double gap = 1e-9 * s_max;
  if (gap <= 0.0) return out;
  for (std::size_t i = out.size() - 1; i-- > 0;)
    if (out[i] - out[i + 1] < gap) out[i] = out[i + 1] + gap;
  return out;
}

double hard_threshold_divergence(std::span<const double> s, Index m, Index n, double delta)
{
  if (static_cast<Index>(s.size()) != std::min(m, n)) throw InvalidArgument("divergence needs all min(m, n) singular values");
  return divergence(make_terms(s, m, n, 0, 0.0), delta);
}

double sure_hard_threshold(std::span<const double> s, Index m, Index n, double sigma, double delta)
{
  if (!(sigma > 0.0)) throw InvalidArgument("SURE needs sigma > 0; use a fixed-rank threshold when the noise level is zero");
  if (static_cast<Index>(s.size()) != std::min(m, n)) throw InvalidArgument("SURE needs all min(m, n) singular values");
  return sure_value(make_terms(s, m, n, 0, 0.0), sigma, delta);
}

SureReport select_rank(const SubspaceDecomposition& d, double sigma, const ThresholdConfig& cfg)
{
  using Mode = ThresholdConfig::Mode;
  if (cfg.mode == Mode::sure_auto && !(sigma > 0.0))
    throw InvalidArgument("automatic rank selection needs sigma > 0; use a fixed rank instead");
  if (cfg.mode == Mode::fixed_rank && (cfg.rank < 1 || cfg.rank > d.rank()))
    throw InvalidArgument("fixed rank " + std::to_string(cfg.rank) + " outside [1, " + std::to_string(d.rank()) + "]");
  if (cfg.mode == Mode::fixed_threshold && !(cfg.threshold >= 0.0)) throw InvalidArgument("fixed threshold must be >= 0");

  const std::vector<double> raw = to_vector(d.s);
  const SureTerms terms = make_terms(raw, d.rows(), d.cols(), d.full_rank - d.rank(), d.tail_energy);
  const std::vector<double>& s = terms.s;
  const std::size_t r = s.size();

  SureReport report;
  if (r > 0) {
    const double s_min = s.back(), s_max = s.front();
    report.delta.push_back(s_min > 0.0 ? 0.5 * s_min : s_min - 1.0);
    for (std::size_t i = r - 1; i > 0; --i) report.delta.push_back(0.5 * (s[i] + s[i - 1]));
    report.delta.push_back(s_max > 0.0 ? 1.5 * s_max : 1.0);
  } else {
    report.delta.push_back(1.0);
  }
  for (double delta : report.delta) report.rank.push_back(count_above(s, delta));
  if (sigma > 0.0)
    for (double delta : report.delta) report.sure.push_back(sure_value(terms, sigma, delta));

  switch (cfg.mode) {
  case Mode::sure_auto: {
    std::size_t best = 0;
    for (std::size_t i = 1; i < report.sure.size(); ++i)
      if (report.sure[i] <= report.sure[best]) best = i;
    report.selected_delta = report.delta[best];
    report.selected_k = report.rank[best];
    break;
  }
  case Mode::fixed_rank: {
    const auto K = static_cast<std::size_t>(cfg.rank);
    report.selected_k = cfg.rank;
    report.selected_delta = K < r ? 0.5 * (s[K - 1] + s[K]) : report.delta.front();
    break;
  }
  case Mode::fixed_threshold:
    report.selected_delta = cfg.threshold;
    report.selected_k = count_above(raw, cfg.threshold);
    break;
  }
  report.empty_subspace = report.selected_k == 0;
  return report;
}

std::vector<double> true_mse_curve(const SubspaceDecomposition& d, const StackMatrix& truth, const SureReport& report)
{
  if (truth.rows() != d.rows() || truth.cols() != d.cols()) throw InvalidArgument("truth shape does not match decomposition");
  // ||X - sum_k s_k u_k v_k^T||^2 = ||X||^2 - 2 sum_k s_k u_k^T X v_k + sum_k s_k^2
  const Eigen::MatrixXd XV = truth * d.V;
  std::vector<double> partial(static_cast<std::size_t>(d.rank()) + 1);
  partial[0] = truth.squaredNorm();
  for (Index k = 0; k < d.rank(); ++k) {
    const double proj = d.U.col(k).dot(XV.col(k));
    partial[static_cast<std::size_t>(k) + 1] = partial[static_cast<std::size_t>(k)] - 2.0 * d.s(k) * proj + d.s(k) * d.s(k);
  }
  std::vector<double> out;
  out.reserve(report.rank.size());
  for (Index K : report.rank) out.push_back(partial[static_cast<std::size_t>(K)]);
  return out;
}

nlohmann::ordered_json to_json(const SureReport& report)
{
  nlohmann::ordered_json j;
  j["delta"] = report.delta;
  j["sure"] = report.sure;
  j["rank"] = report.rank;
  if (report.mse) j["mse"] = *report.mse;
  j["selected_delta"] = report.selected_delta;
  j["selected_k"] = report.selected_k;
  j["empty_subspace"] = report.empty_subspace;
  return j;
}

} // namespace txm
