#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "txm/error.hpp"
#include "txm/phantom.hpp"
#include "txm/sum.hpp"

using namespace txm;

namespace {

// Sum of `rank` separable image x spectrum products, values around 100.
ImageStack low_rank_stack(std::size_t w, std::size_t h, std::size_t t, int rank, std::uint64_t seed)
{
  Rng rng(seed);
  std::vector<double> data(w * h * t, 0.0);
  for (int r = 0; r < rank; ++r) {
    std::vector<double> img(w * h), spec(t);
    for (double& v : img) v = rng.uniform();
    for (double& v : spec) v = rng.uniform();
    for (std::size_t k = 0; k < t; ++k)
      for (std::size_t p = 0; p < w * h; ++p) data[k * w * h + p] += 100.0 / (r + 1) * img[p] * spec[k];
  }
  return {w, h, t, std::vector<float>(data.begin(), data.end())};
}

double max_rel_diff(const ImageStack& a, const ImageStack& b)
{
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(double(a.data()[i]) - double(b.data()[i])));
    den = std::max(den, std::abs(double(b.data()[i])));
  }
  return num / den;
}

SumConfig identity_config(ThresholdConfig threshold, std::optional<double> sigma)
{
  SumConfig cfg;
  cfg.denoiser = DenoiserSpec::identity();
  cfg.threshold = threshold;
  cfg.sigma = sigma;
  return cfg;
}

bool bitwise_equal(const ImageStack& a, const ImageStack& b)
{
  return a.size() == b.size() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

} // namespace

TEST_CASE("noiseless rank-one stack is a fixed point")
{
  const ImageStack s = low_rank_stack(12, 10, 9, 1, 1);
  const SumResult r = sum_denoise(s, identity_config(ThresholdConfig::sure_auto(), 1e-6));
  CHECK(r.report.k == 1);
  CHECK(max_rel_diff(r.stack, s) <= 1e-5);
}

TEST_CASE("full rank with the identity denoiser reconstructs the input")
{
  const ImageStack s = testing::random_stack(9, 8, 10, 2);
  const SumResult r = sum_denoise(s, identity_config(ThresholdConfig::fixed_rank(10), std::nullopt));
  CHECK(max_rel_diff(r.stack, s) <= 1e-5);
  CHECK(r.report.noise.source == NoiseSource::estimated);
}

TEST_CASE("identity denoiser with SURE equals SVD truncation")
{
  const ImageStack clean = low_rank_stack(16, 16, 20, 3, 3);
  const ImageStack noisy = testing::add_noise(clean, 2.0, 4);
  const SumResult r = sum_denoise(noisy, identity_config(ThresholdConfig::sure_auto(), 2.0));
  const SubspaceDecomposition d = svd_thin(to_matrix(noisy));
  const SureReport sure = select_rank(d, 2.0, ThresholdConfig::sure_auto());
  REQUIRE(r.report.k == sure.selected_k);
  const ImageStack expected = from_matrix(truncate(d, sure.selected_k), 16, 16);
  CHECK(max_rel_diff(r.stack, expected) <= 1e-5);
}

TEST_CASE("frame permutation commutes with denoising")
{
  const ImageStack clean = low_rank_stack(24, 24, 16, 3, 5);
  const ImageStack noisy = testing::add_noise(clean, 5.0, 6);
  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[2], perm[9]);

  SumConfig cfg;
  cfg.denoiser = DenoiserSpec::blur(2);
  cfg.sigma = 5.0;
  const ImageStack direct = sum_denoise(noisy, cfg).stack;
  const ImageStack permuted = sum_denoise(select_frames(noisy, perm), cfg).stack;
  std::vector<std::size_t> inverse(16);
  for (std::size_t i = 0; i < 16; ++i) inverse[perm[i]] = i;
  CHECK(max_rel_diff(select_frames(permuted, inverse), direct) <= 1e-4);
}

TEST_CASE("adding a constant shifts the output by that constant")
{
  const ImageStack s = low_rank_stack(16, 12, 10, 3, 7);
  std::vector<float> shifted(s.data().begin(), s.data().end());
  for (float& v : shifted) v += 50.0f;
  const SumConfig cfg = identity_config(ThresholdConfig::fixed_rank(4), 1.0);
  const ImageStack a = sum_denoise(s, cfg).stack;
  const ImageStack b = sum_denoise(s.with_data(shifted), cfg).stack;
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(b.data()[i] - a.data()[i] - 50.0f) <= 1e-4 * 200.0);
}

TEST_CASE("absurd sigma yields the zero stack with a warning flag")
{
  const ImageStack s = testing::random_stack(8, 8, 8, 8);
  SumConfig cfg;
  cfg.sigma = 1e6;
  const SumResult r = sum_denoise(s, cfg);
  CHECK(r.report.k == 0);
  CHECK(r.report.empty_subspace);
  CHECK(std::all_of(r.stack.data().begin(), r.stack.data().end(), [](float v) { return v == 0.0f; }));
  CHECK(to_json(r.report)["empty_subspace"] == true);
}

TEST_CASE("sure-auto with zero sigma is rejected")
{
  const ImageStack s = testing::random_stack(8, 8, 8, 9);
  CHECK_THROWS_AS(sum_denoise(s, identity_config(ThresholdConfig::sure_auto(), 0.0)), InvalidArgument);
}

TEST_CASE("report contents")
{
  const ImageStack noisy = testing::add_noise(low_rank_stack(32, 32, 12, 2, 10), 3.0, 11);
  SumConfig cfg;
  cfg.denoiser = DenoiserSpec::wavelet(2);
  const SumResult r = sum_denoise(noisy, cfg);
  CHECK(r.report.k >= 1);
  CHECK(r.report.denoise_seconds.size() == static_cast<std::size_t>(r.report.k));
  CHECK(r.report.total_seconds >= 0.0);
  CHECK(r.report.noise.sigma > 0.0);
  const auto j = to_json(r.report);
  for (const char* key : {"selected_k", "selected_delta", "sigma", "sigma_source", "denoiser", "factorization", "empty_subspace",
                          "total_seconds", "sure"})
    CHECK_MESSAGE(j.contains(key), key);
  CHECK(j["sigma_source"] == "estimated");
  CHECK(j["denoiser"] == "wavelet:2");
  CHECK(j["sure"]["selected_k"] == r.report.k);
}

TEST_CASE("output keeps dimensions and energies")
{
  std::vector<double> e(10);
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = 8300.0 + 5.0 * static_cast<double>(i);
  const ImageStack base = testing::random_stack(8, 6, 10, 12);
  const ImageStack s(8, 6, 10, std::vector<float>(base.data().begin(), base.data().end()), e, 200.0);
  const ImageStack out = sum_denoise(s, identity_config(ThresholdConfig::fixed_rank(3), 1.0)).stack;
  CHECK(out.width() == 8);
  CHECK(out.height() == 6);
  CHECK(out.frames() == 10);
  CHECK(out.energies() == s.energies());
  CHECK(out.peak() == 200.0);
}

TEST_CASE("factorization strings")
{
  CHECK(Factorization::parse("exact").kind == Factorization::Kind::exact);
  const auto f = Factorization::parse("rsvd:12,5,1,9");
  CHECK(f.kind == Factorization::Kind::randomized);
  CHECK(f.rank == 12);
  CHECK(f.oversampling == 5);
  CHECK(f.power_iterations == 1);
  CHECK(f.seed == 9);
  CHECK(Factorization::parse(f.to_string()).to_string() == f.to_string());
  const auto defaults = Factorization::parse("rsvd:30");
  CHECK(defaults.rank == 30);
  CHECK(defaults.oversampling == 10);
  CHECK(defaults.power_iterations == 2);
  for (const char* bad : {"", "svd", "rsvd:", "rsvd:a", "rsvd:8,1,1,1,1", "exactly"})
    CHECK_THROWS_AS(Factorization::parse(bad), InvalidArgument);
  SumConfig cfg;
  cfg.factorization = Factorization::randomized(4);
  CHECK_THROWS_AS(sum_denoise(testing::random_stack(8, 8, 10, 1), cfg), InvalidArgument);
}

TEST_CASE("randomized in-memory run is deterministic")
{
  const ImageStack noisy = testing::add_noise(low_rank_stack(20, 20, 24, 3, 13), 4.0, 14);
  SumConfig cfg;
  cfg.denoiser = DenoiserSpec::wavelet(2);
  cfg.factorization = Factorization::randomized(8, 4, 1, 3);
  CHECK(bitwise_equal(sum_denoise(noisy, cfg).stack, sum_denoise(noisy, cfg).stack));
}

TEST_CASE("streaming equals in-memory bitwise and ignores block size")
{
  testing::TempDir dir;
  const ImageStack noisy = testing::add_noise(low_rank_stack(20, 18, 30, 3, 15), 4.0, 16);
  save_stack(noisy, dir / "in");

  SumConfig cfg;
  cfg.denoiser = DenoiserSpec::nlm(5, 11, 0.55);
  cfg.factorization = Factorization::randomized(8, 4, 1, 7);
  const SumResult memory = sum_denoise(noisy, cfg);

  for (Index block : {1, 7, 16, 64}) {
    CAPTURE(block);
    cfg.block_columns = block;
    const SumReport report = sum_denoise_streaming(dir / "in", dir / "out", cfg);
    CHECK(report.k == memory.report.k);
    CHECK(report.noise.sigma == memory.report.noise.sigma);
    CHECK(bitwise_equal(load_stack(dir / "out"), memory.stack));
  }
}

TEST_CASE("streaming argument checks")
{
  testing::TempDir dir;
  save_stack(testing::random_stack(8, 8, 10, 17), dir / "in");
  SumConfig cfg;
  CHECK_THROWS_AS(sum_denoise_streaming(dir / "in", dir / "out", cfg), InvalidArgument);
  cfg.factorization = Factorization::randomized(8);
  CHECK_THROWS_AS(sum_denoise_streaming(dir / "in", dir / "in.json", cfg), InvalidArgument);
  CHECK_THROWS_AS(sum_denoise_streaming(dir / "missing", dir / "out", cfg), Error);
}

TEST_CASE("SUM beats plain truncation on a small phantom")
{
  PhantomSpec spec;
  spec.width = 64;
  spec.height = 64;
  spec.frames = 48;
  spec.sigma = 60.0;
  spec.seed = 3;
  const Phantom p = generate(spec);
  SumConfig sum_cfg;
  sum_cfg.sigma = 60.0;
  const ImageStack sum = sum_denoise(p.noisy, sum_cfg).stack;
  const ImageStack svd = sum_denoise(p.noisy, identity_config(ThresholdConfig::sure_auto(), 60.0)).stack;
  auto err = [&](const ImageStack& s) {
    double e = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) e += std::pow(double(s.data()[i]) - p.truth.clean.data()[i], 2);
    return e;
  };
  CHECK(err(sum) < err(svd));
  CHECK(err(svd) < err(p.noisy));
}
