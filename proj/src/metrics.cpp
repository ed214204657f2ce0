#include "txm/metrics.hpp"

#include <cmath>

#include "txm/error.hpp"

namespace txm {

namespace {

void check_pair(const ImageStack& a, const ImageStack& b, double peak)
{
  if (a.width() != b.width() || a.height() != b.height() || a.frames() != b.frames())
    throw InvalidArgument("metric inputs have different dimensions");
  if (!(peak > 0.0)) throw InvalidArgument("peak must be > 0");
}

double capped_psnr(double sse, std::size_t count, double peak)
{
  const double mse = sse / static_cast<double>(count);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

} // namespace

double fpsnr(const ImageStack& est, const ImageStack& gt, double peak)
{
  check_pair(est, gt, peak);
  const std::size_t T = gt.frames(), pixels = gt.pixels();
  double total = 0.0;
#pragma omp parallel for reduction(+ : total) schedule(static)
  for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(T); ++t) {
    const auto a = est.frame(static_cast<std::size_t>(t)), b = gt.frame(static_cast<std::size_t>(t));
    double sse = 0.0;
    for (std::size_t i = 0; i < pixels; ++i) {
      const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      sse += d * d;
    }
    total += capped_psnr(sse, pixels, peak);
  }
  return total / static_cast<double>(T);
}

double spsnr(const ImageStack& est, const ImageStack& gt, double peak)
{
  check_pair(est, gt, peak);
  const std::size_t T = gt.frames(), pixels = gt.pixels();
  std::vector<double> sse(pixels, 0.0);
  const auto a = est.data(), b = gt.data();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < pixels; ++i) {
      const double d = static_cast<double>(a[t * pixels + i]) - static_cast<double>(b[t * pixels + i]);
      sse[i] += d * d;
    }
  double total = 0.0;
  for (double s : sse) total += capped_psnr(s, T, peak);
  return total / static_cast<double>(pixels);
}

double map_correlation(const ChemicalMap& a, const ChemicalMap& b)
{
  if (a.width != b.width || a.height != b.height || a.values.size() != b.values.size())
    throw InvalidArgument("maps have different dimensions");
  auto valid = [](const ChemicalMap& m, std::size_t i) { return m.valid.empty() || m.valid[i] != 0; };
  std::size_t n = 0;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i)
    if (valid(a, i) && valid(b, i)) {
      ++n;
      ma += a.values[i];
      mb += b.values[i];
    }
  if (n < 2) throw Error("fewer than 2 mutually valid pixels");
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i)
    if (valid(a, i) && valid(b, i)) {
      const double da = a.values[i] - ma, db = b.values[i] - mb;
      sab += da * db;
      saa += da * da;
      sbb += db * db;
    }
  if (!(saa > 0.0) || !(sbb > 0.0)) throw Error("degenerate map: correlation is undefined for a constant map");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

} // namespace txm
