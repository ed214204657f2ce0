#include "txm/registration.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <cstdlib>

#include <fftw3.h>

#include "txm/error.hpp"

namespace txm {

namespace {

// FFTW planning is not thread-safe; execution with the new-array API is.
std::mutex& plan_mutex()
{
  static std::mutex m;
  return m;
}

bool is_constant(std::span<const float> v)
{
  return std::all_of(v.begin(), v.end(), [&](float x) { return x == v.front(); });
}

// Periodic Hann window; a length-1 axis is left untouched.
std::vector<double> hann(std::size_t n)
{
  std::vector<double> w(n, 1.0);
  if (n < 2) return w;
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * (static_cast<double>(i) + 0.5) / static_cast<double>(n));
  return w;
}

int signed_index(std::size_t i, std::size_t n)
{
  return i > n / 2 ? static_cast<int>(i) - static_cast<int>(n) : static_cast<int>(i);
}

bool preferred(const Shift& a, const Shift& b)
{
  const int na = std::abs(a.dx) + std::abs(a.dy), nb = std::abs(b.dx) + std::abs(b.dy);
  if (na != nb) return na < nb;
  return a.dx != b.dx ? a.dx < b.dx : a.dy < b.dy;
}

} // namespace

PhaseCorrelator::PhaseCorrelator(std::span<const float> reference, std::size_t width, std::size_t height)
  : width_(width), height_(height), half_(width / 2 + 1)
{
  if (reference.size() != width * height || reference.empty()) throw InvalidArgument("reference size does not match width*height");
  if (is_constant(reference)) throw Error("phase correlation is undefined for a constant reference");
  real_ = fftw_alloc_real(width * height);
  auto* spectrum = fftw_alloc_complex(height * half_);
  spectrum_ = spectrum;
  {
    std::lock_guard lock(plan_mutex());
    forward_ = fftw_plan_dft_r2c_2d(static_cast<int>(height), static_cast<int>(width), real_, spectrum, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_2d(static_cast<int>(height), static_cast<int>(width), spectrum, real_, FFTW_ESTIMATE);
  }
  if (!forward_ || !inverse_) throw Error("FFT planning failed");
  window_x_ = hann(width);
  window_y_ = hann(height);
  load(reference);
  fftw_execute(static_cast<fftw_plan>(forward_));
  ref_spectrum_.resize(height * half_);
  for (std::size_t i = 0; i < ref_spectrum_.size(); ++i) ref_spectrum_[i] = {spectrum[i][0], spectrum[i][1]};
}

PhaseCorrelator::~PhaseCorrelator()
{
  {
    std::lock_guard lock(plan_mutex());
    if (forward_) fftw_destroy_plan(static_cast<fftw_plan>(forward_));
    if (inverse_) fftw_destroy_plan(static_cast<fftw_plan>(inverse_));
  }
  fftw_free(real_);
  fftw_free(spectrum_);
}

// Mean removal and a Hann taper hide the wrap-around discontinuity and the
// reflected border strips, which would otherwise pin the peak at zero shift.
void PhaseCorrelator::load(std::span<const float> image)
{
  double mean = 0.0;
  for (float v : image) mean += v;
  mean /= static_cast<double>(image.size());
  for (std::size_t y = 0; y < height_; ++y)
    for (std::size_t x = 0; x < width_; ++x)
      real_[y * width_ + x] = (image[y * width_ + x] - mean) * window_x_[x] * window_y_[y];
}

void PhaseCorrelator::correlate(std::span<const float> frame)
{
  if (frame.size() != width_ * height_) throw InvalidArgument("frame size does not match reference");
  if (is_constant(frame)) throw Error("phase correlation is undefined for a constant frame");
  load(frame);
  fftw_execute(static_cast<fftw_plan>(forward_));
  auto* spectrum = static_cast<fftw_complex*>(spectrum_);
  double largest = 0.0;
  for (std::size_t i = 0; i < ref_spectrum_.size(); ++i) {
    const std::complex<double> cross = std::complex<double>(spectrum[i][0], spectrum[i][1]) * std::conj(ref_spectrum_[i]);
    largest = std::max(largest, std::abs(cross));
  }
  const double floor = 1e-15 * largest;
  for (std::size_t i = 0; i < ref_spectrum_.size(); ++i) {
    std::complex<double> cross = std::complex<double>(spectrum[i][0], spectrum[i][1]) * std::conj(ref_spectrum_[i]);
    const double mag = std::abs(cross);
    cross = mag > floor ? cross / mag : 0.0;
    spectrum[i][0] = cross.real();
    spectrum[i][1] = cross.imag();
  }
  fftw_execute(static_cast<fftw_plan>(inverse_));
}

Shift PhaseCorrelator::peak() const
{
  const std::size_t n = width_ * height_;
  const double top = *std::max_element(real_, real_ + n);
  const double tol = 1e-9 * std::abs(top);
  Shift best{};
  bool found = false;
  for (std::size_t y = 0; y < height_; ++y)
    for (std::size_t x = 0; x < width_; ++x) {
      if (real_[y * width_ + x] < top - tol) continue;
      const Shift s{signed_index(x, width_), signed_index(y, height_)};
      if (!found || preferred(s, best)) best = s;
      found = true;
    }
  return best;
}

Shift PhaseCorrelator::estimate(std::span<const float> frame)
{
  correlate(frame);
  return peak();
}

SubpixelShift PhaseCorrelator::estimate_subpixel(std::span<const float> frame)
{
  correlate(frame);
  const Shift s = peak();
  const auto w = static_cast<std::ptrdiff_t>(width_), h = static_cast<std::ptrdiff_t>(height_);
  auto at = [&](std::ptrdiff_t dx, std::ptrdiff_t dy) {
    return real_[static_cast<std::size_t>(((dy % h + h) % h) * w + ((dx % w + w) % w))];
  };
  auto vertex = [](double left, double centre, double right) {
    const double denom = left - 2.0 * centre + right;
    return denom < 0.0 ? std::clamp(0.5 * (left - right) / denom, -0.5, 0.5) : 0.0;
  };
  const double c = at(s.dx, s.dy);
  SubpixelShift out{static_cast<double>(s.dx), static_cast<double>(s.dy)};
  if (width_ >= 3) out.dx += vertex(at(s.dx - 1, s.dy), c, at(s.dx + 1, s.dy));
  if (height_ >= 3) out.dy += vertex(at(s.dx, s.dy - 1), c, at(s.dx, s.dy + 1));
  return out;
}

Shift estimate_shift(std::span<const float> frame, std::span<const float> reference, std::size_t width, std::size_t height)
{
  PhaseCorrelator pc(reference, width, height);
  return pc.estimate(frame);
}

SubpixelShift estimate_shift_subpixel(std::span<const float> frame, std::span<const float> reference, std::size_t width,
                                      std::size_t height)
{
  PhaseCorrelator pc(reference, width, height);
  return pc.estimate_subpixel(frame);
}

std::vector<float> temporal_median(const ImageStack& stack)
{
  const std::size_t pixels = stack.pixels(), T = stack.frames();
  std::vector<float> out(pixels);
  const auto data = stack.data();
#pragma omp parallel
  {
    std::vector<double> values(T);
#pragma omp for schedule(static)
    for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(pixels); ++p) {
      for (std::size_t t = 0; t < T; ++t) values[t] = data[t * pixels + static_cast<std::size_t>(p)];
      out[static_cast<std::size_t>(p)] = static_cast<float>(median_of(values));
    }
  }
  return out;
}

namespace {

// Frame rescaled to zero mean and unit deviation; constant frames become zero.
std::vector<float> standardized(std::span<const float> frame)
{
  double mean = 0.0, sq = 0.0;
  for (float v : frame) mean += v;
  mean /= static_cast<double>(frame.size());
  for (float v : frame) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(frame.size()));
  std::vector<float> out(frame.size(), 0.0f);
  if (sd > 0.0)
    for (std::size_t i = 0; i < frame.size(); ++i) out[i] = static_cast<float>((frame[i] - mean) / sd);
  return out;
}

// Standardized frames, each first moved back by its shift.
std::vector<float> aligned_frames(const ImageStack& stack, const std::vector<Shift>& shifts)
{
  const std::size_t pixels = stack.pixels(), T = stack.frames();
  std::vector<float> frames(stack.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t tt = 0; tt < static_cast<std::ptrdiff_t>(T); ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    std::vector<float> z = standardized(stack.frame(t));
    if (!(shifts[t] == Shift{})) z = translate_frame(z, stack.width(), stack.height(), -shifts[t].dx, -shifts[t].dy);
    std::copy(z.begin(), z.end(), frames.begin() + static_cast<std::ptrdiff_t>(t * pixels));
  }
  return frames;
}

// Reference t is the median of every aligned frame except t. Including the
// frame itself would put its own noise in the reference, and after phase
// whitening that noise alone produces a peak at zero shift.
std::vector<float> leave_one_out_medians(const std::vector<float>& frames, std::size_t pixels, std::size_t T)
{
  std::vector<float> out(frames.size());
#pragma omp parallel
  {
    std::vector<std::pair<float, std::size_t>> column(T);
    std::vector<float> rest(T - 1);
#pragma omp for schedule(static)
    for (std::ptrdiff_t pp = 0; pp < static_cast<std::ptrdiff_t>(pixels); ++pp) {
      const auto p = static_cast<std::size_t>(pp);
      for (std::size_t t = 0; t < T; ++t) column[t] = {frames[t * pixels + p], t};
      std::sort(column.begin(), column.end());
      const std::size_t n = T - 1;
      for (std::size_t r = 0; r < T; ++r) {
        // Sorted values with rank r removed.
        auto at = [&](std::size_t i) { return column[i < r ? i : i + 1].first; };
        const double m = n % 2 ? at(n / 2) : 0.5 * (static_cast<double>(at(n / 2 - 1)) + at(n / 2));
        out[column[r].second * pixels + p] = static_cast<float>(m);
      }
    }
  }
  return out;
}

std::vector<Shift> estimate_all(const ImageStack& stack, const std::vector<Shift>& previous)
{
  const std::size_t pixels = stack.pixels();
  const std::vector<float> references = leave_one_out_medians(aligned_frames(stack, previous), pixels, stack.frames());
  std::vector<Shift> shifts(stack.frames());
  std::exception_ptr failure;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t tt = 0; tt < static_cast<std::ptrdiff_t>(stack.frames()); ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    const auto frame = stack.frame(t);
    if (is_constant(frame)) continue;
    try {
      PhaseCorrelator pc(std::span<const float>(references).subspan(t * pixels, pixels), stack.width(), stack.height());
      shifts[t] = pc.estimate(frame);
    } catch (...) {
#pragma omp critical
      failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return shifts;
}

} // namespace

JitterCorrection correct_jitter(const ImageStack& stack)
{
  if (stack.frames() < 2) throw InvalidArgument("jitter correction needs at least 2 frames");
  // Pass one against medians of the raw (standardized) frames, pass two
  // against medians of the frames aligned by pass one.
  std::vector<Shift> shifts = estimate_all(stack, estimate_all(stack, std::vector<Shift>(stack.frames())));

  const std::size_t pixels = stack.pixels();
  std::vector<float> out(stack.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t tt = 0; tt < static_cast<std::ptrdiff_t>(stack.frames()); ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    const auto frame = stack.frame(t);
    const auto moved = shifts[t] == Shift{} ? std::vector<float>(frame.begin(), frame.end())
                                            : translate_frame(frame, stack.width(), stack.height(), -shifts[t].dx, -shifts[t].dy);
    std::copy(moved.begin(), moved.end(), out.begin() + static_cast<std::ptrdiff_t>(t * pixels));
  }
  return {stack.with_data(std::move(out)), std::move(shifts)};
}

double shift_recovery_rate(const std::vector<Shift>& estimated, const std::vector<Shift>& truth)
{
  if (estimated.size() != truth.size() || truth.empty()) throw InvalidArgument("shift lists must be non-empty and of equal length");
  std::map<std::pair<int, int>, std::size_t> counts;
  for (std::size_t t = 0; t < truth.size(); ++t) ++counts[{estimated[t].dx - truth[t].dx, estimated[t].dy - truth[t].dy}];
  std::size_t best = 0;
  for (const auto& [offset, n] : counts) best = std::max(best, n);
  return static_cast<double>(best) / static_cast<double>(truth.size());
}

} // namespace txm
