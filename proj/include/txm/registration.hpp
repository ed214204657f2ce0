#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "txm/phantom.hpp"
#include "txm/stack.hpp"

namespace txm {

struct SubpixelShift {
  double dx = 0.0, dy = 0.0;
};

/// Phase correlation against one fixed reference frame. The reference
/// spectrum is computed once; estimate() may be called repeatedly but a
/// single instance is not safe for concurrent use.
class PhaseCorrelator {
public:
  PhaseCorrelator(std::span<const float> reference, std::size_t width, std::size_t height);
  ~PhaseCorrelator();
  PhaseCorrelator(const PhaseCorrelator&) = delete;
  PhaseCorrelator& operator=(const PhaseCorrelator&) = delete;

  /// Integer (dx, dy) with frame(x, y) ~ reference(x - dx, y - dy). Ties go
  /// to the smaller |dx| + |dy|, then to the lexicographically smaller pair.
  Shift estimate(std::span<const float> frame);
  /// Integer peak refined by a parabola through its axis neighbours.
  SubpixelShift estimate_subpixel(std::span<const float> frame);

private:
  void load(std::span<const float> image);
  void correlate(std::span<const float> frame);
  Shift peak() const;

  std::size_t width_, height_, half_;
  std::vector<std::complex<double>> ref_spectrum_;
  std::vector<double> window_x_, window_y_;
  double* real_ = nullptr;
  void* spectrum_ = nullptr;
  void* forward_ = nullptr;
  void* inverse_ = nullptr;
};

Shift estimate_shift(std::span<const float> frame, std::span<const float> reference, std::size_t width, std::size_t height);
SubpixelShift estimate_shift_subpixel(std::span<const float> frame, std::span<const float> reference, std::size_t width,
                                      std::size_t height);

/// Pixelwise median over frames.
std::vector<float> temporal_median(const ImageStack& stack);

struct JitterCorrection {
  ImageStack stack;
  std::vector<Shift> shifts; // estimated displacement of each frame from its median reference
};

/// Registers every frame to the temporal median of the other frames and
/// translates it back. Frames are standardized before the median so that
/// intensity changes across the edge do not mix differently shifted frames;
/// a second pass uses medians of the frames aligned by the first.
JitterCorrection correct_jitter(const ImageStack& stack);

/// Fraction of frames whose estimated shift equals the true one after
/// removing a common offset (the most frequent difference), since a median
/// reference may itself sit at a fixed displacement from frame 0.
double shift_recovery_rate(const std::vector<Shift>& estimated, const std::vector<Shift>& truth);

} // namespace txm
