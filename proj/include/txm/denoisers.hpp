#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "txm/stack.hpp"

namespace txm {

/// Row-major 2-D grid of doubles.
struct Image {
  std::size_t width = 0, height = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), data(w * h, fill) {}
  Image(std::size_t w, std::size_t h, std::vector<double> values);

  double& operator()(std::size_t x, std::size_t y) { return data[y * width + x]; }
  double operator()(std::size_t x, std::size_t y) const { return data[y * width + x]; }
  // Reflected access for out-of-range coordinates.
  double reflected(std::ptrdiff_t x, std::ptrdiff_t y) const
  {
    return data[static_cast<std::size_t>(reflect_index(y, static_cast<std::ptrdiff_t>(height)) * static_cast<std::ptrdiff_t>(width) +
                                         reflect_index(x, static_cast<std::ptrdiff_t>(width)))];
  }
};

struct DenoiserSpec {
  enum class Kind { identity, gaussian_blur, median2d, wavelet_soft, nlmeans };

  Kind kind = Kind::nlmeans;
  int radius = 1;       // gaussian_blur: kernel std = radius / 2
  int window = 3;       // median2d
  int levels = 3;       // wavelet_soft
  int patch = 7;        // nlmeans
  int search = 21;      // nlmeans
  double h_factor = 0.55;

  static DenoiserSpec identity() { return {Kind::identity}; }
  static DenoiserSpec blur(int radius) { DenoiserSpec s{Kind::gaussian_blur}; s.radius = radius; return s; }
  static DenoiserSpec median(int window) { DenoiserSpec s{Kind::median2d}; s.window = window; return s; }
  static DenoiserSpec wavelet(int levels) { DenoiserSpec s{Kind::wavelet_soft}; s.levels = levels; return s; }
  static DenoiserSpec nlm(int patch = 7, int search = 21, double h_factor = 0.55)
  {
    DenoiserSpec s{Kind::nlmeans};
    s.patch = patch;
    s.search = search;
    s.h_factor = h_factor;
    return s;
  }

  /// Throws InvalidArgument when a parameter is outside its domain.
  void validate() const;

  /// Compact form: "identity", "blur:2", "median2d:3", "wavelet:3", "nlmeans:7,21,0.55".
  static DenoiserSpec parse(std::string_view text);
  std::string to_string() const;
};

/// Single-image Gaussian denoiser. identity returns the input unchanged; every
/// kind maps constant images to themselves and uses reflected boundaries.
Image denoise_image(const Image& img, double sigma, const DenoiserSpec& spec);

/// Rescale to [0, 255], denoise with the correspondingly scaled sigma, and map
/// back. Constant images and the identity kind pass through untouched.
Image denoise_rescaled(const Image& img, double sigma, const DenoiserSpec& spec);

/// Median over window^3 voxel neighbourhoods with reflected boundaries.
ImageStack medfilt3(const ImageStack& stack, int window);

} // namespace txm
