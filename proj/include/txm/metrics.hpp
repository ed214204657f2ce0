#pragma once

#include "txm/stack.hpp"
#include "txm/xanes.hpp"

namespace txm {

// Per-frame / per-spectrum PSNRs are capped at this value before averaging.
inline constexpr double kPsnrCap = 100.0;

/// Mean over frames of 10 log10(peak^2 / MSE_t).
double fpsnr(const ImageStack& est, const ImageStack& gt, double peak = 255.0);

/// Mean over pixels of the PSNR of each pixel's spectrum.
double spsnr(const ImageStack& est, const ImageStack& gt, double peak = 255.0);

/// Pearson correlation over pixels valid in both maps.
double map_correlation(const ChemicalMap& a, const ChemicalMap& b);

} // namespace txm
