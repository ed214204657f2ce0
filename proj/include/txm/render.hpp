#pragma once

#include <array>
#include <filesystem>
#include <optional>

#include "txm/xanes.hpp"

namespace txm {

/// 8-bit RGB PNG of a map through a fixed perceptually ordered colormap
/// (viridis anchors, linearly interpolated). Values map from [lo, hi], which
/// default to the valid range; invalid pixels are black.
void render_map_png(const ChemicalMap& map, const std::filesystem::path& path, std::optional<double> lo = std::nullopt,
                    std::optional<double> hi = std::nullopt);

/// Colormap lookup for u in [0, 1] (clamped).
std::array<unsigned char, 3> colormap(double u);

} // namespace txm
