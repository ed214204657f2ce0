#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "txm/denoisers.hpp"
#include "txm/stack.hpp"
#include "txm/xanes.hpp"

namespace txm {

/// T energies over 8180-8562 eV, densest across the edge region
/// (20% of samples below 8320 eV, 60% up to 8390 eV, 20% above).
std::vector<double> demo_energy_axis(std::size_t frames);

/// Five Ni-like reference spectra (states 2.0 to 4.0) evaluated on `energies`:
/// a logistic edge plus a white-line bump, edges 12 eV apart.
SpectrumLibrary builtin_library(std::span<const double> energies);

/// Procedural grayscale morphology in [0, 1]: soft discs plus a weak texture.
Image morphology_image(std::size_t width, std::size_t height);

/// Labels from P - 1 quantile thresholds of an image.
std::vector<int> quantile_labels(const Image& img, int phases);

/// Nearest-site labels. Sites are drawn from `seed`; the first `phases` sites
/// take labels 0..P-1 and any further sites a uniformly drawn label.
std::vector<int> voronoi_labels(std::size_t width, std::size_t height, int phases, int sites, std::uint64_t seed);

struct PhantomSpec {
  enum class LabelSource { voronoi, quantile };
  enum class AmplitudeSource { image, uniform };

  std::size_t width = 128, height = 128;
  std::size_t frames = 117; // energies on demo_energy_axis; ignored with a custom library
  LabelSource labels = LabelSource::voronoi;
  int sites = 0; // Voronoi sites; 0 means one per phase
  AmplitudeSource amplitude = AmplitudeSource::image;
  double sigma = 0.0;
  int jitter = 0;
  double fraction = 1.0;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> library_csv, states_json;

  void validate() const;
  /// Relative library paths resolve against `base`.
  static PhantomSpec from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
  nlohmann::ordered_json to_json() const;
};

struct Shift {
  int dx = 0, dy = 0;
  bool operator==(const Shift&) const = default;
};

struct PhantomTruth {
  ImageStack clean;          // un-jittered, noise-free
  std::vector<int> labels;   // row-major, width * height
  ChemicalMap edge_map;      // edge position of each pixel's reference
  ChemicalMap state_map;     // state value of each pixel's reference
  std::vector<Shift> shifts; // applied per retained frame
  SpectrumLibrary library;   // on the retained energy axis
};

struct Phantom {
  ImageStack noisy;
  PhantomTruth truth;
};

/// clean = 255 * amplitude * S_label(E_t) clipped to [0, 255]; frames other
/// than the first are translated by a uniform integer shift in [-a, a]^2 and
/// Gaussian noise is added from one stream per frame.
Phantom generate(const PhantomSpec& spec);

/// Sorted frame indices of a seeded uniform subset of ceil(f * T) frames.
std::vector<std::size_t> subsample_indices(std::size_t frames, double fraction, std::uint64_t seed);
ImageStack subsample_energies(const ImageStack& stack, double fraction, std::uint64_t seed);
ImageStack select_frames(const ImageStack& stack, std::span<const std::size_t> indices);

/// Truth map of a label image for one library and axis, in either mode. In
/// edge mode, labels whose reference shows no edge on this axis are invalid.
ChemicalMap truth_map(const std::vector<int>& labels, std::size_t width, std::size_t height, const SpectrumLibrary& lib,
                      MapMode mode, const std::optional<NormalizationWindows>& windows = std::nullopt);

/// Writes labels, edge/state maps, shifts.csv, library.csv and states.json.
void save_truth(const PhantomTruth& truth, const std::filesystem::path& dir);

void write_shifts_csv(const std::vector<Shift>& shifts, const std::filesystem::path& path);
std::vector<Shift> read_shifts_csv(const std::filesystem::path& path);

} // namespace txm
