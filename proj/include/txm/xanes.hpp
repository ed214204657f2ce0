#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "txm/error.hpp"
#include "txm/stack.hpp"

namespace txm {

class FlatSpectrumError : public Error {
public:
  using Error::Error;
};

class NoEdgeError : public Error {
public:
  using Error::Error;
};

/// Reference XANES spectra (one column per reference) with their chemical state values.
class SpectrumLibrary {
public:
  SpectrumLibrary(std::vector<double> energies, Eigen::MatrixXd references, std::vector<double> states, std::vector<std::string> labels);

  const std::vector<double>& energies() const { return energies_; }
  const Eigen::MatrixXd& references() const { return references_; }
  const std::vector<double>& states() const { return states_; }
  const std::vector<std::string>& labels() const { return labels_; }
  Eigen::Index size() const { return references_.cols(); }
  double min_state() const;
  double max_state() const;

  /// Linear interpolation onto another axis; outside the stored range the end
  /// values are held.
  SpectrumLibrary resampled(std::span<const double> energies) const;
  bool same_axis(std::span<const double> energies) const;

  /// CSV `energy,<label1>,...` plus a JSON object mapping labels to states.
  static SpectrumLibrary load(const std::filesystem::path& csv, const std::filesystem::path& states_json);
  void save(const std::filesystem::path& csv, const std::filesystem::path& states_json) const;

private:
  std::vector<double> energies_;
  Eigen::MatrixXd references_;
  std::vector<double> states_;
  std::vector<std::string> labels_;
};

/// Pre-edge and post-edge energy windows, inclusive, in eV.
struct NormalizationWindows {
  double pre_lo = 0.0, pre_hi = 0.0;
  double post_lo = 0.0, post_hi = 0.0;

  /// First and last 15% of the samples, at least two each.
  static NormalizationWindows defaults(std::span<const double> energies);
};

/// Pre-edge line subtraction and edge-step division, with the window
/// regressions precomputed for one energy axis.
class Normalizer {
public:
  Normalizer(std::span<const double> energies, const NormalizationWindows& windows);
  /// Throws FlatSpectrumError when the edge step vanishes.
  void apply(std::span<const double> raw, std::span<double> out) const;
  std::vector<double> operator()(std::span<const double> raw) const;
  std::size_t size() const { return energies_.size(); }

private:
  struct Window {
    std::size_t first = 0, count = 0;
    double mean_e = 0.0, sxx = 0.0;
  };
  static Window make_window(std::span<const double> e, double lo, double hi, const char* name);
  std::pair<double, double> line(const Window& w, std::span<const double> raw) const; // intercept at mean_e, slope

  std::vector<double> energies_;
  Window pre_, post_;
  double mid_ = 0.0;
};

std::vector<double> normalize_spectrum(std::span<const double> raw, std::span<const double> energies, const NormalizationWindows& windows);

struct PhaseFit {
  std::vector<double> weights;
  double state = 0.0;
  double residual = 0.0; // root-mean-square misfit
  bool non_unique = false; // another weight vector reaches the same misfit
};

/// Least squares over the probability simplex, solved exactly by enumerating
/// every support set (P <= 8). The library must already be on the spectrum's axis.
class PhaseFitter {
public:
  explicit PhaseFitter(const SpectrumLibrary& lib);
  PhaseFit fit(std::span<const double> spectrum) const;

private:
  struct Face {
    std::vector<int> members;
    Eigen::MatrixXd solve; // pseudo-inverse of the bordered normal matrix
    bool singular = false;
  };
  Eigen::MatrixXd R_;
  std::vector<double> states_;
  std::vector<Face> faces_;
  bool rank_deficient_ = false;
};

/// Resamples the library when `energies` differs from its axis.
PhaseFit fit_phase_fractions(std::span<const double> spectrum, const SpectrumLibrary& lib,
                             std::optional<std::span<const double>> energies = std::nullopt);

/// Energy of the first upward crossing of 0.5, linearly interpolated.
double edge_position(std::span<const double> spectrum, std::span<const double> energies);

enum class MapMode { edge, phase };
const char* to_string(MapMode mode);
MapMode parse_map_mode(std::string_view text);

struct ChemicalMap {
  std::size_t width = 0, height = 0;
  std::vector<double> values;
  std::vector<double> residual;
  std::vector<std::uint8_t> valid;
  MapMode mode = MapMode::edge;

  std::size_t valid_count() const;
};

/// Pixelwise normalize then edge position or expected state. Pixels whose
/// spectrum is flat or never crosses 0.5 are marked invalid; more than half
/// invalid is an error.
ChemicalMap chemical_map(const ImageStack& stack, const SpectrumLibrary& lib, MapMode mode,
                         const std::optional<NormalizationWindows>& windows = std::nullopt);

/// Values go to `<prefix>` and the validity mask to `<prefix>_valid`, both as
/// single-frame stack containers. Invalid values are stored as 0.
void save_map(const ChemicalMap& map, const std::filesystem::path& prefix);
ChemicalMap load_map(const std::filesystem::path& prefix, MapMode mode = MapMode::edge);

} // namespace txm
