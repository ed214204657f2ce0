#include "txm/xanes.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace txm {

namespace fs = std::filesystem;

namespace {

void check_axis(std::span<const double> e, const char* what)
{
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (!std::isfinite(e[i])) throw Error(std::string(what) + " contains non-finite energies");
    if (i > 0 && !(e[i] > e[i - 1])) throw Error(std::string(what) + " energies must be strictly increasing");
  }
}

double parse_double(std::string_view text)
{
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) text.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size())
    throw Error("invalid number '" + std::string(text) + "' in library CSV");
  return v;
}

std::vector<std::string> split_csv(const std::string& line)
{
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

std::string format_double(double v)
{
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

fs::path mask_path(const fs::path& prefix)
{
  fs::path base = stack_paths(prefix).sidecar;
  base.replace_extension();
  return base.string() + "_valid";
}

} // namespace

SpectrumLibrary::SpectrumLibrary(std::vector<double> energies, Eigen::MatrixXd references, std::vector<double> states,
                                 std::vector<std::string> labels)
  : energies_(std::move(energies)), references_(std::move(references)), states_(std::move(states)), labels_(std::move(labels))
{
  if (references_.cols() < 1) throw Error("library needs at least one reference");
  if (static_cast<std::size_t>(references_.rows()) != energies_.size() || energies_.empty())
    throw Error("library reference length does not match its energy axis");
  if (states_.size() != static_cast<std::size_t>(references_.cols()) || labels_.size() != states_.size())
    throw Error("library needs one state value and one label per reference");
  if (!references_.allFinite()) throw Error("library references must be finite");
  for (double s : states_)
    if (!std::isfinite(s)) throw Error("library states must be finite");
  check_axis(energies_, "library");
}

double SpectrumLibrary::min_state() const { return *std::min_element(states_.begin(), states_.end()); }
double SpectrumLibrary::max_state() const { return *std::max_element(states_.begin(), states_.end()); }

bool SpectrumLibrary::same_axis(std::span<const double> energies) const
{
  return energies.size() == energies_.size() && std::equal(energies.begin(), energies.end(), energies_.begin());
}

SpectrumLibrary SpectrumLibrary::resampled(std::span<const double> energies) const
{
  check_axis(energies, "target");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(energies.size()), size());
  for (std::size_t i = 0; i < energies.size(); ++i) {
    const double e = energies[i];
    const auto hi = std::upper_bound(energies_.begin(), energies_.end(), e);
    const auto row = static_cast<Eigen::Index>(i);
    if (hi == energies_.begin()) {
      out.row(row) = references_.row(0);
    } else if (hi == energies_.end()) {
      out.row(row) = references_.row(references_.rows() - 1);
    } else {
      const auto j = static_cast<Eigen::Index>(hi - energies_.begin());
      const double a = (e - energies_[static_cast<std::size_t>(j - 1)]) / (energies_[static_cast<std::size_t>(j)] - energies_[static_cast<std::size_t>(j - 1)]);
      out.row(row) = (1.0 - a) * references_.row(j - 1) + a * references_.row(j);
    }
  }
  return {std::vector<double>(energies.begin(), energies.end()), std::move(out), states_, labels_};
}

SpectrumLibrary SpectrumLibrary::load(const fs::path& csv, const fs::path& states_json)
{
  std::ifstream in(csv);
  if (!in) throw Error("cannot open library " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw Error("library CSV is empty");
  const auto header = split_csv(line);
  if (header.size() < 2 || header[0] != "energy") throw Error("library CSV header must be energy,<label1>,...");
  const std::vector<std::string> labels(header.begin() + 1, header.end());

  std::vector<double> energies;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) throw Error("library CSV row has " + std::to_string(cells.size()) + " fields");
    energies.push_back(parse_double(cells[0]));
    std::vector<double> row;
    for (std::size_t i = 1; i < cells.size(); ++i) row.push_back(parse_double(cells[i]));
    rows.push_back(std::move(row));
  }
  Eigen::MatrixXd refs(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(labels.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < labels.size(); ++c) refs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];

  std::ifstream sj(states_json);
  if (!sj) throw Error("cannot open states " + states_json.string());
  nlohmann::json j;
  try {
    sj >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("invalid states JSON: " + std::string(e.what()));
  }
  std::vector<double> states;
  for (const auto& label : labels) {
    if (!j.contains(label) || !j[label].is_number()) throw Error("states JSON has no numeric value for '" + label + "'");
    states.push_back(j[label].get<double>());
  }
  return {std::move(energies), std::move(refs), std::move(states), labels};
}

void SpectrumLibrary::save(const fs::path& csv, const fs::path& states_json) const
{
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw Error("cannot write " + csv.string());
  out << "energy";
  for (const auto& l : labels_) out << ',' << l;
  out << '\n';
  for (Eigen::Index r = 0; r < references_.rows(); ++r) {
    out << format_double(energies_[static_cast<std::size_t>(r)]);
    for (Eigen::Index c = 0; c < references_.cols(); ++c) out << ',' << format_double(references_(r, c));
    out << '\n';
  }
  if (!out) throw Error("failed writing " + csv.string());

  nlohmann::ordered_json j;
  for (std::size_t i = 0; i < labels_.size(); ++i) j[labels_[i]] = states_[i];
  std::ofstream sj(states_json, std::ios::trunc);
  if (!sj) throw Error("cannot write " + states_json.string());
  sj << j.dump(2) << '\n';
  if (!sj) throw Error("failed writing " + states_json.string());
}

NormalizationWindows NormalizationWindows::defaults(std::span<const double> e)
{
  if (e.size() < 4) throw InvalidArgument("normalization needs at least 4 energies");
  const std::size_t n = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(0.15 * static_cast<double>(e.size()))));
  if (2 * n > e.size()) throw InvalidArgument("too few energies for disjoint default windows");
  return {e.front(), e[n - 1], e[e.size() - n], e.back()};
}

Normalizer::Window Normalizer::make_window(std::span<const double> e, double lo, double hi, const char* name)
{
  Window w;
  const auto first = std::lower_bound(e.begin(), e.end(), lo);
  const auto last = std::upper_bound(e.begin(), e.end(), hi);
  w.first = static_cast<std::size_t>(first - e.begin());
  w.count = last > first ? static_cast<std::size_t>(last - first) : 0;
  if (w.count < 2) throw InvalidArgument(std::string(name) + " window holds fewer than 2 energies");
  for (std::size_t i = 0; i < w.count; ++i) w.mean_e += e[w.first + i];
  w.mean_e /= static_cast<double>(w.count);
  for (std::size_t i = 0; i < w.count; ++i) w.sxx += (e[w.first + i] - w.mean_e) * (e[w.first + i] - w.mean_e);
  return w;
}

Normalizer::Normalizer(std::span<const double> energies, const NormalizationWindows& win) : energies_(energies.begin(), energies.end())
{
  check_axis(energies, "spectrum");
  if (!(win.pre_lo <= win.pre_hi && win.post_lo <= win.post_hi)) throw InvalidArgument("window bounds are reversed");
  if (!(win.pre_hi < win.post_lo)) throw InvalidArgument("pre-edge window must lie below the post-edge window");
  pre_ = make_window(energies, win.pre_lo, win.pre_hi, "pre-edge");
  post_ = make_window(energies, win.post_lo, win.post_hi, "post-edge");
  mid_ = 0.5 * (win.pre_hi + win.post_lo);
}

std::pair<double, double> Normalizer::line(const Window& w, std::span<const double> raw) const
{
  double mean_y = 0.0;
  for (std::size_t i = 0; i < w.count; ++i) mean_y += raw[w.first + i];
  mean_y /= static_cast<double>(w.count);
  double sxy = 0.0;
  for (std::size_t i = 0; i < w.count; ++i) sxy += (energies_[w.first + i] - w.mean_e) * (raw[w.first + i] - mean_y);
  return {mean_y, sxy / w.sxx};
}

void Normalizer::apply(std::span<const double> raw, std::span<double> out) const
{
  if (raw.size() != energies_.size() || out.size() != raw.size()) throw InvalidArgument("spectrum length does not match energy axis");
  const auto [pre_y, pre_slope] = line(pre_, raw);
  const auto [post_y, post_slope] = line(post_, raw);
  const double step = (post_y + post_slope * (mid_ - post_.mean_e)) - (pre_y + pre_slope * (mid_ - pre_.mean_e));
  double scale = 0.0;
  for (double v : raw) scale = std::max(scale, std::abs(v));
  if (!(std::abs(step) > 1e-12 * scale) || !std::isfinite(step)) throw FlatSpectrumError("flat spectrum: no edge step");
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - (pre_y + pre_slope * (energies_[i] - pre_.mean_e))) / step;
}

std::vector<double> Normalizer::operator()(std::span<const double> raw) const
{
  std::vector<double> out(raw.size());
  apply(raw, out);
  return out;
}

std::vector<double> normalize_spectrum(std::span<const double> raw, std::span<const double> energies, const NormalizationWindows& windows)
{
  return Normalizer(energies, windows)(raw);
}

PhaseFitter::PhaseFitter(const SpectrumLibrary& lib) : R_(lib.references()), states_(lib.states())
{
  const int P = static_cast<int>(lib.size());
  if (P > 8) throw InvalidArgument("phase fitting supports at most 8 references");
  const Eigen::MatrixXd G = R_.transpose() * R_;
  {
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(R_);
    cod.setThreshold(1e-12);
    rank_deficient_ = cod.rank() < P;
  }
  for (unsigned mask = 1; mask < (1u << P); ++mask) {
    Face f;
    for (int p = 0; p < P; ++p)
      if (mask & (1u << p)) f.members.push_back(p);
    const auto n = static_cast<Eigen::Index>(f.members.size());
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + 1, n + 1);
    for (Eigen::Index a = 0; a < n; ++a) {
      for (Eigen::Index b = 0; b < n; ++b) kkt(a, b) = G(f.members[static_cast<std::size_t>(a)], f.members[static_cast<std::size_t>(b)]);
      kkt(a, n) = kkt(n, a) = 1.0;
    }
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(kkt);
    cod.setThreshold(1e-12);
    f.singular = cod.rank() < n + 1;
    f.solve = cod.pseudoInverse();
    faces_.push_back(std::move(f));
  }
  // Smaller supports first so that exact ties resolve toward sparser fits.
  std::stable_sort(faces_.begin(), faces_.end(), [](const Face& a, const Face& b) { return a.members.size() < b.members.size(); });
}

PhaseFit PhaseFitter::fit(std::span<const double> spectrum) const
{
  if (static_cast<Eigen::Index>(spectrum.size()) != R_.rows()) throw InvalidArgument("spectrum length does not match library axis");
  const Eigen::Map<const Eigen::VectorXd> y(spectrum.data(), R_.rows());
  const Eigen::VectorXd g = R_.transpose() * y;
  const double yy = y.squaredNorm();
  const double tol = 1e-12 * (1.0 + yy);

  double best = std::numeric_limits<double>::infinity();
  const Face* best_face = nullptr;
  Eigen::VectorXd best_w;
  Eigen::VectorXd rhs, sol;
  // Objective of a face's stationary point, or nullopt when it leaves the simplex.
  auto solve = [&](const Face& f, Eigen::VectorXd& w) -> std::optional<double> {
    const auto n = static_cast<Eigen::Index>(f.members.size());
    rhs.resize(n + 1);
    for (Eigen::Index a = 0; a < n; ++a) rhs(a) = g(f.members[static_cast<std::size_t>(a)]);
    rhs(n) = 1.0;
    sol.noalias() = f.solve * rhs;
    w = sol.head(n);
    if (w.minCoeff() < -1e-12 || std::abs(w.sum() - 1.0) > 1e-9) return std::nullopt;
    Eigen::VectorXd r = -y;
    for (Eigen::Index a = 0; a < n; ++a) r += w(a) * R_.col(f.members[static_cast<std::size_t>(a)]);
    return r.squaredNorm();
  };
  auto dense = [&](const Face& f, const Eigen::VectorXd& w) {
    Eigen::VectorXd full = Eigen::VectorXd::Zero(R_.cols());
    for (std::size_t a = 0; a < f.members.size(); ++a) full(f.members[a]) = w(static_cast<Eigen::Index>(a));
    return full;
  };

  Eigen::VectorXd w;
  for (const Face& f : faces_) {
    const auto obj = solve(f, w);
    if (obj && *obj < best - tol) {
      best = *obj;
      best_face = &f;
      best_w = w;
    }
  }
  if (!best_face) throw Error("simplex fit found no feasible support");

  bool non_unique = best_face->singular;
  if (rank_deficient_ && !non_unique) {
    // A dependent library can reach the optimum with different weights.
    const Eigen::VectorXd chosen = dense(*best_face, best_w);
    for (const Face& f : faces_) {
      const auto obj = solve(f, w);
      if (obj && *obj <= best + tol && (dense(f, w) - chosen).cwiseAbs().maxCoeff() > 1e-9) {
        non_unique = true;
        break;
      }
    }
  }

  PhaseFit fit;
  fit.weights.assign(states_.size(), 0.0);
  double total = 0.0;
  for (std::size_t a = 0; a < best_face->members.size(); ++a) total += fit.weights[static_cast<std::size_t>(best_face->members[a])] = std::max(0.0, best_w(static_cast<Eigen::Index>(a)));
  for (double& w : fit.weights) w /= total;
  for (std::size_t p = 0; p < states_.size(); ++p) fit.state += fit.weights[p] * states_[p];
  fit.residual = std::sqrt(std::max(0.0, best) / static_cast<double>(spectrum.size()));
  fit.non_unique = non_unique;
  return fit;
}

PhaseFit fit_phase_fractions(std::span<const double> spectrum, const SpectrumLibrary& lib, std::optional<std::span<const double>> energies)
{
  if (energies && !lib.same_axis(*energies)) return PhaseFitter(lib.resampled(*energies)).fit(spectrum);
  return PhaseFitter(lib).fit(spectrum);
}

double edge_position(std::span<const double> spectrum, std::span<const double> energies)
{
  if (spectrum.size() != energies.size()) throw InvalidArgument("spectrum length does not match energy axis");
  for (std::size_t i = 0; i < spectrum.size(); ++i) {
    if (spectrum[i] < 0.5) continue;
    if (i == 0) continue; // starts above the edge; wait for an upward crossing
    if (spectrum[i - 1] < 0.5) {
      const double a = (0.5 - spectrum[i - 1]) / (spectrum[i] - spectrum[i - 1]);
      return energies[i - 1] + a * (energies[i] - energies[i - 1]);
    }
  }
  throw NoEdgeError("spectrum never crosses 0.5 upward");
}

const char* to_string(MapMode mode) { return mode == MapMode::edge ? "edge" : "phase"; }

MapMode parse_map_mode(std::string_view text)
{
  if (text == "edge") return MapMode::edge;
  if (text == "phase") return MapMode::phase;
  throw InvalidArgument("map mode must be edge or phase, got '" + std::string(text) + "'");
}

std::size_t ChemicalMap::valid_count() const
{
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

ChemicalMap chemical_map(const ImageStack& stack, const SpectrumLibrary& lib, MapMode mode, const std::optional<NormalizationWindows>& windows)
{
  if (!stack.energies()) throw InvalidArgument("chemical mapping needs a stack with energies");
  const std::vector<double>& e = *stack.energies();
  const Normalizer normalize(e, windows ? *windows : NormalizationWindows::defaults(e));
  std::optional<PhaseFitter> fitter;
  if (mode == MapMode::phase) fitter.emplace(lib.same_axis(e) ? lib : lib.resampled(e));

  ChemicalMap map;
  map.width = stack.width();
  map.height = stack.height();
  map.mode = mode;
  const std::size_t pixels = stack.pixels(), T = stack.frames();
  map.values.assign(pixels, 0.0);
  map.residual.assign(pixels, 0.0);
  map.valid.assign(pixels, 0);
  const auto data = stack.data();

#pragma omp parallel
  {
    std::vector<double> raw(T), norm(T);
#pragma omp for schedule(static)
    for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(pixels); ++p) {
      const auto i = static_cast<std::size_t>(p);
      for (std::size_t t = 0; t < T; ++t) raw[t] = data[t * pixels + i];
      try {
        normalize.apply(raw, norm);
        if (mode == MapMode::edge) {
          map.values[i] = edge_position(norm, e);
        } else {
          const PhaseFit f = fitter->fit(norm);
          map.values[i] = f.state;
          map.residual[i] = f.residual;
        }
        map.valid[i] = 1;
      } catch (const FlatSpectrumError&) {
      } catch (const NoEdgeError&) {
      }
    }
  }
  if (2 * map.valid_count() < pixels)
    throw Error("chemical map unusable: " + std::to_string(pixels - map.valid_count()) + " of " + std::to_string(pixels) + " pixels invalid");
  return map;
}

void save_map(const ChemicalMap& map, const fs::path& prefix)
{
  std::vector<float> values(map.values.size()), mask(map.valid.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = map.valid[i] ? static_cast<float>(map.values[i]) : 0.0f;
    mask[i] = map.valid[i] ? 1.0f : 0.0f;
  }
  save_stack(ImageStack(map.width, map.height, 1, std::move(values)), prefix);
  save_stack(ImageStack(map.width, map.height, 1, std::move(mask)), mask_path(prefix));
}

ChemicalMap load_map(const fs::path& prefix, MapMode mode)
{
  const ImageStack values = load_stack(prefix);
  if (values.frames() != 1) throw Error("map container must have exactly one frame");
  ChemicalMap map;
  map.width = values.width();
  map.height = values.height();
  map.mode = mode;
  map.values.assign(values.data().begin(), values.data().end());
  map.residual.assign(map.values.size(), 0.0);
  map.valid.assign(map.values.size(), 1);
  const fs::path mp = mask_path(prefix);
  if (fs::exists(stack_paths(mp).sidecar)) {
    const ImageStack mask = load_stack(mp);
    if (mask.width() != map.width || mask.height() != map.height || mask.frames() != 1) throw Error("map mask geometry mismatch");
    for (std::size_t i = 0; i < map.valid.size(); ++i) map.valid[i] = mask.data()[i] != 0.0f;
  }
  return map;
}

} // namespace txm
