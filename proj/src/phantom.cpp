#include "txm/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "txm/error.hpp"
#include "txm/random.hpp"

namespace txm {

namespace fs = std::filesystem;

namespace {

// Stream identifiers for derive_seed.
constexpr std::uint64_t kSubsetStream = 1, kJitterStream = 2, kNoiseStream = 3, kSiteStream = 4;

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double reference_value(double e, int phase)
{
  const double e0 = 8336.0 + 12.0 * phase;
  const double bump = (e - (e0 + 9.0)) / 5.0;
  return 0.08 + 0.70 * logistic((e - e0) / 4.0) + 0.18 * std::exp(-0.5 * bump * bump);
}

template <typename E>
E parse_enum(const nlohmann::json& j, const char* key, std::initializer_list<std::pair<const char*, E>> options, E fallback)
{
  if (!j.contains(key)) return fallback;
  const auto text = j.at(key).get<std::string>();
  for (const auto& [name, value] : options)
    if (text == name) return value;
  throw InvalidArgument(std::string("invalid value '") + text + "' for " + key);
}

} // namespace

std::vector<double> demo_energy_axis(std::size_t frames)
{
  if (frames < 2) throw InvalidArgument("energy axis needs at least 2 points");
  constexpr double u_knots[] = {0.0, 0.2, 0.8, 1.0};
  constexpr double e_knots[] = {8180.0, 8320.0, 8390.0, 8562.0};
  std::vector<double> e(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(frames - 1);
    std::size_t k = 0;
    while (k < 2 && u > u_knots[k + 1]) ++k;
    const double a = (u - u_knots[k]) / (u_knots[k + 1] - u_knots[k]);
    e[i] = e_knots[k] + a * (e_knots[k + 1] - e_knots[k]);
  }
  e.front() = e_knots[0];
  e.back() = e_knots[3];
  return e;
}

SpectrumLibrary builtin_library(std::span<const double> energies)
{
  constexpr int phases = 5;
  Eigen::MatrixXd refs(static_cast<Eigen::Index>(energies.size()), phases);
  for (std::size_t t = 0; t < energies.size(); ++t)
    for (int p = 0; p < phases; ++p) refs(static_cast<Eigen::Index>(t), p) = reference_value(energies[t], p);
  return {std::vector<double>(energies.begin(), energies.end()), std::move(refs), {2.0, 2.5, 3.0, 3.5, 4.0},
          {"Ni2.0", "Ni2.5", "Ni3.0", "Ni3.5", "Ni4.0"}};
}

Image morphology_image(std::size_t width, std::size_t height)
{
  Image img(width, height);
  const double scale = static_cast<double>(std::max(width, height));
  Rng rng(7);
  for (int disc = 0; disc < 40; ++disc) {
    const double cx = rng.uniform(), cy = rng.uniform(), r = 0.03 + 0.09 * rng.uniform();
    const double level = 0.5 + 0.5 * rng.uniform();
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double dx = static_cast<double>(x) / scale - cx, dy = static_cast<double>(y) / scale - cy;
        const double d = std::sqrt(dx * dx + dy * dy) / r;
        img(x, y) = std::max(img(x, y), level / (1.0 + std::exp((d - 1.0) * 12.0)));
      }
  }
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      img(x, y) += 0.15 * std::sin(23.0 * static_cast<double>(x) / scale + 3.0) * std::sin(19.0 * static_cast<double>(y) / scale + 1.0);
  const auto [lo, hi] = std::minmax_element(img.data.begin(), img.data.end());
  const double low = *lo, range = *hi - *lo;
  for (double& v : img.data) v = range > 0.0 ? (v - low) / range : 0.0;
  return img;
}

std::vector<int> quantile_labels(const Image& img, int phases)
{
  if (phases < 1) throw InvalidArgument("need at least one phase");
  std::vector<double> sorted = img.data;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> thresholds;
  for (int q = 1; q < phases; ++q) {
    // Linear-interpolated quantile q / P.
    const double pos = static_cast<double>(q) / phases * static_cast<double>(sorted.size() - 1);
    const auto i = static_cast<std::size_t>(pos);
    const double a = pos - static_cast<double>(i);
    thresholds.push_back(i + 1 < sorted.size() ? (1.0 - a) * sorted[i] + a * sorted[i + 1] : sorted[i]);
  }
  std::vector<int> labels(img.data.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = static_cast<int>(std::upper_bound(thresholds.begin(), thresholds.end(), img.data[i]) - thresholds.begin());
  return labels;
}

std::vector<int> voronoi_labels(std::size_t width, std::size_t height, int phases, int sites, std::uint64_t seed)
{
  if (phases < 1) throw InvalidArgument("need at least one phase");
  if (sites == 0) sites = phases;
  if (sites < phases) throw InvalidArgument("Voronoi needs at least one site per phase");
  Rng rng(derive_seed(seed, kSiteStream));
  std::vector<double> sx(static_cast<std::size_t>(sites)), sy(static_cast<std::size_t>(sites));
  std::vector<int> site_label(static_cast<std::size_t>(sites));
  for (int s = 0; s < sites; ++s) {
    sx[static_cast<std::size_t>(s)] = rng.uniform() * static_cast<double>(width);
    sy[static_cast<std::size_t>(s)] = rng.uniform() * static_cast<double>(height);
    site_label[static_cast<std::size_t>(s)] = s < phases ? s : static_cast<int>(rng.uniform_int(0, phases - 1));
  }
  std::vector<int> labels(width * height);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double best = std::numeric_limits<double>::infinity();
      int label = 0;
      for (std::size_t s = 0; s < sx.size(); ++s) {
        const double d = (px - sx[s]) * (px - sx[s]) + (py - sy[s]) * (py - sy[s]);
        if (d < best) {
          best = d;
          label = site_label[s];
        }
      }
      labels[y * width + x] = label;
    }
  return labels;
}

void PhantomSpec::validate() const
{
  if (width < 1 || height < 1) throw InvalidArgument("phantom size must be >= 1");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw InvalidArgument("sigma must be finite and >= 0");
  if (jitter < 0) throw InvalidArgument("jitter amplitude must be >= 0");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("sampling fraction must lie in (0, 1]");
  if (sites < 0) throw InvalidArgument("Voronoi site count must be >= 0");
  if (library_csv.has_value() != states_json.has_value()) throw InvalidArgument("a custom library needs both its CSV and states JSON");
  if (!library_csv && frames < 8) throw InvalidArgument("phantom needs at least 8 energies");
}

PhantomSpec PhantomSpec::from_json(const nlohmann::json& j, const fs::path& base)
{
  if (!j.is_object()) throw InvalidArgument("phantom spec must be a JSON object");
  static const char* known[] = {"width", "height", "frames", "labels", "sites", "amplitude", "sigma", "jitter", "fraction", "seed", "library"};
  for (const auto& [key, value] : j.items())
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known))
      throw InvalidArgument("unknown phantom spec key '" + key + "'");

  PhantomSpec s;
  try {
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.frames = j.value("frames", s.frames);
    s.labels = parse_enum(j, "labels", {{"voronoi", LabelSource::voronoi}, {"quantile", LabelSource::quantile}}, s.labels);
    s.sites = j.value("sites", s.sites);
    s.amplitude = parse_enum(j, "amplitude", {{"image", AmplitudeSource::image}, {"uniform", AmplitudeSource::uniform}}, s.amplitude);
    s.sigma = j.value("sigma", s.sigma);
    s.jitter = j.value("jitter", s.jitter);
    s.fraction = j.value("fraction", s.fraction);
    s.seed = j.value("seed", s.seed);
    if (j.contains("library")) {
      const auto& lib = j.at("library");
      auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
      s.library_csv = resolve(lib.at("csv").get<std::string>());
      s.states_json = resolve(lib.at("states").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed phantom spec: ") + e.what());
  }
  s.validate();
  return s;
}

nlohmann::ordered_json PhantomSpec::to_json() const
{
  nlohmann::ordered_json j;
  j["width"] = width;
  j["height"] = height;
  j["frames"] = frames;
  j["labels"] = labels == LabelSource::voronoi ? "voronoi" : "quantile";
  j["sites"] = sites;
  j["amplitude"] = amplitude == AmplitudeSource::image ? "image" : "uniform";
  j["sigma"] = sigma;
  j["jitter"] = jitter;
  j["fraction"] = fraction;
  j["seed"] = seed;
  if (library_csv) j["library"] = {{"csv", library_csv->string()}, {"states", states_json->string()}};
  return j;
}

std::vector<std::size_t> subsample_indices(std::size_t frames, double fraction, std::uint64_t seed)
{
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("sampling fraction must lie in (0, 1]");
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(frames) - 1e-9));
  if (keep < 8) throw InvalidArgument("subsampling leaves " + std::to_string(keep) + " frames; at least 8 are required");
  std::vector<std::size_t> order(frames);
  for (std::size_t i = 0; i < frames; ++i) order[i] = i;
  if (keep < frames) {
    Rng rng(derive_seed(seed, kSubsetStream));
    for (std::size_t i = 0; i < keep; ++i)
      std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(frames - 1)))]);
    order.resize(keep);
    std::sort(order.begin(), order.end());
  }
  return order;
}

ImageStack select_frames(const ImageStack& stack, std::span<const std::size_t> indices)
{
  std::vector<float> data;
  data.reserve(indices.size() * stack.pixels());
  std::optional<std::vector<double>> energies;
  if (stack.energies()) energies.emplace();
  for (std::size_t t : indices) {
    if (t >= stack.frames()) throw InvalidArgument("frame index out of range");
    const auto f = stack.frame(t);
    data.insert(data.end(), f.begin(), f.end());
    if (energies) energies->push_back((*stack.energies())[t]);
  }
  return ImageStack(stack.width(), stack.height(), indices.size(), std::move(data), std::move(energies), stack.peak());
}

ImageStack subsample_energies(const ImageStack& stack, double fraction, std::uint64_t seed)
{
  const auto idx = subsample_indices(stack.frames(), fraction, seed);
  return select_frames(stack, idx);
}

ChemicalMap truth_map(const std::vector<int>& labels, std::size_t width, std::size_t height, const SpectrumLibrary& lib, MapMode mode,
                      const std::optional<NormalizationWindows>& windows)
{
  if (labels.size() != width * height) throw InvalidArgument("label map size mismatch");
  std::vector<double> per_label(static_cast<std::size_t>(lib.size()));
  std::vector<std::uint8_t> label_valid(per_label.size(), 1);
  const auto& e = lib.energies();
  const Normalizer normalize(e, windows ? *windows : NormalizationWindows::defaults(e));
  for (Eigen::Index p = 0; p < lib.size(); ++p) {
    if (mode == MapMode::phase) {
      per_label[static_cast<std::size_t>(p)] = lib.states()[static_cast<std::size_t>(p)];
      continue;
    }
    // A sparse energy subset can miss a reference's edge entirely.
    const Eigen::VectorXd ref = lib.references().col(p);
    try {
      per_label[static_cast<std::size_t>(p)] = edge_position(normalize(std::span<const double>(ref.data(), e.size())), e);
    } catch (const FlatSpectrumError&) {
      label_valid[static_cast<std::size_t>(p)] = 0;
    } catch (const NoEdgeError&) {
      label_valid[static_cast<std::size_t>(p)] = 0;
    }
  }
  ChemicalMap map;
  map.width = width;
  map.height = height;
  map.mode = mode;
  map.values.resize(labels.size());
  map.valid.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= lib.size()) throw InvalidArgument("label outside the library");
    map.values[i] = per_label[static_cast<std::size_t>(labels[i])];
    map.valid[i] = label_valid[static_cast<std::size_t>(labels[i])];
  }
  map.residual.assign(labels.size(), 0.0);
  return map;
}

Phantom generate(const PhantomSpec& spec)
{
  spec.validate();
  const std::size_t W = spec.width, H = spec.height, pixels = W * H;

  const SpectrumLibrary full = spec.library_csv ? SpectrumLibrary::load(*spec.library_csv, *spec.states_json)
                                                : builtin_library(demo_energy_axis(spec.frames));
  const auto keep = subsample_indices(full.energies().size(), spec.fraction, spec.seed);
  std::vector<double> energies;
  for (std::size_t t : keep) energies.push_back(full.energies()[t]);
  SpectrumLibrary lib = full.resampled(energies);
  const int phases = static_cast<int>(lib.size());

  const Image morph = morphology_image(W, H);
  const std::vector<int> labels = spec.labels == PhantomSpec::LabelSource::voronoi
                                      ? voronoi_labels(W, H, phases, spec.sites, spec.seed)
                                      : quantile_labels(morph, phases);
  std::vector<double> amplitude(pixels, 1.0);
  if (spec.amplitude == PhantomSpec::AmplitudeSource::image)
    for (std::size_t i = 0; i < pixels; ++i) amplitude[i] = 0.2 + 0.8 * morph.data[i];

  const std::size_t T = keep.size();
  std::vector<float> clean(pixels * T), noisy(pixels * T);
  std::vector<Shift> shifts(T);
  for (std::size_t t = 1; t < T && spec.jitter > 0; ++t) {
    Rng rng(derive_seed(spec.seed, kJitterStream, t));
    shifts[t].dx = static_cast<int>(rng.uniform_int(-spec.jitter, spec.jitter));
    shifts[t].dy = static_cast<int>(rng.uniform_int(-spec.jitter, spec.jitter));
  }

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t tt = 0; tt < static_cast<std::ptrdiff_t>(T); ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    std::span<float> frame(clean.data() + t * pixels, pixels);
    for (std::size_t i = 0; i < pixels; ++i) {
      const double v = 255.0 * amplitude[i] * lib.references()(static_cast<Eigen::Index>(t), labels[i]);
      frame[i] = static_cast<float>(std::clamp(v, 0.0, 255.0));
    }
    std::vector<float> moved = shifts[t] == Shift{} ? std::vector<float>(frame.begin(), frame.end())
                                                    : translate_frame(frame, W, H, shifts[t].dx, shifts[t].dy);
    Rng rng(derive_seed(spec.seed, kNoiseStream, t));
    for (std::size_t i = 0; i < pixels; ++i)
      noisy[t * pixels + i] = spec.sigma > 0.0 ? static_cast<float>(moved[i] + spec.sigma * rng.normal()) : moved[i];
  }

  ImageStack clean_stack(W, H, T, std::move(clean), energies);
  ChemicalMap edge = truth_map(labels, W, H, lib, MapMode::edge);
  ChemicalMap state = truth_map(labels, W, H, lib, MapMode::phase);
  return {ImageStack(W, H, T, std::move(noisy), energies),
          PhantomTruth{std::move(clean_stack), labels, std::move(edge), std::move(state), std::move(shifts), std::move(lib)}};
}

void write_shifts_csv(const std::vector<Shift>& shifts, const fs::path& path)
{
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "frame,dx,dy\n";
  for (std::size_t t = 0; t < shifts.size(); ++t) out << t << ',' << shifts[t].dx << ',' << shifts[t].dy << '\n';
  if (!out) throw Error("failed writing " + path.string());
}

std::vector<Shift> read_shifts_csv(const fs::path& path)
{
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("frame,dx,dy", 0) != 0) throw Error("shifts CSV must start with frame,dx,dy");
  std::vector<Shift> shifts;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    long frame = 0;
    Shift s;
    char c1 = 0, c2 = 0;
    if (!(ss >> frame >> c1 >> s.dx >> c2 >> s.dy) || c1 != ',' || c2 != ',' || frame != static_cast<long>(shifts.size()))
      throw Error("malformed shifts CSV row '" + line + "'");
    shifts.push_back(s);
  }
  return shifts;
}

void save_truth(const PhantomTruth& truth, const fs::path& dir)
{
  fs::create_directories(dir);
  std::vector<float> labels(truth.labels.begin(), truth.labels.end());
  save_stack(ImageStack(truth.clean.width(), truth.clean.height(), 1, std::move(labels)), dir / "labels");
  save_map(truth.edge_map, dir / "gt_edge");
  save_map(truth.state_map, dir / "gt_state");
  write_shifts_csv(truth.shifts, dir / "shifts.csv");
  truth.library.save(dir / "library.csv", dir / "states.json");
}

} // namespace txm
