// txmsum: command-line front end for the SUM denoising and evaluation pipeline.
//
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "txm/denoisers.hpp"
#include "txm/error.hpp"
#include "txm/metrics.hpp"
#include "txm/phantom.hpp"
#include "txm/registration.hpp"
#include "txm/render.hpp"
#include "txm/stack.hpp"
#include "txm/sum.hpp"
#include "txm/sweep.hpp"
#include "txm/xanes.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Container path without its extension, for naming companion files.
std::string base_of(const fs::path& p)
{
  fs::path s = txm::stack_paths(p).sidecar;
  return s.replace_extension().string();
}

void write_json(const json& j, const fs::path& path)
{
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw txm::Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw txm::Error("failed writing " + path.string());
}

nlohmann::json read_json(const fs::path& path)
{
  std::ifstream in(path);
  if (!in) throw txm::Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw txm::InvalidArgument("invalid JSON in " + path.string() + ": " + e.what());
  }
}

double parse_real(const std::string& text, const char* what)
{
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || !std::isfinite(v)) throw txm::InvalidArgument(std::string("invalid ") + what + " '" + text + "'");
  return v;
}

// "lo:hi,lo:hi" in eV.
txm::NormalizationWindows parse_windows(const std::string& text)
{
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw txm::InvalidArgument("--windows expects pre_lo:pre_hi,post_lo:post_hi");
  auto pair = [](const std::string& part) {
    const auto colon = part.find(':');
    if (colon == std::string::npos) throw txm::InvalidArgument("--windows expects pre_lo:pre_hi,post_lo:post_hi");
    return std::pair{parse_real(part.substr(0, colon), "window bound"), parse_real(part.substr(colon + 1), "window bound")};
  };
  const auto [a, b] = pair(text.substr(0, comma));
  const auto [c, d] = pair(text.substr(comma + 1));
  return {a, b, c, d};
}

struct SimulateArgs {
  std::string spec, prefix;
};

void run_simulate(const SimulateArgs& a)
{
  const txm::PhantomSpec spec = txm::PhantomSpec::from_json(read_json(a.spec), fs::path(a.spec).parent_path());
  const txm::Phantom ph = txm::generate(spec);
  txm::save_stack(ph.noisy, a.prefix);
  txm::save_stack(ph.truth.clean, a.prefix + "_clean");
  txm::save_truth(ph.truth, a.prefix + "_truth");
  std::cout << "wrote " << a.prefix << " (" << ph.noisy.width() << "x" << ph.noisy.height() << "x" << ph.noisy.frames() << ")\n";
}

struct DenoiseArgs {
  std::string input, output, method = "sum", denoiser = "nlmeans:7,21,0.55", rank = "auto", sigma = "auto",
                             factorization = "exact", report;
  int window = 3;
  bool streaming = false;
  long block = 16;
};

void run_denoise(const DenoiseArgs& a)
{
  const std::string report_path = a.report.empty() ? base_of(a.output) + "_report.json" : a.report;
  if (a.method == "medfilt3") {
    if (a.streaming) throw txm::InvalidArgument("--streaming applies to sum and svd only");
    const auto start = std::chrono::steady_clock::now();
    const txm::ImageStack out = txm::medfilt3(txm::load_stack(a.input), a.window);
    txm::save_stack(out, a.output);
    json r;
    r["method"] = "medfilt3";
    r["window"] = a.window;
    r["total_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_json(r, report_path);
    return;
  }
  if (a.method != "sum" && a.method != "svd") throw txm::InvalidArgument("--method must be sum, svd or medfilt3");

  txm::SumConfig cfg;
  cfg.denoiser = a.method == "svd" ? txm::DenoiserSpec::identity() : txm::DenoiserSpec::parse(a.denoiser);
  if (a.rank != "auto") {
    const double k = parse_real(a.rank, "rank");
    if (k < 1 || k != std::floor(k)) throw txm::InvalidArgument("--rank must be auto or a positive integer");
    cfg.threshold = txm::ThresholdConfig::fixed_rank(static_cast<txm::Index>(k));
  }
  if (a.sigma != "auto") cfg.sigma = parse_real(a.sigma, "sigma");
  cfg.factorization = txm::Factorization::parse(a.factorization);
  if (a.block < 1) throw txm::InvalidArgument("--block must be >= 1");
  cfg.block_columns = a.block;

  txm::SumReport report;
  if (a.streaming) {
    report = txm::sum_denoise_streaming(a.input, a.output, cfg);
  } else {
    txm::SumResult r = txm::sum_denoise(txm::load_stack(a.input), cfg);
    txm::save_stack(r.stack, a.output);
    report = std::move(r.report);
  }
  json j;
  j["method"] = a.method;
  const json body = txm::to_json(report);
  for (const auto& [key, value] : body.items()) j[key] = value;
  write_json(j, report_path);
  if (report.empty_subspace) std::cerr << "warning: empty subspace (K = 0); output is the zero stack\n";
  std::cout << "selected_k " << report.k << " sigma " << report.noise.sigma << " (" << txm::to_string(report.noise.source) << ")\n";
}

struct FitArgs {
  std::string input, library, states, output, mode = "edge", windows, truth;
};

void run_fit(const FitArgs& a)
{
  const txm::ImageStack stack = txm::load_stack(a.input);
  const txm::SpectrumLibrary lib = txm::SpectrumLibrary::load(a.library, a.states);
  std::optional<txm::NormalizationWindows> windows;
  if (!a.windows.empty()) windows = parse_windows(a.windows);
  const txm::MapMode mode = txm::parse_map_mode(a.mode);
  const txm::ChemicalMap map = txm::chemical_map(stack, lib, mode, windows);
  txm::save_map(map, a.output);
  const std::string base = base_of(a.output);
  if (mode == txm::MapMode::phase)
    txm::render_map_png(map, base + ".png", lib.min_state(), lib.max_state());
  else
    txm::render_map_png(map, base + ".png", stack.energies()->front(), stack.energies()->back());

  double sum = 0.0, peak = 0.0;
  for (std::size_t i = 0; i < map.values.size(); ++i)
    if (map.valid[i]) {
      sum += map.residual[i];
      peak = std::max(peak, map.residual[i]);
    }
  json stats;
  stats["mode"] = txm::to_string(mode);
  stats["pixels"] = map.values.size();
  stats["valid_pixels"] = map.valid_count();
  stats["invalid_pixels"] = map.values.size() - map.valid_count();
  stats["mean_residual"] = map.valid_count() ? sum / static_cast<double>(map.valid_count()) : 0.0;
  stats["max_residual"] = peak;
  if (!a.truth.empty()) {
    const txm::ChemicalMap truth = txm::load_map(a.truth, mode);
    stats["correlation"] = txm::map_correlation(map, truth);
    std::cout << "correlation " << stats["correlation"].get<double>() << '\n';
  }
  write_json(stats, base + "_stats.json");
}

struct RegisterArgs {
  std::string input, output, shifts, truth;
  bool subpixel = false;
};

void run_register(const RegisterArgs& a)
{
  const txm::ImageStack stack = txm::load_stack(a.input);
  const txm::JitterCorrection c = txm::correct_jitter(stack);
  txm::save_stack(c.stack, a.output);
  const std::string shifts_path = a.shifts.empty() ? base_of(a.output) + "_shifts.csv" : a.shifts;
  if (a.subpixel) {
    const std::vector<float> reference = txm::temporal_median(stack);
    txm::PhaseCorrelator pc(reference, stack.width(), stack.height());
    std::ofstream out(shifts_path, std::ios::trunc);
    if (!out) throw txm::Error("cannot write " + shifts_path);
    out << "frame,dx,dy\n";
    for (std::size_t t = 0; t < stack.frames(); ++t) {
      const auto s = pc.estimate_subpixel(stack.frame(t));
      out << t << ',' << s.dx << ',' << s.dy << '\n';
    }
  } else {
    txm::write_shifts_csv(c.shifts, shifts_path);
  }
  if (!a.truth.empty()) {
    const double rate = txm::shift_recovery_rate(c.shifts, txm::read_shifts_csv(a.truth));
    std::cout << "shift_recovery " << rate << '\n';
  }
}

struct MetricsArgs {
  std::string estimate, truth, map, truth_map, mode = "edge";
  double peak = 255.0;
};

void run_metrics(const MetricsArgs& a)
{
  json j;
  if (!a.estimate.empty()) {
    const txm::ImageStack est = txm::load_stack(a.estimate), gt = txm::load_stack(a.truth);
    j["fpsnr"] = txm::fpsnr(est, gt, a.peak);
    j["spsnr"] = txm::spsnr(est, gt, a.peak);
  }
  if (!a.map.empty()) {
    const txm::MapMode mode = txm::parse_map_mode(a.mode);
    j["correlation"] = txm::map_correlation(txm::load_map(a.map, mode), txm::load_map(a.truth_map, mode));
  }
  std::cout << j.dump(2) << '\n';
}

struct SweepArgs {
  std::string config, output, curves;
};

void run_sweep_cmd(const SweepArgs& a)
{
  const txm::SweepConfig cfg = txm::SweepConfig::from_json(read_json(a.config), fs::path(a.config).parent_path());
  json curves;
  const auto rows = txm::run_sweep(cfg, a.curves.empty() ? nullptr : &curves);
  txm::write_sweep_csv(rows, a.output);
  if (!a.curves.empty()) write_json(curves, a.curves);
  std::size_t failed = 0;
  for (const auto& r : rows) failed += !r.error.empty();
  std::cout << rows.size() << " rows, " << failed << " failed\n";
}

struct LibraryArgs {
  std::string csv, states;
  std::size_t frames = 117;
};

void run_library(const LibraryArgs& a)
{
  txm::builtin_library(txm::demo_energy_axis(a.frames)).save(a.csv, a.states);
}

} // namespace

int main(int argc, char** argv)
{
  CLI::App app{"SURE-tuned subspace denoising for spectro-microscopy image stacks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "txmsum 1.0");

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Generate a phantom from a JSON spec");
  simulate->add_option("spec", sim.spec, "Phantom spec JSON")->required()->check(CLI::ExistingFile);
  simulate->add_option("prefix", sim.prefix, "Output prefix")->required();

  DenoiseArgs den;
  auto* denoise = app.add_subcommand("denoise", "Denoise a stack");
  denoise->add_option("input", den.input, "Input stack")->required();
  denoise->add_option("output", den.output, "Output stack")->required();
  denoise->add_option("--method", den.method, "sum, svd or medfilt3")->check(CLI::IsMember({"sum", "svd", "medfilt3"}));
  denoise->add_option("--denoiser", den.denoiser, "Coefficient denoiser, e.g. nlmeans:7,21,0.55, wavelet:3, blur:2");
  denoise->add_option("--rank", den.rank, "auto (SURE) or a fixed K");
  denoise->add_option("--sigma", den.sigma, "auto (estimated) or the noise std");
  denoise->add_option("--factorization", den.factorization, "exact or rsvd:k,p,q,seed");
  denoise->add_option("--window", den.window, "medfilt3 window (odd)");
  denoise->add_flag("--streaming", den.streaming, "Read and write frame blocks (needs rsvd)");
  denoise->add_option("--block", den.block, "Frames per block for the randomized passes");
  denoise->add_option("--report", den.report, "Report JSON path (default <output>_report.json)");

  FitArgs fit;
  auto* fitc = app.add_subcommand("fit", "Chemical map from a stack and a reference library");
  fitc->add_option("input", fit.input, "Input stack with energies")->required();
  fitc->add_option("library", fit.library, "Library CSV")->required()->check(CLI::ExistingFile);
  fitc->add_option("states", fit.states, "States JSON")->required()->check(CLI::ExistingFile);
  fitc->add_option("output", fit.output, "Output map prefix")->required();
  fitc->add_option("--mode", fit.mode, "edge or phase")->check(CLI::IsMember({"edge", "phase"}));
  fitc->add_option("--windows", fit.windows, "pre_lo:pre_hi,post_lo:post_hi in eV");
  fitc->add_option("--truth", fit.truth, "Ground-truth map for a correlation report");

  RegisterArgs reg;
  auto* regc = app.add_subcommand("register", "Rigid jitter correction against the temporal median");
  regc->add_option("input", reg.input, "Input stack")->required();
  regc->add_option("output", reg.output, "Output stack")->required();
  regc->add_option("--shifts", reg.shifts, "Shifts CSV path (default <output>_shifts.csv)");
  regc->add_flag("--subpixel", reg.subpixel, "Report parabolic subpixel shifts");
  regc->add_option("--truth", reg.truth, "True shifts CSV for a recovery-rate report");

  MetricsArgs met;
  auto* metc = app.add_subcommand("metrics", "FPSNR/SPSNR of stacks and correlation of maps");
  metc->add_option("estimate", met.estimate, "Estimated stack");
  metc->add_option("truth", met.truth, "Ground-truth stack");
  metc->add_option("--peak", met.peak, "Peak value");
  metc->add_option("--map", met.map, "Estimated map");
  metc->add_option("--truth-map", met.truth_map, "Ground-truth map");
  metc->add_option("--mode", met.mode, "Map mode recorded with the result")->check(CLI::IsMember({"edge", "phase"}));

  SweepArgs sw;
  auto* swc = app.add_subcommand("sweep", "Run an evaluation grid");
  swc->add_option("config", sw.config, "Sweep config JSON")->required()->check(CLI::ExistingFile);
  swc->add_option("output", sw.output, "Output CSV")->required();
  swc->add_option("--sure-curves", sw.curves, "Also write SURE/MSE curves as JSON");

  LibraryArgs lib;
  auto* libc = app.add_subcommand("library", "Export the built-in reference library");
  libc->add_option("csv", lib.csv, "Output CSV")->required();
  libc->add_option("states", lib.states, "Output states JSON")->required();
  libc->add_option("--frames", lib.frames, "Number of energies");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*simulate) run_simulate(sim);
    else if (*denoise) run_denoise(den);
    else if (*fitc) run_fit(fit);
    else if (*regc) run_register(reg);
    else if (*metc) {
      if (met.estimate.empty() != met.truth.empty()) throw txm::InvalidArgument("metrics needs both stacks or neither");
      if (met.map.empty() != met.truth_map.empty()) throw txm::InvalidArgument("--map and --truth-map go together");
      if (met.estimate.empty() && met.map.empty()) throw txm::InvalidArgument("nothing to compare");
      run_metrics(met);
    } else if (*swc) run_sweep_cmd(sw);
    else if (*libc) run_library(lib);
  } catch (const txm::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
