#include "txm/sweep.hpp"

#include <charconv>
#include <chrono>
#include <fstream>

#include "txm/error.hpp"
#include "txm/metrics.hpp"
#include "txm/registration.hpp"

namespace txm {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Scenario {
  double sigma;
  int jitter;
  double fraction;
  std::uint64_t seed;
};

std::string number(double v)
{
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string csv_escape(const std::string& s)
{
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + '"';
}

template <typename T>
std::vector<T> list_or(const nlohmann::json& j, const char* key, std::vector<T> fallback)
{
  if (!j.contains(key)) return fallback;
  auto v = j.at(key).get<std::vector<T>>();
  if (v.empty()) throw InvalidArgument(std::string("sweep list '") + key + "' is empty");
  return v;
}

struct CellOutput {
  ImageStack stack;
  std::optional<long> k;
  std::optional<std::vector<Shift>> shifts;
  std::optional<SumReport> report;
};

CellOutput apply_method(const SweepConfig& cfg, Method method, const ImageStack& input, double sigma)
{
  switch (method) {
  case Method::noisy:
    return {input, std::nullopt, std::nullopt, std::nullopt};
  case Method::medfilt3:
    return {medfilt3(input, cfg.medfilt_window), std::nullopt, std::nullopt, std::nullopt};
  case Method::svd:
  case Method::sum: {
    SumConfig sc;
    sc.denoiser = method == Method::svd ? DenoiserSpec::identity() : cfg.denoiser;
    sc.factorization = cfg.factorization;
    if (!cfg.estimate_sigma) sc.sigma = sigma;
    SumResult r = sum_denoise(input, sc);
    const long k = static_cast<long>(r.report.k);
    return {std::move(r.stack), k, std::nullopt, std::move(r.report)};
  }
  }
  throw InvalidArgument("unknown method");
}

} // namespace

const char* to_string(Method m)
{
  switch (m) {
  case Method::noisy:
    return "noisy";
  case Method::medfilt3:
    return "medfilt3";
  case Method::svd:
    return "svd";
  case Method::sum:
    return "sum";
  }
  return "?";
}

const char* to_string(Order o)
{
  switch (o) {
  case Order::none:
    return "none";
  case Order::register_first:
    return "register-first";
  case Order::denoise_first:
    return "denoise-first";
  }
  return "?";
}

Method parse_method(std::string_view text)
{
  for (Method m : {Method::noisy, Method::medfilt3, Method::svd, Method::sum})
    if (text == to_string(m)) return m;
  throw InvalidArgument("unknown method '" + std::string(text) + "'");
}

Order parse_order(std::string_view text)
{
  for (Order o : {Order::register_first, Order::denoise_first})
    if (text == to_string(o)) return o;
  throw InvalidArgument("unknown registration order '" + std::string(text) + "'");
}

SweepConfig SweepConfig::from_json(const nlohmann::json& j, const fs::path& base)
{
  if (!j.is_object()) throw InvalidArgument("sweep config must be a JSON object");
  SweepConfig c;
  try {
    if (j.contains("phantom")) c.phantom = PhantomSpec::from_json(j.at("phantom"), base);
    c.sigmas = list_or(j, "sigmas", c.sigmas);
    c.jitters = list_or(j, "jitters", c.jitters);
    c.fractions = list_or(j, "fractions", c.fractions);
    c.seeds = list_or(j, "seeds", c.seeds);
    if (j.contains("methods")) {
      c.methods.clear();
      for (const auto& m : list_or<std::string>(j, "methods", {})) c.methods.push_back(parse_method(m));
    }
    if (j.contains("orders")) {
      c.orders.clear();
      for (const auto& o : list_or<std::string>(j, "orders", {})) c.orders.push_back(parse_order(o));
    }
    if (j.contains("denoiser")) c.denoiser = DenoiserSpec::parse(j.at("denoiser").get<std::string>());
    if (j.contains("factorization")) c.factorization = Factorization::parse(j.at("factorization").get<std::string>());
    c.medfilt_window = j.value("medfilt_window", c.medfilt_window);
    if (j.contains("sigma")) {
      const auto s = j.at("sigma").get<std::string>();
      if (s != "given" && s != "estimated") throw InvalidArgument("sweep sigma must be 'given' or 'estimated'");
      c.estimate_sigma = s == "estimated";
    }
    if (j.contains("map_mode")) c.map_mode = parse_map_mode(j.at("map_mode").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed sweep config: ") + e.what());
  }
  for (double s : c.sigmas)
    if (!(s >= 0.0)) throw InvalidArgument("sweep sigmas must be >= 0");
  for (int a : c.jitters)
    if (a < 0) throw InvalidArgument("sweep jitter amplitudes must be >= 0");
  for (double f : c.fractions)
    if (!(f > 0.0 && f <= 1.0)) throw InvalidArgument("sweep fractions must lie in (0, 1]");
  return c;
}

nlohmann::ordered_json SweepConfig::to_json() const
{
  nlohmann::ordered_json j;
  j["phantom"] = phantom.to_json();
  j["sigmas"] = sigmas;
  j["jitters"] = jitters;
  j["fractions"] = fractions;
  j["seeds"] = seeds;
  for (Method m : methods) j["methods"].push_back(to_string(m));
  for (Order o : orders) j["orders"].push_back(to_string(o));
  j["denoiser"] = denoiser.to_string();
  j["factorization"] = factorization.to_string();
  j["medfilt_window"] = medfilt_window;
  j["sigma"] = estimate_sigma ? "estimated" : "given";
  j["map_mode"] = txm::to_string(map_mode);
  return j;
}

std::size_t SweepConfig::cell_count() const
{
  std::size_t per_jitter = 0;
  for (int a : jitters) per_jitter += a > 0 ? orders.size() : 1;
  return sigmas.size() * per_jitter * fractions.size() * seeds.size() * methods.size();
}

std::vector<SweepRow> run_sweep(const SweepConfig& cfg, nlohmann::ordered_json* sure_curves)
{
  std::vector<Scenario> scenarios;
  for (double sigma : cfg.sigmas)
    for (int jitter : cfg.jitters)
      for (double fraction : cfg.fractions)
        for (std::uint64_t seed : cfg.seeds) scenarios.push_back({sigma, jitter, fraction, seed});

  std::vector<std::vector<SweepRow>> per_scenario(scenarios.size());
  std::vector<nlohmann::ordered_json> curves(scenarios.size(), nlohmann::ordered_json::array());

#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(scenarios.size()); ++si) {
    const Scenario& sc = scenarios[static_cast<std::size_t>(si)];
    auto& rows = per_scenario[static_cast<std::size_t>(si)];
    const std::vector<Order> orders = sc.jitter > 0 ? cfg.orders : std::vector<Order>{Order::none};

    std::optional<Phantom> phantom;
    std::string phantom_error;
    try {
      PhantomSpec spec = cfg.phantom;
      spec.sigma = sc.sigma;
      spec.jitter = sc.jitter;
      spec.fraction = sc.fraction;
      spec.seed = sc.seed;
      phantom = generate(spec);
    } catch (const std::exception& e) {
      phantom_error = std::string("phantom: ") + e.what();
    }

    for (Method method : cfg.methods)
      for (Order order : orders) {
        SweepRow row;
        row.sigma = sc.sigma;
        row.jitter = sc.jitter;
        row.fraction = sc.fraction;
        row.seed = sc.seed;
        row.method = method;
        row.order = order;
        if (!phantom) {
          row.error = phantom_error;
          rows.push_back(std::move(row));
          continue;
        }
        try {
          const auto start = Clock::now();
          CellOutput out = [&] {
            if (order == Order::register_first) {
              JitterCorrection reg = correct_jitter(phantom->noisy);
              CellOutput o = apply_method(cfg, method, reg.stack, sc.sigma);
              o.shifts = std::move(reg.shifts);
              return o;
            }
            CellOutput o = apply_method(cfg, method, phantom->noisy, sc.sigma);
            if (order == Order::denoise_first) {
              JitterCorrection reg = correct_jitter(o.stack);
              o.stack = std::move(reg.stack);
              o.shifts = std::move(reg.shifts);
            }
            return o;
          }();
          row.runtime_s = std::chrono::duration<double>(Clock::now() - start).count();
          row.k = out.k;
          if (out.shifts) row.shift_recovery = shift_recovery_rate(*out.shifts, phantom->truth.shifts);
          row.fpsnr = fpsnr(out.stack, phantom->truth.clean);
          row.spsnr = spsnr(out.stack, phantom->truth.clean);
          const ChemicalMap& truth = cfg.map_mode == MapMode::edge ? phantom->truth.edge_map : phantom->truth.state_map;
          row.correlation = map_correlation(chemical_map(out.stack, phantom->truth.library, cfg.map_mode), truth);

          if (sure_curves && out.report && !out.report->sure.sure.empty() && order != Order::denoise_first) {
            // Recompute the curve against the truth on the same input.
            const ImageStack& input = order == Order::register_first ? correct_jitter(phantom->noisy).stack : phantom->noisy;
            const SubspaceDecomposition d = svd_thin(to_matrix(input));
            SureReport rep = select_rank(d, out.report->noise.sigma, ThresholdConfig::sure_auto());
            rep.mse = true_mse_curve(d, to_matrix(phantom->truth.clean), rep);
            nlohmann::ordered_json entry;
            entry["sigma"] = sc.sigma;
            entry["jitter"] = sc.jitter;
            entry["fraction"] = sc.fraction;
            entry["seed"] = sc.seed;
            entry["method"] = to_string(method);
            entry["order"] = to_string(order);
            entry["curve"] = to_json(rep);
            curves[static_cast<std::size_t>(si)].push_back(std::move(entry));
          }
        } catch (const std::exception& e) {
          row.fpsnr.reset();
          row.spsnr.reset();
          row.correlation.reset();
          row.error = e.what();
        }
        rows.push_back(std::move(row));
      }
  }

  std::vector<SweepRow> all;
  for (auto& rows : per_scenario)
    for (auto& r : rows) all.push_back(std::move(r));
  if (sure_curves) {
    *sure_curves = nlohmann::ordered_json::array();
    for (auto& c : curves)
      for (auto& e : c) sure_curves->push_back(std::move(e));
  }
  if (all.size() != cfg.cell_count()) throw Error("sweep produced " + std::to_string(all.size()) + " rows, expected " + std::to_string(cfg.cell_count()));
  return all;
}

std::string sweep_csv_header() { return "sigma,jitter,fraction,seed,method,order,fpsnr,spsnr,correlation,shift_recovery,runtime_s,k,error"; }

void write_sweep_csv(const std::vector<SweepRow>& rows, const fs::path& path)
{
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  auto opt = [](const std::optional<double>& v) { return v ? number(*v) : std::string(); };
  out << sweep_csv_header() << '\n';
  for (const SweepRow& r : rows) {
    out << number(r.sigma) << ',' << r.jitter << ',' << number(r.fraction) << ',' << r.seed << ',' << to_string(r.method) << ','
        << to_string(r.order) << ',' << opt(r.fpsnr) << ',' << opt(r.spsnr) << ',' << opt(r.correlation) << ',' << opt(r.shift_recovery)
        << ',' << number(r.runtime_s) << ',' << (r.k ? std::to_string(*r.k) : std::string()) << ',' << csv_escape(r.error) << '\n';
  }
  if (!out) throw Error("failed writing " + path.string());
}

} // namespace txm
