#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "txm/denoisers.hpp"
#include "txm/phantom.hpp"
#include "txm/sum.hpp"
#include "txm/xanes.hpp"

namespace txm {

enum class Method { noisy, medfilt3, svd, sum };
enum class Order { none, register_first, denoise_first };

const char* to_string(Method m);
const char* to_string(Order o);
Method parse_method(std::string_view text);
Order parse_order(std::string_view text);

/// Grid of phantom scenarios times methods. Registration orders only expand
/// cells whose jitter amplitude is non-zero; otherwise the order is "none".
struct SweepConfig {
  PhantomSpec phantom; // sigma, jitter, fraction and seed are overridden per cell
  std::vector<double> sigmas{10.0, 60.0, 150.0};
  std::vector<int> jitters{0};
  std::vector<double> fractions{1.0};
  std::vector<std::uint64_t> seeds{0};
  std::vector<Method> methods{Method::noisy, Method::medfilt3, Method::svd, Method::sum};
  std::vector<Order> orders{Order::register_first, Order::denoise_first};
  DenoiserSpec denoiser;
  Factorization factorization;
  int medfilt_window = 3;
  bool estimate_sigma = false; // otherwise the phantom's sigma is passed as known
  MapMode map_mode = MapMode::edge;

  static SweepConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
  nlohmann::ordered_json to_json() const;
  std::size_t cell_count() const;
};

struct SweepRow {
  double sigma = 0.0;
  int jitter = 0;
  double fraction = 1.0;
  std::uint64_t seed = 0;
  Method method = Method::noisy;
  Order order = Order::none;
  std::optional<double> fpsnr, spsnr, correlation, shift_recovery;
  double runtime_s = 0.0;
  std::optional<long> k;
  std::string error;
};

/// Runs every cell; failures are recorded in SweepRow::error. When
/// `sure_curves` is given, it receives one entry per SVD/SUM cell holding the
/// SURE and true-MSE curves over the candidate thresholds.
std::vector<SweepRow> run_sweep(const SweepConfig& cfg, nlohmann::ordered_json* sure_curves = nullptr);

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);
std::string sweep_csv_header();

} // namespace txm
