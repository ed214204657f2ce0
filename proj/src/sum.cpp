#include "txm/sum.hpp"

#include <charconv>
#include <chrono>

#include "txm/error.hpp"

namespace txm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

void check_config(const SumConfig& cfg)
{
  cfg.denoiser.validate();
  if (cfg.sigma && !(*cfg.sigma >= 0.0)) throw InvalidArgument("sigma must be >= 0");
  if (cfg.factorization.kind == Factorization::Kind::randomized && cfg.factorization.rank < 8)
    throw InvalidArgument("randomized factorization needs k >= 8");
}

RandomizedSvdOptions options_for(const SumConfig& cfg)
{
  const auto& f = cfg.factorization;
  return {f.rank, f.oversampling, f.power_iterations, f.seed, cfg.block_columns};
}

// Rank selection and coefficient denoising; returns the MN x K matrix of
// denoised coefficient images.
Eigen::MatrixXd denoised_coefficients(const SubspaceDecomposition& d, std::size_t width, std::size_t height, const SumConfig& cfg,
                                      SumReport& report)
{
  report.sure = select_rank(d, report.noise.sigma, cfg.threshold);
  report.k = report.sure.selected_k;
  report.delta = report.sure.selected_delta;
  report.empty_subspace = report.sure.empty_subspace;

  const Index K = report.k;
  Eigen::MatrixXd C(d.rows(), K);
  report.denoise_seconds.assign(static_cast<std::size_t>(K), 0.0);
#pragma omp parallel for schedule(dynamic, 1)
  for (Index k = 0; k < K; ++k) {
    const auto start = Clock::now();
    Image coeff(width, height);
    for (Index i = 0; i < d.rows(); ++i) coeff.data[static_cast<std::size_t>(i)] = d.U(i, k) * d.s(k);
    const Image clean = denoise_rescaled(coeff, report.noise.sigma, cfg.denoiser);
    for (Index i = 0; i < d.rows(); ++i) C(i, k) = clean.data[static_cast<std::size_t>(i)];
    report.denoise_seconds[static_cast<std::size_t>(k)] = seconds_since(start);
  }
  return C;
}

// One output frame; shared by both paths so their rounding is identical.
void reconstruct_frame(const Eigen::MatrixXd& C, const Eigen::MatrixXd& V, Index t, std::span<float> out)
{
  if (C.cols() == 0) {
    std::fill(out.begin(), out.end(), 0.0f);
    return;
  }
  const Eigen::VectorXd v = V.row(t).head(C.cols()).transpose();
  const Eigen::VectorXd x = C * v;
  for (Index i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(x(i));
}

} // namespace

StackFileSource::StackFileSource(FrameReader& reader) : reader_(reader) {}

Index StackFileSource::rows() const { return static_cast<Index>(reader_.header().width * reader_.header().height); }

Index StackFileSource::cols() const { return static_cast<Index>(reader_.header().frames); }

void StackFileSource::read(Index first, Index count, Eigen::MatrixXd& block)
{
  buffer_.resize(static_cast<std::size_t>(rows() * count));
  reader_.read(static_cast<std::size_t>(first), static_cast<std::size_t>(count), buffer_);
  block = Eigen::Map<const Eigen::MatrixXf>(buffer_.data(), rows(), count).cast<double>();
}

Factorization Factorization::parse(std::string_view text)
{
  if (text == "exact") return exact();
  constexpr std::string_view prefix = "rsvd";
  if (text.substr(0, prefix.size()) != prefix) throw InvalidArgument("unknown factorization '" + std::string(text) + "'");
  Factorization f = randomized(20);
  std::string_view rest = text.substr(prefix.size());
  if (rest.empty()) return f;
  if (rest.front() != ':') throw InvalidArgument("unknown factorization '" + std::string(text) + "'");
  rest.remove_prefix(1);

  std::vector<std::uint64_t> fields;
  while (true) {
    const auto comma = rest.find(',');
    const std::string_view part = rest.substr(0, comma);
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (part.empty() || ec != std::errc() || ptr != part.data() + part.size())
      throw InvalidArgument("invalid factorization field '" + std::string(part) + "'");
    fields.push_back(v);
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  if (fields.size() > 4) throw InvalidArgument("rsvd takes at most k,p,q,seed");
  f.rank = static_cast<Index>(fields[0]);
  if (fields.size() > 1) f.oversampling = static_cast<Index>(fields[1]);
  if (fields.size() > 2) f.power_iterations = static_cast<int>(fields[2]);
  if (fields.size() > 3) f.seed = fields[3];
  return f;
}

std::string Factorization::to_string() const
{
  if (kind == Kind::exact) return "exact";
  return "rsvd:" + std::to_string(rank) + "," + std::to_string(oversampling) + "," + std::to_string(power_iterations) + "," +
         std::to_string(seed);
}

SumResult sum_denoise(const ImageStack& stack, const SumConfig& cfg)
{
  check_config(cfg);
  const auto start = Clock::now();
  SumReport report;
  report.denoiser = cfg.denoiser.to_string();
  report.factorization = cfg.factorization.to_string();
  report.noise = cfg.sigma ? NoiseModel{*cfg.sigma, NoiseSource::given} : estimate_noise_sigma(stack);

  const StackMatrix A = to_matrix(stack);
  const auto factorize_start = Clock::now();
  SubspaceDecomposition d;
  if (cfg.factorization.kind == Factorization::Kind::exact) {
    d = svd_thin(A);
  } else {
    MatrixColumnSource source(A);
    d = randomized_svd(source, options_for(cfg));
  }
  report.factorize_seconds = seconds_since(factorize_start);

  const Eigen::MatrixXd C = denoised_coefficients(d, stack.width(), stack.height(), cfg, report);

  const auto reconstruct_start = Clock::now();
  std::vector<float> out(stack.size());
  const std::size_t pixels = stack.pixels();
#pragma omp parallel for schedule(static)
  for (Index t = 0; t < static_cast<Index>(stack.frames()); ++t)
    reconstruct_frame(C, d.V, t, std::span<float>(out).subspan(static_cast<std::size_t>(t) * pixels, pixels));
  report.reconstruct_seconds = seconds_since(reconstruct_start);
  report.total_seconds = seconds_since(start);
  return {stack.with_data(std::move(out)), std::move(report)};
}

SumReport sum_denoise_streaming(const std::filesystem::path& input, const std::filesystem::path& output, const SumConfig& cfg)
{
  check_config(cfg);
  if (cfg.factorization.kind != Factorization::Kind::randomized)
    throw InvalidArgument("streaming denoising needs a randomized factorization");
  if (std::filesystem::weakly_canonical(stack_paths(input).payload) == std::filesystem::weakly_canonical(stack_paths(output).payload))
    throw InvalidArgument("streaming output must differ from its input");

  const auto start = Clock::now();
  FrameReader reader(input);
  const StackHeader header = reader.header();
  const std::size_t pixels = header.width * header.height;

  SumReport report;
  report.denoiser = cfg.denoiser.to_string();
  report.factorization = cfg.factorization.to_string();
  std::vector<float> frame(pixels);
  if (cfg.sigma) {
    report.noise = {*cfg.sigma, NoiseSource::given};
  } else {
    if (pixels < 16) throw InvalidArgument("noise estimation needs at least 16 pixels per frame");
    std::vector<double> per_frame;
    per_frame.reserve(header.frames);
    for (std::size_t t = 0; t < header.frames; ++t) {
      reader.read(t, 1, frame);
      per_frame.push_back(estimate_frame_sigma(frame, header.width, header.height));
    }
    report.noise = {median_of(std::move(per_frame)), NoiseSource::estimated};
  }

  const auto factorize_start = Clock::now();
  StackFileSource source(reader);
  const SubspaceDecomposition d = randomized_svd(source, options_for(cfg));
  report.factorize_seconds = seconds_since(factorize_start);

  const Eigen::MatrixXd C = denoised_coefficients(d, header.width, header.height, cfg, report);

  const auto reconstruct_start = Clock::now();
  FrameWriter writer(header, output);
  for (std::size_t t = 0; t < header.frames; ++t) {
    reconstruct_frame(C, d.V, static_cast<Index>(t), frame);
    writer.write(frame);
  }
  writer.close();
  report.reconstruct_seconds = seconds_since(reconstruct_start);
  report.total_seconds = seconds_since(start);
  return report;
}

nlohmann::ordered_json to_json(const SumReport& report)
{
  nlohmann::ordered_json j;
  j["selected_k"] = report.k;
  j["selected_delta"] = report.delta;
  j["sigma"] = report.noise.sigma;
  j["sigma_source"] = to_string(report.noise.source);
  j["denoiser"] = report.denoiser;
  j["factorization"] = report.factorization;
  j["empty_subspace"] = report.empty_subspace;
  j["factorize_seconds"] = report.factorize_seconds;
  j["denoise_seconds"] = report.denoise_seconds;
  j["reconstruct_seconds"] = report.reconstruct_seconds;
  j["total_seconds"] = report.total_seconds;
  j["sure"] = to_json(report.sure);
  return j;
}

} // namespace txm
