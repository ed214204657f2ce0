#include "txm/stack.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "txm/error.hpp"

namespace txm {

namespace fs = std::filesystem;

namespace {

void validate_energies(const std::vector<double>& energies, std::size_t frames)
{
  if (energies.size() != frames)
    throw Error("energies length " + std::to_string(energies.size()) + " does not match frame count " + std::to_string(frames));
  for (std::size_t i = 0; i < energies.size(); ++i) {
    if (!std::isfinite(energies[i])) throw Error("non-finite energy value");
    if (i > 0 && !(energies[i] > energies[i - 1])) throw Error("energies must be strictly increasing");
  }
}

std::uint32_t to_little_endian(std::uint32_t v)
{
  if constexpr (std::endian::native == std::endian::big)
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  return v;
}

} // namespace

ImageStack::ImageStack(std::size_t width, std::size_t height, std::size_t frames, std::vector<float> data,
                       std::optional<std::vector<double>> energies, double peak)
  : width_(width), height_(height), frames_(frames), data_(std::move(data)), energies_(std::move(energies)), peak_(peak)
{
  if (width_ < 1 || height_ < 1 || frames_ < 1) throw Error("stack dimensions must be >= 1");
  if (data_.size() != width_ * height_ * frames_)
    throw Error("stack data length " + std::to_string(data_.size()) + " != width*height*frames = " +
                std::to_string(width_ * height_ * frames_));
  if (!(peak_ > 0.0) || !std::isfinite(peak_)) throw Error("peak must be positive and finite");
  for (float v : data_)
    if (!std::isfinite(v)) throw Error("stack contains non-finite values");
  if (energies_) validate_energies(*energies_, frames_);
}

ImageStack ImageStack::zeros(std::size_t width, std::size_t height, std::size_t frames)
{
  return ImageStack(width, height, frames, std::vector<float>(width * height * frames, 0.0f));
}

ImageStack ImageStack::with_data(std::vector<float> data) const
{
  return ImageStack(width_, height_, frames_, std::move(data), energies_, peak_);
}

const char* to_string(NoiseSource source)
{
  return source == NoiseSource::given ? "given" : "estimated";
}

StackMatrix to_matrix(const ImageStack& stack)
{
  const auto n = static_cast<Eigen::Index>(stack.pixels());
  const auto t = static_cast<Eigen::Index>(stack.frames());
  StackMatrix m(n, t);
  const float* src = stack.data().data();
  for (Eigen::Index j = 0; j < t; ++j)
    m.col(j) = Eigen::Map<const Eigen::VectorXf>(src + j * n, n).cast<double>();
  return m;
}

ImageStack from_matrix(const StackMatrix& m, std::size_t width, std::size_t height,
                       std::optional<std::vector<double>> energies, double peak)
{
  if (static_cast<std::size_t>(m.rows()) != width * height)
    throw Error("matrix has " + std::to_string(m.rows()) + " rows, expected " + std::to_string(width * height));
  std::vector<float> data(static_cast<std::size_t>(m.size()));
  Eigen::Map<Eigen::MatrixXf>(data.data(), m.rows(), m.cols()) = m.cast<float>();
  return ImageStack(width, height, static_cast<std::size_t>(m.cols()), std::move(data), std::move(energies), peak);
}

StackPaths stack_paths(const fs::path& path)
{
  fs::path base = path;
  if (base.extension() == ".json" || base.extension() == ".f32") base.replace_extension();
  fs::path sidecar = base, payload = base;
  sidecar += ".json";
  payload += ".f32";
  return {sidecar, payload};
}

StackHeader read_header(const fs::path& path)
{
  const auto paths = stack_paths(path);
  std::ifstream in(paths.sidecar);
  if (!in) throw Error("cannot open sidecar " + paths.sidecar.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed sidecar " + paths.sidecar.string() + ": " + e.what());
  }
  StackHeader h;
  try {
    if (j.value("dtype", std::string("f32le")) != "f32le") throw Error("unsupported dtype in " + paths.sidecar.string());
    h.width = j.at("width").get<std::size_t>();
    h.height = j.at("height").get<std::size_t>();
    h.frames = j.at("frames").get<std::size_t>();
    h.peak = j.value("peak", 255.0);
    if (j.contains("energies") && !j["energies"].is_null()) {
      h.energies = j["energies"].get<std::vector<double>>();
      validate_energies(*h.energies, h.frames);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("invalid sidecar " + paths.sidecar.string() + ": " + e.what());
  }
  if (h.width < 1 || h.height < 1 || h.frames < 1) throw Error("sidecar dimensions must be >= 1");
  return h;
}

void write_header(const StackHeader& h, const fs::path& path)
{
  const auto paths = stack_paths(path);
  nlohmann::ordered_json j;
  j["width"] = h.width;
  j["height"] = h.height;
  j["frames"] = h.frames;
  j["dtype"] = "f32le";
  j["peak"] = h.peak;
  if (h.energies) j["energies"] = *h.energies;
  std::ofstream out(paths.sidecar, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + paths.sidecar.string());
  out << j.dump(2) << '\n';
  if (!out) throw Error("failed writing " + paths.sidecar.string());
}

ImageStack load_stack(const fs::path& path)
{
  const auto paths = stack_paths(path);
  const StackHeader h = read_header(path);
  std::error_code ec;
  const auto bytes = fs::file_size(paths.payload, ec);
  if (ec) throw Error("cannot open payload " + paths.payload.string());
  const std::size_t count = h.width * h.height * h.frames;
  if (bytes != count * 4)
    throw Error("payload size mismatch: " + paths.payload.string() + " has " + std::to_string(bytes) + " bytes, header declares " +
                std::to_string(count) + " f32 values");
  std::ifstream in(paths.payload, std::ios::binary);
  if (!in) throw Error("cannot open payload " + paths.payload.string());
  std::vector<float> data(count);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * 4));
  if (!in) throw Error("short read on " + paths.payload.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (float& v : data) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      u = to_little_endian(u);
      std::memcpy(&v, &u, 4);
    }
  }
  return ImageStack(h.width, h.height, h.frames, std::move(data), h.energies, h.peak);
}

void save_stack(const ImageStack& stack, const fs::path& path)
{
  const auto paths = stack_paths(path);
  write_header({stack.width(), stack.height(), stack.frames(), stack.peak(), stack.energies()}, path);
  std::ofstream out(paths.payload, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + paths.payload.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(stack.data().data()), static_cast<std::streamsize>(stack.size() * 4));
  } else {
    for (float v : stack.data()) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      u = to_little_endian(u);
      out.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
  if (!out) throw Error("failed writing " + paths.payload.string());
}

FrameReader::FrameReader(const fs::path& path) : header_(read_header(path)), payload_(stack_paths(path).payload)
{
  std::error_code ec;
  const auto bytes = fs::file_size(payload_, ec);
  if (ec) throw Error("cannot open payload " + payload_.string());
  const std::size_t count = header_.width * header_.height * header_.frames;
  if (bytes != count * 4)
    throw Error("payload size mismatch: " + payload_.string() + " has " + std::to_string(bytes) + " bytes, header declares " +
                std::to_string(count) + " f32 values");
  in_.open(payload_, std::ios::binary);
  if (!in_) throw Error("cannot open payload " + payload_.string());
}

void FrameReader::read(std::size_t first, std::size_t count, std::span<float> out)
{
  const std::size_t pixels = header_.width * header_.height;
  if (first + count > header_.frames || out.size() != count * pixels) throw InvalidArgument("frame range out of bounds");
  in_.seekg(static_cast<std::streamoff>(first * pixels * 4));
  in_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size() * 4));
  if (!in_) throw Error("short read on " + payload_.string());
  for (float& v : out) {
    if constexpr (std::endian::native == std::endian::big) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      u = to_little_endian(u);
      std::memcpy(&v, &u, 4);
    }
    if (!std::isfinite(v)) throw Error("stack contains non-finite values");
  }
}

FrameWriter::FrameWriter(const StackHeader& header, const fs::path& path) : header_(header), payload_(stack_paths(path).payload)
{
  if (header_.width < 1 || header_.height < 1 || header_.frames < 1) throw Error("stack dimensions must be >= 1");
  if (header_.energies) validate_energies(*header_.energies, header_.frames);
  write_header(header_, path);
  out_.open(payload_, std::ios::binary | std::ios::trunc);
  if (!out_) throw Error("cannot write " + payload_.string());
}

void FrameWriter::write(std::span<const float> frame)
{
  if (frame.size() != header_.width * header_.height) throw InvalidArgument("frame size does not match header");
  if (written_ == header_.frames) throw InvalidArgument("all frames already written");
  if constexpr (std::endian::native == std::endian::little) {
    out_.write(reinterpret_cast<const char*>(frame.data()), static_cast<std::streamsize>(frame.size() * 4));
  } else {
    for (float v : frame) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      u = to_little_endian(u);
      out_.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
  if (!out_) throw Error("failed writing " + payload_.string());
  ++written_;
}

void FrameWriter::close()
{
  out_.close();
  if (!out_) throw Error("failed writing " + payload_.string());
  if (written_ != header_.frames)
    throw Error("wrote " + std::to_string(written_) + " frames, header declares " + std::to_string(header_.frames));
}

double median_of(std::vector<double> values)
{
  if (values.empty()) throw Error("median of empty set");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double hi = values[mid];
  if (values.size() % 2 == 1) return hi;
  const double lo = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

double estimate_frame_sigma(std::span<const float> frame, std::size_t width, std::size_t height)
{
  if (width * height < 16) throw InvalidArgument("noise estimation needs at least 16 pixels per frame");
  // r = x - mean3x3(x) = (8/9) x - (1/9) sum(neighbours); gain = sqrt(64 + 8) / 9.
  constexpr double gain = 0.94280904158206336587; // sqrt(72)/9
  constexpr double mad_to_sigma = 1.482602218505602;
  const auto w = static_cast<std::ptrdiff_t>(width), h = static_cast<std::ptrdiff_t>(height);
  const bool interior = w >= 3 && h >= 3;
  const std::ptrdiff_t x0 = interior ? 1 : 0, x1 = interior ? w - 1 : w;
  const std::ptrdiff_t y0 = interior ? 1 : 0, y1 = interior ? h - 1 : h;

  std::vector<double> residual;
  residual.reserve(static_cast<std::size_t>((x1 - x0) * (y1 - y0)));
  for (std::ptrdiff_t y = y0; y < y1; ++y) {
    for (std::ptrdiff_t x = x0; x < x1; ++x) {
      double sum = 0.0;
      for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx)
          sum += frame[static_cast<std::size_t>(reflect_index(y + dy, h) * w + reflect_index(x + dx, w))];
      residual.push_back(static_cast<double>(frame[static_cast<std::size_t>(y * w + x)]) - sum / 9.0);
    }
  }
  const double centre = median_of(residual);
  for (double& r : residual) r = std::abs(r - centre);
  return mad_to_sigma * median_of(std::move(residual)) / gain;
}

NoiseModel estimate_noise_sigma(const ImageStack& stack)
{
  if (stack.pixels() < 16) throw InvalidArgument("noise estimation needs at least 16 pixels per frame");
  std::vector<double> per_frame(stack.frames());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(stack.frames()); ++t)
    per_frame[static_cast<std::size_t>(t)] = estimate_frame_sigma(stack.frame(static_cast<std::size_t>(t)), stack.width(), stack.height());
  return {median_of(std::move(per_frame)), NoiseSource::estimated};
}

std::vector<float> translate_frame(std::span<const float> frame, std::size_t width, std::size_t height, int dx, int dy)
{
  if (frame.size() != width * height) throw InvalidArgument("frame size does not match width*height");
  const auto w = static_cast<std::ptrdiff_t>(width), h = static_cast<std::ptrdiff_t>(height);
  std::vector<float> out(frame.size());
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    const std::ptrdiff_t sy = reflect_index(y - dy, h);
    for (std::ptrdiff_t x = 0; x < w; ++x) out[static_cast<std::size_t>(y * w + x)] = frame[static_cast<std::size_t>(sy * w + reflect_index(x - dx, w))];
  }
  return out;
}

} // namespace txm
