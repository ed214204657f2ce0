#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace txm {

/// An M x N x T stack of transmission images. Data is frame-major and
/// row-major within each frame, so frame t occupies
/// data[t*M*N, (t+1)*M*N). Immutable after construction.
class ImageStack {
public:
  ImageStack(std::size_t width, std::size_t height, std::size_t frames, std::vector<float> data,
             std::optional<std::vector<double>> energies = std::nullopt, double peak = 255.0);

  static ImageStack zeros(std::size_t width, std::size_t height, std::size_t frames);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t frames() const { return frames_; }
  std::size_t pixels() const { return width_ * height_; }
  std::size_t size() const { return data_.size(); }
  double peak() const { return peak_; }

  std::span<const float> data() const { return data_; }
  std::span<const float> frame(std::size_t t) const { return std::span<const float>(data_).subspan(t * pixels(), pixels()); }
  float at(std::size_t x, std::size_t y, std::size_t t) const { return data_[t * pixels() + y * width_ + x]; }

  const std::optional<std::vector<double>>& energies() const { return energies_; }

  // Same geometry, energies and peak with new values.
  ImageStack with_data(std::vector<float> data) const;

private:
  std::size_t width_, height_, frames_;
  std::vector<float> data_;
  std::optional<std::vector<double>> energies_;
  double peak_;
};

enum class NoiseSource { given, estimated };

struct NoiseModel {
  double sigma = 0.0;
  NoiseSource source = NoiseSource::given;
};

const char* to_string(NoiseSource source);

/// rows = pixels (M*N), cols = frames (T).
using StackMatrix = Eigen::MatrixXd;

StackMatrix to_matrix(const ImageStack& stack);
ImageStack from_matrix(const StackMatrix& m, std::size_t width, std::size_t height,
                       std::optional<std::vector<double>> energies = std::nullopt, double peak = 255.0);

/// Sidecar/payload pair for a stack container. Accepts "<name>", "<name>.json" or "<name>.f32".
struct StackPaths {
  std::filesystem::path sidecar;
  std::filesystem::path payload;
};
StackPaths stack_paths(const std::filesystem::path& path);

/// Parsed sidecar without the payload, for streaming access.
struct StackHeader {
  std::size_t width = 0, height = 0, frames = 0;
  double peak = 255.0;
  std::optional<std::vector<double>> energies;
};
StackHeader read_header(const std::filesystem::path& path);
void write_header(const StackHeader& header, const std::filesystem::path& path);

ImageStack load_stack(const std::filesystem::path& path);

/// Sequential-or-random frame access to a stack container without loading it.
class FrameReader {
public:
  explicit FrameReader(const std::filesystem::path& path);
  const StackHeader& header() const { return header_; }
  /// Reads frames [first, first + count) into out (count * width * height values).
  void read(std::size_t first, std::size_t count, std::span<float> out);

private:
  StackHeader header_;
  std::filesystem::path payload_;
  std::ifstream in_;
};

/// Writes a container frame by frame; the sidecar is written on construction.
class FrameWriter {
public:
  FrameWriter(const StackHeader& header, const std::filesystem::path& path);
  void write(std::span<const float> frame);
  /// Flushes and checks that exactly header.frames frames were written.
  void close();

private:
  StackHeader header_;
  std::filesystem::path payload_;
  std::ofstream out_;
  std::size_t written_ = 0;
};
void save_stack(const ImageStack& stack, const std::filesystem::path& path);

/// Robust sigma of one frame: MAD of the residual against a 3x3 local mean,
/// divided by the residual's noise gain.
double estimate_frame_sigma(std::span<const float> frame, std::size_t width, std::size_t height);

/// Median of per-frame estimates.
NoiseModel estimate_noise_sigma(const ImageStack& stack);

/// Symmetric (half-sample) reflection of an arbitrary index into [0, n).
inline std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n)
{
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

double median_of(std::vector<double> values);

/// Integer translation: out(x, y) = in(x - dx, y - dy) with reflected fill.
std::vector<float> translate_frame(std::span<const float> frame, std::size_t width, std::size_t height, int dx, int dy);

} // namespace txm
