#include "txm/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <vector>

#include <png.h>

#include "txm/error.hpp"

namespace txm {

namespace {

// Nine evenly spaced samples of matplotlib's viridis.
constexpr unsigned char kAnchors[9][3] = {{68, 1, 84},    {71, 44, 122},  {59, 81, 139},   {44, 113, 142}, {33, 144, 141},
                                          {39, 173, 129}, {92, 200, 99},  {170, 220, 50},  {253, 231, 37}};

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

} // namespace

std::array<unsigned char, 3> colormap(double u)
{
  if (!std::isfinite(u)) u = 0.0;
  const double pos = std::clamp(u, 0.0, 1.0) * 8.0;
  const int i = std::min(7, static_cast<int>(pos));
  const double a = pos - i;
  std::array<unsigned char, 3> rgb{};
  for (int c = 0; c < 3; ++c) rgb[static_cast<std::size_t>(c)] = static_cast<unsigned char>(std::lround((1.0 - a) * kAnchors[i][c] + a * kAnchors[i + 1][c]));
  return rgb;
}

void render_map_png(const ChemicalMap& map, const std::filesystem::path& path, std::optional<double> lo, std::optional<double> hi)
{
  if (map.values.size() != map.width * map.height || map.values.empty()) throw InvalidArgument("malformed map");
  double vmin = std::numeric_limits<double>::infinity(), vmax = -vmin;
  for (std::size_t i = 0; i < map.values.size(); ++i)
    if (map.valid.empty() || map.valid[i]) {
      vmin = std::min(vmin, map.values[i]);
      vmax = std::max(vmax, map.values[i]);
    }
  const double a = lo.value_or(vmin), b = hi.value_or(vmax);
  const double span = b > a ? b - a : 1.0;

  std::vector<unsigned char> rgb(map.values.size() * 3, 0);
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    if (!map.valid.empty() && !map.valid[i]) continue;
    const auto c = colormap((map.values[i] - a) / span);
    std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }

  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw Error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed writing PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(map.width), static_cast<png_uint_32>(map.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < map.height; ++y) png_write_row(png, rgb.data() + y * map.width * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

} // namespace txm
