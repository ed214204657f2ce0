#include "txm/denoisers.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "txm/error.hpp"

namespace txm {

Image::Image(std::size_t w, std::size_t h, std::vector<double> values) : width(w), height(h), data(std::move(values))
{
  if (data.size() != w * h) throw InvalidArgument("image data length does not match width*height");
}

namespace {

using Kind = DenoiserSpec::Kind;

bool odd_positive(int v) { return v >= 1 && v % 2 == 1; }

Image gaussian_blur(const Image& img, int radius)
{
  const double sd = radius / 2.0;
  const int half = static_cast<int>(std::ceil(3.0 * sd));
  std::vector<double> kernel(static_cast<std::size_t>(2 * half + 1));
  double total = 0.0;
  for (int i = -half; i <= half; ++i) total += kernel[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * i * i / (sd * sd));
  for (double& k : kernel) k /= total;

  const auto w = static_cast<std::ptrdiff_t>(img.width), h = static_cast<std::ptrdiff_t>(img.height);
  Image tmp(img.width, img.height), out(img.width, img.height);
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) acc += kernel[static_cast<std::size_t>(i + half)] * img.reflected(x + i, y);
      tmp(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = acc;
    }
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) acc += kernel[static_cast<std::size_t>(i + half)] * tmp.reflected(x, y + i);
      out(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = acc;
    }
  return out;
}

Image median_filter(const Image& img, int window)
{
  const int half = window / 2;
  Image out(img.width, img.height);
  std::vector<double> values(static_cast<std::size_t>(window * window));
  const auto mid = static_cast<std::ptrdiff_t>(values.size() / 2);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      std::size_t n = 0;
      for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx)
          values[n++] = img.reflected(static_cast<std::ptrdiff_t>(x) + dx, static_cast<std::ptrdiff_t>(y) + dy);
      std::nth_element(values.begin(), values.begin() + mid, values.end());
      out(x, y) = values[static_cast<std::size_t>(mid)];
    }
  return out;
}

// One orthonormal Haar step along rows (or columns) of the top-left w x h block.
void haar_forward(std::vector<double>& a, std::size_t stride, std::size_t w, std::size_t h, bool along_x)
{
  const double r = std::sqrt(0.5);
  const std::size_t n = along_x ? w : h, lines = along_x ? h : w;
  std::vector<double> buf(n);
  for (std::size_t l = 0; l < lines; ++l) {
    auto at = [&](std::size_t i) -> double& { return along_x ? a[l * stride + i] : a[i * stride + l]; };
    for (std::size_t i = 0; i < n / 2; ++i) {
      buf[i] = (at(2 * i) + at(2 * i + 1)) * r;
      buf[n / 2 + i] = (at(2 * i) - at(2 * i + 1)) * r;
    }
    for (std::size_t i = 0; i < n; ++i) at(i) = buf[i];
  }
}

void haar_inverse(std::vector<double>& a, std::size_t stride, std::size_t w, std::size_t h, bool along_x)
{
  const double r = std::sqrt(0.5);
  const std::size_t n = along_x ? w : h, lines = along_x ? h : w;
  std::vector<double> buf(n);
  for (std::size_t l = 0; l < lines; ++l) {
    auto at = [&](std::size_t i) -> double& { return along_x ? a[l * stride + i] : a[i * stride + l]; };
    for (std::size_t i = 0; i < n / 2; ++i) {
      buf[2 * i] = (at(i) + at(n / 2 + i)) * r;
      buf[2 * i + 1] = (at(i) - at(n / 2 + i)) * r;
    }
    for (std::size_t i = 0; i < n; ++i) at(i) = buf[i];
  }
}

void soft_threshold_block(std::vector<double>& a, std::size_t stride, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h,
                          double sigma)
{
  const double n = static_cast<double>(w * h);
  const double t = n > 1.0 ? sigma * std::sqrt(2.0 * std::log(n)) : 0.0;
  for (std::size_t y = y0; y < y0 + h; ++y)
    for (std::size_t x = x0; x < x0 + w; ++x) {
      double& c = a[y * stride + x];
      const double mag = std::abs(c) - t;
      c = mag > 0.0 ? std::copysign(mag, c) : 0.0;
    }
}

Image wavelet_soft(const Image& img, int levels, double sigma)
{
  const std::size_t unit = std::size_t{1} << levels;
  const std::size_t pw = (img.width + unit - 1) / unit * unit, ph = (img.height + unit - 1) / unit * unit;
  std::vector<double> a(pw * ph);
  for (std::size_t y = 0; y < ph; ++y)
    for (std::size_t x = 0; x < pw; ++x) a[y * pw + x] = img.reflected(static_cast<std::ptrdiff_t>(x), static_cast<std::ptrdiff_t>(y));

  std::size_t w = pw, h = ph;
  for (int l = 0; l < levels; ++l) {
    haar_forward(a, pw, w, h, true);
    haar_forward(a, pw, w, h, false);
    w /= 2;
    h /= 2;
  }
  for (int l = 0; l < levels; ++l) {
    soft_threshold_block(a, pw, w, 0, w, h, sigma);
    soft_threshold_block(a, pw, 0, h, w, h, sigma);
    soft_threshold_block(a, pw, w, h, w, h, sigma);
    w *= 2;
    h *= 2;
  }
  for (int l = 0; l < levels; ++l) {
    w /= 2;
    h /= 2;
  }
  for (int l = 0; l < levels; ++l) {
    w *= 2;
    h *= 2;
    haar_inverse(a, pw, w, h, false);
    haar_inverse(a, pw, w, h, true);
  }

  Image out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out(x, y) = a[y * pw + x];
  return out;
}

// Pixelwise non-local means. d2 is the summed squared patch difference; its
// noise expectation 2 sigma^2 |patch| is subtracted and the remainder scaled
// by (h sigma)^2 |patch|.
Image nonlocal_means(const Image& img, int patch, int search, double h_factor, double sigma)
{
  if (sigma <= 0.0) return img;
  const std::ptrdiff_t hp = patch / 2, hs = search / 2, pad = hp + hs;
  const auto w = static_cast<std::ptrdiff_t>(img.width), h = static_cast<std::ptrdiff_t>(img.height);
  const std::ptrdiff_t pw = w + 2 * pad, ph = h + 2 * pad;
  std::vector<double> padded(static_cast<std::size_t>(pw * ph));
  for (std::ptrdiff_t y = 0; y < ph; ++y)
    for (std::ptrdiff_t x = 0; x < pw; ++x) padded[static_cast<std::size_t>(y * pw + x)] = img.reflected(x - pad, y - pad);
  auto P = [&](std::ptrdiff_t x, std::ptrdiff_t y) { return padded[static_cast<std::size_t>((y + pad) * pw + (x + pad))]; };

  const double count = static_cast<double>(patch * patch);
  const double bias = 2.0 * sigma * sigma * count;
  const double scale = 1.0 / (h_factor * h_factor * sigma * sigma * count);

  // Squared differences over the output area grown by the patch half-width.
  const std::ptrdiff_t rw = w + 2 * hp, rh = h + 2 * hp;
  std::vector<double> diff(static_cast<std::size_t>(rw * rh)), rows(static_cast<std::size_t>(w * rh));
  std::vector<double> num(static_cast<std::size_t>(w * h), 0.0), den(static_cast<std::size_t>(w * h), 0.0);

  for (std::ptrdiff_t oy = -hs; oy <= hs; ++oy) {
    for (std::ptrdiff_t ox = -hs; ox <= hs; ++ox) {
      for (std::ptrdiff_t y = 0; y < rh; ++y)
        for (std::ptrdiff_t x = 0; x < rw; ++x) {
          const double d = P(x - hp, y - hp) - P(x - hp + ox, y - hp + oy);
          diff[static_cast<std::size_t>(y * rw + x)] = d * d;
        }
      for (std::ptrdiff_t y = 0; y < rh; ++y)
        for (std::ptrdiff_t x = 0; x < w; ++x) {
          double acc = 0.0;
          for (std::ptrdiff_t k = 0; k < patch; ++k) acc += diff[static_cast<std::size_t>(y * rw + x + k)];
          rows[static_cast<std::size_t>(y * w + x)] = acc;
        }
      for (std::ptrdiff_t y = 0; y < h; ++y)
        for (std::ptrdiff_t x = 0; x < w; ++x) {
          double d2 = 0.0;
          for (std::ptrdiff_t k = 0; k < patch; ++k) d2 += rows[static_cast<std::size_t>((y + k) * w + x)];
          const double weight = std::exp(-std::max(0.0, d2 - bias) * scale);
          const auto i = static_cast<std::size_t>(y * w + x);
          num[i] += weight * P(x + ox, y + oy);
          den[i] += weight;
        }
    }
  }
  Image out(img.width, img.height);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = num[i] / den[i];
  return out;
}

template <typename T>
T parse_number(std::string_view text, std::string_view what)
{
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw InvalidArgument("invalid " + std::string(what) + " '" + std::string(text) + "'");
  return value;
}

std::vector<std::string_view> split(std::string_view text, char sep)
{
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    parts.push_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

} // namespace

void DenoiserSpec::validate() const
{
  switch (kind) {
  case Kind::identity:
    break;
  case Kind::gaussian_blur:
    if (radius < 1) throw InvalidArgument("blur radius must be >= 1");
    break;
  case Kind::median2d:
    if (!odd_positive(window)) throw InvalidArgument("median window must be odd and >= 1");
    break;
  case Kind::wavelet_soft:
    if (levels < 1 || levels > 16) throw InvalidArgument("wavelet levels must be in [1, 16]");
    break;
  case Kind::nlmeans:
    if (!odd_positive(patch) || !odd_positive(search)) throw InvalidArgument("nlmeans patch and search must be odd and >= 1");
    if (!(h_factor > 0.0)) throw InvalidArgument("nlmeans h-factor must be > 0");
    break;
  }
}

DenoiserSpec DenoiserSpec::parse(std::string_view text)
{
  const auto colon = text.find(':');
  const std::string_view name = text.substr(0, colon);
  const std::string_view args = colon == std::string_view::npos ? std::string_view{} : text.substr(colon + 1);
  const auto params = args.empty() ? std::vector<std::string_view>{} : split(args, ',');

  auto expect = [&](std::size_t lo, std::size_t hi) {
    if (params.size() < lo || params.size() > hi)
      throw InvalidArgument("wrong number of parameters in denoiser '" + std::string(text) + "'");
  };

  DenoiserSpec spec;
  if (name == "identity") {
    expect(0, 0);
    spec = identity();
  } else if (name == "blur") {
    expect(1, 1);
    spec = blur(parse_number<int>(params[0], "blur radius"));
  } else if (name == "median2d") {
    expect(1, 1);
    spec = median(parse_number<int>(params[0], "median window"));
  } else if (name == "wavelet") {
    expect(0, 1);
    spec = wavelet(params.empty() ? 3 : parse_number<int>(params[0], "wavelet levels"));
  } else if (name == "nlmeans") {
    expect(0, 3);
    spec = nlm();
    if (params.size() > 0) spec.patch = parse_number<int>(params[0], "nlmeans patch");
    if (params.size() > 1) spec.search = parse_number<int>(params[1], "nlmeans search");
    if (params.size() > 2) spec.h_factor = parse_number<double>(params[2], "nlmeans h-factor");
  } else {
    throw InvalidArgument("unknown denoiser '" + std::string(name) + "'");
  }
  spec.validate();
  return spec;
}

std::string DenoiserSpec::to_string() const
{
  switch (kind) {
  case Kind::identity:
    return "identity";
  case Kind::gaussian_blur:
    return "blur:" + std::to_string(radius);
  case Kind::median2d:
    return "median2d:" + std::to_string(window);
  case Kind::wavelet_soft:
    return "wavelet:" + std::to_string(levels);
  case Kind::nlmeans: {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, h_factor);
    return "nlmeans:" + std::to_string(patch) + "," + std::to_string(search) + "," + std::string(buf, ptr);
  }
  }
  return {};
}

Image denoise_image(const Image& img, double sigma, const DenoiserSpec& spec)
{
  spec.validate();
  if (!(sigma >= 0.0)) throw InvalidArgument("sigma must be >= 0");
  if (img.data.size() != img.width * img.height || img.data.empty()) throw InvalidArgument("malformed image");
  for (double v : img.data)
    if (!std::isfinite(v)) throw Error("image contains non-finite values");

  switch (spec.kind) {
  case Kind::identity:
    return img;
  case Kind::gaussian_blur:
    return gaussian_blur(img, spec.radius);
  case Kind::median2d:
    return median_filter(img, spec.window);
  case Kind::wavelet_soft:
    return wavelet_soft(img, spec.levels, sigma);
  case Kind::nlmeans:
    return nonlocal_means(img, spec.patch, spec.search, spec.h_factor, sigma);
  }
  return img;
}

Image denoise_rescaled(const Image& img, double sigma, const DenoiserSpec& spec)
{
  if (spec.kind == Kind::identity) return img;
  const auto [lo_it, hi_it] = std::minmax_element(img.data.begin(), img.data.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  if (!(range > 0.0)) return img;
  const double scale = 255.0 / range;
  Image scaled(img.width, img.height);
  for (std::size_t i = 0; i < img.data.size(); ++i) scaled.data[i] = (img.data[i] - lo) * scale;
  Image out = denoise_image(scaled, sigma * scale, spec);
  for (double& v : out.data) v = v / scale + lo;
  return out;
}

ImageStack medfilt3(const ImageStack& stack, int window)
{
  if (!odd_positive(window)) throw InvalidArgument("medfilt3 window must be odd and >= 1");
  const auto w = static_cast<std::ptrdiff_t>(stack.width()), h = static_cast<std::ptrdiff_t>(stack.height()),
             t = static_cast<std::ptrdiff_t>(stack.frames());
  if (window > std::min({w, h, t})) throw InvalidArgument("medfilt3 window exceeds a stack dimension");
  if (window == 1) return stack;

  const int half = window / 2;
  const auto src = stack.data();
  std::vector<float> out(stack.size());
#pragma omp parallel
  {
    std::vector<float> values(static_cast<std::size_t>(window * window * window));
    const auto mid = static_cast<std::ptrdiff_t>(values.size() / 2);
#pragma omp for schedule(static)
    for (std::ptrdiff_t z = 0; z < t; ++z)
      for (std::ptrdiff_t y = 0; y < h; ++y)
        for (std::ptrdiff_t x = 0; x < w; ++x) {
          std::size_t n = 0;
          for (int dz = -half; dz <= half; ++dz) {
            const std::ptrdiff_t zz = reflect_index(z + dz, t);
            for (int dy = -half; dy <= half; ++dy) {
              const std::ptrdiff_t yy = reflect_index(y + dy, h);
              for (int dx = -half; dx <= half; ++dx)
                values[n++] = src[static_cast<std::size_t>((zz * h + yy) * w + reflect_index(x + dx, w))];
            }
          }
          std::nth_element(values.begin(), values.begin() + mid, values.end());
          out[static_cast<std::size_t>((z * h + y) * w + x)] = values[static_cast<std::size_t>(mid)];
        }
  }
  return stack.with_data(std::move(out));
}

} // namespace txm
