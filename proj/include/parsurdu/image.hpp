// Grayscale images, binary PGM i/o and the preprocessing chain: noise
// filters, projection-profile deskew, percentile contrast stretch and the
// randomized augmentation policy.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "parsurdu/util.hpp"

namespace parsurdu {

struct InvalidParameter : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FileNotFound : std::runtime_error {
  explicit FileNotFound(const std::string& path) : std::runtime_error("file not found: " + path) {}
};
struct UnsupportedImageFormat : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, values 0..255

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  std::uint8_t at(int x, int y) const {
    return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)];
  }
  std::uint8_t& at(int x, int y) {
    return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)];
  }
  // Clamp-to-border access.
  std::uint8_t at_clamped(int x, int y) const {
    x = std::clamp(x, 0, width - 1);
    y = std::clamp(y, 0, height - 1);
    return at(x, y);
  }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// --- binary PGM (P5, maxval 255) -------------------------------------------

inline void write_pgm(std::ostream& os, const GrayImage& img) {
  os << "P5\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_pgm(const std::string& path, const GrayImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileNotFound(path);
  write_pgm(os, img);
  if (!os) throw UnsupportedImageFormat("failed writing PGM: " + path);
}

namespace detail {
inline int next_pgm_int(std::istream& is, const std::string& path) {
  // Skips whitespace and '#' comments.
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (std::isspace(c)) {
      c = is.get();
    } else {
      break;
    }
  }
  if (c == EOF || !std::isdigit(c)) throw UnsupportedImageFormat("malformed PGM header: " + path);
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = is.get();
  }
  if (c != EOF) is.unget();
  return value;
}
}  // namespace detail

inline GrayImage read_pgm(std::istream& is, const std::string& path = "<stream>") {
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (!is || m0 != 'P' || m1 != '5') throw UnsupportedImageFormat("not a binary PGM (P5): " + path);
  const int w = detail::next_pgm_int(is, path);
  const int h = detail::next_pgm_int(is, path);
  const int maxval = detail::next_pgm_int(is, path);
  if (maxval != 255) throw UnsupportedImageFormat("unsupported PGM maxval " + std::to_string(maxval) + ": " + path);
  is.get();  // single whitespace byte before raster
  GrayImage img(w, h);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw UnsupportedImageFormat("truncated PGM raster: " + path);
  }
  return img;
}

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileNotFound(path);
  return read_pgm(is, path);
}

// --- filters ---------------------------------------------------------------

inline GrayImage median_filter(const GrayImage& img, int radius) {
  if (radius < 1) throw InvalidParameter("median radius must be >= 1");
  GrayImage out(img.width, img.height);
  std::array<int, 256> hist{};
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      hist.fill(0);
      int count = 0;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          ++hist[img.at_clamped(x + dx, y + dy)];
          ++count;
        }
      }
      const int target = count / 2;  // median of odd-sized window
      int acc = 0;
      for (int v = 0; v < 256; ++v) {
        acc += hist[v];
        if (acc > target) {
          out.at(x, y) = static_cast<std::uint8_t>(v);
          break;
        }
      }
    }
  }
  return out;
}

inline GrayImage gaussian_filter(const GrayImage& img, double sigma) {
  if (!(sigma > 0.0)) throw InvalidParameter("gaussian sigma must be > 0");
  const int half = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * half + 1));
  double sum = 0.0;
  for (int i = -half; i <= half; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + half)] = v;
    sum += v;
  }
  for (double& v : kernel) v /= sum;

  // Separable passes, horizontal then vertical, in double precision.
  std::vector<double> tmp(img.pixels.size());
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) acc += kernel[static_cast<std::size_t>(i + half)] * img.at_clamped(x + i, y);
      tmp[static_cast<std::size_t>(y) * img.width + x] = acc;
    }
  }
  GrayImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) {
        const int yy = std::clamp(y + i, 0, img.height - 1);
        acc += kernel[static_cast<std::size_t>(i + half)] * tmp[static_cast<std::size_t>(yy) * img.width + x];
      }
      out.at(x, y) = clamp_u8(acc);
    }
  }
  return out;
}

// Linear rescale mapping the 2nd/98th intensity percentiles to 0/255.
inline GrayImage contrast_stretch(const GrayImage& img) {
  if (img.pixels.empty()) return img;
  std::array<std::size_t, 256> hist{};
  for (std::uint8_t p : img.pixels) ++hist[p];
  const double n = static_cast<double>(img.pixels.size());
  auto percentile = [&](double q) {
    const double target = q * n;
    std::size_t acc = 0;
    for (int v = 0; v < 256; ++v) {
      acc += hist[static_cast<std::size_t>(v)];
      if (static_cast<double>(acc) >= target) return v;
    }
    return 255;
  };
  const int lo = percentile(0.02);
  const int hi = percentile(0.98);
  if (hi <= lo) return img;  // flat image
  GrayImage out(img.width, img.height);
  const double scale = 255.0 / static_cast<double>(hi - lo);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    out.pixels[i] = clamp_u8((static_cast<double>(img.pixels[i]) - lo) * scale);
  }
  return out;
}

// --- geometry --------------------------------------------------------------

// Rotates content by `degrees` about the image centre (positive = text
// baseline tilts upward toward the left edge), bilinear sampling, `fill`
// outside the source frame. Output keeps the input dimensions.
inline GrayImage rotate(const GrayImage& img, double degrees, std::uint8_t fill = 255) {
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cx = 0.5 * (img.width - 1), cy = 0.5 * (img.height - 1);
  GrayImage out(img.width, img.height, fill);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      // Inverse map: rotate the output grid by -degrees into source space.
      const double dx = x - cx, dy = y - cy;
      const double sx = c * dx - s * dy + cx;
      const double sy = s * dx + c * dy + cy;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      if (x0 < -1 || y0 < -1 || x0 > img.width - 1 || y0 > img.height - 1) continue;
      const double fx = sx - x0, fy = sy - y0;
      auto sample = [&](int xx, int yy) -> double {
        if (xx < 0 || yy < 0 || xx >= img.width || yy >= img.height) return fill;
        return img.at(xx, yy);
      };
      const double v = (1 - fx) * (1 - fy) * sample(x0, y0) + fx * (1 - fy) * sample(x0 + 1, y0) +
                       (1 - fx) * fy * sample(x0, y0 + 1) + fx * fy * sample(x0 + 1, y0 + 1);
      out.at(x, y) = clamp_u8(v);
    }
  }
  return out;
}

// General bilinear resize.
inline GrayImage resize(const GrayImage& img, int new_w, int new_h) {
  if (new_w < 1 || new_h < 1) throw InvalidParameter("resize dimensions must be positive");
  if (new_w == img.width && new_h == img.height) return img;
  GrayImage out(new_w, new_h);
  const double sx = static_cast<double>(img.width) / new_w;
  const double sy = static_cast<double>(img.height) / new_h;
  for (int y = 0; y < new_h; ++y) {
    for (int x = 0; x < new_w; ++x) {
      const double src_x = (x + 0.5) * sx - 0.5;
      const double src_y = (y + 0.5) * sy - 0.5;
      const int x0 = static_cast<int>(std::floor(src_x));
      const int y0 = static_cast<int>(std::floor(src_y));
      const double fx = src_x - x0, fy = src_y - y0;
      const double v = (1 - fx) * (1 - fy) * img.at_clamped(x0, y0) +
                       fx * (1 - fy) * img.at_clamped(x0 + 1, y0) +
                       (1 - fx) * fy * img.at_clamped(x0, y0 + 1) +
                       fx * fy * img.at_clamped(x0 + 1, y0 + 1);
      out.at(x, y) = clamp_u8(v);
    }
  }
  return out;
}

// Scales (down only) to fit inside w x h preserving aspect, then pads with
// `fill`. The content is vertically centred and right-aligned, matching the
// right-to-left reading direction of the rendered words.
inline GrayImage fit_to(const GrayImage& img, int w, int h, std::uint8_t fill = 255, int right_margin = 2) {
  GrayImage scaled = img;
  const int avail_w = std::max(1, w - right_margin);
  if (img.width > avail_w || img.height > h) {
    const double s = std::min(static_cast<double>(avail_w) / img.width, static_cast<double>(h) / img.height);
    scaled = resize(img, std::max(1, static_cast<int>(std::floor(img.width * s))),
                    std::max(1, static_cast<int>(std::floor(img.height * s))));
  }
  GrayImage out(w, h, fill);
  const int x_off = std::max(0, w - right_margin - scaled.width);
  const int y_off = std::max(0, (h - scaled.height) / 2);
  for (int y = 0; y < scaled.height && y + y_off < h; ++y) {
    for (int x = 0; x < scaled.width && x + x_off < w; ++x) {
      out.at(x + x_off, y + y_off) = scaled.at(x, y);
    }
  }
  return out;
}

// --- deskew ----------------------------------------------------------------

struct DeskewResult {
  GrayImage image;
  double angle_degrees = 0.0;  // detected skew; the image is rotated by -angle
};

namespace detail {
// Variance of the ink projection profile after rotating coordinates by
// `degrees`. Sharp horizontal text rows give a spiky, high-variance profile.
inline double projection_variance(const GrayImage& img, double degrees) {
  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double diag = std::hypot(img.width, img.height);
  const int bins = static_cast<int>(diag) + 2;
  std::vector<double> profile(static_cast<std::size_t>(2 * bins), 0.0);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double ink = 255.0 - img.at(x, y);
      if (ink <= 0.0) continue;
      const double proj = s * x + c * y;
      const int b = static_cast<int>(std::lround(proj)) + bins / 2;
      if (b >= 0 && b < 2 * bins) profile[static_cast<std::size_t>(b)] += ink;
    }
  }
  double mean = 0.0;
  for (double v : profile) mean += v;
  mean /= static_cast<double>(profile.size());
  double var = 0.0;
  for (double v : profile) var += (v - mean) * (v - mean);
  return var / static_cast<double>(profile.size());
}
}  // namespace detail

// Sweeps +-max_angle in `step` increments, keeps the angle whose projection
// profile has the largest variance, and rotates the image back by it. A flat
// profile (blank image) keeps angle 0 and the image untouched.
inline DeskewResult deskew(const GrayImage& img, double max_angle = 15.0, double step = 0.5) {
  double best_var = detail::projection_variance(img, 0.0);
  double best_angle = 0.0;
  for (double a = -max_angle; a <= max_angle + 1e-9; a += step) {
    if (std::abs(a) < 1e-12) continue;
    const double v = detail::projection_variance(img, a);
    if (v > best_var) {
      best_var = v;
      best_angle = a;
    }
  }
  if (best_angle == 0.0) return {img, 0.0};
  return {rotate(img, -best_angle), best_angle};
}

// --- augmentation ----------------------------------------------------------

struct AugmentPolicy {
  double rotate_deg = 0.0;      // uniform in [-rotate_deg, +rotate_deg]
  double translate_frac = 0.0;  // of each axis extent
  double scale_min = 1.0;
  double scale_max = 1.0;
  double blur_prob = 0.0;
  double blur_sigma = 1.0;
  double crop_jitter_frac = 0.0;

  bool is_identity() const {
    return rotate_deg == 0.0 && translate_frac == 0.0 && scale_min == 1.0 && scale_max == 1.0 &&
           blur_prob == 0.0 && crop_jitter_frac == 0.0;
  }

  // Default training policy.
  static AugmentPolicy defaults() {
    AugmentPolicy p;
    p.rotate_deg = 5.0;
    p.translate_frac = 0.10;
    p.scale_min = 0.9;
    p.scale_max = 1.1;
    p.blur_prob = 0.25;
    p.blur_sigma = 1.0;
    p.crop_jitter_frac = 0.05;
    return p;
  }
};

// Randomized rotation/translation/scale/blur/crop composition. Deterministic
// for a fixed (seed, policy); output always keeps the input geometry.
inline GrayImage augment(const GrayImage& img, Rng& rng, const AugmentPolicy& policy,
                         std::uint8_t fill = 255) {
  if (policy.is_identity()) return img;
  const double angle = policy.rotate_deg > 0.0 ? rng.uniform(-policy.rotate_deg, policy.rotate_deg) : 0.0;
  const double tx = policy.translate_frac > 0.0 ? rng.uniform(-policy.translate_frac, policy.translate_frac) * img.width : 0.0;
  const double ty = policy.translate_frac > 0.0 ? rng.uniform(-policy.translate_frac, policy.translate_frac) * img.height : 0.0;
  const double sc = (policy.scale_min != 1.0 || policy.scale_max != 1.0)
                        ? rng.uniform(policy.scale_min, policy.scale_max)
                        : 1.0;

  const double rad = angle * 3.14159265358979323846 / 180.0;
  const double c = std::cos(rad) / sc, s = std::sin(rad) / sc;
  const double cx = 0.5 * (img.width - 1), cy = 0.5 * (img.height - 1);
  GrayImage out(img.width, img.height, fill);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - cx - tx, dy = y - cy - ty;
      const double sx = c * dx - s * dy + cx;
      const double sy = s * dx + c * dy + cy;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      if (x0 < -1 || y0 < -1 || x0 > img.width - 1 || y0 > img.height - 1) continue;
      const double fx = sx - x0, fy = sy - y0;
      auto sample = [&](int xx, int yy) -> double {
        if (xx < 0 || yy < 0 || xx >= img.width || yy >= img.height) return fill;
        return img.at(xx, yy);
      };
      const double v = (1 - fx) * (1 - fy) * sample(x0, y0) + fx * (1 - fy) * sample(x0 + 1, y0) +
                       (1 - fx) * fy * sample(x0, y0 + 1) + fx * fy * sample(x0 + 1, y0 + 1);
      out.at(x, y) = clamp_u8(v);
    }
  }

  if (policy.blur_prob > 0.0 && rng.uniform() < policy.blur_prob) {
    out = gaussian_filter(out, policy.blur_sigma);
  }
  if (policy.crop_jitter_frac > 0.0) {
    const int jx = std::min((img.width - 1) / 2, static_cast<int>(rng.uniform(0.0, policy.crop_jitter_frac) * img.width));
    const int jy = std::min((img.height - 1) / 2, static_cast<int>(rng.uniform(0.0, policy.crop_jitter_frac) * img.height));
    if (jx > 0 || jy > 0) {
      GrayImage cropped(img.width - 2 * jx, img.height - 2 * jy);
      for (int y = 0; y < cropped.height; ++y)
        for (int x = 0; x < cropped.width; ++x) cropped.at(x, y) = out.at(x + jx, y + jy);
      out = resize(cropped, img.width, img.height);
    }
  }
  return out;
}

}  // namespace parsurdu
