#pragma once

// Images, a perspective point-splat renderer and image-space augmentation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "crosspoint/errors.hpp"
#include "crosspoint/pointcloud.hpp"
#include "crosspoint/rng.hpp"

namespace crosspoint {

// H x W x C raster, channel-interleaved, values in [0, 1].
struct ImageTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<double> pixels;

  ImageTensor() = default;
  ImageTensor(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {
    if (h == 0 || w == 0 || (c != 1 && c != 3)) {
      throw ShapeError("image needs positive size and 1 or 3 channels");
    }
  }

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }

  void validate() const {
    if (pixels.size() != height * width * channels) throw ShapeError("image size mismatch");
    for (double v : pixels) {
      if (!(v >= 0.0 && v <= 1.0)) throw DomainError("pixel outside [0, 1]");
    }
  }

  bool operator==(const ImageTensor&) const = default;
};

struct Camera {
  Point3 eye{0, 0, 2};
  Point3 target{0, 0, 0};
  Point3 up{0, 1, 0};
  double focal = 1.5;  // image half-width per unit of x/z
  std::size_t height = 32;
  std::size_t width = 32;

  void validate() const {
    const Point3 view = target - eye;
    if (norm(view) < 1e-12) throw DegenerateCamera("eye coincides with target");
    if (norm(cross(view, up)) < 1e-9 * norm(view) * std::max(norm(up), 1e-300)) {
      throw DegenerateCamera("up hint is parallel to the view direction");
    }
    if (!(focal > 0) || height == 0 || width == 0) {
      throw DegenerateCamera("camera needs focal > 0 and a non-empty raster");
    }
  }
};

/// Perspective splat: each point in front of the camera paints one pixel with
/// intensity min(1, 1/depth); the nearest point wins. Background is 0.
inline ImageTensor render(const PointCloud& cloud, const Camera& cam) {
  cam.validate();
  cloud.validate();
  const Point3 view = cam.target - cam.eye;
  const Point3 forward = (1.0 / norm(view)) * view;
  Point3 right = cross(forward, cam.up);
  right = (1.0 / norm(right)) * right;
  const Point3 up = cross(right, forward);

  const std::size_t h = cam.height, w = cam.width;
  std::vector<double> depth(h * w, std::numeric_limits<double>::infinity());
  const double cx = static_cast<double>(w) / 2.0;
  const double cy = static_cast<double>(h) / 2.0;
  for (const auto& p : cloud.points) {
    const Point3 v = p - cam.eye;
    const double z = dot(v, forward);
    if (z <= 1e-9) continue;
    const double px = std::floor(cx + cam.focal * cx * dot(v, right) / z);
    const double py = std::floor(cy - cam.focal * cy * dot(v, up) / z);
    if (px < 0 || py < 0 || px >= static_cast<double>(w) || py >= static_cast<double>(h)) continue;
    const std::size_t idx = static_cast<std::size_t>(py) * w + static_cast<std::size_t>(px);
    depth[idx] = std::min(depth[idx], z);
  }
  ImageTensor img(h, w, 3);
  for (std::size_t i = 0; i < h * w; ++i) {
    if (std::isinf(depth[i])) continue;
    const double v = std::min(1.0, 1.0 / depth[i]);
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = v;
  }
  return img;
}

struct CameraConfig {
  double radius_lo = 2.0;
  double radius_hi = 3.0;
  double focal = 1.5;
  std::size_t height = 32;
  std::size_t width = 32;
};

/// Eye uniform on a sphere of radius drawn from [radius_lo, radius_hi] about
/// `center`, looking at `center`.
inline Camera sample_camera(Rng& rng, const CameraConfig& config, const Point3& center) {
  if (!(config.radius_lo > 0 && config.radius_hi >= config.radius_lo)) {
    throw ConfigError("camera radius range must be positive");
  }
  const double radius = rng.uniform(config.radius_lo, config.radius_hi);
  const Point3 dir = random_unit_vector(rng);
  Camera cam;
  cam.eye = center + radius * dir;
  cam.target = center;
  cam.up = std::abs(dir[2]) > 0.99 ? Point3{0, 1, 0} : Point3{0, 0, 1};
  cam.focal = config.focal;
  cam.height = config.height;
  cam.width = config.width;
  return cam;
}

// ---------------------------------------------------------------------------
// Image augmentation: random crop resized back with nearest neighbour,
// per-channel multiplicative colour jitter, random horizontal flip.
// ---------------------------------------------------------------------------

struct ImageAugmentConfig {
  std::size_t crop_height = 28;
  std::size_t crop_width = 28;
  double jitter_lo = 0.8;
  double jitter_hi = 1.2;
  double flip_probability = 0.5;

  static ImageAugmentConfig identity(std::size_t h, std::size_t w) {
    return {h, w, 1.0, 1.0, 0.0};
  }
};

inline ImageTensor crop_resize(const ImageTensor& img, std::size_t top, std::size_t left,
                               std::size_t ch, std::size_t cw) {
  if (ch == 0 || cw == 0 || top + ch > img.height || left + cw > img.width) {
    throw ConfigError("crop window outside the image");
  }
  ImageTensor out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y) {
    const std::size_t sy = top + y * ch / img.height;
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::size_t sx = left + x * cw / img.width;
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

inline ImageTensor horizontal_flip(const ImageTensor& img) {
  ImageTensor out = img;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
      }
    }
  }
  return out;
}

inline ImageTensor color_jitter(const ImageTensor& img, std::span<const double> factors) {
  if (factors.size() != img.channels) throw ShapeError("one jitter factor per channel");
  ImageTensor out = img;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = std::clamp(out.pixels[i] * factors[i % img.channels], 0.0, 1.0);
  }
  return out;
}

inline ImageTensor augment_image(const ImageTensor& img, Rng& rng,
                                 const ImageAugmentConfig& config) {
  if (config.crop_height == 0 || config.crop_width == 0 || config.crop_height > img.height ||
      config.crop_width > img.width) {
    throw ConfigError("crop size must be within the image size");
  }
  if (!(config.jitter_lo >= 0 && config.jitter_hi >= config.jitter_lo)) {
    throw ConfigError("invalid colour jitter range");
  }
  const std::size_t top = rng.below(img.height - config.crop_height + 1);
  const std::size_t left = rng.below(img.width - config.crop_width + 1);
  ImageTensor out = crop_resize(img, top, left, config.crop_height, config.crop_width);
  std::vector<double> factors(img.channels);
  for (double& f : factors) f = rng.uniform(config.jitter_lo, config.jitter_hi);
  out = color_jitter(out, factors);
  if (rng.bernoulli(config.flip_probability)) out = horizontal_flip(out);
  return out;
}

}  // namespace crosspoint
