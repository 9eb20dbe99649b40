#pragma once

// Point-cloud values and the geometric augmentation set: rotation, scaling,
// translation, jitter, normalization and elastic distortion. Transforms are
// plain values; all randomness is drawn when a pipeline is sampled, so
// applying a transform is a pure function.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "crosspoint/errors.hpp"
#include "crosspoint/rng.hpp"

namespace crosspoint {

using Point3 = std::array<double, 3>;

inline Point3 operator+(const Point3& a, const Point3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Point3 operator-(const Point3& a, const Point3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Point3 operator*(double s, const Point3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Point3& a, const Point3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline Point3 cross(const Point3& a, const Point3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Point3& a) { return std::sqrt(dot(a, a)); }

struct PointCloud {
  std::vector<Point3> points;
  std::optional<int> label;

  std::size_t size() const { return points.size(); }

  void validate() const {
    if (points.empty()) throw DegenerateInput("point cloud has no points");
    for (const auto& p : points) {
      for (double c : p) {
        if (!std::isfinite(c)) throw DegenerateInput("non-finite coordinate");
      }
    }
  }

  Point3 centroid() const {
    Point3 c{0, 0, 0};
    for (const auto& p : points) c = c + p;
    return (1.0 / static_cast<double>(points.size())) * c;
  }

  bool operator==(const PointCloud&) const = default;
};

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

struct Rotation {
  std::array<double, 9> matrix{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  bool operator==(const Rotation&) const = default;
};
struct Scale {
  Point3 factors{1, 1, 1};
  bool operator==(const Scale&) const = default;
};
struct Translation {
  Point3 offset{0, 0, 0};
  bool operator==(const Translation&) const = default;
};
struct Jitter {
  double sigma = 0.0;
  double clip = 0.0;
  StreamId noise;
  bool operator==(const Jitter&) const = default;
};
struct Normalize {
  bool operator==(const Normalize&) const = default;
};
struct Elastic {
  std::size_t granularity = 4;
  double magnitude = 0.0;
  // granularity^3 displacement vectors, x-major then y then z.
  std::vector<Point3> displacements;
  bool operator==(const Elastic&) const = default;
};

using Transform = std::variant<Rotation, Scale, Translation, Jitter, Normalize, Elastic>;

inline std::string transform_name(const Transform& t) {
  static constexpr const char* names[] = {"rotation", "scale",     "translation",
                                          "jitter",   "normalize", "elastic"};
  return names[t.index()];
}

inline Point3 rotate(const std::array<double, 9>& r, const Point3& p) {
  return {r[0] * p[0] + r[1] * p[1] + r[2] * p[2], r[3] * p[0] + r[4] * p[1] + r[5] * p[2],
          r[6] * p[0] + r[7] * p[1] + r[8] * p[2]};
}

/// Rotation matrix of a (not necessarily unit) quaternion w + xi + yj + zk.
inline Rotation rotation_from_quaternion(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  return Rotation{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
                   2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                   2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}};
}

inline Rotation rotation_about_axis(Point3 axis, double angle) {
  const double n = norm(axis);
  const double s = std::sin(angle / 2) / n;
  return rotation_from_quaternion(std::cos(angle / 2), axis[0] * s, axis[1] * s, axis[2] * s);
}

inline double determinant(const std::array<double, 9>& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

inline void validate(const Transform& transform) {
  std::visit(
      [](const auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, Rotation>) {
          const auto& r = t.matrix;
          for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
              double rtr = 0;
              for (int k = 0; k < 3; ++k) rtr += r[k * 3 + i] * r[k * 3 + j];
              if (std::abs(rtr - (i == j ? 1.0 : 0.0)) > 1e-9) {
                throw ConfigError("rotation matrix is not orthonormal");
              }
            }
          }
          if (std::abs(determinant(r) - 1.0) > 1e-9) {
            throw ConfigError("rotation matrix has determinant != +1");
          }
        } else if constexpr (std::is_same_v<T, Scale>) {
          for (double f : t.factors) {
            if (!(f > 0)) throw ConfigError("scale factors must be positive");
          }
        } else if constexpr (std::is_same_v<T, Jitter>) {
          if (!(t.sigma >= 0) || !(t.clip >= 0)) {
            throw ConfigError("jitter sigma and clip must be non-negative");
          }
        } else if constexpr (std::is_same_v<T, Elastic>) {
          if (t.granularity < 2) throw ConfigError("elastic grid granularity must be >= 2");
          if (!(t.magnitude >= 0)) throw ConfigError("elastic magnitude must be >= 0");
          const std::size_t g = t.granularity;
          if (t.displacements.size() != g * g * g) {
            throw ConfigError("elastic displacement grid has wrong size");
          }
        }
      },
      transform);
}

namespace detail {

inline PointCloud apply_elastic(PointCloud p, const Elastic& t) {
  if (t.magnitude == 0.0) return p;
  Point3 lo = p.points.front(), hi = p.points.front();
  for (const auto& q : p.points) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], q[a]);
      hi[a] = std::max(hi[a], q[a]);
    }
  }
  const std::size_t g = t.granularity;
  auto cell = [&](std::size_t i, std::size_t j, std::size_t k) -> const Point3& {
    return t.displacements[(i * g + j) * g + k];
  };
  for (auto& q : p.points) {
    std::array<std::size_t, 3> base{};
    std::array<double, 3> frac{};
    for (int a = 0; a < 3; ++a) {
      const double extent = hi[a] - lo[a];
      const double u = extent > 1e-12 ? (q[a] - lo[a]) / extent * static_cast<double>(g - 1) : 0.0;
      const auto b = std::min(static_cast<std::size_t>(std::floor(u)), g - 2);
      base[a] = b;
      frac[a] = std::clamp(u - static_cast<double>(b), 0.0, 1.0);
    }
    Point3 d{0, 0, 0};
    for (int corner = 0; corner < 8; ++corner) {
      const int ox = corner & 1, oy = (corner >> 1) & 1, oz = (corner >> 2) & 1;
      const double w = (ox ? frac[0] : 1 - frac[0]) * (oy ? frac[1] : 1 - frac[1]) *
                       (oz ? frac[2] : 1 - frac[2]);
      d = d + w * cell(base[0] + ox, base[1] + oy, base[2] + oz);
    }
    q = q + d;
  }
  return p;
}

}  // namespace detail

inline PointCloud apply_transform(PointCloud p, const Transform& transform) {
  p.validate();
  validate(transform);
  std::visit(
      [&p](const auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, Rotation>) {
          for (auto& q : p.points) q = rotate(t.matrix, q);
        } else if constexpr (std::is_same_v<T, Scale>) {
          for (auto& q : p.points) {
            for (int a = 0; a < 3; ++a) q[a] *= t.factors[a];
          }
        } else if constexpr (std::is_same_v<T, Translation>) {
          for (auto& q : p.points) q = q + t.offset;
        } else if constexpr (std::is_same_v<T, Jitter>) {
          if (t.sigma == 0.0) return;
          Rng rng(t.noise);
          for (auto& q : p.points) {
            for (int a = 0; a < 3; ++a) q[a] += std::clamp(rng.normal(0.0, t.sigma), -t.clip, t.clip);
          }
        } else if constexpr (std::is_same_v<T, Normalize>) {
          const Point3 c = p.centroid();
          double max_norm = 0.0;
          for (auto& q : p.points) {
            q = q - c;
            max_norm = std::max(max_norm, norm(q));
          }
          if (max_norm < 1e-12) {
            throw DegenerateInput("cannot normalize a cloud whose points coincide");
          }
          for (auto& q : p.points) q = (1.0 / max_norm) * q;
        } else if constexpr (std::is_same_v<T, Elastic>) {
          p = detail::apply_elastic(std::move(p), t);
        }
      },
      transform);
  return p;
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

// Sampling configuration. Each transform is included independently with its
// probability; included transforms are applied in the fixed order
// normalize, rotation, scale, elastic, translation, jitter.
struct AugmentConfig {
  double p_normalize = 1.0;
  double p_rotation = 1.0;
  double p_scale = 1.0;
  double p_elastic = 0.5;
  double p_translation = 1.0;
  double p_jitter = 1.0;

  double scale_lo = 0.8;
  double scale_hi = 1.25;
  double translation_range = 0.2;
  double jitter_sigma = 0.01;
  double jitter_clip = 0.05;
  std::size_t elastic_granularity = 4;
  double elastic_magnitude = 0.05;

  /// Samples only unit scaling: every pipeline is an exact identity.
  static AugmentConfig identity() {
    AugmentConfig c;
    c.p_normalize = c.p_rotation = c.p_elastic = c.p_translation = c.p_jitter = 0.0;
    c.p_scale = 1.0;
    c.scale_lo = c.scale_hi = 1.0;
    return c;
  }

  void validate() const {
    for (double p : {p_normalize, p_rotation, p_scale, p_elastic, p_translation, p_jitter}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("transform probability outside [0, 1]");
    }
    if (p_normalize + p_rotation + p_scale + p_elastic + p_translation + p_jitter == 0.0) {
      throw ConfigError("augmentation transform set is empty");
    }
    if (!(scale_lo > 0 && scale_hi >= scale_lo)) throw ConfigError("invalid scale range");
    if (!(translation_range >= 0)) throw ConfigError("invalid translation range");
    if (!(jitter_sigma >= 0 && jitter_clip >= 0)) throw ConfigError("invalid jitter");
    if (elastic_granularity < 2 || !(elastic_magnitude >= 0)) {
      throw ConfigError("invalid elastic distortion");
    }
  }
};

struct AugmentationPipeline {
  std::vector<Transform> transforms;
  StreamId stream;
  bool operator==(const AugmentationPipeline&) const = default;
};

inline Rotation random_rotation(Rng& rng) {
  const double w = rng.normal(), x = rng.normal(), y = rng.normal(), z = rng.normal();
  return rotation_from_quaternion(w, x, y, z);
}

inline Point3 random_unit_vector(Rng& rng) {
  Point3 v{0, 0, 0};
  double n = 0.0;
  while (n < 1e-9) {
    v = {rng.normal(), rng.normal(), rng.normal()};
    n = norm(v);
  }
  return (1.0 / n) * v;
}

inline Elastic random_elastic(Rng& rng, std::size_t granularity, double magnitude) {
  Elastic e;
  e.granularity = granularity;
  e.magnitude = magnitude;
  e.displacements.resize(granularity * granularity * granularity);
  for (auto& d : e.displacements) {
    d = (magnitude * std::cbrt(rng.uniform())) * random_unit_vector(rng);
  }
  return e;
}

inline AugmentationPipeline sample_pipeline(const AugmentConfig& config, StreamId stream) {
  config.validate();
  Rng rng(stream);
  AugmentationPipeline out;
  out.stream = stream;
  // Each slot consumes a fixed number of draws whether or not it is taken,
  // so one probability change does not reshuffle the others.
  const bool take_normalize = rng.bernoulli(config.p_normalize);
  const bool take_rotation = rng.bernoulli(config.p_rotation);
  const bool take_scale = rng.bernoulli(config.p_scale);
  const bool take_elastic = rng.bernoulli(config.p_elastic);
  const bool take_translation = rng.bernoulli(config.p_translation);
  const bool take_jitter = rng.bernoulli(config.p_jitter);

  if (take_normalize) out.transforms.emplace_back(Normalize{});
  if (take_rotation) out.transforms.emplace_back(random_rotation(rng));
  if (take_scale) {
    Scale s;
    for (double& f : s.factors) f = rng.uniform(config.scale_lo, config.scale_hi);
    out.transforms.emplace_back(s);
  }
  if (take_elastic) {
    out.transforms.emplace_back(
        random_elastic(rng, config.elastic_granularity, config.elastic_magnitude));
  }
  if (take_translation) {
    Translation t;
    for (double& o : t.offset) o = rng.uniform(-config.translation_range, config.translation_range);
    out.transforms.emplace_back(t);
  }
  if (take_jitter) {
    out.transforms.emplace_back(Jitter{config.jitter_sigma, config.jitter_clip, stream.child("jitter")});
  }
  if (out.transforms.empty()) {
    // Keep the pipeline non-empty: fall back to the most probable transform.
    const std::array<double, 6> p{config.p_normalize, config.p_rotation,    config.p_scale,
                                  config.p_elastic,   config.p_translation, config.p_jitter};
    const auto best = std::distance(p.begin(), std::max_element(p.begin(), p.end()));
    switch (best) {
      case 0: out.transforms.emplace_back(Normalize{}); break;
      case 1: out.transforms.emplace_back(random_rotation(rng)); break;
      case 2: out.transforms.emplace_back(Scale{{config.scale_lo, config.scale_lo, config.scale_lo}}); break;
      case 3:
        out.transforms.emplace_back(
            random_elastic(rng, config.elastic_granularity, config.elastic_magnitude));
        break;
      case 4: out.transforms.emplace_back(Translation{}); break;
      default:
        out.transforms.emplace_back(
            Jitter{config.jitter_sigma, config.jitter_clip, stream.child("jitter")});
        break;
    }
  }
  return out;
}

inline PointCloud apply_pipeline(PointCloud p, const AugmentationPipeline& pipeline) {
  for (const auto& t : pipeline.transforms) p = apply_transform(std::move(p), t);
  return p;
}

/// n points drawn uniformly without replacement when the cloud has at least
/// n points, with replacement otherwise.
inline PointCloud sample_points(const PointCloud& p, std::size_t n, StreamId stream) {
  if (n == 0) throw ConfigError("sample_points needs n >= 1");
  p.validate();
  Rng rng(stream);
  PointCloud out;
  out.label = p.label;
  out.points.reserve(n);
  const std::size_t total = p.size();
  if (total >= n) {
    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(total - i));
      std::swap(order[i], order[j]);
      out.points.push_back(p.points[order[i]]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) out.points.push_back(p.points[rng.below(total)]);
  }
  return out;
}

}  // namespace crosspoint
