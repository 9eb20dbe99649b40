#pragma once

// Synthetic labelled primitives, dataset persistence and batch assembly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include <tbb/parallel_for.h>

#include "crosspoint/codec.hpp"
#include "crosspoint/errors.hpp"
#include "crosspoint/pointcloud.hpp"
#include "crosspoint/render.hpp"
#include "crosspoint/rng.hpp"
#include "crosspoint/text.hpp"

namespace crosspoint {

enum class ShapeKind { sphere, cube, cylinder, torus, cone, pyramid };

inline constexpr std::array<ShapeKind, 6> all_shape_kinds{
    ShapeKind::sphere, ShapeKind::cube, ShapeKind::cylinder,
    ShapeKind::torus,  ShapeKind::cone, ShapeKind::pyramid};

inline std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::cube: return "cube";
    case ShapeKind::cylinder: return "cylinder";
    case ShapeKind::torus: return "torus";
    case ShapeKind::cone: return "cone";
    default: return "pyramid";
  }
}

inline ShapeKind parse_shape_kind(std::string_view s) {
  for (ShapeKind k : all_shape_kinds) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown shape kind '" + std::string(s) + "'");
}

// Size parameters of one primitive. Meaning per kind:
//   sphere    a, b, c: semi-axes (1, 1, 1 is the unit sphere)
//   cube      a, b, c: edge lengths of the box
//   cylinder  a: radius, b: height
//   torus     a: ring radius R, b: tube radius r
//   cone      a: base radius, b: height
//   pyramid   a: base edge, b: height
struct ShapeParams {
  double a = 1.0;
  double b = 1.0;
  double c = 1.0;

  static ShapeParams canonical(ShapeKind kind) {
    switch (kind) {
      case ShapeKind::sphere: return {1.0, 1.0, 1.0};
      case ShapeKind::cube: return {1.0, 1.0, 1.0};
      case ShapeKind::cylinder: return {0.5, 1.0, 0.0};
      case ShapeKind::torus: return {0.7, 0.25, 0.0};
      case ShapeKind::cone: return {0.5, 1.0, 0.0};
      default: return {1.0, 0.8, 0.0};
    }
  }

  /// Canonical sizes with randomized aspect.
  static ShapeParams random(ShapeKind kind, Rng& rng) {
    switch (kind) {
      case ShapeKind::sphere:
      case ShapeKind::cube:
        return {rng.uniform(0.75, 1.25), rng.uniform(0.75, 1.25), rng.uniform(0.75, 1.25)};
      case ShapeKind::cylinder: return {rng.uniform(0.3, 0.6), rng.uniform(0.8, 1.6), 0.0};
      case ShapeKind::torus: return {rng.uniform(0.55, 0.8), rng.uniform(0.15, 0.3), 0.0};
      case ShapeKind::cone: return {rng.uniform(0.35, 0.65), rng.uniform(0.8, 1.5), 0.0};
      default: return {rng.uniform(0.8, 1.3), rng.uniform(0.6, 1.2), 0.0};
    }
  }
};

namespace detail {

inline Point3 point_in_triangle(Rng& rng, const Point3& p0, const Point3& p1, const Point3& p2) {
  const double s = std::sqrt(rng.uniform());
  const double t = rng.uniform();
  return (1.0 - s) * p0 + (s * (1.0 - t)) * p1 + (s * t) * p2;
}

// Chooses an index with probability proportional to its weight.
template <std::size_t N>
std::size_t pick(Rng& rng, const std::array<double, N>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i + 1 < N; ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return N - 1;
}

inline Point3 sample_box(Rng& rng, double a, double b, double c) {
  const std::array<double, 3> half{a / 2, b / 2, c / 2};
  // Face pairs normal to x, y, z.
  const std::size_t axis = pick<3>(rng, {b * c, a * c, a * b});
  Point3 p;
  for (std::size_t d = 0; d < 3; ++d) p[d] = rng.uniform(-half[d], half[d]);
  p[axis] = rng.bernoulli(0.5) ? half[axis] : -half[axis];
  return p;
}

inline Point3 sample_disk(Rng& rng, double r, double z) {
  const double rho = r * std::sqrt(rng.uniform());
  const double phi = rng.uniform(0.0, 2 * std::numbers::pi);
  return {rho * std::cos(phi), rho * std::sin(phi), z};
}

inline Point3 sample_surface_point(ShapeKind kind, const ShapeParams& s, Rng& rng) {
  constexpr double pi = std::numbers::pi;
  switch (kind) {
    case ShapeKind::sphere: {
      Point3 v{0, 0, 0};
      double n = 0.0;
      while (n < 1e-9) {
        v = {rng.normal(), rng.normal(), rng.normal()};
        n = norm(v);
      }
      return {s.a * v[0] / n, s.b * v[1] / n, s.c * v[2] / n};
    }
    case ShapeKind::cube: return sample_box(rng, s.a, s.b, s.c);
    case ShapeKind::cylinder: {
      const double r = s.a, h = s.b;
      const std::size_t part = pick<3>(rng, {2 * pi * r * h, pi * r * r, pi * r * r});
      if (part == 0) {
        const double phi = rng.uniform(0.0, 2 * pi);
        return {r * std::cos(phi), r * std::sin(phi), rng.uniform(-h / 2, h / 2)};
      }
      return sample_disk(rng, r, part == 1 ? h / 2 : -h / 2);
    }
    case ShapeKind::torus: {
      const double big = s.a, small = s.b;
      // Area element is proportional to (R + r cos v); accept accordingly.
      while (true) {
        const double u = rng.uniform(0.0, 2 * pi);
        const double v = rng.uniform(0.0, 2 * pi);
        if (rng.uniform() * (big + small) <= big + small * std::cos(v)) {
          const double ring = big + small * std::cos(v);
          return {ring * std::cos(u), ring * std::sin(u), small * std::sin(v)};
        }
      }
    }
    case ShapeKind::cone: {
      const double r = s.a, h = s.b;
      const double slant = std::sqrt(r * r + h * h);
      if (pick<2>(rng, {pi * r * slant, pi * r * r}) == 1) return sample_disk(rng, r, -h / 2);
      // Distance from the apex grows with sqrt(u) for uniform area.
      const double t = std::sqrt(rng.uniform());
      const double phi = rng.uniform(0.0, 2 * pi);
      return {t * r * std::cos(phi), t * r * std::sin(phi), h / 2 - t * h};
    }
    default: {
      const double e = s.a / 2, h = s.b;
      const Point3 apex{0, 0, h / 2};
      const std::array<Point3, 4> base{Point3{-e, -e, -h / 2}, Point3{e, -e, -h / 2},
                                       Point3{e, e, -h / 2}, Point3{-e, e, -h / 2}};
      const double side = e * std::sqrt(h * h + e * e);  // area of one triangular face
      const std::size_t face = pick<5>(rng, {side, side, side, side, s.a * s.a});
      if (face == 4) return {rng.uniform(-e, e), rng.uniform(-e, e), -h / 2};
      return point_in_triangle(rng, apex, base[face], base[(face + 1) % 4]);
    }
  }
}

}  // namespace detail

/// n_pts points uniform on the surface of the primitive with the given sizes.
inline PointCloud sample_surface(ShapeKind kind, const ShapeParams& params, std::size_t n_pts,
                                 Rng& rng) {
  PointCloud out;
  out.points.reserve(n_pts);
  for (std::size_t i = 0; i < n_pts; ++i) out.points.push_back(detail::sample_surface_point(kind, params, rng));
  return out;
}

/// A primitive of the given kind with random aspect drawn from the stream.
inline PointCloud generate_shape(ShapeKind kind, std::size_t n_pts, StreamId stream) {
  if (n_pts < 8) throw ConfigError("shapes need at least 8 points");
  Rng rng(stream);
  const ShapeParams params = ShapeParams::random(kind, rng);
  return sample_surface(kind, params, n_pts, rng);
}

inline PointCloud generate_shape(std::string_view kind, std::size_t n_pts, StreamId stream) {
  return generate_shape(parse_shape_kind(kind), n_pts, stream);
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct DatasetConfig {
  std::vector<ShapeKind> classes{all_shape_kinds.begin(), all_shape_kinds.end()};
  std::size_t per_class = 150;
  std::size_t points_per_shape = 512;
  // Size of the pre-rendered image pool per sample; 0 renders on the fly.
  std::size_t renders_per_sample = 0;
  // Applies a random rotation to every generated shape.
  bool random_pose = false;
  CameraConfig camera;
  std::uint64_t seed = 0;
  std::string split = "train";

  void validate() const {
    if (classes.empty()) throw ConfigError("dataset needs at least one class");
    if (per_class == 0) throw ConfigError("per-class count must be at least 1");
    if (points_per_shape < 8) throw ConfigError("shapes need at least 8 points");
    if (split.empty() || split.find_first_of(" \t\n") != std::string::npos) {
      throw ConfigError("split tag must be a single word");
    }
  }
};

struct Sample {
  std::size_t id = 0;
  int label = 0;
  PointCloud cloud;
  std::vector<ImageTensor> renders;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;
  std::string split = "train";
  std::uint64_t checksum = 0;

  std::size_t size() const { return samples.size(); }
  std::size_t num_classes() const { return class_names.size(); }

  std::string point_file(std::size_t i) const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "points/%06zu.pcf", samples[i].id);
    return buf;
  }
  std::string image_file(std::size_t i, std::size_t r) const {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "images/%06zu_%zu.ppm", samples[i].id, r);
    return buf;
  }

  /// Header comment, then `<id>\t<class>\t<point-file>\t<image-file-list>` per sample.
  std::string manifest() const {
    std::string m = "# crosspoint dataset split=" + split + " classes=" + text::join(class_names) + "\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::vector<std::string> images;
      for (std::size_t r = 0; r < samples[i].renders.size(); ++r) images.push_back(image_file(i, r));
      m += std::to_string(samples[i].id) + "\t" + class_names.at(static_cast<std::size_t>(samples[i].label)) +
           "\t" + point_file(i) + "\t" + (images.empty() ? "-" : text::join(images)) + "\n";
    }
    return m;
  }

  std::uint64_t compute_checksum() const { return fnv1a(manifest()); }

  void validate() const {
    if (samples.empty()) throw DegenerateInput("dataset has no samples");
    for (const auto& s : samples) {
      if (s.label < 0 || static_cast<std::size_t>(s.label) >= class_names.size()) {
        throw DegenerateInput("label outside the class list");
      }
      s.cloud.validate();
    }
  }
};

inline Dataset build_dataset(const DatasetConfig& config) {
  config.validate();
  Dataset ds;
  ds.split = config.split;
  for (ShapeKind k : config.classes) ds.class_names.push_back(to_string(k));
  const std::size_t total = config.classes.size() * config.per_class;
  ds.samples.resize(total);
  const StreamId root = StreamId(config.seed).child("dataset").child(config.split);
  tbb::parallel_for(std::size_t{0}, total, [&](std::size_t id) {
    Sample& s = ds.samples[id];
    s.id = id;
    s.label = static_cast<int>(id / config.per_class);
    const StreamId stream = root.child(id);
    s.cloud = generate_shape(config.classes[id / config.per_class], config.points_per_shape,
                             stream.child("shape"));
    if (config.random_pose) {
      Rng rng(stream.child("pose"));
      s.cloud = apply_transform(std::move(s.cloud), random_rotation(rng));
    }
    s.cloud.label = s.label;
    const Point3 centre = s.cloud.centroid();
    for (std::size_t r = 0; r < config.renders_per_sample; ++r) {
      Rng rng(stream.child("render").child(r));
      // Stored pre-renders are 8-bit so that persisting them is lossless.
      s.renders.push_back(quantize(render(s.cloud, sample_camera(rng, config.camera, centre))));
    }
  });
  ds.checksum = ds.compute_checksum();
  return ds;
}

inline constexpr std::string_view manifest_name = "manifest.tsv";

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  try {
    std::filesystem::create_directories(dir / "points");
    if (!ds.samples.empty() && !ds.samples.front().renders.empty()) {
      std::filesystem::create_directories(dir / "images");
    }
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(e.what());
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    save_pcf(dir / ds.point_file(i), ds.samples[i].cloud);
    for (std::size_t r = 0; r < ds.samples[i].renders.size(); ++r) {
      save_ppm(dir / ds.image_file(i, r), ds.samples[i].renders[r]);
    }
  }
  write_file_atomic(dir / manifest_name, ds.manifest());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const std::string manifest = read_file(dir / manifest_name);
  Dataset ds;
  const auto lines = text::split(manifest, '\n');
  if (lines.empty() || !lines[0].starts_with("# crosspoint dataset ")) {
    throw IoError("missing manifest header in " + (dir / manifest_name).string());
  }
  for (const auto& field : text::split(std::string_view(lines[0]).substr(21), ' ')) {
    if (field.starts_with("split=")) ds.split = field.substr(6);
    if (field.starts_with("classes=")) ds.class_names = text::split(field.substr(8), ',');
  }
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (text::trim(lines[li]).empty()) continue;
    const auto cols = text::split(lines[li], '\t');
    if (cols.size() != 4) throw IoError("manifest line " + std::to_string(li + 1) + " needs 4 fields");
    Sample s;
    try {
      s.id = static_cast<std::size_t>(text::parse_uint(cols[0], "sample id"));
    } catch (const ConfigError& e) {
      throw IoError("manifest line " + std::to_string(li + 1) + ": " + e.what());
    }
    const auto cls = std::find(ds.class_names.begin(), ds.class_names.end(), cols[1]);
    if (cls == ds.class_names.end()) throw IoError("unknown class '" + cols[1] + "' in manifest");
    s.label = static_cast<int>(cls - ds.class_names.begin());
    s.cloud = load_pcf(dir / cols[2]);
    s.cloud.label = s.label;
    if (cols[3] != "-") {
      for (const auto& f : text::split(cols[3], ',')) s.renders.push_back(load_ppm(dir / f));
    }
    ds.samples.push_back(std::move(s));
  }
  ds.checksum = fnv1a(manifest);
  if (ds.compute_checksum() != ds.checksum) throw IoError("manifest is not in canonical form");
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct BatchConfig {
  AugmentConfig augment;
  ImageAugmentConfig image_augment;
  CameraConfig camera;
  std::size_t n_pts = 256;
  std::size_t n_images = 1;
  bool with_images = true;

  void validate() const {
    augment.validate();
    if (n_pts == 0) throw ConfigError("n_pts must be at least 1");
    if (n_images == 0) throw ConfigError("n_images must be at least 1");
  }
};

struct Batch {
  std::vector<PointCloud> clouds_t1;
  std::vector<PointCloud> clouds_t2;
  // n_images consecutive images per sample, in sample order.
  std::vector<ImageTensor> images;
  std::vector<int> labels;
  std::vector<std::size_t> sample_ids;
  std::size_t n_images = 1;

  std::size_t size() const { return clouds_t1.size(); }
  bool operator==(const Batch&) const = default;
};

/// Every random choice for sample s comes from stream.child(s.id), so the
/// batch does not depend on how the work is spread across threads.
inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices,
                        const BatchConfig& config, StreamId stream) {
  config.validate();
  if (indices.empty()) throw ConfigError("empty batch");
  const std::size_t n = indices.size();
  Batch b;
  b.n_images = config.n_images;
  b.clouds_t1.resize(n);
  b.clouds_t2.resize(n);
  b.labels.resize(n);
  b.sample_ids.resize(n);
  if (config.with_images) b.images.resize(n * config.n_images);
  for (std::size_t i : indices) {
    if (i >= ds.size()) throw ConfigError("batch index out of range");
  }
  tbb::parallel_for(std::size_t{0}, n, [&](std::size_t pos) {
    const Sample& s = ds.samples[indices[pos]];
    const StreamId ss = stream.child(s.id);
    const PointCloud source = sample_points(s.cloud, config.n_pts, ss.child("points"));
    b.clouds_t1[pos] = apply_pipeline(source, sample_pipeline(config.augment, ss.child("t1")));
    b.clouds_t2[pos] = apply_pipeline(source, sample_pipeline(config.augment, ss.child("t2")));
    b.labels[pos] = s.label;
    b.sample_ids[pos] = s.id;
    if (!config.with_images) return;

    std::vector<std::size_t> pool(s.renders.size());
    for (std::size_t r = 0; r < pool.size(); ++r) pool[r] = r;
    if (!pool.empty()) {
      if (config.n_images > pool.size()) {
        throw ConfigError("n_images exceeds the pre-rendered pool of " + std::to_string(pool.size()));
      }
      Rng pick(ss.child("views"));
      pick.shuffle(std::span<std::size_t>(pool));
    }
    const Point3 centre = s.cloud.centroid();
    for (std::size_t j = 0; j < config.n_images; ++j) {
      ImageTensor img;
      if (pool.empty()) {
        Rng cam(ss.child("camera").child(j));
        img = render(s.cloud, sample_camera(cam, config.camera, centre));
      } else {
        img = s.renders[pool[j]];
      }
      Rng aug(ss.child("image").child(j));
      b.images[pos * config.n_images + j] = augment_image(img, aug, config.image_augment);
    }
  });
  return b;
}

}  // namespace crosspoint
