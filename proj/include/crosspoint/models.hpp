#pragma once

// Point encoders (pointnet_lite, dgcnn_lite), the image encoder and the two
// projection heads, with their parameters kept as one named, ordered list.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crosspoint/autograd.hpp"
#include "crosspoint/errors.hpp"
#include "crosspoint/pointcloud.hpp"
#include "crosspoint/render.hpp"
#include "crosspoint/rng.hpp"
#include "crosspoint/text.hpp"

namespace crosspoint {

enum class PointEncoderKind { pointnet_lite, dgcnn_lite };

inline std::string to_string(PointEncoderKind k) {
  return k == PointEncoderKind::pointnet_lite ? "pointnet_lite" : "dgcnn_lite";
}

inline PointEncoderKind parse_point_encoder(std::string_view s) {
  if (s == "pointnet_lite") return PointEncoderKind::pointnet_lite;
  if (s == "dgcnn_lite") return PointEncoderKind::dgcnn_lite;
  throw ConfigError("unknown point encoder '" + std::string(s) + "'");
}

struct ArchDescriptor {
  PointEncoderKind point_encoder = PointEncoderKind::pointnet_lite;
  // Hidden widths of the per-point perceptron; the last layer outputs feature_dim.
  // For dgcnn_lite the first width is the edge-convolution width.
  std::vector<std::size_t> point_widths{64, 128};
  std::size_t feature_dim = 128;
  std::size_t proj_dim = 64;
  std::size_t knn_k = 8;
  std::vector<std::size_t> image_channels{8, 16};
  std::size_t image_kernel = 3;
  std::size_t image_stride = 2;
  std::size_t image_height = 32;
  std::size_t image_width = 32;
  double leaky_slope = 0.01;

  static ArchDescriptor toy() { return {}; }
  static ArchDescriptor paper() {
    ArchDescriptor a;
    a.proj_dim = 256;
    return a;
  }

  // Spatial extent after the conv stages, {height, width}.
  std::pair<std::size_t, std::size_t> image_output_size() const {
    std::size_t h = image_height, w = image_width;
    for (std::size_t i = 0; i < image_channels.size(); ++i) {
      if (h < image_kernel || w < image_kernel) {
        throw ConfigError("image of " + std::to_string(image_height) + "x" +
                          std::to_string(image_width) + " too small for " +
                          std::to_string(image_channels.size()) + " conv stages");
      }
      h = (h - image_kernel) / image_stride + 1;
      w = (w - image_kernel) / image_stride + 1;
    }
    return {h, w};
  }

  void validate() const {
    auto positive = [](const std::vector<std::size_t>& v) {
      return std::all_of(v.begin(), v.end(), [](std::size_t x) { return x > 0; });
    };
    if (!positive(point_widths) || !positive(image_channels)) {
      throw ConfigError("layer widths must be positive");
    }
    if (point_encoder == PointEncoderKind::dgcnn_lite && point_widths.empty()) {
      throw ConfigError("dgcnn_lite needs at least one point width");
    }
    if (feature_dim == 0 || proj_dim == 0) throw ConfigError("feature and projection widths must be positive");
    if (knn_k == 0) throw ConfigError("knn_k must be positive");
    if (image_channels.empty()) throw ConfigError("image encoder needs at least one conv stage");
    if (image_kernel == 0 || image_stride == 0) throw ConfigError("conv kernel and stride must be positive");
    if (!(leaky_slope >= 0 && leaky_slope < 1)) throw ConfigError("leaky slope must be in [0, 1)");
    image_output_size();
  }

  std::string to_text() const {
    std::string s;
    s += "point_encoder=" + to_string(point_encoder) + "\n";
    s += "point_widths=" + text::join(point_widths) + "\n";
    s += "feature_dim=" + std::to_string(feature_dim) + "\n";
    s += "proj_dim=" + std::to_string(proj_dim) + "\n";
    s += "knn_k=" + std::to_string(knn_k) + "\n";
    s += "image_channels=" + text::join(image_channels) + "\n";
    s += "image_kernel=" + std::to_string(image_kernel) + "\n";
    s += "image_stride=" + std::to_string(image_stride) + "\n";
    s += "image_height=" + std::to_string(image_height) + "\n";
    s += "image_width=" + std::to_string(image_width) + "\n";
    s += "leaky_slope=" + text::format_double(leaky_slope) + "\n";
    return s;
  }

  static ArchDescriptor from_text(std::string_view s) {
    ArchDescriptor a;
    for (const auto& raw : text::split(s, '\n')) {
      const auto line = text::trim(raw);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw ConfigError("bad descriptor line '" + std::string(line) + "'");
      const auto key = text::trim(line.substr(0, eq));
      const auto value = text::trim(line.substr(eq + 1));
      if (key == "point_encoder") a.point_encoder = parse_point_encoder(value);
      else if (key == "point_widths") a.point_widths = text::parse_uint_list(value, key);
      else if (key == "feature_dim") a.feature_dim = text::parse_uint(value, key);
      else if (key == "proj_dim") a.proj_dim = text::parse_uint(value, key);
      else if (key == "knn_k") a.knn_k = text::parse_uint(value, key);
      else if (key == "image_channels") a.image_channels = text::parse_uint_list(value, key);
      else if (key == "image_kernel") a.image_kernel = text::parse_uint(value, key);
      else if (key == "image_stride") a.image_stride = text::parse_uint(value, key);
      else if (key == "image_height") a.image_height = text::parse_uint(value, key);
      else if (key == "image_width") a.image_width = text::parse_uint(value, key);
      else if (key == "leaky_slope") a.leaky_slope = text::parse_double(value, key);
      else throw ConfigError("unknown descriptor key '" + std::string(key) + "'");
    }
    a.validate();
    return a;
  }

  bool operator==(const ArchDescriptor&) const = default;
};

// ---------------------------------------------------------------------------
// Parameter layout and initialization
// ---------------------------------------------------------------------------

struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  bool bias = false;
};

/// Fixed, architecture-determined order of every learnable tensor.
inline std::vector<ParamSpec> parameter_layout(const ArchDescriptor& arch) {
  arch.validate();
  std::vector<ParamSpec> out;
  auto dense = [&out](const std::string& prefix, std::size_t in, std::size_t outw) {
    out.push_back({prefix + ".weight", {in, outw}, in, outw, false});
    out.push_back({prefix + ".bias", {outw}, in, outw, true});
  };

  std::vector<std::size_t> dims;
  if (arch.point_encoder == PointEncoderKind::pointnet_lite) {
    dims.push_back(3);
  } else {
    dense("point.edge", 6, arch.point_widths[0]);
  }
  const std::size_t first = arch.point_encoder == PointEncoderKind::pointnet_lite ? 0 : 1;
  if (arch.point_encoder == PointEncoderKind::dgcnn_lite) dims.push_back(arch.point_widths[0]);
  for (std::size_t i = first; i < arch.point_widths.size(); ++i) dims.push_back(arch.point_widths[i]);
  dims.push_back(arch.feature_dim);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    dense("point.mlp" + std::to_string(i), dims[i], dims[i + 1]);
  }

  std::size_t in_c = 3;
  const std::size_t k2 = arch.image_kernel * arch.image_kernel;
  for (std::size_t i = 0; i < arch.image_channels.size(); ++i) {
    const std::size_t oc = arch.image_channels[i];
    const std::string prefix = "image.conv" + std::to_string(i);
    out.push_back({prefix + ".kernel", {oc, in_c, arch.image_kernel, arch.image_kernel},
                   in_c * k2, oc * k2, false});
    out.push_back({prefix + ".bias", {oc, 1, 1}, in_c * k2, oc * k2, true});
    in_c = oc;
  }
  const auto [oh, ow] = arch.image_output_size();
  dense("image.fc", in_c * oh * ow, arch.feature_dim);

  for (const std::string head : {"point_head", "image_head"}) {
    dense(head + ".0", arch.feature_dim, arch.feature_dim);
    dense(head + ".1", arch.feature_dim, arch.proj_dim);
  }
  return out;
}

struct ModelParams {
  ArchDescriptor arch;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t size() const { return tensors.size(); }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    return std::nullopt;
  }
  std::size_t index(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw ShapeError("no parameter named '" + std::string(name) + "'");
  }
  const Tensor& operator[](std::string_view name) const { return tensors[index(name)]; }
  Tensor& operator[](std::string_view name) { return tensors[index(name)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  /// Throws when the tensors do not match the layout the descriptor implies.
  void validate() const {
    const auto layout = parameter_layout(arch);
    if (layout.size() != tensors.size() || names.size() != tensors.size()) {
      throw ShapeError("parameter count does not match the architecture");
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (layout[i].name != names[i] || layout[i].shape != tensors[i].shape()) {
        throw ShapeError("parameter '" + names[i] + "' does not match the architecture");
      }
      if (!Graph::all_finite(tensors[i].data())) {
        throw DomainError("parameter '" + names[i] + "' is not finite");
      }
    }
  }

  bool operator==(const ModelParams&) const = default;
};

inline bool is_image_parameter(std::string_view name) {
  return name.starts_with("image.") || name.starts_with("image_head.");
}

/// Glorot-uniform weights, zero biases. Each tensor draws from its own stream
/// keyed by name, so the layout order never affects the values.
inline ModelParams init_params(const ArchDescriptor& arch, std::uint64_t seed) {
  ModelParams p;
  p.arch = arch;
  const StreamId root = StreamId(seed).child("init");
  for (const auto& spec : parameter_layout(arch)) {
    Tensor t(spec.shape, 0.0);
    if (!spec.bias) {
      const double a = std::sqrt(6.0 / static_cast<double>(spec.fan_in + spec.fan_out));
      Rng rng(root.child(spec.name));
      for (double& v : t.data()) v = rng.uniform(-a, a);
    }
    p.names.push_back(spec.name);
    p.tensors.push_back(std::move(t));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Binding to a graph
// ---------------------------------------------------------------------------

/// Parameters bound into a Graph on first use; tensors that a forward pass
/// never touches never enter the graph.
class ModelVars {
 public:
  ModelVars(Graph& graph, const ModelParams& params, bool trainable = true)
      : graph_(&graph), params_(&params), vars_(params.size()), trainable_(params.size(), trainable) {}

  // Uses already-bound leaves, one per parameter in layout order.
  ModelVars(Graph& graph, const ModelParams& params, std::span<const Var> vars)
      : graph_(&graph), params_(&params), vars_(vars.begin(), vars.end()),
        trainable_(params.size(), true) {
    if (vars.size() != params.size()) throw ShapeError("one Var per parameter expected");
  }

  void set_trainable(std::string_view prefix, bool trainable) {
    for (std::size_t i = 0; i < params_->size(); ++i) {
      if (params_->names[i].starts_with(prefix)) trainable_[i] = trainable;
    }
  }

  Var operator[](std::string_view name) const {
    const std::size_t i = params_->index(name);
    if (!vars_[i]) {
      vars_[i] = trainable_[i] ? graph_->parameter(params_->tensors[i])
                               : graph_->constant(params_->tensors[i]);
    }
    return *vars_[i];
  }

  /// Gradient of every parameter, zeros for tensors that were never bound.
  std::vector<Tensor> gradients() const {
    std::vector<Tensor> out;
    out.reserve(vars_.size());
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      out.push_back(vars_[i] ? graph_->grad(*vars_[i]) : Tensor(params_->tensors[i].shape(), 0.0));
    }
    return out;
  }

  bool bound(std::size_t i) const { return vars_[i].has_value(); }
  const ArchDescriptor& arch() const { return params_->arch; }
  const ModelParams& params() const { return *params_; }
  Graph& graph() const { return *graph_; }

 private:
  Graph* graph_;
  const ModelParams* params_;
  mutable std::vector<std::optional<Var>> vars_;
  std::vector<bool> trainable_;
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace detail {

inline Var dense(const ModelVars& m, Var x, const std::string& prefix) {
  return linear(x, m[prefix + ".weight"], m[prefix + ".bias"]);
}

inline std::size_t common_size(std::span<const PointCloud> clouds) {
  if (clouds.empty()) throw ShapeError("empty batch of point clouds");
  const std::size_t n = clouds.front().size();
  for (const auto& c : clouds) {
    c.validate();
    if (c.size() != n) throw ShapeError("point clouds in a batch must share their point count");
  }
  return n;
}

inline Tensor stack_points(std::span<const PointCloud> clouds, std::size_t n) {
  Tensor x({clouds.size() * n, 3});
  auto xs = x.data();
  std::size_t r = 0;
  for (const auto& c : clouds) {
    for (const auto& p : c.points) {
      for (std::size_t a = 0; a < 3; ++a) xs[r * 3 + a] = p[a];
      ++r;
    }
  }
  return x;
}

// Per-point perceptron with leaky activations, then max over each cloud's points.
inline Var mlp_and_pool(const ModelVars& m, Var h, std::size_t first_layer, std::size_t batch,
                        std::size_t n) {
  const double slope = m.arch().leaky_slope;
  for (std::size_t i = first_layer;; ++i) {
    const std::string prefix = "point.mlp" + std::to_string(i);
    if (!m.params().find(prefix + ".weight")) break;
    h = leaky_relu(dense(m, h, prefix), slope);
  }
  const std::size_t f = h.shape()[1];
  return max(reshape(h, {batch, n, f}), 1).value;
}

}  // namespace detail

/// Shared perceptron 3 -> widths -> F on every point, max over points. Returns B x F.
inline Var pointnet_forward(const ModelVars& m, std::span<const PointCloud> clouds) {
  const std::size_t n = detail::common_size(clouds);
  Var x = m.graph().constant(detail::stack_points(clouds, n));
  return detail::mlp_and_pool(m, x, 0, clouds.size(), n);
}

/// Indices of the k nearest other points of every point (row-major n x k).
/// Ties go to the smaller index.
inline std::vector<std::size_t> knn_graph(const PointCloud& p, std::size_t k) {
  const std::size_t n = p.size();
  if (k == 0 || k >= n) {
    throw ConfigError("knn needs 0 < k < point count (k=" + std::to_string(k) +
                      ", points=" + std::to_string(n) + ")");
  }
  std::vector<std::size_t> out(n * k);
  std::vector<std::pair<double, std::size_t>> d(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const Point3 v = p.points[j] - p.points[i];
      d[c++] = {dot(v, v), j};
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    for (std::size_t r = 0; r < k; ++r) out[i * k + r] = d[r].second;
  }
  return out;
}

/// Edge features concat(x_i, x_j - x_i) for every point i and neighbour j,
/// rows ordered by (i, neighbour rank). Returns (B n k) x 6.
inline Var edge_features(Graph& g, std::span<const PointCloud> clouds, std::size_t k) {
  const std::size_t n = detail::common_size(clouds);
  Var x = g.constant(detail::stack_points(clouds, n));
  std::vector<std::size_t> centre, neighbour;
  centre.reserve(clouds.size() * n * k);
  neighbour.reserve(clouds.size() * n * k);
  for (std::size_t b = 0; b < clouds.size(); ++b) {
    const auto nn = knn_graph(clouds[b], k);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t r = 0; r < k; ++r) {
        centre.push_back(b * n + i);
        neighbour.push_back(b * n + nn[i * k + r]);
      }
    }
  }
  Var xi = gather_rows(x, std::move(centre));
  Var xj = gather_rows(x, std::move(neighbour));
  return concat(xi, xj - xi, 1);
}

/// One edge-convolution stage (max over k neighbours), then the per-point
/// perceptron and max over points. Returns B x F.
inline Var dgcnn_forward(const ModelVars& m, std::span<const PointCloud> clouds) {
  const std::size_t n = detail::common_size(clouds);
  const std::size_t k = m.arch().knn_k;
  const std::size_t rows = clouds.size() * n;
  Var e = edge_features(m.graph(), clouds, k);
  Var h = leaky_relu(detail::dense(m, e, "point.edge"), m.arch().leaky_slope);
  const std::size_t w = h.shape()[1];
  h = max(reshape(h, {rows, k, w}), 1).value;
  return detail::mlp_and_pool(m, h, 0, clouds.size(), n);
}

inline Var point_forward(const ModelVars& m, std::span<const PointCloud> clouds) {
  return m.arch().point_encoder == PointEncoderKind::pointnet_lite ? pointnet_forward(m, clouds)
                                                                   : dgcnn_forward(m, clouds);
}

/// Conv stages with leaky activations, flatten, one dense layer. Returns B x F.
inline Var image_forward(const ModelVars& m, std::span<const ImageTensor> images) {
  const auto& arch = m.arch();
  if (images.empty()) throw ShapeError("empty batch of images");
  const std::size_t h = arch.image_height, w = arch.image_width;
  Tensor x({images.size(), 3, h, w});
  auto xs = x.data();
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& img = images[b];
    if (img.height != h || img.width != w || img.channels != 3) {
      throw ShapeError("image encoder expects " + std::to_string(h) + "x" + std::to_string(w) +
                       "x3 images");
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        for (std::size_t c = 0; c < 3; ++c) {
          xs[((b * 3 + c) * h + y) * w + xx] = img.at(y, xx, c);
        }
      }
    }
  }
  Var a = m.graph().constant(std::move(x));
  for (std::size_t i = 0; i < arch.image_channels.size(); ++i) {
    const std::string prefix = "image.conv" + std::to_string(i);
    a = conv2d(a, m[prefix + ".kernel"], arch.image_stride) + m[prefix + ".bias"];
    a = leaky_relu(a, arch.leaky_slope);
  }
  a = reshape(a, {images.size(), a.size() / images.size()});
  return detail::dense(m, a, "image.fc");
}

enum class Head { point, image };

/// dense F -> F with leaky activation, then dense F -> d.
inline Var project(const ModelVars& m, Var embedding, Head head) {
  const std::string prefix = head == Head::point ? "point_head" : "image_head";
  Var h = leaky_relu(detail::dense(m, embedding, prefix + ".0"), m.arch().leaky_slope);
  return detail::dense(m, h, prefix + ".1");
}

/// Rows of a B x F value as plain vectors.
inline std::vector<std::vector<double>> rows_of(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("rows_of needs a matrix");
  std::vector<std::vector<double>> out(t.extent(0));
  const std::size_t cols = t.extent(1);
  for (std::size_t r = 0; r < out.size(); ++r) {
    out[r].assign(t.data().begin() + static_cast<std::ptrdiff_t>(r * cols),
                  t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
  }
  return out;
}

}  // namespace crosspoint
