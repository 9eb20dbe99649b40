#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "crosspoint/grad_check.hpp"
#include "crosspoint/models.hpp"

using namespace crosspoint;

namespace {

PointCloud random_cloud(std::uint64_t seed, std::size_t n) {
  Rng rng{StreamId(seed)};
  PointCloud p;
  for (std::size_t i = 0; i < n; ++i) {
    p.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  }
  return p;
}

ImageTensor random_image(std::uint64_t seed, std::size_t h, std::size_t w) {
  ImageTensor img(h, w, 3);
  Rng rng{StreamId(seed)};
  for (double& v : img.pixels) v = rng.uniform();
  return img;
}

ArchDescriptor tiny_arch(PointEncoderKind kind = PointEncoderKind::pointnet_lite) {
  ArchDescriptor a;
  a.point_encoder = kind;
  a.point_widths = {5};
  a.feature_dim = 4;
  a.proj_dim = 3;
  a.knn_k = 2;
  a.image_channels = {2, 2};
  a.image_height = 8;
  a.image_width = 8;
  a.leaky_slope = 0.1;
  return a;
}

// Randomizes biases too, so gradient checks exercise every path.
ModelParams perturbed(const ArchDescriptor& arch, std::uint64_t seed) {
  ModelParams p = init_params(arch, seed);
  Rng rng{StreamId(seed).child("bias")};
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.names[i].ends_with(".bias")) {
      for (double& v : p.tensors[i].data()) v = rng.uniform(-0.5, 0.5);
    }
  }
  return p;
}

std::vector<double> embed_points(const ModelParams& p, const std::vector<PointCloud>& clouds) {
  Graph g;
  ModelVars m(g, p, false);
  return point_forward(m, clouds).value().values();
}

}  // namespace

TEST(Init, DeterministicWithZeroBiases) {
  const auto arch = ArchDescriptor::toy();
  const auto a = init_params(arch, 5);
  EXPECT_EQ(a, init_params(arch, 5));
  EXPECT_NE(a, init_params(arch, 6));
  a.validate();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.names[i].ends_with(".bias")) {
      for (double v : a.tensors[i].data()) EXPECT_EQ(v, 0.0);
    }
  }
}

TEST(Init, GlorotRangeAndMean) {
  ArchDescriptor arch;
  arch.feature_dim = 256;
  const auto p = init_params(arch, 1);
  const Tensor& w = p["point_head.0.weight"];
  ASSERT_EQ(w.shape(), (Shape{256, 256}));
  const double bound = std::sqrt(6.0 / 512.0);
  double sum = 0.0;
  for (double v : w.data()) {
    EXPECT_LE(std::abs(v), bound);
    sum += v;
  }
  EXPECT_LE(std::abs(sum / static_cast<double>(w.size())), 0.01);
}

TEST(Init, InconsistentWidthsAreConfigErrors) {
  ArchDescriptor a;
  a.point_widths = {64, 0};
  EXPECT_THROW(init_params(a, 1), ConfigError);
  a = ArchDescriptor{};
  a.image_height = 4;
  EXPECT_THROW(init_params(a, 1), ConfigError);
  a = ArchDescriptor{};
  a.proj_dim = 0;
  EXPECT_THROW(init_params(a, 1), ConfigError);
  a = ArchDescriptor{};
  a.point_encoder = PointEncoderKind::dgcnn_lite;
  a.point_widths.clear();
  EXPECT_THROW(init_params(a, 1), ConfigError);
}

TEST(Descriptor, TextRoundTrip) {
  ArchDescriptor a = tiny_arch(PointEncoderKind::dgcnn_lite);
  a.leaky_slope = 0.123456789012345;
  EXPECT_EQ(ArchDescriptor::from_text(a.to_text()), a);
  EXPECT_THROW(ArchDescriptor::from_text("widths=3\n"), ConfigError);
  EXPECT_EQ(ArchDescriptor::paper().proj_dim, 256u);
}

TEST(PointNet, PermutationInvariantBitIdentical) {
  const auto p = init_params(ArchDescriptor::toy(), 3);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    PointCloud c = random_cloud(seed, 50);
    PointCloud shuffled = c;
    Rng rng{StreamId(seed).child("perm")};
    rng.shuffle(std::span<Point3>(shuffled.points));
    EXPECT_EQ(embed_points(p, {c}), embed_points(p, {shuffled}));
  }
}

TEST(PointNet, ZeroWeightsGiveZeroEmbedding) {
  auto p = init_params(ArchDescriptor::toy(), 3);
  for (auto& t : p.tensors) std::fill(t.data().begin(), t.data().end(), 0.0);
  const auto e = embed_points(p, {random_cloud(1, 20), random_cloud(2, 20)});
  EXPECT_EQ(e.size(), 2u * 128u);
  EXPECT_TRUE(std::all_of(e.begin(), e.end(), [](double v) { return v == 0.0; }));
}

TEST(PointNet, SinglePointMatchesPerceptronLoop) {
  const auto arch = tiny_arch();
  const auto p = perturbed(arch, 4);
  const Point3 q{0.3, -0.7, 0.2};
  // Loop oracle: 3 -> 5 -> 4 with leaky activations.
  std::vector<double> h(q.begin(), q.end());
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const std::string prefix = "point.mlp" + std::to_string(layer);
    const Tensor& w = p[prefix + ".weight"];
    const Tensor& b = p[prefix + ".bias"];
    std::vector<double> next(w.extent(1));
    for (std::size_t j = 0; j < next.size(); ++j) {
      double s = b[j];
      for (std::size_t i = 0; i < h.size(); ++i) s += h[i] * w.at(i, j);
      next[j] = s > 0 ? s : 0.1 * s;
    }
    h = next;
  }
  const auto e = embed_points(p, {PointCloud{{q}, {}}});
  ASSERT_EQ(e.size(), h.size());
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(e[i], h[i], 1e-14);
}

TEST(Knn, Examples) {
  PointCloud line{{{0, 0, 0}, {1, 0, 0}, {3, 0, 0}}, {}};
  EXPECT_EQ(knn_graph(line, 1), (std::vector<std::size_t>{1, 0, 1}));
  const PointCloud c = random_cloud(9, 6);
  const auto all = knn_graph(c, 5);
  for (std::size_t i = 0; i < 6; ++i) {
    std::vector<std::size_t> row(all.begin() + i * 5, all.begin() + (i + 1) * 5);
    std::sort(row.begin(), row.end());
    std::vector<std::size_t> expected;
    for (std::size_t j = 0; j < 6; ++j) {
      if (j != i) expected.push_back(j);
    }
    EXPECT_EQ(row, expected);
  }
  EXPECT_THROW(knn_graph(c, 6), ConfigError);
}

TEST(Knn, TiesPreferSmallerIndex) {
  PointCloud p{{{0, 0, 0}, {1, 0, 0}, {-1, 0, 0}, {0, 1, 0}}, {}};
  EXPECT_EQ(knn_graph(p, 2), (std::vector<std::size_t>{1, 2, 0, 3, 0, 3, 0, 1}));
}

TEST(Knn, MatchesFullSortOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const PointCloud c = random_cloud(seed + 40, 16);
    const auto nn = knn_graph(c, 4);
    for (std::size_t i = 0; i < 16; ++i) {
      std::vector<std::size_t> order(16);
      std::iota(order.begin(), order.end(), 0);
      order.erase(order.begin() + static_cast<std::ptrdiff_t>(i));
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return norm(c.points[a] - c.points[i]) < norm(c.points[b] - c.points[i]);
      });
      for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(nn[i * 4 + r], order[r]);
    }
  }
}

TEST(Dgcnn, TwoPointNeighbours) {
  PointCloud p{{{0, 0, 0}, {0.5, 0.1, -0.2}}, {}};
  EXPECT_EQ(knn_graph(p, 1), (std::vector<std::size_t>{1, 0}));
}

TEST(Dgcnn, EdgeFeaturesTranslationCovariant) {
  const PointCloud c = random_cloud(11, 12);
  PointCloud moved = c;
  const Point3 o{0.25, -1.5, 2.0};
  for (auto& q : moved.points) q = q + o;
  Graph g;
  const std::vector<PointCloud> a{c}, b{moved};
  const Tensor ea = edge_features(g, a, 3).value();
  const Tensor eb = edge_features(g, b, 3).value();
  ASSERT_EQ(ea.shape(), (Shape{36, 6}));
  for (std::size_t r = 0; r < 36; ++r) {
    for (std::size_t col = 0; col < 3; ++col) {
      EXPECT_NEAR(eb.at(r, col) - ea.at(r, col), o[col], 1e-12);
      EXPECT_NEAR(eb.at(r, col + 3), ea.at(r, col + 3), 1e-12);
    }
  }
}

TEST(Dgcnn, PermutationInvariantWithoutTies) {
  ArchDescriptor arch;
  arch.point_encoder = PointEncoderKind::dgcnn_lite;
  arch.knn_k = 4;
  const auto p = init_params(arch, 8);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    PointCloud c = random_cloud(seed + 60, 32);
    PointCloud shuffled = c;
    Rng rng{StreamId(seed).child("perm")};
    rng.shuffle(std::span<Point3>(shuffled.points));
    EXPECT_EQ(embed_points(p, {c}), embed_points(p, {shuffled}));
  }
}

TEST(Image, ZeroImageZeroEmbedding) {
  const auto p = init_params(ArchDescriptor::toy(), 2);
  Graph g;
  ModelVars m(g, p, false);
  const std::vector<ImageTensor> images{ImageTensor(32, 32, 3)};
  const auto e = image_forward(m, images).value();
  EXPECT_EQ(e.shape(), (Shape{1, 128}));
  for (double v : e.data()) EXPECT_EQ(v, 0.0);
}

TEST(Image, OutputWidthForVariousSizes) {
  for (std::size_t h : {7u, 16u, 33u}) {
    for (std::size_t w : {9u, 32u}) {
      ArchDescriptor arch;
      arch.image_height = h;
      arch.image_width = w;
      const auto p = init_params(arch, 1);
      Graph g;
      ModelVars m(g, p);
      const std::vector<ImageTensor> images{random_image(1, h, w), random_image(2, h, w)};
      EXPECT_EQ(image_forward(m, images).shape(), (Shape{2, arch.feature_dim}));
    }
  }
  const auto p = init_params(ArchDescriptor::toy(), 1);
  Graph g;
  ModelVars m(g, p);
  const std::vector<ImageTensor> wrong{random_image(1, 16, 16)};
  EXPECT_THROW(image_forward(m, wrong), ShapeError);
}

TEST(Project, IdentityHeadPassesInputPrefix) {
  ArchDescriptor arch;
  arch.feature_dim = 6;
  arch.proj_dim = 4;
  auto p = init_params(arch, 1);
  Tensor& w0 = p["point_head.0.weight"];
  Tensor& w1 = p["point_head.1.weight"];
  std::fill(w0.data().begin(), w0.data().end(), 0.0);
  std::fill(w1.data().begin(), w1.data().end(), 0.0);
  for (std::size_t i = 0; i < 6; ++i) w0[i * 6 + i] = 1.0;
  for (std::size_t i = 0; i < 4; ++i) w1[i * 4 + i] = 1.0;
  Graph g;
  ModelVars m(g, p);
  Var e = g.constant(Tensor({1, 6}, {0.5, 1.5, 2.0, 0.25, 3.0, 4.0}));
  const auto z = project(m, e, Head::point).value();
  EXPECT_EQ(z.shape(), (Shape{1, 4}));
  EXPECT_EQ(z.values(), (std::vector<double>{0.5, 1.5, 2.0, 0.25}));
}

TEST(Project, EndToEndShapes) {
  const auto p = init_params(ArchDescriptor::toy(), 1);
  Graph g;
  ModelVars m(g, p);
  const std::vector<PointCloud> clouds{random_cloud(1, 40), random_cloud(2, 40), random_cloud(3, 40)};
  const auto z = project(m, point_forward(m, clouds), Head::point);
  EXPECT_EQ(z.shape(), (Shape{3, 64}));
  const std::vector<ImageTensor> images{random_image(1, 32, 32)};
  EXPECT_EQ(project(m, image_forward(m, images), Head::image).shape(), (Shape{1, 64}));
}

TEST(Binding, UnusedParametersHaveZeroGradient) {
  const auto p = init_params(tiny_arch(), 1);
  Graph g;
  ModelVars m(g, p);
  const std::vector<PointCloud> clouds{random_cloud(1, 5)};
  g.backward(sum_all(project(m, point_forward(m, clouds), Head::point)));
  const auto grads = m.gradients();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (is_image_parameter(p.names[i])) {
      EXPECT_FALSE(m.bound(i));
      for (double v : grads[i].data()) EXPECT_EQ(v, 0.0);
    }
  }
}

// Every encoder and head composed into one scalar, against central differences.
TEST(ModelGradient, EveryForwardPath) {
  for (auto kind : {PointEncoderKind::pointnet_lite, PointEncoderKind::dgcnn_lite}) {
    const auto arch = tiny_arch(kind);
    const ModelParams layout = perturbed(arch, 7);
    const std::vector<PointCloud> clouds{random_cloud(1, 5), random_cloud(2, 5)};
    const std::vector<ImageTensor> images{random_image(3, 8, 8), random_image(4, 8, 8)};
    Rng rng{StreamId(12)};
    Tensor wz({2, 3}), wh({2, 3});
    for (double& v : wz.data()) v = rng.uniform(-1, 1);
    for (double& v : wh.data()) v = rng.uniform(-1, 1);
    auto f = [&](Graph& g, std::span<const Var> vars) {
      ModelVars m(g, layout, vars);
      Var z = project(m, point_forward(m, clouds), Head::point);
      Var h = project(m, image_forward(m, images), Head::image);
      return sum_all(z * g.constant(wz)) + sum_all(h * g.constant(wh));
    };
    const auto r = grad_check(f, layout.tensors);
    EXPECT_LE(r.max_rel_error, 1e-5) << to_string(kind) << " param " << layout.names[r.worst_param];
  }
}
