#pragma once

// Self-contained numerical checks on the loss, gradient and geometry code.
// Each returns a named pass/fail record with a one-line detail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "crosspoint/data.hpp"
#include "crosspoint/grad_check.hpp"
#include "crosspoint/losses.hpp"
#include "crosspoint/pointcloud.hpp"
#include "crosspoint/text.hpp"
#include "crosspoint/training.hpp"

namespace crosspoint::selftest {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

template <class Fn>
CheckResult timed(std::string name, Fn&& fn) {
  const auto start = std::chrono::steady_clock::now();
  CheckResult r = fn();
  r.name = std::move(name);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline Table random_table(Rng& rng, std::size_t n, std::size_t d) {
  Table t(n, std::vector<double>(d));
  for (auto& row : t) {
    for (double& v : row) v = rng.normal();
  }
  return t;
}

inline ProjectedBatch random_batch(Rng& rng, std::size_t n, std::size_t d, double tau) {
  return {random_table(rng, n, d), random_table(rng, n, d), random_table(rng, n, d), tau};
}

inline double rel_error(double value, double reference) {
  return std::abs(value - reference) / std::max(std::abs(reference), 1e-300);
}

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3e", v);
  return buf;
}

}  // namespace detail

/// Vectorized losses against the literal-loop oracle on random batches.
inline CheckResult oracle_equivalence(std::size_t batches = 100, std::uint64_t seed = 0, double tol = 1e-12) {
  return detail::timed("oracle equivalence", [&] {
    static constexpr std::size_t ns[] = {2, 3, 5, 8};
    static constexpr std::size_t ds[] = {2, 8, 16};
    static constexpr double taus[] = {0.05, 0.1, 0.5};
    Rng rng(StreamId(seed).child("oracle"));
    double worst = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const auto batch = detail::random_batch(rng, ns[rng.below(4)], ds[rng.below(3)], taus[rng.below(3)]);
      const LossParts parts = joint_loss(batch);
      worst = std::max({worst, detail::rel_error(parts.imid, naive_oracle(batch, Objective::imid)),
                        detail::rel_error(parts.cmid, naive_oracle(batch, Objective::cmid)),
                        detail::rel_error(parts.total, naive_oracle(batch, Objective::joint))});
    }
    return CheckResult{"", worst <= tol, std::to_string(batches) + " batches, max rel. error " + detail::sci(worst)};
  });
}

/// N = 1 gives zero loss exactly; two identical rows give log 3 per term.
inline CheckResult degenerate_identities(std::uint64_t seed = 0, double tol = 1e-12) {
  return detail::timed("degenerate batches", [&] {
    Rng rng(StreamId(seed).child("degenerate"));
    bool single_ok = true;
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t d = 2 + rng.below(15);
      const auto one = detail::random_batch(rng, 1, d, 0.05 + rng.uniform());
      const LossParts p = joint_loss(one);
      single_ok = single_ok && p.imid == 0.0 && p.cmid == 0.0 && p.total == 0.0 &&
                  ntxent_pair(0, View::first, one) == 0.0 && ntxent_pair(0, View::second, one) == 0.0 &&
                  cmid_pair(0, CrossAnchor::prototype, one) == 0.0 && cmid_pair(0, CrossAnchor::image, one) == 0.0;

      const auto row = detail::random_table(rng, 1, d).front();
      const ProjectedBatch same{{row, row}, {row, row}, {row, row}, 0.05 + rng.uniform()};
      for (std::size_t i = 0; i < 2; ++i) {
        for (double v : {ntxent_pair(i, View::first, same), ntxent_pair(i, View::second, same),
                         cmid_pair(i, CrossAnchor::prototype, same), cmid_pair(i, CrossAnchor::image, same)}) {
          worst = std::max(worst, std::abs(v - std::log(3.0)));
        }
      }
    }
    return CheckResult{"", single_ok && worst <= tol,
                       std::string("N=1 exact zero: ") + (single_ok ? "yes" : "no") +
                           ", identical pair |term - log 3| max " + detail::sci(worst)};
  });
}

inline ArchDescriptor gradient_check_arch() {
  ArchDescriptor a;
  a.point_encoder = PointEncoderKind::pointnet_lite;
  a.point_widths = {6};
  a.feature_dim = 5;
  a.proj_dim = 4;
  a.image_channels = {2, 3};
  a.image_kernel = 3;
  a.image_stride = 2;
  a.image_height = 8;
  a.image_width = 8;
  a.leaky_slope = 0.1;
  return a;
}

/// Central differences on the joint objective through both encoders and both
/// heads for a two-sample batch drawn by the training pipeline.
inline CheckResult gradient_check(std::uint64_t seed = 0, double eps = 1e-5, double tol = 1e-5) {
  return detail::timed("gradient check", [&] {
    DatasetConfig dc;
    dc.per_class = 1;
    dc.points_per_shape = 16;
    dc.camera.height = 8;
    dc.camera.width = 8;
    dc.seed = seed;
    const Dataset ds = build_dataset(dc);
    TrainConfig tc;
    tc.arch = gradient_check_arch();
    tc.batch.n_pts = 6;
    tc.batch.camera.height = 8;
    tc.batch.camera.width = 8;
    tc.batch.image_augment.crop_height = 7;
    tc.batch.image_augment.crop_width = 7;
    const std::vector<std::size_t> idx{0, 3};
    const Batch batch = make_batch(ds, idx, tc.batch, StreamId(seed).child("grad-check"));
    ModelParams params = init_params(tc.arch, seed);
    // Non-zero biases so every parameter path carries signal.
    Rng rng(StreamId(seed).child("grad-check-bias"));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params.names[i].ends_with("bias")) {
        for (double& v : params.tensors[i].data()) v = rng.uniform(-0.1, 0.1);
      }
    }
    auto f = [&](Graph& g, std::span<const Var> vars) {
      ModelVars m(g, params, vars);
      return batch_loss(m, batch, tc).total;
    };
    GradCheckOptions options;
    options.eps = eps;
    const auto r = grad_check(f, params.tensors, options);
    return CheckResult{"", r.max_rel_error <= tol,
                       std::to_string(r.coordinates) + " coordinates, max rel. error " +
                           detail::sci(r.max_rel_error) + " (worst " + params.names[r.worst_param] + ")"};
  });
}

/// The cross-modal loss sees each view only through the prototype, so both
/// views receive the same gradient bit for bit.
inline CheckResult prototype_gradient_split(std::size_t batches = 50, std::uint64_t seed = 0) {
  return detail::timed("prototype gradient split", [&] {
    Rng rng(StreamId(seed).child("split"));
    std::size_t mismatches = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const auto batch = detail::random_batch(rng, 2 + rng.below(7), 2 + rng.below(15), 0.05 + rng.uniform());
      Graph g;
      Var z1 = g.parameter(to_tensor(batch.z1));
      Var z2 = g.parameter(to_tensor(batch.z2));
      Var h = g.parameter(to_tensor(batch.h));
      g.backward(cmid_loss(z1, z2, h, batch.tau));
      if (!(g.grad(z1) == g.grad(z2))) ++mismatches;
    }
    return CheckResult{"", mismatches == 0,
                       std::to_string(batches) + " batches, " + std::to_string(mismatches) + " mismatches"};
  });
}

/// Positive per-row rescaling leaves both losses unchanged.
inline CheckResult scale_invariance(std::size_t batches = 100, std::uint64_t seed = 0, double tol = 1e-9) {
  return detail::timed("scale invariance", [&] {
    Rng rng(StreamId(seed).child("scale"));
    double worst_imid = 0.0, worst_cmid = 0.0;
    auto scaled = [&rng](Table t) {
      for (auto& row : t) {
        const double s = std::exp(rng.uniform(-3.0, 3.0));
        for (double& v : row) v *= s;
      }
      return t;
    };
    for (std::size_t b = 0; b < batches; ++b) {
      const auto batch = detail::random_batch(rng, 2 + rng.below(7), 2 + rng.below(15), 0.05 + rng.uniform());
      ProjectedBatch views = batch;
      views.z1 = scaled(batch.z1);
      views.z2 = scaled(batch.z2);
      views.h = scaled(batch.h);
      worst_imid = std::max(worst_imid, std::abs(imid_loss(views) - imid_loss(batch)));
      // Scaling both views of a sample by one factor scales its prototype.
      ProjectedBatch protos = batch;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const double s = std::exp(rng.uniform(-3.0, 3.0));
        for (double& v : protos.z1[i]) v *= s;
        for (double& v : protos.z2[i]) v *= s;
      }
      protos.h = scaled(batch.h);
      worst_cmid = std::max(worst_cmid, std::abs(cmid_loss(protos) - cmid_loss(batch)));
    }
    return CheckResult{"", worst_imid <= tol && worst_cmid <= tol,
                       "max change imid " + detail::sci(worst_imid) + ", cmid " + detail::sci(worst_cmid)};
  });
}

/// Rotations keep distances, Normalize centres and scales to unit radius,
/// zero-parameter transforms are identities, elastic moves stay within m.
inline CheckResult geometry_invariants(std::size_t transforms = 1000, std::uint64_t seed = 0, double tol = 1e-9) {
  return detail::timed("geometry invariants", [&] {
    auto cloud = [](Rng& rng, std::size_t n, double scale, Point3 shift) {
      PointCloud p;
      for (std::size_t i = 0; i < n; ++i) {
        p.points.push_back(scale * Point3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)} + shift);
      }
      return p;
    };
    double rot = 0.0, centroid = 0.0, radius = 0.0, elastic_excess = 0.0;
    bool identities = true;
    for (std::size_t t = 0; t < transforms; ++t) {
      Rng rng(StreamId(seed).child("geometry").child(t));
      const PointCloud p = cloud(rng, 12, 0.5 + 2.0 * rng.uniform(),
                                 {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)});

      const PointCloud r = apply_transform(p, random_rotation(rng));
      for (std::size_t i = 0; i < p.size(); ++i) {
        for (std::size_t j = i + 1; j < p.size(); ++j) {
          rot = std::max(rot, std::abs(norm(r.points[i] - r.points[j]) - norm(p.points[i] - p.points[j])));
        }
      }

      const PointCloud n = apply_transform(p, Normalize{});
      double far = 0.0;
      for (const auto& q : n.points) far = std::max(far, norm(q));
      centroid = std::max(centroid, norm(n.centroid()));
      radius = std::max(radius, std::abs(far - 1.0));

      identities = identities && apply_transform(p, Rotation{}) == p && apply_transform(p, Scale{}) == p &&
                   apply_transform(p, Translation{}) == p &&
                   apply_transform(p, Jitter{0.0, 0.05, StreamId(t)}) == p &&
                   apply_transform(p, random_elastic(rng, 4, 0.0)) == p;

      const double m = 0.01 + 0.1 * rng.uniform();
      const PointCloud e = apply_transform(p, random_elastic(rng, 2 + rng.below(5), m));
      for (std::size_t i = 0; i < p.size(); ++i) {
        elastic_excess = std::max(elastic_excess, norm(e.points[i] - p.points[i]) - m);
      }
    }
    const bool ok = rot <= tol && centroid <= tol && radius <= tol && identities && elastic_excess <= 1e-12;
    return CheckResult{"", ok,
                       std::to_string(transforms) + " draws: distance drift " + detail::sci(rot) +
                           ", centroid " + detail::sci(centroid) + ", radius " + detail::sci(radius) +
                           ", identities " + (identities ? "exact" : "broken") + ", elastic excess " +
                           detail::sci(std::max(0.0, elastic_excess))};
  });
}

inline std::vector<CheckResult> run_all(std::uint64_t seed = 0) {
  return {oracle_equivalence(100, seed), degenerate_identities(seed), gradient_check(seed),
          prototype_gradient_split(50, seed), scale_invariance(100, seed), geometry_invariants(1000, seed)};
}

inline std::string format_row(const CheckResult& r) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-26s %s  %7.2fs  ", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.seconds);
  return buf + r.detail;
}

}  // namespace crosspoint::selftest
