#pragma once

// Contrastive objectives in the projected space: the pairwise NT-Xent term,
// the intra-modal loss over two point-cloud views, the cross-modal loss
// between view prototypes and image features, and their sum.
//
// Every pairwise term anchors on row i of table A against table B:
//   l_i = -log( e^{s(a_i,b_i)/t} / (sum_{k!=i} e^{s(a_i,a_k)/t} + sum_k e^{s(a_i,b_k)/t}) )
// where s is cosine similarity. Row indices are 0-based.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "crosspoint/autograd.hpp"
#include "crosspoint/errors.hpp"

namespace crosspoint {

enum class Objective { imid, cmid, joint };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::imid: return "imid";
    case Objective::cmid: return "cmid";
    default: return "joint";
  }
}

inline Objective parse_objective(std::string_view s) {
  if (s == "imid") return Objective::imid;
  if (s == "cmid") return Objective::cmid;
  if (s == "joint") return Objective::joint;
  throw ConfigError("unknown objective '" + std::string(s) + "' (expected imid, cmid or joint)");
}

// ---------------------------------------------------------------------------
// Differentiable form
// ---------------------------------------------------------------------------

/// Divides each row by its Euclidean norm. A zero row is a DomainError.
inline Var normalize_rows(Var a) {
  const Tensor& v = a.value();
  if (v.rank() != 2) throw ShapeError("normalize_rows needs a matrix");
  const std::size_t n = v.extent(0);
  Var norms = reshape(sqrt(sum(a * a, 1)), {n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    if (norms.value()[i] == 0.0) throw DomainError("cosine similarity of a zero vector");
  }
  return a / norms;
}

/// Vector of the N pairwise terms l_i for anchor table a against table b.
inline Var pairwise_terms(Var a, Var b, double tau) {
  if (!(tau > 0)) throw DomainError("temperature must be positive");
  if (a.shape() != b.shape() || a.shape().size() != 2) {
    throw ShapeError("contrastive tables must be equal-shaped matrices");
  }
  const std::size_t n = a.shape()[0];
  Var an = normalize_rows(a);
  Var bn = normalize_rows(b);
  Var s_aa = scale(matmul(an, transpose(an)), 1.0 / tau);
  Var s_ab = scale(matmul(an, transpose(bn)), 1.0 / tau);
  std::vector<std::uint8_t> mask(n * 2 * n, 1);
  for (std::size_t i = 0; i < n; ++i) mask[i * 2 * n + i] = 0;
  Graph& g = detail::graph_of(a);
  Var positive = reshape(sum(s_ab * g.constant(Tensor::identity(n)), 1), {n, 1});
  // shifting by the positive first avoids cancellation when a term is tiny
  return log_sum_exp(concat(s_aa, s_ab, 1) - positive, std::move(mask));
}

inline Var symmetric_loss(Var a, Var b, double tau) {
  const double n = static_cast<double>(a.shape()[0]);
  return scale(sum_all(pairwise_terms(a, b, tau)) + sum_all(pairwise_terms(b, a, tau)),
               1.0 / (2.0 * n));
}

inline Var imid_loss(Var z1, Var z2, double tau) { return symmetric_loss(z1, z2, tau); }

inline Var prototype(Var z1, Var z2) { return scale(z1 + z2, 0.5); }

inline Var cmid_loss(Var z1, Var z2, Var h, double tau) {
  return symmetric_loss(prototype(z1, z2), h, tau);
}

/// Componentwise mean of n consecutive rows per sample: (N n) x d -> N x d.
inline Var mean_of_groups(Var h, std::size_t n) {
  const auto& s = h.shape();
  if (s.size() != 2 || n == 0 || s[0] % n != 0) throw ShapeError("rows not divisible into groups");
  if (n == 1) return h;
  return mean(reshape(h, {s[0] / n, n, s[1]}), 1);
}

struct LossVars {
  Var total;
  std::optional<Var> imid;
  std::optional<Var> cmid;
};

/// The training objective; `h` is ignored (and may be invalid) for imid.
inline LossVars objective_loss(Objective objective, Var z1, Var z2, Var h, double tau) {
  LossVars out;
  if (objective != Objective::cmid) out.imid = imid_loss(z1, z2, tau);
  if (objective != Objective::imid) out.cmid = cmid_loss(z1, z2, h, tau);
  if (out.imid && out.cmid) {
    out.total = *out.imid + *out.cmid;
  } else {
    out.total = out.imid ? *out.imid : *out.cmid;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Value form on plain tables
// ---------------------------------------------------------------------------

using Table = std::vector<std::vector<double>>;

struct ProjectedBatch {
  Table z1;  // first point-cloud view, N x d
  Table z2;  // second point-cloud view
  Table h;   // image features
  double tau = 0.1;

  std::size_t size() const { return z1.size(); }

  void validate() const {
    if (!(tau > 0)) throw DomainError("temperature must be positive");
    if (z1.empty()) throw ShapeError("empty projected batch");
    if (z2.size() != z1.size() || h.size() != z1.size()) throw ShapeError("tables differ in N");
    const std::size_t d = z1.front().size();
    for (const Table* t : {&z1, &z2, &h}) {
      for (const auto& row : *t) {
        if (row.size() != d || d == 0) throw ShapeError("tables differ in d");
        bool zero = true;
        for (double v : row) zero = zero && v == 0.0;
        if (zero) throw DomainError("cosine similarity of a zero vector");
      }
    }
  }
};

inline Tensor to_tensor(const Table& t) {
  if (t.empty() || t.front().empty()) throw ShapeError("empty table");
  Tensor out({t.size(), t.front().size()});
  for (std::size_t r = 0; r < t.size(); ++r) {
    if (t[r].size() != t.front().size()) throw ShapeError("ragged table");
    for (std::size_t c = 0; c < t[r].size(); ++c) out[r * t[r].size() + c] = t[r][c];
  }
  return out;
}

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("cosine similarity of unequal lengths");
  double uv = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw DomainError("cosine similarity of a zero vector");
  return uv / (std::sqrt(uu) * std::sqrt(vv));
}

inline std::vector<double> prototype(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("prototype of unequal lengths");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] + b[i]) / 2.0;
  return out;
}

inline Table prototypes(const Table& z1, const Table& z2) {
  if (z1.size() != z2.size()) throw ShapeError("prototype tables differ in N");
  Table out;
  for (std::size_t i = 0; i < z1.size(); ++i) out.push_back(prototype(z1[i], z2[i]));
  return out;
}

/// Componentwise mean of several projected image features.
inline std::vector<double> multi_image_feature(const Table& features) {
  if (features.empty()) throw ShapeError("no image features to average");
  std::vector<double> out(features.front().size(), 0.0);
  for (const auto& f : features) {
    if (f.size() != out.size()) throw ShapeError("image features differ in length");
    for (std::size_t i = 0; i < f.size(); ++i) out[i] += f[i];
  }
  for (double& v : out) v /= static_cast<double>(features.size());
  return out;
}

namespace detail {

template <class Fn>
double evaluate_on_graph(const ProjectedBatch& batch, Fn&& fn) {
  batch.validate();
  Graph g;
  return fn(g.constant(to_tensor(batch.z1)), g.constant(to_tensor(batch.z2)),
            g.constant(to_tensor(batch.h)))
      .value()
      .item();
}

inline double pair_term(std::size_t i, const Table& a, const Table& b, double tau) {
  if (i >= a.size()) throw ShapeError("pair index out of range");
  Graph g;
  return pairwise_terms(g.constant(to_tensor(a)), g.constant(to_tensor(b)), tau).value()[i];
}

}  // namespace detail

enum class View { first, second };

/// l(i, anchor view, other view) of the intra-modal loss.
inline double ntxent_pair(std::size_t i, View anchor, const ProjectedBatch& batch) {
  batch.validate();
  return anchor == View::first ? detail::pair_term(i, batch.z1, batch.z2, batch.tau)
                               : detail::pair_term(i, batch.z2, batch.z1, batch.tau);
}

enum class CrossAnchor { prototype, image };

/// c(i, prototype, image) or c(i, image, prototype) of the cross-modal loss.
inline double cmid_pair(std::size_t i, CrossAnchor anchor, const ProjectedBatch& batch) {
  batch.validate();
  const Table zbar = prototypes(batch.z1, batch.z2);
  return anchor == CrossAnchor::prototype ? detail::pair_term(i, zbar, batch.h, batch.tau)
                                          : detail::pair_term(i, batch.h, zbar, batch.tau);
}

inline double imid_loss(const ProjectedBatch& batch) {
  return detail::evaluate_on_graph(
      batch, [&](Var z1, Var z2, Var) { return imid_loss(z1, z2, batch.tau); });
}

inline double cmid_loss(const ProjectedBatch& batch) {
  return detail::evaluate_on_graph(
      batch, [&](Var z1, Var z2, Var h) { return cmid_loss(z1, z2, h, batch.tau); });
}

struct LossParts {
  double total = 0.0;
  double imid = 0.0;
  double cmid = 0.0;
};

inline LossParts joint_loss(const ProjectedBatch& batch) {
  LossParts out;
  out.imid = imid_loss(batch);
  out.cmid = cmid_loss(batch);
  out.total = out.imid + out.cmid;
  return out;
}

// ---------------------------------------------------------------------------
// Reference: literal per-index loops, no vectorization and no max shift.
// ---------------------------------------------------------------------------

namespace oracle {

inline double term(std::size_t i, const Table& a, const Table& b, double tau) {
  const std::size_t n = a.size();
  const double numerator = std::exp(cosine_similarity(a[i], b[i]) / tau);
  // the denominator is numerator + rest, so -log(num/den) = log1p(rest/num)
  double rest = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (k != i) rest += std::exp(cosine_similarity(a[i], a[k]) / tau);
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (k != i) rest += std::exp(cosine_similarity(a[i], b[k]) / tau);
  }
  return std::log1p(rest / numerator);
}

inline double symmetric(const Table& a, const Table& b, double tau) {
  const std::size_t n = a.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += term(i, a, b, tau) + term(i, b, a, tau);
  return total / (2.0 * static_cast<double>(n));
}

}  // namespace oracle

inline double naive_oracle(const ProjectedBatch& batch, Objective which) {
  batch.validate();
  double imid = 0.0, cmid = 0.0;
  if (which != Objective::cmid) imid = oracle::symmetric(batch.z1, batch.z2, batch.tau);
  if (which != Objective::imid) {
    Table zbar;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      std::vector<double> p(batch.z1[i].size());
      for (std::size_t c = 0; c < p.size(); ++c) p[c] = (batch.z1[i][c] + batch.z2[i][c]) / 2.0;
      zbar.push_back(p);
    }
    cmid = oracle::symmetric(zbar, batch.h, batch.tau);
  }
  return imid + cmid;
}

}  // namespace crosspoint
