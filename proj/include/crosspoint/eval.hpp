#pragma once

// Frozen-feature evaluation: encoder features, a one-vs-rest linear hinge
// classifier, N-way K-shot episodes, the objective ablation and the
// image-count sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <tbb/parallel_for.h>

#include "json.hpp"

#include "crosspoint/data.hpp"
#include "crosspoint/errors.hpp"
#include "crosspoint/models.hpp"
#include "crosspoint/text.hpp"
#include "crosspoint/training.hpp"

namespace crosspoint {

struct FeatureTable {
  Table rows;  // M x F encoder outputs
  std::vector<int> labels;
  std::uint64_t checkpoint_hash = 0;
  std::size_t n_pts = 0;

  std::size_t size() const { return rows.size(); }
  std::size_t width() const { return rows.empty() ? 0 : rows.front().size(); }

  void validate() const {
    if (rows.size() != labels.size()) throw ShapeError("feature rows and labels differ in count");
    for (const auto& r : rows) {
      if (r.size() != width()) throw ShapeError("ragged feature table");
      for (double v : r) {
        if (!std::isfinite(v)) throw DomainError("non-finite feature value");
      }
    }
    for (int l : labels) {
      if (l < 0) throw ShapeError("negative class label");
    }
  }

  FeatureTable subset(const std::vector<std::size_t>& idx) const {
    FeatureTable out;
    out.checkpoint_hash = checkpoint_hash;
    out.n_pts = n_pts;
    for (std::size_t i : idx) {
      out.rows.push_back(rows.at(i));
      out.labels.push_back(labels.at(i));
    }
    return out;
  }

  bool operator==(const FeatureTable&) const = default;
};

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

struct FeatureConfig {
  std::size_t n_pts = 128;
  std::uint64_t seed = 0;
  std::size_t chunk = 32;  // samples per encoder pass
};

inline StreamId feature_stream(const FeatureConfig& config, const Dataset& ds, std::size_t id) {
  return StreamId(config.seed).child("features").child(ds.split).child(id);
}

/// Pooled point-encoder output for every sample; heads are not applied.
inline FeatureTable extract_features(const ModelParams& params, const Dataset& ds,
                                     const FeatureConfig& config, std::uint64_t checkpoint_hash = 0) {
  params.validate();
  if (config.n_pts == 0 || config.chunk == 0) throw ConfigError("n_pts and chunk must be positive");
  FeatureTable out;
  out.checkpoint_hash = checkpoint_hash;
  out.n_pts = config.n_pts;
  out.rows.resize(ds.size());
  out.labels.resize(ds.size());
  const std::size_t chunks = (ds.size() + config.chunk - 1) / config.chunk;
  tbb::parallel_for(std::size_t{0}, chunks, [&](std::size_t c) {
    const std::size_t lo = c * config.chunk;
    const std::size_t hi = std::min(ds.size(), lo + config.chunk);
    std::vector<PointCloud> clouds;
    for (std::size_t i = lo; i < hi; ++i) {
      const Sample& s = ds.samples[i];
      clouds.push_back(sample_points(s.cloud, config.n_pts, feature_stream(config, ds, s.id)));
    }
    Graph g;
    ModelVars m(g, params, false);
    const Tensor e = point_forward(m, clouds).value();
    const std::size_t f = e.extent(1);
    for (std::size_t i = lo; i < hi; ++i) {
      const auto row = e.data().subspan((i - lo) * f, f);
      out.rows[i].assign(row.begin(), row.end());
      out.labels[i] = ds.samples[i].label;
    }
  });
  return out;
}

inline FeatureTable extract_features(const Checkpoint& ckpt, const Dataset& ds, const FeatureConfig& config,
                                     const ArchDescriptor& expected) {
  if (!(ckpt.params.arch == expected)) {
    throw ArchMismatch("checkpoint architecture differs from the configured one:\n" +
                       ckpt.params.arch.to_text() + "expected:\n" + expected.to_text());
  }
  return extract_features(ckpt.params, ds, config, checkpoint_hash(encode_checkpoint(ckpt)));
}

// ---------------------------------------------------------------------------
// Linear classifier
// ---------------------------------------------------------------------------

struct LinearConfig {
  double lambda = 1e-3;
  std::size_t epochs = 200;
  double step = 0.1;  // epoch e uses step / (1 + e)
  std::uint64_t seed = 0;
};

struct LinearClassifier {
  Table weights;              // C x F, in standardized units
  std::vector<double> bias;   // C
  std::vector<double> mean;   // F
  std::vector<double> stdev;  // F; 0 marks a constant feature, which is ignored
  LinearConfig config;

  std::size_t classes() const { return weights.size(); }
  std::size_t width() const { return mean.size(); }

  std::vector<double> standardize(std::span<const double> x) const {
    if (x.size() != width()) {
      throw ShapeError("feature width " + std::to_string(x.size()) + " does not match classifier width " +
                       std::to_string(width()));
    }
    std::vector<double> out(x.size(), 0.0);
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (stdev[j] > 0) out[j] = (x[j] - mean[j]) / stdev[j];
    }
    return out;
  }

  std::vector<double> scores(std::span<const double> x) const {
    const auto z = standardize(x);
    std::vector<double> out(classes());
    for (std::size_t c = 0; c < classes(); ++c) {
      double s = bias[c];
      for (std::size_t j = 0; j < z.size(); ++j) s += weights[c][j] * z[j];
      out[c] = s;
    }
    return out;
  }

  /// Highest score; ties go to the smaller class id.
  int predict(std::span<const double> x) const {
    const auto s = scores(x);
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.size(); ++c) {
      if (s[c] > s[best]) best = c;
    }
    return static_cast<int>(best);
  }

  void validate() const {
    if (bias.size() != weights.size() || stdev.size() != mean.size()) throw ShapeError("inconsistent classifier");
    for (const auto& w : weights) {
      if (w.size() != mean.size()) throw ShapeError("inconsistent classifier");
    }
    for (double s : stdev) {
      if (!(s >= 0)) throw ShapeError("negative standard deviation");
    }
  }
};

/// One-vs-rest L2-regularized hinge loss per class, fitted by per-sample
/// sub-gradient steps in a seeded order; labels must cover 0..C-1.
inline LinearClassifier fit_linear(const FeatureTable& table, const LinearConfig& config = {}) {
  table.validate();
  if (table.size() == 0) throw DegenerateSplit("empty fitting split");
  if (!(config.lambda >= 0) || !(config.step > 0) || config.epochs == 0) {
    throw ConfigError("invalid linear classifier hyperparameters");
  }
  const int max_label = *std::max_element(table.labels.begin(), table.labels.end());
  const std::size_t classes = static_cast<std::size_t>(max_label) + 1;
  std::vector<std::size_t> counts(classes, 0);
  for (int l : table.labels) ++counts[static_cast<std::size_t>(l)];
  if (classes < 2) throw DegenerateSplit("fitting split has a single class");
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0) throw DegenerateSplit("class " + std::to_string(c) + " is absent from the fitting split");
  }

  const std::size_t m = table.size();
  const std::size_t f = table.width();
  LinearClassifier clf;
  clf.config = config;
  clf.mean.assign(f, 0.0);
  clf.stdev.assign(f, 0.0);
  for (const auto& r : table.rows) {
    for (std::size_t j = 0; j < f; ++j) clf.mean[j] += r[j];
  }
  for (double& v : clf.mean) v /= static_cast<double>(m);
  for (const auto& r : table.rows) {
    for (std::size_t j = 0; j < f; ++j) clf.stdev[j] += (r[j] - clf.mean[j]) * (r[j] - clf.mean[j]);
  }
  for (std::size_t j = 0; j < f; ++j) {
    clf.stdev[j] = std::sqrt(clf.stdev[j] / static_cast<double>(m));
    if (!(clf.stdev[j] > 1e-12 * (1.0 + std::abs(clf.mean[j])))) clf.stdev[j] = 0.0;
  }
  Table z;
  z.reserve(m);
  for (const auto& r : table.rows) z.push_back(clf.standardize(r));

  clf.weights.assign(classes, std::vector<double>(f, 0.0));
  clf.bias.assign(classes, 0.0);
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < m; ++i) order[i] = i;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    Rng rng(StreamId(config.seed).child("linear").child(e));
    rng.shuffle(std::span<std::size_t>(order));
    const double eta = config.step / (1.0 + static_cast<double>(e));
    const double shrink = 1.0 / (1.0 + 2.0 * eta * config.lambda);
    for (std::size_t i : order) {
      const auto& x = z[i];
      for (std::size_t c = 0; c < classes; ++c) {
        auto& w = clf.weights[c];
        const double y = table.labels[i] == static_cast<int>(c) ? 1.0 : -1.0;
        double s = clf.bias[c];
        for (std::size_t j = 0; j < f; ++j) s += w[j] * x[j];
        if (y * s < 1.0) {
          for (std::size_t j = 0; j < f; ++j) w[j] += eta * y * x[j];
          clf.bias[c] += eta * y;
        }
        for (double& v : w) v *= shrink;
      }
    }
  }
  return clf;
}

inline std::vector<int> predict_all(const LinearClassifier& clf, const FeatureTable& table) {
  std::vector<int> out;
  out.reserve(table.size());
  for (const auto& r : table.rows) out.push_back(clf.predict(r));
  return out;
}

inline double evaluate(const LinearClassifier& clf, const FeatureTable& table) {
  clf.validate();
  if (table.size() == 0) throw ShapeError("empty evaluation split");
  if (table.width() != clf.width()) {
    throw ShapeError("feature width " + std::to_string(table.width()) + " does not match classifier width " +
                     std::to_string(clf.width()));
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < table.size(); ++i) correct += clf.predict(table.rows[i]) == table.labels[i];
  return static_cast<double>(correct) / static_cast<double>(table.size());
}

// ---------------------------------------------------------------------------
// Few-shot episodes
// ---------------------------------------------------------------------------

struct EpisodeSpec {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t q_query = 15;
  std::size_t episodes = 10;
  std::uint64_t seed = 0;
};

struct Episode {
  std::vector<int> classes;  // original ids; position is the episode label
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;
};

inline Episode sample_episode(const std::vector<int>& labels, const EpisodeSpec& spec, std::size_t e) {
  if (spec.n_way < 2 || spec.k_shot == 0 || spec.q_query == 0) {
    throw ConfigError("episodes need n_way >= 2, k_shot >= 1 and q_query >= 1");
  }
  std::vector<std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    if (c >= by_class.size()) by_class.resize(c + 1);
    by_class[c].push_back(i);
  }
  std::vector<int> eligible;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() >= spec.k_shot + spec.q_query) eligible.push_back(static_cast<int>(c));
  }
  if (eligible.size() < spec.n_way) {
    throw InsufficientSamples(std::to_string(eligible.size()) + " classes have at least " +
                              std::to_string(spec.k_shot + spec.q_query) + " samples; " +
                              std::to_string(spec.n_way) + "-way episodes need " + std::to_string(spec.n_way));
  }
  Rng rng(StreamId(spec.seed).child("episode").child(e));
  rng.shuffle(std::span<int>(eligible));
  Episode ep;
  ep.classes.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(spec.n_way));
  for (int c : ep.classes) {
    auto pool = by_class[static_cast<std::size_t>(c)];
    rng.shuffle(std::span<std::size_t>(pool));
    ep.support.insert(ep.support.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.k_shot));
    ep.query.insert(ep.query.end(), pool.begin() + static_cast<std::ptrdiff_t>(spec.k_shot),
                    pool.begin() + static_cast<std::ptrdiff_t>(spec.k_shot + spec.q_query));
  }
  return ep;
}

struct FewShotResult {
  double mean = 0.0;
  double stdev = 0.0;  // population
  std::vector<double> accuracies;
};

inline FewShotResult fewshot_eval(const FeatureTable& table, const EpisodeSpec& spec,
                                  const LinearConfig& linear = {}) {
  table.validate();
  if (spec.episodes == 0) throw ConfigError("episode count must be positive");
  FewShotResult out;
  out.accuracies.resize(spec.episodes);
  // Sampling up front surfaces InsufficientSamples on the calling thread.
  std::vector<Episode> episodes;
  for (std::size_t e = 0; e < spec.episodes; ++e) episodes.push_back(sample_episode(table.labels, spec, e));
  tbb::parallel_for(std::size_t{0}, spec.episodes, [&](std::size_t e) {
    const Episode& ep = episodes[e];
    auto relabel = [&](FeatureTable t) {
      for (int& l : t.labels) {
        l = static_cast<int>(std::find(ep.classes.begin(), ep.classes.end(), l) - ep.classes.begin());
      }
      return t;
    };
    LinearConfig lc = linear;
    lc.seed = StreamId(spec.seed).child("episode-fit").child(e).value();
    const auto clf = fit_linear(relabel(table.subset(ep.support)), lc);
    out.accuracies[e] = evaluate(clf, relabel(table.subset(ep.query)));
  });
  for (double a : out.accuracies) out.mean += a;
  out.mean /= static_cast<double>(spec.episodes);
  for (double a : out.accuracies) out.stdev += (a - out.mean) * (a - out.mean);
  out.stdev = std::sqrt(out.stdev / static_cast<double>(spec.episodes));
  return out;
}

// ---------------------------------------------------------------------------
// Ablation and image-count sweep
// ---------------------------------------------------------------------------

struct EvalConfig {
  FeatureConfig features;
  LinearConfig linear;
};

struct LinearProbe {
  double accuracy = 0.0;
  std::uint64_t checkpoint_hash = 0;
};

inline LinearProbe linear_probe(const ModelParams& params, std::uint64_t hash, const Dataset& train,
                                const Dataset& test, const EvalConfig& config) {
  const auto fit = extract_features(params, train, config.features, hash);
  const auto held_out = extract_features(params, test, config.features, hash);
  return {evaluate(fit_linear(fit, config.linear), held_out), hash};
}

struct AblationCell {
  std::string objective;  // imid, cmid, joint, or untrained
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  std::uint64_t checkpoint_hash = 0;
  std::filesystem::path run_dir;
  std::string config_echo;
};

inline std::filesystem::path cell_dir(const std::filesystem::path& root, const std::string& name,
                                      std::uint64_t seed) {
  return root.empty() ? root : root / (name + "_seed" + std::to_string(seed));
}

/// Linear accuracy of a randomly initialized, untrained encoder.
inline AblationCell untrained_cell(const Dataset& train, const Dataset& test, const ArchDescriptor& arch,
                                   std::uint64_t seed, const EvalConfig& eval) {
  const ModelParams params = init_params(arch, seed);
  AblationCell cell;
  cell.objective = "untrained";
  cell.seed = seed;
  cell.accuracy = linear_probe(params, 0, train, test, eval).accuracy;
  return cell;
}

inline AblationCell pretrain_cell(const Dataset& train, const Dataset& test, const TrainConfig& config,
                                  const EvalConfig& eval, const std::filesystem::path& run_dir,
                                  const std::string& name, const std::string& header = {}) {
  PretrainOptions options;
  options.out_dir = run_dir;
  options.header = header;
  const PretrainResult run = pretrain(config, train, options);
  AblationCell cell;
  cell.objective = name;
  cell.seed = config.seed;
  cell.checkpoint_hash = run.hash;
  cell.run_dir = run_dir;
  cell.config_echo = run.checkpoint.config_echo;
  cell.accuracy = linear_probe(run.checkpoint.params, run.hash, train, test, eval).accuracy;
  return cell;
}

/// One pretrain + linear evaluation per (objective, seed), objective-major.
inline std::vector<AblationCell> ablation_run(const Dataset& train, const Dataset& test, const TrainConfig& base,
                                              const std::vector<Objective>& objectives,
                                              const std::vector<std::uint64_t>& seeds, const EvalConfig& eval,
                                              const std::filesystem::path& out_dir = {},
                                              const std::string& header = {}) {
  if (objectives.empty() || seeds.empty()) throw ConfigError("ablation needs objectives and seeds");
  std::vector<AblationCell> cells;
  for (Objective o : objectives) {
    for (std::uint64_t seed : seeds) {
      TrainConfig c = base;
      c.objective = o;
      c.seed = seed;
      cells.push_back(pretrain_cell(train, test, c, eval, cell_dir(out_dir, to_string(o), seed), to_string(o),
                                    header));
    }
  }
  return cells;
}

struct SweepRow {
  std::size_t n_images = 1;
  AblationCell cell;
};

inline std::vector<SweepRow> image_count_sweep(const Dataset& train, const Dataset& test, const TrainConfig& base,
                                               const std::vector<std::size_t>& n_values, const EvalConfig& eval,
                                               const std::filesystem::path& out_dir = {},
                                               const std::string& header = {}) {
  if (n_values.empty()) throw ConfigError("sweep needs at least one image count");
  const std::size_t pool = train.samples.empty() ? 0 : train.samples.front().renders.size();
  for (std::size_t n : n_values) {
    if (n == 0 || (pool > 0 && n > pool)) {
      throw ConfigError("image count " + std::to_string(n) + " outside [1, " + std::to_string(pool) + "]");
    }
  }
  std::vector<SweepRow> rows;
  for (std::size_t n : n_values) {
    TrainConfig c = base;
    c.batch.n_images = n;
    const auto dir = out_dir.empty() ? out_dir : out_dir / ("n" + std::to_string(n));
    rows.push_back({n, pretrain_cell(train, test, c, eval, dir, to_string(c.objective), header)});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Result files
// ---------------------------------------------------------------------------

inline std::string ablation_csv(const std::vector<AblationCell>& cells) {
  std::string out = "objective,seed,accuracy\n";
  for (const auto& c : cells) {
    out += c.objective + "," + std::to_string(c.seed) + "," + text::format_double(c.accuracy) + "\n";
  }
  return out;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "n_images,accuracy\n";
  for (const auto& r : rows) out += std::to_string(r.n_images) + "," + text::format_double(r.cell.accuracy) + "\n";
  return out;
}

inline nlohmann::json cell_summary(const AblationCell& c) {
  nlohmann::json j;
  j["objective"] = c.objective;
  j["seed"] = c.seed;
  j["accuracy"] = c.accuracy;
  j["checkpoint_hash"] = text::hex64(c.checkpoint_hash);
  j["run_dir"] = c.run_dir.string();
  j["config"] = c.config_echo;
  return j;
}

inline std::string summaries_jsonl(const std::vector<AblationCell>& cells) {
  std::string out;
  for (const auto& c : cells) out += cell_summary(c).dump() + "\n";
  return out;
}

/// Mean accuracy of the cells whose objective is `name`.
inline double mean_accuracy(const std::vector<AblationCell>& cells, const std::string& name) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& c : cells) {
    if (c.objective == name) {
      total += c.accuracy;
      ++n;
    }
  }
  if (n == 0) throw ConfigError("no cells for '" + name + "'");
  return total / static_cast<double>(n);
}

}  // namespace crosspoint
