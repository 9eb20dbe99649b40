#pragma once

// Run configuration: a flat `key = value` file with `#` comments, plus
// command-line overrides. Every key lives in one registry that drives
// parsing, the echo written into artifacts, and the CLI flags.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crosspoint/data.hpp"
#include "crosspoint/errors.hpp"
#include "crosspoint/eval.hpp"
#include "crosspoint/text.hpp"
#include "crosspoint/training.hpp"
#include "crosspoint/version.hpp"

namespace crosspoint {

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "runs";
  std::filesystem::path checkpoint;  // empty means <out_dir>/pretrain/checkpoint.xpt
  std::filesystem::path resume;

  DatasetConfig dataset;
  std::size_t test_per_class = 50;
  std::size_t image_size = 32;
  TrainConfig train;
  EvalConfig eval;
  EpisodeSpec fewshot;

  std::vector<Objective> ablation_objectives{Objective::imid, Objective::cmid, Objective::joint};
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2};
  std::vector<std::size_t> sweep_n_images{1, 2, 3};
  std::size_t render_sample = 0;
  std::size_t render_views = 4;

  RunConfig() {
    dataset.random_pose = true;
    train.batch.n_pts = 64;
    train.arch.point_encoder = PointEncoderKind::dgcnn_lite;
    fewshot.episodes = 10;
  }

  DatasetConfig dataset_config(const std::string& split) const {
    DatasetConfig d = dataset;
    d.seed = seed;
    d.split = split;
    d.camera.height = d.camera.width = image_size;
    if (split == "test") d.per_class = test_per_class;
    return d;
  }

  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    t.arch.image_height = t.arch.image_width = image_size;
    t.batch.camera = dataset.camera;
    t.batch.camera.height = t.batch.camera.width = image_size;
    return t;
  }

  EvalConfig eval_config() const {
    EvalConfig e = eval;
    e.features.seed = seed;
    e.linear.seed = seed;
    return e;
  }

  EpisodeSpec fewshot_spec() const {
    EpisodeSpec s = fewshot;
    s.seed = seed;
    return s;
  }

  std::filesystem::path checkpoint_path() const {
    return checkpoint.empty() ? out_dir / "pretrain" / "checkpoint.xpt" : checkpoint;
  }

  void validate() const {
    dataset_config("train").validate();
    if (test_per_class == 0) throw ConfigError("test_per_class must be at least 1");
    if (image_size == 0) throw ConfigError("image_size must be at least 1");
    const TrainConfig t = train_config();
    t.validate();
    if (t.batch.image_augment.crop_height > image_size || t.batch.image_augment.crop_width > image_size) {
      throw ConfigError("image crop larger than the rendered image");
    }
    if (eval.features.n_pts == 0 || eval.features.chunk == 0) {
      throw ConfigError("eval_n_pts and feature_chunk must be positive");
    }
    if (!(eval.linear.lambda >= 0) || eval.linear.epochs == 0 || !(eval.linear.step > 0)) {
      throw ConfigError("invalid linear classifier settings");
    }
    if (fewshot.n_way < 2 || fewshot.k_shot == 0 || fewshot.q_query == 0 || fewshot.episodes == 0) {
      throw ConfigError("few-shot needs n_way >= 2 and positive k_shot, q_query, episodes");
    }
    if (ablation_objectives.empty() || ablation_seeds.empty() || sweep_n_images.empty()) {
      throw ConfigError("ablation and sweep lists must not be empty");
    }
    if (render_views == 0) throw ConfigError("render_views must be at least 1");
  }

  std::string echo() const;
};

// ---------------------------------------------------------------------------
// Key registry
// ---------------------------------------------------------------------------

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

namespace detail {

inline std::string format_value(std::uint64_t v) { return std::to_string(v); }
inline std::string format_value(double v) { return text::format_double(v); }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::string& v) { return v; }
inline std::string format_value(const std::filesystem::path& v) { return v.string(); }
inline std::string format_value(Objective v) { return to_string(v); }
inline std::string format_value(PointEncoderKind v) { return to_string(v); }
template <class T>
std::string format_value(const std::vector<T>& v) {
  std::vector<std::string> parts;
  for (const auto& x : v) parts.push_back(format_value(x));
  return text::join(parts);
}
inline std::string format_value(const std::vector<ShapeKind>& v) {
  std::vector<std::string> parts;
  for (ShapeKind k : v) parts.push_back(to_string(k));
  return text::join(parts);
}

inline void parse_value(std::string_view s, std::uint64_t& out) { out = text::parse_uint(s, "value"); }
inline void parse_value(std::string_view s, double& out) { out = text::parse_double(s, "value"); }
inline void parse_value(std::string_view s, bool& out) {
  s = text::trim(s);
  if (s == "true" || s == "1" || s == "yes") out = true;
  else if (s == "false" || s == "0" || s == "no") out = false;
  else throw ConfigError("expected true or false, got '" + std::string(s) + "'");
}
inline void parse_value(std::string_view s, std::string& out) { out = std::string(text::trim(s)); }
inline void parse_value(std::string_view s, std::filesystem::path& out) { out = std::string(text::trim(s)); }
inline void parse_value(std::string_view s, Objective& out) { out = parse_objective(text::trim(s)); }
inline void parse_value(std::string_view s, PointEncoderKind& out) { out = parse_point_encoder(text::trim(s)); }
inline void parse_value(std::string_view s, std::vector<std::uint64_t>& out) {
  out = text::parse_uint_list(s, "value");
}
inline void parse_value(std::string_view s, std::vector<Objective>& out) {
  out.clear();
  for (const auto& part : text::split(s, ',')) out.push_back(parse_objective(text::trim(part)));
}
inline void parse_value(std::string_view s, std::vector<ShapeKind>& out) {
  out.clear();
  for (const auto& part : text::split(s, ',')) out.push_back(parse_shape_kind(text::trim(part)));
}

template <class T, class Access>
ConfigKey key(std::string name, std::string help, Access access) {
  ConfigKey k;
  k.name = std::move(name);
  k.help = std::move(help);
  k.get = [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); };
  k.set = [access](RunConfig& c, std::string_view v) {
    T parsed{};
    parse_value(v, parsed);
    access(c) = std::move(parsed);
  };
  return k;
}

#define CROSSPOINT_KEY(T, NAME, HELP, EXPR) \
  detail::key<T>(NAME, HELP, [](RunConfig& c) -> T& { return EXPR; })

}  // namespace detail

inline const std::vector<ConfigKey>& config_keys() {
  using u64 = std::uint64_t;
  using path = std::filesystem::path;
  static const std::vector<ConfigKey> keys = {
      CROSSPOINT_KEY(u64, "seed", "root of every random stream", c.seed),
      CROSSPOINT_KEY(path, "data_dir", "where gen-data writes and other commands look for datasets", c.data_dir),
      CROSSPOINT_KEY(path, "out_dir", "root directory for run outputs", c.out_dir),
      CROSSPOINT_KEY(path, "checkpoint", "checkpoint to evaluate (default <out_dir>/pretrain/checkpoint.xpt)",
                     c.checkpoint),
      CROSSPOINT_KEY(path, "resume", "checkpoint to resume pretraining from", c.resume),

      CROSSPOINT_KEY(std::vector<ShapeKind>, "classes", "primitive classes", c.dataset.classes),
      CROSSPOINT_KEY(u64, "per_class", "training samples per class", c.dataset.per_class),
      CROSSPOINT_KEY(u64, "test_per_class", "test samples per class", c.test_per_class),
      CROSSPOINT_KEY(u64, "points_per_shape", "points stored per generated shape", c.dataset.points_per_shape),
      CROSSPOINT_KEY(u64, "renders_per_sample", "stored renders per sample (0 renders on the fly)",
                     c.dataset.renders_per_sample),
      CROSSPOINT_KEY(bool, "random_pose", "rotate every generated shape randomly", c.dataset.random_pose),
      CROSSPOINT_KEY(u64, "image_size", "rendered image height and width", c.image_size),
      CROSSPOINT_KEY(double, "camera_radius_lo", "smallest camera distance", c.dataset.camera.radius_lo),
      CROSSPOINT_KEY(double, "camera_radius_hi", "largest camera distance", c.dataset.camera.radius_hi),
      CROSSPOINT_KEY(double, "camera_focal", "focal length", c.dataset.camera.focal),

      CROSSPOINT_KEY(Objective, "objective", "imid, cmid or joint", c.train.objective),
      CROSSPOINT_KEY(u64, "epochs", "pretraining epochs", c.train.epochs),
      CROSSPOINT_KEY(u64, "batch_size", "samples per batch", c.train.batch_size),
      CROSSPOINT_KEY(double, "tau", "contrastive temperature", c.train.tau),
      CROSSPOINT_KEY(double, "lr_max", "initial learning rate", c.train.lr_max),
      CROSSPOINT_KEY(double, "lr_min", "final learning rate", c.train.lr_min),
      CROSSPOINT_KEY(double, "beta1", "Adam first-moment decay", c.train.adam.beta1),
      CROSSPOINT_KEY(double, "beta2", "Adam second-moment decay", c.train.adam.beta2),
      CROSSPOINT_KEY(double, "adam_eps", "Adam denominator offset", c.train.adam.eps),
      CROSSPOINT_KEY(double, "weight_decay", "L2 weight decay", c.train.adam.weight_decay),
      CROSSPOINT_KEY(bool, "decoupled_decay", "apply weight decay outside the Adam moments",
                     c.train.adam.decoupled),
      CROSSPOINT_KEY(u64, "checkpoint_every", "extra checkpoint every this many epochs (0 = none)",
                     c.train.checkpoint_every),
      CROSSPOINT_KEY(u64, "n_pts", "points per training view", c.train.batch.n_pts),
      CROSSPOINT_KEY(u64, "n_images", "rendered images per sample", c.train.batch.n_images),

      CROSSPOINT_KEY(double, "p_normalize", "probability of unit-sphere normalization", c.train.batch.augment.p_normalize),
      CROSSPOINT_KEY(double, "p_rotation", "probability of a random rotation", c.train.batch.augment.p_rotation),
      CROSSPOINT_KEY(double, "p_scale", "probability of anisotropic scaling", c.train.batch.augment.p_scale),
      CROSSPOINT_KEY(double, "p_elastic", "probability of elastic distortion", c.train.batch.augment.p_elastic),
      CROSSPOINT_KEY(double, "p_translation", "probability of a translation", c.train.batch.augment.p_translation),
      CROSSPOINT_KEY(double, "p_jitter", "probability of point jitter", c.train.batch.augment.p_jitter),
      CROSSPOINT_KEY(double, "scale_lo", "smallest scale factor", c.train.batch.augment.scale_lo),
      CROSSPOINT_KEY(double, "scale_hi", "largest scale factor", c.train.batch.augment.scale_hi),
      CROSSPOINT_KEY(double, "translation_range", "translation bound per axis", c.train.batch.augment.translation_range),
      CROSSPOINT_KEY(double, "jitter_sigma", "jitter standard deviation", c.train.batch.augment.jitter_sigma),
      CROSSPOINT_KEY(double, "jitter_clip", "jitter clip bound", c.train.batch.augment.jitter_clip),
      CROSSPOINT_KEY(u64, "elastic_granularity", "elastic control grid size", c.train.batch.augment.elastic_granularity),
      CROSSPOINT_KEY(double, "elastic_magnitude", "elastic displacement bound", c.train.batch.augment.elastic_magnitude),
      CROSSPOINT_KEY(u64, "crop_height", "image crop height", c.train.batch.image_augment.crop_height),
      CROSSPOINT_KEY(u64, "crop_width", "image crop width", c.train.batch.image_augment.crop_width),
      CROSSPOINT_KEY(double, "color_jitter_lo", "smallest colour factor", c.train.batch.image_augment.jitter_lo),
      CROSSPOINT_KEY(double, "color_jitter_hi", "largest colour factor", c.train.batch.image_augment.jitter_hi),
      CROSSPOINT_KEY(double, "flip_probability", "horizontal flip probability",
                     c.train.batch.image_augment.flip_probability),

      CROSSPOINT_KEY(PointEncoderKind, "point_encoder", "pointnet_lite or dgcnn_lite", c.train.arch.point_encoder),
      CROSSPOINT_KEY(std::vector<u64>, "point_widths", "point encoder layer widths", c.train.arch.point_widths),
      CROSSPOINT_KEY(u64, "feature_dim", "encoder output width", c.train.arch.feature_dim),
      CROSSPOINT_KEY(u64, "proj_dim", "projection width", c.train.arch.proj_dim),
      CROSSPOINT_KEY(u64, "knn_k", "neighbours per point for dgcnn_lite", c.train.arch.knn_k),
      CROSSPOINT_KEY(std::vector<u64>, "image_channels", "image encoder conv channels", c.train.arch.image_channels),
      CROSSPOINT_KEY(u64, "image_kernel", "conv kernel size", c.train.arch.image_kernel),
      CROSSPOINT_KEY(u64, "image_stride", "conv stride", c.train.arch.image_stride),
      CROSSPOINT_KEY(double, "leaky_slope", "leaky ReLU slope", c.train.arch.leaky_slope),

      CROSSPOINT_KEY(u64, "eval_n_pts", "points per cloud when extracting features", c.eval.features.n_pts),
      CROSSPOINT_KEY(u64, "feature_chunk", "samples per feature-extraction pass", c.eval.features.chunk),
      CROSSPOINT_KEY(double, "linear_lambda", "linear classifier regularization", c.eval.linear.lambda),
      CROSSPOINT_KEY(u64, "linear_epochs", "linear classifier epochs", c.eval.linear.epochs),
      CROSSPOINT_KEY(double, "linear_step", "linear classifier initial step", c.eval.linear.step),
      CROSSPOINT_KEY(u64, "n_way", "classes per few-shot episode", c.fewshot.n_way),
      CROSSPOINT_KEY(u64, "k_shot", "support samples per class", c.fewshot.k_shot),
      CROSSPOINT_KEY(u64, "q_query", "query samples per class", c.fewshot.q_query),
      CROSSPOINT_KEY(u64, "episodes", "few-shot episodes", c.fewshot.episodes),

      CROSSPOINT_KEY(std::vector<Objective>, "ablation_objectives", "objectives compared by ablate",
                     c.ablation_objectives),
      CROSSPOINT_KEY(std::vector<u64>, "ablation_seeds", "training seeds used by ablate", c.ablation_seeds),
      CROSSPOINT_KEY(std::vector<u64>, "sweep_n_images", "image counts used by sweep-images", c.sweep_n_images),
      CROSSPOINT_KEY(u64, "render_sample", "training sample drawn by render", c.render_sample),
      CROSSPOINT_KEY(u64, "render_views", "views drawn by render", c.render_views),
  };
  return keys;
}

#undef CROSSPOINT_KEY

inline const ConfigKey* find_config_key(std::string_view name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

/// Every key in registry order as `key = value` lines; parses back to the same config.
inline std::string RunConfig::echo() const {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

/// The echo prefixed by the code version, as written at the top of artifacts.
inline std::string artifact_header(const RunConfig& config) {
  return "version = " + std::string(version) + "\n" + config.echo();
}

using Overrides = std::vector<std::pair<std::string, std::string>>;

inline void apply_setting(RunConfig& config, std::string_view key, std::string_view value,
                          const std::string& where) {
  const ConfigKey* k = find_config_key(key);
  if (!k) throw ConfigError(where + ": unknown key '" + std::string(key) + "'");
  try {
    k->set(config, value);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": key '" + std::string(key) + "': " + e.what());
  }
}

/// Settings text: one `key = value` per line, `#` starts a comment.
/// `origin` names the source in error messages.
inline void apply_config_text(RunConfig& config, std::string_view body, const std::string& origin) {
  std::vector<std::string> seen;
  const auto lines = text::split(body, '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view line = lines[i];
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = text::trim(line);
    if (line.empty()) continue;
    const std::string where = origin + " line " + std::to_string(i + 1);
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key(text::trim(line.substr(0, eq)));
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      throw ConfigError(where + ": key '" + key + "' set twice");
    }
    seen.push_back(key);
    apply_setting(config, key, line.substr(eq + 1), where);
  }
}

/// Defaults, then the file (if any), then overrides; the result is validated.
inline RunConfig parse_config(const std::filesystem::path& path, const Overrides& overrides = {}) {
  RunConfig config;
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::ostringstream body;
    body << in.rdbuf();
    apply_config_text(config, body.str(), path.string());
  }
  for (const auto& [key, value] : overrides) apply_setting(config, key, value, "override --" + key);
  config.validate();
  return config;
}

}  // namespace crosspoint
