#pragma once

// Optimizer, learning-rate schedule, the pretraining loop and checkpoints.
//
// Checkpoint layout (all integers little-endian):
//   "XPT1" | u32 version | u64 n | n bytes descriptor text
//   | u32 block count | blocks | u64 FNV-1a of every preceding byte
// where a block is u32 name length | name | u32 rank | rank x u64 extents
// | extents-product x f64. Blocks hold the parameters in layout order, then
// "adam.m/<name>" and "adam.v/<name>" for each parameter.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crosspoint/codec.hpp"
#include "crosspoint/data.hpp"
#include "crosspoint/errors.hpp"
#include "crosspoint/losses.hpp"
#include "crosspoint/models.hpp"
#include "crosspoint/text.hpp"
#include "crosspoint/version.hpp"

namespace crosspoint {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  // false: L2 term folded into the gradient; true: decay applied to the weights directly.
  bool decoupled = false;
};

struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  bool operator==(const OptimizerState&) const = default;
};

inline OptimizerState init_optimizer(const ModelParams& params) {
  OptimizerState s;
  for (const auto& t : params.tensors) {
    s.m.emplace_back(t.shape(), 0.0);
    s.v.emplace_back(t.shape(), 0.0);
  }
  return s;
}

/// One bias-corrected Adam update. Tensors with `frozen[i]` set are left
/// untouched, moments included.
inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                      OptimizerState& state, double lr, const AdamConfig& config,
                      const std::vector<bool>& frozen = {}) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size() || (!frozen.empty() && frozen.size() != params.size())) {
    throw ShapeError("optimizer, parameters and gradients are not aligned");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!frozen.empty() && frozen[p]) continue;
    auto w = params[p].data();
    auto g = grads[p].data();
    auto m = state.m[p].data();
    auto v = state.v[p].data();
    if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size()) {
      throw ShapeError("gradient shape differs from parameter shape");
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      double gi = g[i];
      if (!config.decoupled) gi += config.weight_decay * w[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
      if (config.decoupled) w[i] -= lr * config.weight_decay * w[i];
      w[i] -= lr * update;
    }
  }
}

inline double cosine_lr(double t, double total, double lr_max, double lr_min) {
  if (total <= 0) return lr_max;
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t / total));
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double tau = 0.1;
  double lr_max = 1e-3;
  double lr_min = 0.0;
  AdamConfig adam;
  Objective objective = Objective::joint;
  std::uint64_t seed = 0;
  ArchDescriptor arch;
  BatchConfig batch;
  // Extra checkpoint every this many epochs; 0 writes only the final one.
  std::size_t checkpoint_every = 0;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (batch_size < 2) throw ConfigError("batch size must be at least 2");
    if (!(tau > 0)) throw ConfigError("tau must be positive");
    if (!(lr_max >= 0 && lr_min >= 0)) throw ConfigError("learning rates must be non-negative");
    if (!(adam.weight_decay >= 0)) throw ConfigError("weight decay must be non-negative");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.eps > 0)) {
      throw ConfigError("invalid Adam hyperparameters");
    }
    arch.validate();
    batch.validate();
  }

  /// Every setting that influences the trained weights, one `key=value` per line.
  std::string echo() const {
    std::ostringstream s;
    s << "objective=" << to_string(objective) << "\n"
      << "seed=" << seed << "\n"
      << "epochs=" << epochs << "\n"
      << "batch_size=" << batch_size << "\n"
      << "tau=" << text::format_double(tau) << "\n"
      << "lr_max=" << text::format_double(lr_max) << "\n"
      << "lr_min=" << text::format_double(lr_min) << "\n"
      << "weight_decay=" << text::format_double(adam.weight_decay) << "\n"
      << "decoupled_decay=" << (adam.decoupled ? 1 : 0) << "\n"
      << "n_pts=" << batch.n_pts << "\n"
      << "n_images=" << batch.n_images << "\n";
    const auto& a = batch.augment;
    s << "aug_p=" << text::join(std::vector<double>{a.p_normalize, a.p_rotation, a.p_scale,
                                                    a.p_elastic, a.p_translation, a.p_jitter})
      << "\n"
      << "aug_ranges=" << text::join(std::vector<double>{a.scale_lo, a.scale_hi, a.translation_range,
                                                         a.jitter_sigma, a.jitter_clip,
                                                         a.elastic_magnitude})
      << "\n"
      << "aug_elastic_grid=" << a.elastic_granularity << "\n";
    const auto& im = batch.image_augment;
    s << "image_aug=" << im.crop_height << "," << im.crop_width << ","
      << text::format_double(im.jitter_lo) << "," << text::format_double(im.jitter_hi) << ","
      << text::format_double(im.flip_probability) << "\n";
    const auto& c = batch.camera;
    s << "camera=" << text::format_double(c.radius_lo) << "," << text::format_double(c.radius_hi)
      << "," << text::format_double(c.focal) << "," << c.height << "," << c.width << "\n";
    return s.str();
  }
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_imid = 0.0;
  double loss_cmid = 0.0;
};

/// Sample order for an epoch, cut into full batches (a short tail is dropped).
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t dataset_size,
                                                           std::size_t batch_size,
                                                           std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(dataset_size);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(StreamId(seed).child("order").child(epoch));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
  }
  if (out.empty()) {
    throw ConfigError("dataset of " + std::to_string(dataset_size) +
                      " samples is smaller than one batch of " + std::to_string(batch_size));
  }
  return out;
}

inline StreamId batch_stream(std::uint64_t seed, std::size_t epoch) {
  return StreamId(seed).child("batch").child(epoch);
}

inline BatchConfig effective_batch_config(const TrainConfig& config) {
  BatchConfig b = config.batch;
  b.with_images = config.objective != Objective::imid;
  return b;
}

struct StepLoss {
  double total = 0.0;
  double imid = 0.0;
  double cmid = 0.0;
};

/// Builds the objective for one batch on `graph`. Both point views share one
/// encoder pass.
inline LossVars batch_loss(const ModelVars& m, const Batch& batch, const TrainConfig& config) {
  const std::size_t n = batch.size();
  std::vector<PointCloud> clouds;
  clouds.reserve(2 * n);
  clouds.insert(clouds.end(), batch.clouds_t1.begin(), batch.clouds_t1.end());
  clouds.insert(clouds.end(), batch.clouds_t2.begin(), batch.clouds_t2.end());
  Var z = project(m, point_forward(m, clouds), Head::point);
  std::vector<std::size_t> first(n), second(n);
  for (std::size_t i = 0; i < n; ++i) {
    first[i] = i;
    second[i] = n + i;
  }
  Var z1 = gather_rows(z, std::move(first));
  Var z2 = gather_rows(z, std::move(second));
  Var h;
  if (config.objective != Objective::imid) {
    h = mean_of_groups(project(m, image_forward(m, batch.images), Head::image), batch.n_images);
  }
  return objective_loss(config.objective, z1, z2, h, config.tau);
}

inline StepLoss loss_values(const LossVars& l) {
  return {l.total.value().item(), l.imid ? l.imid->value().item() : 0.0,
          l.cmid ? l.cmid->value().item() : 0.0};
}

/// Loss of the current parameters on one batch, without updating anything.
inline StepLoss evaluate_batch(const ModelParams& params, const Batch& batch, const TrainConfig& config) {
  Graph g;
  ModelVars m(g, params, false);
  return loss_values(batch_loss(m, batch, config));
}

inline std::vector<bool> frozen_mask(const ModelParams& params, Objective objective) {
  std::vector<bool> frozen(params.size(), false);
  if (objective == Objective::imid) {
    for (std::size_t i = 0; i < params.size(); ++i) frozen[i] = is_image_parameter(params.names[i]);
  }
  return frozen;
}

/// One optimizer step on a prepared batch; returns the loss before the step.
inline StepLoss train_step(ModelParams& params, OptimizerState& state, const Batch& batch,
                           const TrainConfig& config, double lr) {
  Graph g;
  ModelVars m(g, params);
  const LossVars loss = batch_loss(m, batch, config);
  const StepLoss values = loss_values(loss);
  if (!std::isfinite(values.total)) {
    throw NonFiniteLoss("loss " + text::format_double(values.total) + " (imid " +
                        text::format_double(values.imid) + ", cmid " +
                        text::format_double(values.cmid) + ") at Adam step " +
                        std::to_string(state.step + 1) + ", samples " + text::join(batch.sample_ids));
  }
  g.backward(loss.total);
  const auto grads = m.gradients();
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!Graph::all_finite(grads[i].data())) {
      throw NonFiniteLoss("non-finite gradient for '" + params.names[i] + "' at Adam step " +
                          std::to_string(state.step + 1));
    }
  }
  adam_step(params.tensors, grads, state, lr, config.adam, frozen_mask(params, config.objective));
  return values;
}

inline EpochMetrics train_epoch(const Dataset& ds, ModelParams& params, OptimizerState& state,
                                const TrainConfig& config, std::size_t epoch) {
  EpochMetrics out;
  out.epoch = epoch;
  out.lr = cosine_lr(static_cast<double>(epoch), static_cast<double>(config.epochs), config.lr_max,
                     config.lr_min);
  const auto batches = epoch_batches(ds.size(), config.batch_size, config.seed, epoch);
  const BatchConfig bc = effective_batch_config(config);
  const StreamId stream = batch_stream(config.seed, epoch);
  for (const auto& idx : batches) {
    const Batch batch = make_batch(ds, idx, bc, stream);
    const StepLoss l = train_step(params, state, batch, config, out.lr);
    out.loss += l.total;
    out.loss_imid += l.imid;
    out.loss_cmid += l.cmid;
  }
  const double nb = static_cast<double>(batches.size());
  out.loss /= nb;
  out.loss_imid /= nb;
  out.loss_cmid /= nb;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t checkpoint_version = 1;

struct Checkpoint {
  ModelParams params;
  OptimizerState optimizer;
  std::size_t epoch = 0;
  std::string config_echo;

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline void put_block(std::string& out, const std::string& name, const Tensor& t) {
  le::put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  le::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) le::put_u64(out, e);
  for (double v : t.data()) le::put_f64(out, v);
}

inline std::pair<std::string, Tensor> get_block(le::Reader& r) {
  std::string name(r.bytes(r.u32()));
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) throw CorruptCheckpoint("bad tensor rank in block '" + name + "'");
  Shape shape(rank);
  std::size_t count = 1;
  for (auto& e : shape) {
    e = static_cast<std::size_t>(r.u64());
    if (e == 0 || e > (std::size_t{1} << 32)) throw CorruptCheckpoint("bad extent in block '" + name + "'");
    count *= e;
  }
  if (count * 8 > r.remaining()) throw CorruptCheckpoint("block '" + name + "' runs past the end");
  std::vector<double> data(count);
  for (double& v : data) v = r.f64();
  return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string descriptor = "epoch=" + std::to_string(c.epoch) + "\n" +
                           "adam_step=" + std::to_string(c.optimizer.step) + "\n[arch]\n" +
                           c.params.arch.to_text() + "[config]\n" + c.config_echo;
  std::string out = "XPT1";
  le::put_u32(out, checkpoint_version);
  le::put_u64(out, descriptor.size());
  out += descriptor;
  const std::size_t n = c.params.size();
  le::put_u32(out, static_cast<std::uint32_t>(3 * n));
  for (std::size_t i = 0; i < n; ++i) detail::put_block(out, c.params.names[i], c.params.tensors[i]);
  for (std::size_t i = 0; i < n; ++i) detail::put_block(out, "adam.m/" + c.params.names[i], c.optimizer.m[i]);
  for (std::size_t i = 0; i < n; ++i) detail::put_block(out, "adam.v/" + c.params.names[i], c.optimizer.v[i]);
  le::put_u64(out, fnv1a(out));
  return out;
}

/// FNV-1a content hash stored in the trailer of an encoded checkpoint.
inline std::uint64_t checkpoint_hash(std::string_view bytes) {
  if (bytes.size() < 8) throw CorruptCheckpoint("checkpoint too short");
  le::Reader r(bytes.substr(bytes.size() - 8));
  return r.u64();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 + 4 + 8 + 4 + 8 || bytes.substr(0, 4) != "XPT1") {
    throw CorruptCheckpoint("not an XPT1 checkpoint");
  }
  const std::string_view payload = bytes.substr(0, bytes.size() - 8);
  if (fnv1a(payload) != checkpoint_hash(bytes)) throw CorruptCheckpoint("content hash mismatch");
  try {
    le::Reader r(payload);
    r.bytes(4);
    const std::uint32_t version = r.u32();
    if (version != checkpoint_version) {
      throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                         std::to_string(checkpoint_version) + ")");
    }
    const std::string descriptor(r.bytes(static_cast<std::size_t>(r.u64())));
    Checkpoint c;
    const auto arch_pos = descriptor.find("[arch]\n");
    const auto config_pos = descriptor.find("[config]\n");
    if (arch_pos == std::string::npos || config_pos == std::string::npos || config_pos < arch_pos) {
      throw CorruptCheckpoint("malformed descriptor block");
    }
    for (const auto& line : text::split(std::string_view(descriptor).substr(0, arch_pos), '\n')) {
      if (line.starts_with("epoch=")) c.epoch = text::parse_uint(line.substr(6), "epoch");
      if (line.starts_with("adam_step=")) c.optimizer.step = text::parse_uint(line.substr(10), "adam_step");
    }
    c.params.arch = ArchDescriptor::from_text(
        std::string_view(descriptor).substr(arch_pos + 7, config_pos - arch_pos - 7));
    c.config_echo = descriptor.substr(config_pos + 9);

    const auto layout = parameter_layout(c.params.arch);
    const std::uint32_t blocks = r.u32();
    if (blocks != 3 * layout.size()) throw CorruptCheckpoint("block count does not match the architecture");
    for (std::size_t part = 0; part < 3; ++part) {
      const std::string prefix = part == 0 ? "" : part == 1 ? "adam.m/" : "adam.v/";
      for (const auto& spec : layout) {
        auto [name, tensor] = detail::get_block(r);
        if (name != prefix + spec.name || tensor.shape() != spec.shape) {
          throw CorruptCheckpoint("unexpected block '" + name + "'");
        }
        if (part == 0) {
          c.params.names.push_back(std::move(name));
          c.params.tensors.push_back(std::move(tensor));
        } else {
          (part == 1 ? c.optimizer.m : c.optimizer.v).push_back(std::move(tensor));
        }
      }
    }
    if (r.remaining() != 0) throw CorruptCheckpoint("trailing bytes after the last block");
    return c;
  } catch (const IoError& e) {
    throw CorruptCheckpoint(e.what());
  } catch (const ConfigError& e) {
    throw CorruptCheckpoint(e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

// ---------------------------------------------------------------------------
// Pretraining driver
// ---------------------------------------------------------------------------

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<EpochMetrics> metrics;
  std::uint64_t hash = 0;  // content hash of the final checkpoint
  std::filesystem::path checkpoint_path;
  std::filesystem::path metrics_path;
};

struct PretrainOptions {
  std::filesystem::path out_dir;  // empty keeps everything in memory
  std::optional<Checkpoint> resume;
  // Extra lines written as `# ` comments at the top of the metrics file.
  std::string header;
  std::function<void(const EpochMetrics&)> on_epoch;
};

inline std::string metrics_csv_row(const EpochMetrics& m) {
  return std::to_string(m.epoch) + "," + text::format_double(m.lr) + "," + text::format_double(m.loss) +
         "," + text::format_double(m.loss_imid) + "," + text::format_double(m.loss_cmid) + "\n";
}

inline std::string commented(std::string_view lines) {
  std::string out;
  for (const auto& line : text::split(lines, '\n')) {
    if (!line.empty()) out += "# " + line + "\n";
  }
  return out;
}

inline PretrainResult pretrain(const TrainConfig& config, const Dataset& ds,
                               const PretrainOptions& options = {}) {
  config.validate();
  ds.validate();
  const std::string echo = config.echo() + "dataset_checksum=" + std::to_string(ds.checksum) + "\n" +
                           "code=" + std::string(version) + "\n";
  Checkpoint ckpt;
  if (options.resume) {
    ckpt = *options.resume;
    if (!(ckpt.params.arch == config.arch)) throw ArchMismatch("resume checkpoint has a different architecture");
    ckpt.params.validate();
  } else {
    ckpt.params = init_params(config.arch, config.seed);
    ckpt.optimizer = init_optimizer(ckpt.params);
  }
  ckpt.config_echo = echo;

  PretrainResult result;
  std::ofstream metrics_file;
  const bool persist = !options.out_dir.empty();
  if (persist) {
    std::filesystem::create_directories(options.out_dir);
    result.metrics_path = options.out_dir / "metrics.csv";
    metrics_file.open(result.metrics_path, std::ios::trunc);
    if (!metrics_file) throw IoError("cannot write " + result.metrics_path.string());
    metrics_file << commented(options.header) << commented(echo) << "epoch,lr,loss,loss_imid,loss_cmid\n";
  }
  for (std::size_t epoch = ckpt.epoch; epoch < config.epochs; ++epoch) {
    const EpochMetrics m = train_epoch(ds, ckpt.params, ckpt.optimizer, config, epoch);
    ckpt.epoch = epoch + 1;
    result.metrics.push_back(m);
    if (persist) {
      metrics_file << metrics_csv_row(m) << std::flush;
      if (config.checkpoint_every && ckpt.epoch % config.checkpoint_every == 0 && ckpt.epoch < config.epochs) {
        char name[40];
        std::snprintf(name, sizeof(name), "checkpoint_epoch%03zu.xpt", ckpt.epoch);
        save_checkpoint(options.out_dir / name, ckpt);
      }
    }
    if (options.on_epoch) options.on_epoch(m);
  }
  const std::string bytes = encode_checkpoint(ckpt);
  result.hash = checkpoint_hash(bytes);
  if (persist) {
    if (!metrics_file) throw IoError("failed writing " + result.metrics_path.string());
    result.checkpoint_path = options.out_dir / "checkpoint.xpt";
    write_file_atomic(result.checkpoint_path, bytes);
  }
  result.checkpoint = std::move(ckpt);
  return result;
}

}  // namespace crosspoint
