#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "workers.hpp"

#include "crosspoint/training.hpp"

using namespace crosspoint;

namespace {

ArchDescriptor small_arch() {
  ArchDescriptor a;
  a.point_widths = {8, 16};
  a.feature_dim = 16;
  a.proj_dim = 8;
  a.image_channels = {2, 4};
  a.image_height = 16;
  a.image_width = 16;
  return a;
}

TrainConfig small_config(Objective objective = Objective::joint) {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.objective = objective;
  c.seed = 11;
  c.arch = small_arch();
  c.batch.n_pts = 32;
  c.batch.camera.height = 16;
  c.batch.camera.width = 16;
  c.batch.image_augment.crop_height = 14;
  c.batch.image_augment.crop_width = 14;
  return c;
}

Dataset small_dataset(std::size_t per_class = 2) {
  DatasetConfig d;
  d.per_class = per_class;
  d.points_per_shape = 64;
  d.seed = 5;
  return build_dataset(d);
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

PretrainOptions writing_to(const std::filesystem::path& dir) {
  PretrainOptions o;
  o.out_dir = dir;
  return o;
}

PretrainOptions resuming(const Checkpoint& c) {
  PretrainOptions o;
  o.resume = c;
  return o;
}

// Plain scalar Adam, written out step by step.
double scalar_adam(double w, int steps, double lr) {
  double m = 0, v = 0;
  for (int t = 1; t <= steps; ++t) {
    const double g = 2.0 * w;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    w = w - lr * mh / (std::sqrt(vh) + 1e-8);
  }
  return w;
}

}  // namespace

TEST(Adam, FirstStepIsLearningRate) {
  std::vector<Tensor> w{Tensor({1}, 0.0)};
  OptimizerState s{{Tensor({1}, 0.0)}, {Tensor({1}, 0.0)}, 0};
  AdamConfig c;
  c.weight_decay = 0;
  adam_step(w, {Tensor({1}, 1.0)}, s, 1e-3, c);
  EXPECT_NEAR(w[0][0], -9.9999999e-4, 1e-15);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParams) {
  std::vector<Tensor> w{Tensor({3}, std::vector<double>{1.5, -2, 0.25})};
  const auto before = w;
  OptimizerState s{{Tensor({3}, 0.0)}, {Tensor({3}, 0.0)}, 0};
  AdamConfig c;
  c.weight_decay = 0;
  for (int i = 0; i < 3; ++i) adam_step(w, {Tensor({3}, 0.0)}, s, 1e-2, c);
  EXPECT_EQ(w, before);
}

TEST(Adam, TwoStepsOnSquareMatchScalarReference) {
  std::vector<Tensor> w{Tensor({1}, 1.0)};
  OptimizerState s{{Tensor({1}, 0.0)}, {Tensor({1}, 0.0)}, 0};
  AdamConfig c;
  c.weight_decay = 0;
  for (int t = 0; t < 2; ++t) adam_step(w, {Tensor({1}, 2.0 * w[0][0])}, s, 0.1, c);
  EXPECT_NEAR(w[0][0], scalar_adam(1.0, 2, 0.1), 1e-12);
}

TEST(Adam, WeightDecayFoldedOrDecoupled) {
  AdamConfig c;
  c.weight_decay = 0.5;
  std::vector<Tensor> w{Tensor({1}, 2.0)};
  OptimizerState s{{Tensor({1}, 0.0)}, {Tensor({1}, 0.0)}, 0};
  adam_step(w, {Tensor({1}, 0.0)}, s, 0.1, c);
  // folded: g = 1, so the first step moves by lr / (1 + eps)
  EXPECT_NEAR(w[0][0], 2.0 - 0.1 / (1.0 + 1e-8), 1e-15);

  c.decoupled = true;
  std::vector<Tensor> u{Tensor({1}, 2.0)};
  OptimizerState s2{{Tensor({1}, 0.0)}, {Tensor({1}, 0.0)}, 0};
  adam_step(u, {Tensor({1}, 0.0)}, s2, 0.1, c);
  EXPECT_DOUBLE_EQ(u[0][0], 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(Adam, MisalignedShapesThrow) {
  std::vector<Tensor> w{Tensor({2}, 0.0)};
  OptimizerState s{{Tensor({2}, 0.0)}, {Tensor({2}, 0.0)}, 0};
  EXPECT_THROW(adam_step(w, {Tensor({3}, 0.0)}, s, 0.1, {}), ShapeError);
  EXPECT_THROW(adam_step(w, {}, s, 0.1, {}), ShapeError);
}

TEST(Adam, MomentsStayFiniteAndSecondMomentNonNegative) {
  Rng rng{StreamId(9)};
  std::vector<Tensor> w{Tensor({16}, 0.0)};
  OptimizerState s{{Tensor({16}, 0.0)}, {Tensor({16}, 0.0)}, 0};
  for (int t = 0; t < 200; ++t) {
    Tensor g({16});
    for (std::size_t i = 0; i < 16; ++i) g[i] = rng.normal() * std::pow(10.0, (t % 7) - 3);
    adam_step(w, {g}, s, 1e-3, {});
  }
  for (double v : s.v[0].data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_TRUE(std::isfinite(v));
  }
  for (double m : s.m[0].data()) EXPECT_TRUE(std::isfinite(m));
}

TEST(CosineLr, EndpointsMidpointAndMonotone) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 30, 1e-3, 1e-5), 1e-3);
  EXPECT_NEAR(cosine_lr(30, 30, 1e-3, 1e-5), 1e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(15, 30, 1e-3, 1e-5), (1e-3 + 1e-5) / 2, 1e-18);
  double prev = cosine_lr(0, 100, 2e-3, 0);
  for (int t = 1; t <= 100; ++t) {
    const double now = cosine_lr(t, 100, 2e-3, 0);
    EXPECT_LE(now, prev);
    prev = now;
  }
}

TEST(TrainEpoch, ZeroLearningRateKeepsParamsBitIdentical) {
  const auto ds = small_dataset();
  auto c = small_config();
  c.lr_max = 0;
  c.lr_min = 0;
  ModelParams p = init_params(c.arch, c.seed);
  const ModelParams before = p;
  OptimizerState s = init_optimizer(p);
  train_epoch(ds, p, s, c, 0);
  EXPECT_EQ(p, before);
}

TEST(TrainEpoch, LoggedLossMatchesRecomputation) {
  const auto ds = small_dataset();
  auto c = small_config();
  c.lr_max = 0;
  ModelParams p = init_params(c.arch, c.seed);
  OptimizerState s = init_optimizer(p);
  const EpochMetrics m = train_epoch(ds, p, s, c, 1);

  const auto batches = epoch_batches(ds.size(), c.batch_size, c.seed, 1);
  double total = 0, imid = 0, cmid = 0;
  for (const auto& idx : batches) {
    const Batch b = make_batch(ds, idx, effective_batch_config(c), batch_stream(c.seed, 1));
    const StepLoss l = evaluate_batch(p, b, c);
    total += l.total;
    imid += l.imid;
    cmid += l.cmid;
  }
  const double n = static_cast<double>(batches.size());
  EXPECT_NEAR(m.loss, total / n, 1e-12);
  EXPECT_NEAR(m.loss_imid, imid / n, 1e-12);
  EXPECT_NEAR(m.loss_cmid, cmid / n, 1e-12);
  EXPECT_NEAR(m.loss, m.loss_imid + m.loss_cmid, 1e-12);
}

TEST(TrainEpoch, FixedPairOverfits) {
  const auto ds = small_dataset(1);
  auto c = small_config();
  c.lr_max = 1e-3;
  ModelParams p = init_params(c.arch, c.seed);
  OptimizerState s = init_optimizer(p);
  const std::vector<std::size_t> idx{0, 3};
  const Batch b = make_batch(ds, idx, effective_batch_config(c), StreamId(2));
  double prev = evaluate_batch(p, b, c).total;
  int decreases = 0;
  for (int step = 0; step < 50; ++step) {
    train_step(p, s, b, c, c.lr_max);
    const double now = evaluate_batch(p, b, c).total;
    if (now < prev) ++decreases;
    prev = now;
  }
  EXPECT_GE(decreases, 45);
}

TEST(TrainEpoch, ImidNeverTouchesImageEncoder) {
  const auto ds = small_dataset();
  auto c = small_config(Objective::imid);
  ModelParams p = init_params(c.arch, c.seed);
  const ModelParams before = p;
  OptimizerState s = init_optimizer(p);
  const EpochMetrics m = train_epoch(ds, p, s, c, 0);
  EXPECT_EQ(m.loss_cmid, 0.0);
  bool point_changed = false;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (is_image_parameter(p.names[i])) {
      EXPECT_EQ(p.tensors[i], before.tensors[i]) << p.names[i];
      EXPECT_EQ(s.m[i], Tensor(p.tensors[i].shape(), 0.0));
    } else {
      point_changed = point_changed || !(p.tensors[i] == before.tensors[i]);
    }
  }
  EXPECT_TRUE(point_changed);
}

TEST(TrainEpoch, CmidLogsNoIntraModalTerm) {
  const auto ds = small_dataset();
  auto c = small_config(Objective::cmid);
  ModelParams p = init_params(c.arch, c.seed);
  OptimizerState s = init_optimizer(p);
  const EpochMetrics m = train_epoch(ds, p, s, c, 0);
  EXPECT_EQ(m.loss_imid, 0.0);
  EXPECT_EQ(m.loss, m.loss_cmid);
}

TEST(TrainEpoch, NonFiniteLossAborts) {
  const auto ds = small_dataset();
  auto c = small_config();
  ModelParams p = init_params(c.arch, c.seed);
  p["point_head.1.weight"][0] = std::numeric_limits<double>::quiet_NaN();
  OptimizerState s = init_optimizer(p);
  EXPECT_THROW(train_epoch(ds, p, s, c, 0), NonFiniteLoss);
}

TEST(Checkpoint, RoundTripAndHash) {
  TempDir dir("crosspoint_ckpt_roundtrip");
  std::filesystem::create_directories(dir.path);
  const auto c = small_config();
  Checkpoint ck;
  ck.params = init_params(c.arch, 3);
  ck.optimizer = init_optimizer(ck.params);
  ck.optimizer.step = 7;
  ck.optimizer.m[0][0] = 0.125;
  ck.epoch = 4;
  ck.config_echo = c.echo();
  save_checkpoint(dir.path / "a.xpt", ck);
  const Checkpoint back = load_checkpoint(dir.path / "a.xpt");
  EXPECT_EQ(back, ck);
  EXPECT_EQ(encode_checkpoint(back), read_file(dir.path / "a.xpt"));
  EXPECT_FALSE(std::filesystem::exists(dir.path / "a.xpt.tmp"));
}

TEST(Checkpoint, FlippedBytesAreDetected) {
  const auto c = small_config();
  Checkpoint ck;
  ck.params = init_params(c.arch, 3);
  ck.optimizer = init_optimizer(ck.params);
  ck.config_echo = c.echo();
  const std::string bytes = encode_checkpoint(ck);
  Rng rng{StreamId(4)};
  for (int trial = 0; trial < 40; ++trial) {
    std::string bad = bytes;
    const std::size_t at = static_cast<std::size_t>(rng.below(bad.size()));
    bad[at] = static_cast<char>(bad[at] ^ (1 << (trial % 8)));
    EXPECT_THROW(decode_checkpoint(bad), CorruptCheckpoint) << "byte " << at;
  }
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), CorruptCheckpoint);
  EXPECT_THROW(decode_checkpoint("XPT1"), CorruptCheckpoint);
}

TEST(Checkpoint, UnsupportedVersion) {
  const auto c = small_config();
  Checkpoint ck;
  ck.params = init_params(c.arch, 3);
  ck.optimizer = init_optimizer(ck.params);
  std::string bytes = encode_checkpoint(ck);
  bytes.resize(bytes.size() - 8);
  bytes[4] = 2;
  le::put_u64(bytes, fnv1a(bytes));
  EXPECT_THROW(decode_checkpoint(bytes), VersionError);
}

TEST(Pretrain, DeterministicWithMetricsAndCheckpoints) {
  const auto ds = small_dataset();
  auto c = small_config();
  c.epochs = 3;
  c.checkpoint_every = 1;
  TempDir dir("crosspoint_pretrain");
  const auto a = pretrain(c, ds, writing_to(dir.path));
  const auto b = pretrain(c, ds);
  EXPECT_EQ(a.hash, b.hash);
  EXPECT_EQ(a.checkpoint, b.checkpoint);
  EXPECT_EQ(a.hash, checkpoint_hash(read_file(a.checkpoint_path)));
  EXPECT_TRUE(std::filesystem::exists(dir.path / "checkpoint_epoch001.xpt"));
  EXPECT_TRUE(std::filesystem::exists(dir.path / "checkpoint_epoch002.xpt"));

  std::ifstream in(a.metrics_path);
  std::string line;
  std::size_t rows = 0;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.starts_with("#")) continue;
    if (line == "epoch,lr,loss,loss_imid,loss_cmid") {
      header = true;
      continue;
    }
    ++rows;
  }
  EXPECT_TRUE(header);
  EXPECT_EQ(rows, 3u);

  auto other = c;
  other.seed = 12;
  EXPECT_NE(pretrain(other, ds).hash, a.hash);
}

TEST(Pretrain, IndependentOfWorkerCount) {
  const auto ds = small_dataset();
  const auto c = small_config();
  const auto many = with_workers(4, [&] { return pretrain(c, ds); });
  EXPECT_EQ(with_workers(1, [&] { return pretrain(c, ds); }).hash, many.hash);
}

TEST(Pretrain, ResumeForZeroEpochsKeepsParams) {
  const auto ds = small_dataset();
  const auto c = small_config();
  const auto done = pretrain(c, ds);
  const auto again = pretrain(c, ds, resuming(done.checkpoint));
  EXPECT_TRUE(again.metrics.empty());
  EXPECT_EQ(again.checkpoint.params, done.checkpoint.params);
  EXPECT_EQ(again.hash, done.hash);
}

TEST(Pretrain, SplitRunResumesToSameResult) {
  const auto ds = small_dataset();
  auto c = small_config();
  c.epochs = 3;
  const auto full = pretrain(c, ds);
  auto partial_cfg = c;
  TempDir dir("crosspoint_resume");
  partial_cfg.checkpoint_every = 1;
  pretrain(partial_cfg, ds, writing_to(dir.path));
  const Checkpoint mid = load_checkpoint(dir.path / "checkpoint_epoch001.xpt");
  EXPECT_EQ(mid.epoch, 1u);
  const auto resumed = pretrain(c, ds, resuming(mid));
  EXPECT_EQ(resumed.checkpoint.params, full.checkpoint.params);
  EXPECT_EQ(resumed.hash, full.hash);
}

TEST(Pretrain, RejectsBadConfig) {
  const auto ds = small_dataset();
  auto c = small_config();
  c.batch_size = 1;
  EXPECT_THROW(pretrain(c, ds), ConfigError);
  c = small_config();
  c.tau = 0;
  EXPECT_THROW(pretrain(c, ds), ConfigError);
  c = small_config();
  c.batch_size = 64;
  EXPECT_THROW(pretrain(c, ds), ConfigError);
}
