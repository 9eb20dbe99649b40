#pragma once

// Subcommand dispatch for the command-line tool. Exit codes: 0 success,
// 1 domain error (bad data, failed check, corrupt file), 2 config error.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <string_view>

#include "crosspoint/codec.hpp"
#include "crosspoint/config.hpp"
#include "crosspoint/data.hpp"
#include "crosspoint/eval.hpp"
#include "crosspoint/render.hpp"
#include "crosspoint/selftest.hpp"
#include "crosspoint/training.hpp"

namespace crosspoint::cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_domain = 1;
inline constexpr int exit_config = 2;

struct Command {
  std::string_view name;
  std::string_view summary;
};

inline constexpr std::array<Command, 9> commands{{
    {"gen-data", "generate the train and test primitive datasets into data_dir"},
    {"pretrain", "pretrain the encoders; writes metrics.csv and checkpoint.xpt"},
    {"eval-linear", "linear accuracy of a checkpoint's frozen features"},
    {"eval-fewshot", "N-way K-shot accuracy of a checkpoint's frozen features"},
    {"ablate", "imid / cmid / joint ablation over seeds, with an untrained baseline"},
    {"sweep-images", "pretrain and evaluate for each image count in sweep_n_images"},
    {"grad-check", "finite-difference check of the full objective on a toy model"},
    {"render", "render views of one training sample to PPM files"},
    {"selftest", "oracle, gradient and invariant checks as a pass/fail table"},
}};

inline bool is_command(std::string_view name) {
  for (const auto& c : commands) {
    if (c.name == name) return true;
  }
  return false;
}

inline std::string usage() {
  std::string out = "usage: crosspoint <command> [--config FILE] [--workers N] [--<key> VALUE ...]\n\ncommands:\n";
  for (const auto& c : commands) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "  %-14s", std::string(c.name).c_str());
    out += buf + std::string(c.summary) + "\n";
  }
  out += "\nEvery config key is also a flag; `crosspoint <command> --help` lists them.\n";
  return out;
}

namespace detail {

/// Loads <data_dir>/<split> when gen-data wrote it, otherwise builds the same split in memory.
/// Files that disagree with the configured dataset are refused.
inline Dataset dataset_for(const RunConfig& config, const std::string& split) {
  const auto dir = config.data_dir / split;
  Dataset expected = build_dataset(config.dataset_config(split));
  if (!std::filesystem::exists(dir / manifest_name)) return expected;
  Dataset ds = load_dataset(dir);
  if (ds.checksum != expected.checksum) {
    throw ConfigError(dir.string() + " was generated with different dataset settings; rerun gen-data");
  }
  return ds;
}

inline void write_artifact(const std::filesystem::path& path, const RunConfig& config, const std::string& body) {
  std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, commented(artifact_header(config)) + body);
}

inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * v);
  return buf;
}

inline nlohmann::json with_run_config(nlohmann::json j, const RunConfig& config) {
  j["version"] = std::string(version);
  j["run_config"] = config.echo();
  return j;
}

inline int gen_data(const RunConfig& config, std::ostream& out) {
  for (const std::string split : {"train", "test"}) {
    const Dataset ds = build_dataset(config.dataset_config(split));
    save_dataset(ds, config.data_dir / split);
    out << split << ": " << ds.size() << " samples, checksum " << text::hex64(ds.checksum) << "\n";
  }
  write_file_atomic(config.data_dir / "config.txt", artifact_header(config));
  return exit_ok;
}

inline int pretrain_command(const RunConfig& config, std::ostream& out) {
  const Dataset train = dataset_for(config, "train");
  PretrainOptions options;
  options.out_dir = config.out_dir / "pretrain";
  options.header = artifact_header(config);
  if (!config.resume.empty()) options.resume = load_checkpoint(config.resume);
  options.on_epoch = [&out](const EpochMetrics& m) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "epoch %3zu  lr %.3e  loss %.5f\n", m.epoch, m.lr, m.loss);
    out << buf << std::flush;
  };
  const PretrainResult run = pretrain(config.train_config(), train, options);
  out << "checkpoint " << run.checkpoint_path.string() << " hash " << text::hex64(run.hash) << "\n";
  return exit_ok;
}

inline std::pair<Checkpoint, std::uint64_t> load_evaluated_checkpoint(const RunConfig& config) {
  const std::string bytes = read_file(config.checkpoint_path());
  return {decode_checkpoint(bytes), checkpoint_hash(bytes)};
}

inline int eval_linear(const RunConfig& config, std::ostream& out) {
  const auto [ckpt, hash] = load_evaluated_checkpoint(config);
  const EvalConfig eval = config.eval_config();
  const ArchDescriptor arch = config.train_config().arch;
  const Dataset train = dataset_for(config, "train");
  const Dataset test = dataset_for(config, "test");
  const auto fit = extract_features(ckpt, train, eval.features, arch);
  const auto held_out = extract_features(ckpt, test, eval.features, arch);
  const double accuracy = evaluate(fit_linear(fit, eval.linear), held_out);
  write_artifact(config.out_dir / "eval_linear.csv", config,
                 "checkpoint_hash,accuracy\n" + text::hex64(hash) + "," + text::format_double(accuracy) + "\n");
  out << "linear accuracy " << percent(accuracy) << " (checkpoint " << text::hex64(hash) << ")\n";
  return exit_ok;
}

inline int eval_fewshot(const RunConfig& config, std::ostream& out) {
  const auto [ckpt, hash] = load_evaluated_checkpoint(config);
  const EvalConfig eval = config.eval_config();
  const Dataset test = dataset_for(config, "test");
  const auto table = extract_features(ckpt, test, eval.features, config.train_config().arch);
  const EpisodeSpec spec = config.fewshot_spec();
  const FewShotResult r = fewshot_eval(table, spec, eval.linear);
  std::string body = "episode,accuracy\n";
  for (std::size_t e = 0; e < r.accuracies.size(); ++e) {
    body += std::to_string(e) + "," + text::format_double(r.accuracies[e]) + "\n";
  }
  write_artifact(config.out_dir / "eval_fewshot.csv", config, body);
  out << spec.n_way << "-way " << spec.k_shot << "-shot over " << spec.episodes << " episodes: mean "
      << percent(r.mean) << ", std " << percent(r.stdev) << "\n";
  return exit_ok;
}

inline void write_cells(const std::filesystem::path& dir, const RunConfig& config, const std::string& csv,
                        const std::vector<AblationCell>& cells) {
  write_artifact(dir / "results.csv", config, csv);
  std::string jsonl;
  for (const auto& c : cells) jsonl += with_run_config(cell_summary(c), config).dump() + "\n";
  write_file_atomic(dir / "summaries.jsonl", jsonl);
}

inline int ablate(const RunConfig& config, std::ostream& out) {
  const Dataset train = dataset_for(config, "train");
  const Dataset test = dataset_for(config, "test");
  const TrainConfig base = config.train_config();
  const EvalConfig eval = config.eval_config();
  const auto dir = config.out_dir / "ablate";
  std::vector<AblationCell> cells;
  for (std::uint64_t seed : config.ablation_seeds) {
    cells.push_back(untrained_cell(train, test, base.arch, seed, eval));
    out << "untrained seed " << seed << ": " << percent(cells.back().accuracy) << "\n" << std::flush;
  }
  for (Objective o : config.ablation_objectives) {
    for (std::uint64_t seed : config.ablation_seeds) {
      TrainConfig c = base;
      c.objective = o;
      c.seed = seed;
      cells.push_back(pretrain_cell(train, test, c, eval, cell_dir(dir, to_string(o), seed), to_string(o),
                                    artifact_header(config)));
      out << to_string(o) << " seed " << seed << ": " << percent(cells.back().accuracy) << "\n" << std::flush;
    }
  }
  write_cells(dir, config, ablation_csv(cells), cells);
  out << "mean untrained " << percent(mean_accuracy(cells, "untrained"));
  for (Objective o : config.ablation_objectives) {
    out << ", " << to_string(o) << " " << percent(mean_accuracy(cells, to_string(o)));
  }
  out << "\n";
  return exit_ok;
}

inline int sweep_images(const RunConfig& config, std::ostream& out) {
  const Dataset train = dataset_for(config, "train");
  const Dataset test = dataset_for(config, "test");
  const auto dir = config.out_dir / "sweep";
  const auto rows = image_count_sweep(train, test, config.train_config(), config.sweep_n_images,
                                      config.eval_config(), dir, artifact_header(config));
  std::vector<AblationCell> cells;
  for (const auto& r : rows) {
    cells.push_back(r.cell);
    out << "n_images " << r.n_images << ": " << percent(r.cell.accuracy) << " (checkpoint "
        << text::hex64(r.cell.checkpoint_hash) << ")\n";
  }
  write_cells(dir, config, sweep_csv(rows), cells);
  return exit_ok;
}

inline int grad_check_command(const RunConfig& config, std::ostream& out) {
  const auto r = selftest::gradient_check(config.seed, 1e-5, 1e-5);
  out << r.detail << "\n" << (r.passed ? "PASS" : "FAIL") << "\n";
  return r.passed ? exit_ok : exit_domain;
}

inline int render_command(const RunConfig& config, std::ostream& out) {
  const Dataset train = dataset_for(config, "train");
  if (config.render_sample >= train.size()) {
    throw ConfigError("render_sample " + std::to_string(config.render_sample) + " outside the " +
                      std::to_string(train.size()) + " training samples");
  }
  const Sample& s = train.samples[config.render_sample];
  CameraConfig camera = config.dataset.camera;
  camera.height = camera.width = config.image_size;
  const auto dir = config.out_dir / "render";
  std::filesystem::create_directories(dir);
  for (std::size_t v = 0; v < config.render_views; ++v) {
    Rng rng(StreamId(config.seed).child("render").child(s.id).child(v));
    char name[48];
    std::snprintf(name, sizeof(name), "sample%06zu_view%zu.ppm", s.id, v);
    save_ppm(dir / name, render(s.cloud, sample_camera(rng, camera, s.cloud.centroid())));
    out << (dir / name).string() << "\n";
  }
  write_file_atomic(dir / "config.txt", artifact_header(config));
  return exit_ok;
}

inline int selftest_command(const RunConfig& config, std::ostream& out) {
  bool all = true;
  out << version << " selftest\n";
  for (const auto& r : selftest::run_all(config.seed)) {
    out << selftest::format_row(r) << "\n";
    all = all && r.passed;
  }
  out << (all ? "all checks passed" : "some checks FAILED") << "\n";
  return all ? exit_ok : exit_domain;
}

}  // namespace detail

/// Runs one subcommand. Errors are reported on `err` and mapped to exit codes.
inline int dispatch(std::string_view command, const RunConfig& config, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  try {
    if (command == "gen-data") return detail::gen_data(config, out);
    if (command == "pretrain") return detail::pretrain_command(config, out);
    if (command == "eval-linear") return detail::eval_linear(config, out);
    if (command == "eval-fewshot") return detail::eval_fewshot(config, out);
    if (command == "ablate") return detail::ablate(config, out);
    if (command == "sweep-images") return detail::sweep_images(config, out);
    if (command == "grad-check") return detail::grad_check_command(config, out);
    if (command == "render") return detail::render_command(config, out);
    if (command == "selftest") return detail::selftest_command(config, out);
    err << "unknown command '" << command << "'\n\n" << usage();
    return exit_config;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return exit_config;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_domain;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_domain;
  }
}

}  // namespace crosspoint::cli
