#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <tbb/global_control.h>
#include <tbb/task_arena.h>

#include "CLI11.hpp"
#include "crosspoint/cli.hpp"

namespace cli = crosspoint::cli;

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Tensors are allocated and freed every step; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{std::string(crosspoint::version) + ": cross-modal contrastive pretraining for point clouds"};
  app.set_version_flag("--version", std::string(crosspoint::version));
  app.require_subcommand(1, 1);

  std::string config_path;
  std::size_t workers = 0;
  app.add_option("--config", config_path, "key = value settings file")->check(CLI::ExistingFile);
  app.add_option("--workers", workers, "worker threads (0 uses every core)");

  const auto& keys = crosspoint::config_keys();
  std::vector<std::string> values(keys.size());
  std::vector<CLI::Option*> flags;
  const crosspoint::RunConfig defaults;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    flags.push_back(app.add_option("--" + keys[i].name, values[i], keys[i].help)
                        ->group("Settings")
                        ->default_str(keys[i].get(defaults)));
  }
  for (const auto& c : cli::commands) {
    app.add_subcommand(std::string(c.name), std::string(c.summary))->fallthrough();
  }

  if (argc > 1 && argv[1][0] != '-' && !cli::is_command(argv[1])) {
    std::cerr << "error: unknown command '" << argv[1] << "'\n\n" << cli::usage();
    return cli::exit_config;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << cli::usage();
    return cli::exit_config;
  }

  crosspoint::Overrides overrides;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (flags[i]->count() > 0) overrides.emplace_back(keys[i].name, values[i]);
  }
  crosspoint::RunConfig config;
  try {
    config = crosspoint::parse_config(config_path, overrides);
  } catch (const crosspoint::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::exit_config;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  if (workers == 0) return cli::dispatch(command, config);
  // global_control lifts the default cap of one thread per core; the arena sets the count.
  tbb::global_control limit(tbb::global_control::max_allowed_parallelism, workers);
  tbb::task_arena arena(static_cast<int>(workers));
  return arena.execute([&] { return cli::dispatch(command, config); });
}
