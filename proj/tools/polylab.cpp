// polylab <preset> --config <file> [--out <dir>] [--seed <u64>] [--workers <n>]

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "polylab/lab.hpp"

int main(int argc, char** argv) {
  using namespace polylab;
  CLI::App app{"polylab: Poisson directed polymer experiments"};
  std::string preset, config_path, out;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  app.add_option("preset", preset, "verify | scan | crossover | localization | exponents | doob")->required();
  app.add_option("--config", config_path, "flat key = value file")->required();
  app.add_option("--out", out, "output directory (default polylab-out)");
  app.add_option("--seed", seed, "base seed, overrides the config and POLYLAB_SEED");
  app.add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 4;
  }
  try {
    if (!lab::known_presets().count(preset)) throw ConfigError("unknown preset '" + preset + "'");
    std::ifstream is(config_path);
    if (!is) {
      std::cerr << "polylab: cannot read config " << config_path << "\n";
      return 3;
    }
    lab::ExperimentConfig cfg = lab::parse_config(is, config_path);
    lab::RunOptions opt;
    opt.out = out;
    opt.seed = seed;
    opt.workers = workers;
    auto res = lab::run(preset, cfg, opt);
    for (const auto& c : res.checks)
      std::cout << (c.pass ? "ok   " : "FAIL ") << c.name << " " << c.statistic << " (threshold " << c.threshold
                << ")\n";
    std::cout << "wrote " << res.files.size() << " files under " << res.dir.string() << "\n";
    return res.exit_code;
  } catch (const ConfigError& e) {
    std::cerr << "polylab: config error: " << e.what() << "\n";
    return 4;
  } catch (const lab::IoError& e) {
    std::cerr << "polylab: I/O error: " << e.what() << "\n";
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "polylab: I/O error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "polylab: " << e.what() << "\n";
    return 1;
  }
}
