// Command-line driver: one experiment per invocation.

#include <CLI11.hpp>

#include <iostream>

#include "shlab/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Carleman-estimate and inverse-source experiments for stochastic hyperbolic equations"};
  std::string config, out;
  std::size_t threads = 1;
  bool verbose = false;
  app.add_option("--config", config, "experiment configuration (JSON)")->required();
  app.add_option("--out", out, "output directory (overrides the config's \"output\")");
  app.add_option("--threads", threads, "worker threads for per-path loops")->check(CLI::PositiveNumber);
  app.add_flag("--verbose", verbose, "print the run summary");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(shlab::ExitCode::config);
  }

  shlab::Json raw;
  try {
    raw = shlab::load_config_file(config);
  } catch (const shlab::Error& e) {
    std::cerr << "shlab: " << e.kind() << ": " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  }
  shlab::ExecuteOptions eo;
  eo.config_path = config;
  eo.out_dir = out;
  eo.threads = threads;
  eo.verbose = verbose;
  const auto r = shlab::execute(raw, eo);
  if (r.code != shlab::ExitCode::ok) {
    std::cerr << "shlab: " << r.message << "\n";
    return static_cast<int>(r.code);
  }
  if (verbose) std::cout << r.summary.dump(2) << "\n";
  std::cout << "shlab: wrote " << r.out_dir.string() << "\n";
  return 0;
}
