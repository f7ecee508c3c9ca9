#include "alws/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>

#include "alws/common.hpp"

namespace alws {

int cli_main(int argc, const char* const* argv) {
  configure_blas_threads();
  CLI::App app{"Wake-sleep training of latent-variable generative models"};
  app.require_subcommand(1);

  app.add_subcommand("train", "Fit a model to data");
  app.add_subcommand("gradient-check", "Compare estimated gradients against references");
  app.add_subcommand("sample", "Draw samples from a model");
  app.add_subcommand("evaluate", "Compute metrics for a trained model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    fail("subcommands are not wired up yet");
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace alws
