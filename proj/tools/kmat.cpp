// Command-line front end: flag parsing and exit-code mapping only. All real
// work lives in the library so tests can drive it in-process.

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "kmat/cli.hpp"
#include "kmat/errors.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

int dispatch(int argc, char** argv) {
  CLI::App app{"Factorized prompt tuning with anchored cross-modal transport"};
  app.require_subcommand(1);

  kmat::cli::GenOptions gen;
  CLI::App* cmd_gen = app.add_subcommand("gen", "Generate a synthetic embedding fixture");
  cmd_gen->add_option("--classes", gen.spec.n_classes, "Number of classes");
  cmd_gen->add_option("--dim", gen.spec.embed_dim, "Embedding dimension");
  cmd_gen->add_option("--train", gen.spec.train_per_class, "Training samples per class/modality");
  cmd_gen->add_option("--val", gen.spec.val_per_class, "Validation samples per class/modality");
  cmd_gen->add_option("--test", gen.spec.test_per_class, "Test samples per class/modality");
  cmd_gen->add_option("--spread", gen.spec.center_spread, "Angle between mean and class centers");
  cmd_gen->add_option("--noise", gen.spec.noise, "Sample noise scale");
  cmd_gen->add_option("--rotation", gen.spec.cross_modal_rotation,
                      "Cross-modal rotation in radians");
  cmd_gen->add_option("--offset", gen.spec.shortcut_offset, "Shared low-end offset magnitude");
  cmd_gen->add_option("--seed", gen.spec.seed, "Generator seed");
  cmd_gen->add_option("--descriptions", gen.descriptions_per_class,
                      "Description embeddings per class/modality");
  cmd_gen->add_option("--description-noise", gen.description_noise,
                      "Noise scale for description embeddings");
  cmd_gen->add_option("--out", gen.out_dir, "Output directory")->required();

  kmat::cli::TrainOptions train;
  CLI::App* cmd_train = app.add_subcommand("train", "Train prompts over all configured seeds");
  cmd_train->add_option("--config", train.config_path, "JSON config file");
  cmd_train->add_option("--data", train.data_path, "Embedding fixture (overrides config)");
  cmd_train->add_option("--descriptions", train.descriptions_path,
                        "Description fixture (overrides config)");
  cmd_train->add_option("--seeds", train.seeds, "Seeds (overrides config)")->delimiter(',');
  cmd_train->add_option("--out", train.out_dir, "Output directory")->required();

  kmat::cli::AblateOptions ablate;
  CLI::App* cmd_ablate = app.add_subcommand("ablate", "Run the component ablation grid");
  cmd_ablate->add_option("--config", ablate.config_path, "JSON config file");
  cmd_ablate->add_option("--data", ablate.data_path, "Embedding fixture (overrides config)");
  cmd_ablate->add_option("--descriptions", ablate.descriptions_path,
                         "Description fixture (overrides config)");
  cmd_ablate->add_option("--seeds", ablate.seeds, "Seeds (overrides config)")->delimiter(',');
  cmd_ablate->add_option("--grid", ablate.grid,
                         "Cell tags (CSC MSC anchor transport, e.g. 1111); default full grid")
      ->delimiter(',');
  cmd_ablate->add_option("--out", ablate.out_dir, "Output directory")->required();

  kmat::cli::EvalOptions eval;
  CLI::App* cmd_eval = app.add_subcommand("eval", "Evaluate a parameter dump on a fixture");
  cmd_eval->add_option("--params", eval.params_path, "params_seed<k>.json from train")->required();
  cmd_eval->add_option("--data", eval.data_path, "Embedding fixture (defaults to the dump's)");
  cmd_eval->add_option("--modality", eval.modality, "high, low, or both (default both)");
  cmd_eval->add_option("--split", eval.split, "train, val, or test (default test)");
  cmd_eval->add_option("--out", eval.out_dir, "Optional output directory for the report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (cmd_gen->parsed()) kmat::cli::run_gen(gen, std::cout);
  if (cmd_train->parsed()) kmat::cli::run_train(train, std::cout);
  if (cmd_ablate->parsed()) kmat::cli::run_ablate(ablate, std::cout);
  if (cmd_eval->parsed()) kmat::cli::run_eval(eval, std::cout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const kmat::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const kmat::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const kmat::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const kmat::ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const kmat::SizeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const kmat::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
