#include <steerx/config.hpp>
#include <steerx/pipeline.hpp>

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>

namespace {

struct GlobalFlags {
  std::string config_path;
  std::string backend;
  std::string preset;
  std::string cache_dir;
  std::string ablation;
  std::int64_t seed = -1;
};

steerx::RunConfig load(const GlobalFlags& flags) {
  steerx::RunConfig config = steerx::load_config(flags.config_path);
  if (!flags.backend.empty() && flags.backend != "table")
    throw steerx::ConfigError("--backend: only 'table' is built in");
  if (!flags.preset.empty()) {
    const steerx::Preset& p = steerx::preset(flags.preset);
    config.steering.gamma1 = p.gamma1;
    config.steering.gamma2 = p.gamma2;
    config.steering.layer = p.layer;
    config.steering.lambda = p.lambda;
    config.selection = steerx::SelectionRule::threshold(p.tau);
    config.preset_name = flags.preset;
  }
  if (!flags.cache_dir.empty()) config.cache_dir = flags.cache_dir;
  if (flags.seed >= 0) config.seed = static_cast<std::uint64_t>(flags.seed);
  if (!flags.ablation.empty()) config.ablation = steerx::ablation_from_name(flags.ablation);
  return config;
}

int exit_code(const steerx::StageResult& result) { return result.ok() ? 0 : 1; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Disentangled activation steering for personalized text generation"};
  app.require_subcommand(1);

  GlobalFlags flags;
  app.add_option("--config", flags.config_path, "Run configuration file (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  app.add_option("--backend", flags.backend, "Backend selection (only 'table' is built in)");
  app.add_option("--preset", flags.preset,
                 "Named operating point: review/8B, review/14B, topic/8B, topic/14B");
  app.add_option("--cache-dir", flags.cache_dir, "Override the score cache directory");
  app.add_option("--seed", flags.seed, "Override the run seed");
  app.add_option("--ablation", flags.ablation, "none, no-smoothing, or no-anchors");

  auto* attribute = app.add_subcommand("attribute", "Token-level causal attribution + anchors");
  auto* smooth = app.add_subcommand("smooth", "Turn anchor tokens into style descriptions");
  auto* steer = app.add_subcommand("steer", "Steered generation (influence or style vector)");
  auto* eval = app.add_subcommand("eval", "Score generations against references");
  auto* synthbench = app.add_subcommand("synthbench", "Planted-preference benchmark + sweeps");
  auto* run_all = app.add_subcommand("run-all", "All stages in order");

  CLI11_PARSE(app, argc, argv);

  try {
    steerx::RunConfig config = load(flags);
    if (config.bench) config = steerx::pipeline::materialize(config);

    if (attribute->parsed()) return exit_code(steerx::pipeline::run_attribute(config));
    if (smooth->parsed()) return exit_code(steerx::pipeline::run_smooth(config));
    if (steer->parsed()) return exit_code(steerx::pipeline::run_steer(config));
    if (eval->parsed()) {
      steerx::pipeline::EvalOutcome outcome = steerx::pipeline::run_eval(config);
      return outcome.missing.empty() ? 0 : 1;
    }
    if (synthbench->parsed()) return exit_code(steerx::pipeline::run_synthbench(config));
    if (run_all->parsed()) return exit_code(steerx::pipeline::run_all(config));
  } catch (const steerx::ConfigError& e) {
    std::cerr << "steerx: " << e.what() << '\n';
    return 2;
  } catch (const steerx::Error& e) {
    std::cerr << "steerx: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "steerx: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
