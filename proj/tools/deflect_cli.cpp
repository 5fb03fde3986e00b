// deflect: generate data, train and evaluate adaptation methods, run diagnostics.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
// 3 diagnostic tolerance violated.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "deflect/config.hpp"
#include "deflect/dataset.hpp"
#include "deflect/diagnostics.hpp"
#include "deflect/experiment.hpp"

namespace {

using namespace deflect;

constexpr int kUsage = 2;
constexpr int kViolation = 3;

std::size_t resolve_threads(std::size_t flag) {
  if (flag) return flag;
  if (const char* env = std::getenv("DEFLECT_THREADS")) {
    try {
      const auto n = std::stoul(env);
      if (n) return n;
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("DEFLECT_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int cmd_generate(const std::string& spec_path, const std::string& out, std::uint64_t seed) {
  const auto spec = parse_synthetic_spec(read_json_file(spec_path));
  const auto ds = generate_dataset(spec, seed);
  save_dataset(out, ds);
  std::cout << "wrote " << ds.train.size() << " train, " << ds.val.size() << " val, " << ds.test.size()
            << " test samples to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, std::size_t threads) {
  const auto cfg = load_experiment_config(config_path);
  const auto summary = run_training(cfg, threads, &std::cout);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint, std::size_t threads) {
  const auto cfg = load_experiment_config(config_path);
  std::cout << run_evaluation(cfg, checkpoint, threads).dump(2) << "\n";
  return 0;
}

std::vector<Check> suite_algebra(const ExperimentConfig& cfg) {
  const auto rep = algebra_identities(cfg.seed, 50);
  return {at_most("lora scores vs four-term expansion", rep.lora_four_term, 1e-10),
          at_most("lora scores vs weight-split expansion", rep.lora_expanded, 1e-10),
          at_most("uatt combined vs four-term scores", rep.uatt_four_term, 1e-10)};
}

std::vector<Check> suite_norms(const ExperimentConfig& cfg) {
  const auto data = prepare_dataset(cfg);
  const auto pretrained = prepare_pretrained<float>(cfg, data);
  auto mc = cfg.model_config(data);
  mc.method = PeftMethod::defaults(MethodKind::deflect);
  Model<float> adapted(mc, pretrained, cfg.seed);
  mc.method = PeftMethod::defaults(MethodKind::frozen);
  Model<float> frozen(mc, pretrained, cfg.seed);
  const std::vector<Sample> probe(data.val.begin(), data.val.begin() + std::min<std::ptrdiff_t>(8, data.val.size()));
  const auto report = displacement_norm_report(adapted, frozen, probe);
  std::vector<Check> out;
  for (const auto& [layer, diff] : report) {
    std::cout << "layer " << layer << ": mean |norm difference| " << diff << "\n";
  }
  const auto first = *std::min_element(cfg.adapter.layers.begin(), cfg.adapter.layers.end());
  out.push_back(at_most("first adapted layer (" + std::to_string(first) + ") norm difference", report.at(first), 1e-5));
  return out;
}

std::vector<Check> suite_gradients(const ExperimentConfig& cfg) {
  ModelConfig mc;
  mc.vit.image_size = 16;
  mc.vit.patch_size = 8;
  mc.vit.depth = 4;
  mc.vit.embed_dim = 16;
  mc.vit.num_heads = 2;
  mc.method = PeftMethod::defaults(MethodKind::deflect);
  mc.adapter.layers = {2, 4};
  mc.adapter.rank = 2;
  mc.num_classes = 3;
  SyntheticTaskSpec spec;
  spec.image_size = 16;
  spec.num_classes = 3;
  spec.train_size = spec.val_size = spec.test_size = 3;
  const auto data = generate_dataset(spec, cfg.seed);
  Model<double> model(mc, random_pretrained<double>(mc.vit, cfg.seed), cfg.seed);
  perturb_trainable(model, 0.1, cfg.seed);
  const auto rep = gradient_check(model, data.train.front());
  std::cout << "checked " << rep.checked << " scalars; worst " << rep.worst << "\n";
  return {at_most("finite-difference relative error", rep.max_rel_error, 1e-4)};
}

std::vector<Check> suite_budget(const ExperimentConfig& cfg) {
  auto mc = cfg.model_config();
  const auto rows = budget_table(mc);
  std::cout << format_budget(rows);
  std::vector<double> deflect;
  for (const auto& r : rows)
    if (r.method == "deflect" && r.rank != "dense") deflect.push_back(r.count.tuned_fraction());
  const bool increasing = std::is_sorted(deflect.begin(), deflect.end()) &&
                          std::adjacent_find(deflect.begin(), deflect.end()) == deflect.end();
  return {{"deflect fractions increase with rank 8/16/32", increasing ? 0.0 : 1.0, 0.0, increasing}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DEFLECT: adapting RGB vision transformers to multispectral inputs"};
  app.require_subcommand(1);
  std::size_t threads_flag = 0;
  app.add_option("--threads", threads_flag, "Worker threads (default: DEFLECT_THREADS or all cores)");

  std::string spec_path, out_dir, config_path, checkpoint, suite;
  std::uint64_t seed = 0;
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  gen->add_option("--spec", spec_path, "Synthetic task specification (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--seed", seed, "Generator seed");

  auto* tr = app.add_subcommand("train", "Train one method");
  tr->add_option("--config", config_path, "Experiment configuration (JSON)")->required()->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--config", config_path, "Experiment configuration (JSON)")->required()->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", checkpoint, "Adapter checkpoint")->required()->check(CLI::ExistingFile);

  auto* dg = app.add_subcommand("diagnose", "Run a diagnostic suite");
  dg->add_option("--config", config_path, "Experiment configuration (JSON)")->required()->check(CLI::ExistingFile);
  dg->add_option("--suite", suite, "algebra, norms, gradients or budget")
      ->required()
      ->check(CLI::IsMember({"algebra", "norms", "gradients", "budget"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    const auto threads = resolve_threads(threads_flag);
    if (gen->parsed()) return cmd_generate(spec_path, out_dir, seed);
    if (tr->parsed()) return cmd_train(config_path, threads);
    if (ev->parsed()) return cmd_eval(config_path, checkpoint, threads);
    const auto cfg = load_experiment_config(config_path);
    std::vector<Check> checks;
    if (suite == "algebra") checks = suite_algebra(cfg);
    else if (suite == "norms") checks = suite_norms(cfg);
    else if (suite == "gradients") checks = suite_gradients(cfg);
    else checks = suite_budget(cfg);
    std::cout << format_checks(checks);
    return all_passed(checks) ? 0 : kViolation;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
