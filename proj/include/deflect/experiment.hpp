#pragma once

// End-to-end runs driven by an ExperimentConfig.

#include <filesystem>
#include <string>

#include "deflect/checkpoint.hpp"
#include "deflect/config.hpp"
#include "deflect/dataset.hpp"
#include "deflect/io.hpp"
#include "deflect/model.hpp"
#include "deflect/train.hpp"

namespace deflect {

inline Dataset prepare_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset_path) return load_dataset(*cfg.dataset_path);
  return generate_dataset(cfg.synthetic, cfg.seed);
}

/// theta_P: seeded random weights, or a short supervised RGB run on the training split.
template <typename T>
ParameterSet<T> prepare_pretrained(const ExperimentConfig& cfg, const Dataset& data) {
  auto vit = cfg.model;
  vit.in_channels = 3;
  if (cfg.pretrained.source == PretrainSource::random) return random_pretrained<T>(vit, cfg.pretrained.seed);
  return supervised_pretrain<T>(vit, data, cfg.pretrained.training, cfg.pretrained.seed);
}

inline Json metrics_json(const Metrics& m) {
  Json per_class = Json::array();
  for (std::size_t c = 0; c < m.num_classes; ++c) {
    per_class.push_back(Json{{"class", c},
                             {"present", static_cast<bool>(m.present[c])},
                             {"f1", m.present[c] ? Json(m.f1[c]) : Json(nullptr)},
                             {"iou", m.present[c] ? Json(m.iou[c]) : Json(nullptr)}});
  }
  return Json{{"mean_f1", m.mean_f1}, {"mean_iou", m.mean_iou}, {"accuracy", m.accuracy},
              {"count", m.count},     {"per_class", per_class}, {"confusion", m.confusion}};
}

inline Json count_json(const ParameterCount& c) {
  return Json{{"theta_P", c.theta_p}, {"theta_A", c.theta_a}, {"phi", c.phi}, {"tuned_fraction", c.tuned_fraction()}};
}

struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path metrics() const { return dir / "metrics.csv"; }
  std::filesystem::path checkpoint() const { return dir / "adapter.dflt"; }
  std::filesystem::path pretrained() const { return dir / "pretrained.dflt"; }
  std::filesystem::path summary() const { return dir / "summary.json"; }
};

/// Trains, then writes metrics.csv, adapter.dflt (theta_A + phi), pretrained.dflt and summary.json.
inline Json run_training(const ExperimentConfig& cfg, std::size_t threads, std::ostream* log = nullptr) {
  const auto data = prepare_dataset(cfg);
  const auto pretrained = prepare_pretrained<float>(cfg, data);
  Model<float> model(cfg.model_config(data), pretrained, cfg.seed);
  auto tc = cfg.training;
  tc.threads = threads;
  const auto history = train(model, data, tc, [&](const EpochRecord& e) {
    if (!log) return;
    *log << "epoch " << e.epoch << " step " << e.steps << " loss " << e.train_loss << " lr " << e.learning_rate;
    if (e.val) *log << " val mF1 " << e.val->mean_f1 << " mIoU " << e.val->mean_iou;
    *log << "\n";
  });
  const RunPaths paths{cfg.output_dir};
  std::filesystem::create_directories(paths.dir);
  write_text_atomic(paths.metrics(), history.csv());
  const std::string config_text = to_json(cfg).dump(2);
  save_checkpoint(paths.checkpoint(), make_checkpoint(model.parameters(), CheckpointScope::adapter, config_text));
  save_checkpoint(paths.pretrained(), make_checkpoint(pretrained, CheckpointScope::full, config_text));

  Json summary;
  summary["method"] = method_name(cfg.method.kind);
  summary["parameters"] = count_json(model.parameters().count());
  summary["steps"] = history.epochs.empty() ? 0 : history.epochs.back().steps;
  summary["final_train_loss"] = history.epochs.empty() ? 0.0 : history.epochs.back().train_loss;
  summary["val"] = metrics_json(evaluate(model, data.val, threads));
  summary["test"] = metrics_json(evaluate(model, data.test, threads));
  summary["theta_P_checksum_before"] = history.theta_p_before;
  summary["theta_P_checksum_after"] = history.theta_p_after;
  write_text_atomic(paths.summary(), summary.dump(2) + "\n");
  return summary;
}

/// Rebuilds the model from the run's pretrained weights and an adapter checkpoint, then evaluates.
inline Json run_evaluation(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint, std::size_t threads) {
  const auto data = prepare_dataset(cfg);
  const RunPaths paths{cfg.output_dir};
  ParameterSet<float> pretrained;
  if (std::filesystem::exists(paths.pretrained())) {
    auto vit = cfg.model;
    vit.in_channels = 3;
    for (auto spec : encoder_layout(vit)) pretrained.add(spec, std::vector<float>(spec.count(), 0.0f));
    restore_checkpoint(load_checkpoint(paths.pretrained()), pretrained);
  } else {
    pretrained = prepare_pretrained<float>(cfg, data);
  }
  Model<float> model(cfg.model_config(data), pretrained, cfg.seed);
  restore_checkpoint(load_checkpoint(checkpoint), model.parameters());
  Json out;
  out["method"] = method_name(cfg.method.kind);
  out["parameters"] = count_json(model.parameters().count());
  out["val"] = metrics_json(evaluate(model, data.val, threads));
  out["test"] = metrics_json(evaluate(model, data.test, threads));
  return out;
}

}  // namespace deflect
