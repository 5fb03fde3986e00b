#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "deflect/dataset.hpp"
#include "deflect/errors.hpp"
#include "deflect/model.hpp"
#include "deflect/ops.hpp"
#include "deflect/params.hpp"
#include "deflect/random.hpp"

namespace deflect {

struct Metrics {
  std::size_t num_classes = 0;
  std::vector<std::size_t> confusion;  // row = label, column = prediction
  std::vector<double> f1, iou;         // per class; NaN for classes absent from the labels
  std::vector<bool> present;
  double mean_f1 = 0, mean_iou = 0, accuracy = 0;
  std::size_t count = 0;

  std::size_t at(std::size_t label, std::size_t pred) const { return confusion[label * num_classes + pred]; }
};

/// F1 and IoU per class from the confusion matrix; means run over classes present in the labels.
inline Metrics compute_metrics(const std::vector<int>& preds, const std::vector<int>& labels, std::size_t num_classes,
                               int ignore_index = kIgnoreLabel) {
  if (preds.size() != labels.size()) throw PreconditionError("compute_metrics: predictions and labels differ in length");
  if (num_classes == 0) throw PreconditionError("compute_metrics: no classes");
  Metrics m;
  m.num_classes = num_classes;
  m.confusion.assign(num_classes * num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == ignore_index) continue;
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw PreconditionError("compute_metrics: label " + std::to_string(labels[i]) + " outside class range");
    }
    if (preds[i] < 0 || static_cast<std::size_t>(preds[i]) >= num_classes) {
      throw PreconditionError("compute_metrics: prediction " + std::to_string(preds[i]) + " outside class range");
    }
    ++m.confusion[static_cast<std::size_t>(labels[i]) * num_classes + static_cast<std::size_t>(preds[i])];
    ++m.count;
  }
  if (m.count == 0) throw PreconditionError("compute_metrics: no labelled samples");
  std::size_t correct = 0, present = 0;
  m.f1.assign(num_classes, std::nan(""));
  m.iou.assign(num_classes, std::nan(""));
  m.present.assign(num_classes, false);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t tp = m.at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < num_classes; ++o) {
      if (o == c) continue;
      fp += m.at(o, c);
      fn += m.at(c, o);
    }
    correct += tp;
    if (tp + fn == 0) continue;
    m.present[c] = true;
    ++present;
    m.f1[c] = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    m.iou[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    m.mean_f1 += m.f1[c];
    m.mean_iou += m.iou[c];
  }
  m.mean_f1 /= static_cast<double>(present);
  m.mean_iou /= static_cast<double>(present);
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.count);
  return m;
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::size_t max_steps = 0;  // 0: epochs × batches per epoch
  double learning_rate = 1e-4;
  std::vector<double> milestones{0.6, 0.9};
  double decay = 0.1;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 0.01;
  std::uint64_t seed = 0;
  bool record_norms = false;
  std::size_t probe_images = 8;  // validation images used for the per-epoch norm record
  bool evaluate_val = true;
  std::size_t threads = 1;

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (batch_size == 0) out.push_back("batch_size must be positive");
    if (!(learning_rate > 0)) out.push_back("learning_rate must be positive");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (!(milestones[i] > 0 && milestones[i] < 1)) out.push_back("milestones must lie in (0, 1)");
      if (i && !(milestones[i] > milestones[i - 1])) out.push_back("milestones must be strictly increasing");
    }
    if (!(decay > 0 && decay <= 1)) out.push_back("decay must lie in (0, 1]");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) out.push_back("betas must lie in [0, 1)");
    if (!(adam_eps > 0)) out.push_back("adam_eps must be positive");
    if (!(weight_decay >= 0)) out.push_back("weight_decay must be non-negative");
    if (threads == 0) out.push_back("threads must be positive");
    return out;
  }
};

/// base × decay^(number of milestones m with m ≤ step / total).
inline double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total) {
  double lr = cfg.learning_rate;
  const double t = total ? static_cast<double>(step) / static_cast<double>(total) : 0.0;
  for (double m : cfg.milestones)
    if (m <= t) lr *= cfg.decay;
  return lr;
}

/// Adam with decoupled weight decay on weight matrices only.
template <typename T>
class AdamW {
 public:
  struct Slot {
    Tensor<T> param;
    bool decay;
    std::vector<double> m, v;
  };

  AdamW(const ParameterSet<T>& ps, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& e : ps.entries()) {
      if (e.spec.group == ParamGroup::pretrained) continue;
      slots_.push_back({e.tensor, e.spec.kind == ParamKind::weight, std::vector<double>(e.tensor.size(), 0.0),
                        std::vector<double>(e.tensor.size(), 0.0)});
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      auto data = s.param.data();
      const auto grad = s.param.grad();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        s.m[i] = cfg_.beta1 * s.m[i] + (1 - cfg_.beta1) * g;
        s.v[i] = cfg_.beta2 * s.v[i] + (1 - cfg_.beta2) * g * g;
        double w = static_cast<double>(data[i]);
        if (s.decay) w -= lr * cfg_.weight_decay * w;
        w -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg_.adam_eps);
        data[i] = static_cast<T>(w);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;  // cumulative
  double train_loss = 0;
  double learning_rate = 0;
  std::optional<Metrics> val;
  std::map<std::size_t, double> attn_norms;  // layer -> mean token displacement norm on the probe set
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  std::uint64_t theta_p_before = 0, theta_p_after = 0;

  /// Rows of (epoch, split, metric, value).
  std::string csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "epoch,split,metric,value\n";
    for (const auto& e : epochs) {
      os << e.epoch << ",train,loss," << e.train_loss << "\n";
      os << e.epoch << ",train,lr," << e.learning_rate << "\n";
      if (e.val) {
        os << e.epoch << ",val,mean_f1," << e.val->mean_f1 << "\n";
        os << e.epoch << ",val,mean_iou," << e.val->mean_iou << "\n";
        os << e.epoch << ",val,accuracy," << e.val->accuracy << "\n";
      }
      for (const auto& [layer, v] : e.attn_norms) os << e.epoch << ",probe,attn_norm_layer" << layer << "," << v << "\n";
    }
    return os.str();
  }
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
        next = n;
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <typename T>
Metrics evaluate(const Model<T>& model, const std::vector<Sample>& samples, std::size_t threads = 1) {
  if (samples.empty()) throw PreconditionError("evaluate: no samples");
  std::vector<std::vector<int>> preds(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) { preds[i] = model.predict(samples[i].image, samples[i].id); });
  std::vector<int> all_preds, all_labels;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (preds[i].size() != samples[i].labels.size()) throw DimensionError("prediction and label counts differ");
    all_preds.insert(all_preds.end(), preds[i].begin(), preds[i].end());
    all_labels.insert(all_labels.end(), samples[i].labels.begin(), samples[i].labels.end());
  }
  return compute_metrics(all_preds, all_labels, model.config().num_classes);
}

/// Mean per-layer token displacement norms over `samples`.
template <typename T>
std::map<std::size_t, double> mean_attention_norms(const Model<T>& model, const std::vector<Sample>& samples,
                                                   std::size_t limit) {
  NoGradGuard guard;
  std::map<std::size_t, double> sums;
  std::size_t count = 0;
  for (std::size_t i = 0; i < std::min(limit, samples.size()); ++i) {
    auto r = model.forward(samples[i].image, samples[i].id, nullptr, true);
    for (std::size_t l = 0; l < r.state.attn_norms.size(); ++l)
      for (double v : r.state.attn_norms[l]) sums[l + 1] += v;
    count += r.state.attn_norms.empty() ? 0 : r.state.attn_norms[0].size();
  }
  for (auto& [l, v] : sums) v /= static_cast<double>(std::max<std::size_t>(count, 1));
  return sums;
}

template <typename T>
std::string batch_dump(const Model<T>& model, const std::vector<Sample>& data, const std::vector<std::size_t>& batch) {
  std::ostringstream os;
  os << "last batch:";
  for (auto i : batch) {
    const auto& img = data[i].image;
    double lo = 1e300, hi = -1e300, mean = 0;
    for (float v : img.data) {
      lo = std::min<double>(lo, v);
      hi = std::max<double>(hi, v);
      mean += v;
    }
    os << "\n  image " << data[i].id << ": min " << lo << " max " << hi << " mean " << mean / static_cast<double>(img.data.size());
  }
  for (const auto& e : model.parameters().entries()) {
    if (e.spec.group == ParamGroup::pretrained || !e.tensor.has_grad()) continue;
    double sq = 0;
    for (auto g : e.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    os << "\n  grad norm " << e.spec.name << ": " << std::sqrt(sq);
  }
  return os.str();
}

/**
 * Minimises the mean cross-entropy over the trainable groups (theta_A and phi).
 * theta_P is checksummed before and after; a change raises IntegrityError.
 */
template <typename T>
TrainHistory train(Model<T>& model, const Dataset& data, const TrainConfig& cfg,
                   const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  {
    const auto p = cfg.problems();
    if (!p.empty()) {
      std::string msg = "invalid training configuration:";
      for (const auto& s : p) msg += "\n  - " + s;
      throw ConfigError(msg);
    }
  }
  if (data.train.empty()) throw PreconditionError("train: empty training split");
  auto& params = model.parameters();
  TrainHistory hist;
  hist.theta_p_before = params.checksum(ParamGroup::pretrained);

  const std::size_t per_epoch = (data.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.max_steps ? cfg.max_steps : cfg.epochs * per_epoch;
  const std::size_t epochs = cfg.max_steps ? (total + per_epoch - 1) / per_epoch : cfg.epochs;
  AdamW<T> opt(params, cfg);
  auto rng = derive_rng(cfg.seed, 0x545241);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const int ignore = data.task == TaskKind::segmentation ? kIgnoreLabel : -1;

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= epochs && step < total; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size() && step < total; start += cfg.batch_size) {
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(start + cfg.batch_size, order.size())));
      params.zero_grad();
      double batch_loss = 0;
      for (auto i : batch) {
        const auto& s = data.train[i];
        auto loss = cross_entropy(model.logits(s.image, s.id), s.labels, ignore);
        batch_loss += static_cast<double>(loss.item());
        scale(loss, T(1) / T(batch.size())).backward();
      }
      batch_loss /= static_cast<double>(batch.size());
      if (!std::isfinite(batch_loss)) {
        throw NumericError("non-finite training loss at step " + std::to_string(step) + "\n" +
                           batch_dump(model, data.train, batch));
      }
      const double lr = scheduled_lr(cfg, step, total);
      opt.step(lr);
      rec.learning_rate = lr;
      hist.step_losses.push_back(batch_loss);
      loss_sum += batch_loss;
      ++batches;
      ++step;
    }
    params.zero_grad();
    rec.steps = step;
    rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    if (cfg.evaluate_val && !data.val.empty()) rec.val = evaluate(model, data.val, cfg.threads);
    if (cfg.record_norms) rec.attn_norms = mean_attention_norms(model, data.val.empty() ? data.train : data.val, cfg.probe_images);
    if (on_epoch) on_epoch(rec);
    hist.epochs.push_back(std::move(rec));
  }
  hist.theta_p_after = params.checksum(ParamGroup::pretrained);
  if (hist.theta_p_after != hist.theta_p_before) throw IntegrityError("training modified frozen pretrained parameters");
  return hist;
}

/// Per adapted layer: mean over probe tokens of | ||D1 z||_adapted - ||D1 z||_frozen |.
template <typename T>
std::map<std::size_t, double> displacement_norm_report(const Model<T>& adapted, const Model<T>& frozen,
                                                       const std::vector<Sample>& probe) {
  if (probe.empty()) throw PreconditionError("displacement_norm_report: empty probe set");
  NoGradGuard guard;
  std::map<std::size_t, double> out;
  std::size_t tokens = 0;
  for (const auto& s : probe) {
    auto a = adapted.forward(s.image, s.id, nullptr, true);
    auto f = frozen.forward(s.image, s.id, nullptr, true);
    if (a.state.attn_norms.size() != f.state.attn_norms.size()) throw DimensionError("models differ in depth");
    for (std::size_t l = 0; l < a.state.attn_norms.size(); ++l)
      for (std::size_t i = 0; i < a.state.attn_norms[l].size(); ++i)
        out[l + 1] += std::abs(a.state.attn_norms[l][i] - f.state.attn_norms[l][i]);
    tokens += a.state.attn_norms.empty() ? 0 : a.state.attn_norms[0].size();
  }
  for (auto& [l, v] : out) v /= static_cast<double>(tokens);
  return out;
}

/// Full supervised training of a seeded RGB encoder; returns its weights as theta_P.
template <typename T>
ParameterSet<T> supervised_pretrain(const VitConfig& vit, const Dataset& data, const TrainConfig& cfg,
                                    std::uint64_t seed) {
  ModelConfig mc;
  mc.vit = vit;
  mc.method = PeftMethod::defaults(MethodKind::full);
  mc.method.input = StemInput::rgb;
  mc.bands = data.train.front().image.band_names;
  mc.num_classes = data.num_classes;
  mc.task = data.task;
  auto base = random_pretrained<T>(vit, seed);
  Model<T> model(mc, base, seed);
  auto quiet = cfg;
  quiet.evaluate_val = false;
  quiet.record_norms = false;
  train(model, data, quiet);
  ParameterSet<T> out;
  for (auto spec : encoder_layout(vit)) {
    auto values = model.parameters().at(spec.name).values();
    out.add(std::move(spec), std::move(values));
  }
  return out;
}

}  // namespace deflect
