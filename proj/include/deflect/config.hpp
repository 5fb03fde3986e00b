#pragma once

// JSON experiment configuration. Unknown keys and type errors are collected
// together with every validation problem before anything is reported.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "deflect/adapter.hpp"
#include "deflect/dataset.hpp"
#include "deflect/errors.hpp"
#include "deflect/model.hpp"
#include "deflect/peft.hpp"
#include "deflect/spectral.hpp"
#include "deflect/stats.hpp"
#include "deflect/train.hpp"
#include "deflect/vit.hpp"

namespace deflect {

using Json = nlohmann::ordered_json;

enum class PretrainSource { random, supervised };

struct PretrainConfig {
  PretrainSource source = PretrainSource::random;
  std::uint64_t seed = 0;
  TrainConfig training{.epochs = 5, .batch_size = 16, .learning_rate = 1e-3};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::optional<std::string> dataset_path;  // else a synthetic task generated from `synthetic`
  SyntheticTaskSpec synthetic;
  VitConfig model;
  PretrainConfig pretrained;
  PeftMethod method = PeftMethod::defaults(MethodKind::deflect);
  AdapterConfig adapter;
  UpeConfig upe;
  TrainConfig training;

  ModelConfig model_config(const Dataset& data) const {
    ModelConfig mc;
    mc.vit = model;
    mc.vit.in_channels = 3;
    mc.method = method;
    mc.adapter = adapter;
    mc.upe = upe;
    mc.bands = data.train.empty() ? synthetic.bands : data.train.front().image.band_names;
    mc.num_classes = data.num_classes;
    mc.task = data.task;
    return mc;
  }

  ModelConfig model_config() const {
    ModelConfig mc;
    mc.vit = model;
    mc.vit.in_channels = 3;
    mc.method = method;
    mc.adapter = adapter;
    mc.upe = upe;
    mc.bands = synthetic.bands;
    mc.num_classes = synthetic.num_classes;
    mc.task = synthetic.task;
    return mc;
  }
};

namespace detail {

class JsonReader {
 public:
  std::vector<std::string> problems;

  /// Reads known keys of object `j` at `path`; reports the rest as unknown.
  class Object {
   public:
    Object(JsonReader& r, const Json& j, std::string path) : r_(r), j_(j), path_(std::move(path)) {
      if (!j_.is_object()) r_.problems.push_back(path_ + ": expected an object");
    }
    ~Object() {
      if (!j_.is_object()) return;
      for (const auto& [k, v] : j_.items())
        if (!seen_.contains(k)) r_.problems.push_back(path_ + "." + k + ": unknown key");
    }

    const Json* get(const std::string& key) {
      seen_.insert(key);
      if (!j_.is_object() || !j_.contains(key)) return nullptr;
      return &j_.at(key);
    }

    template <typename V>
    void read(const std::string& key, V& out) {
      const Json* v = get(key);
      if (!v) return;
      try {
        if constexpr (std::is_same_v<V, std::size_t> || std::is_same_v<V, std::uint64_t>) {
          if (!v->is_number_integer() || v->template get<std::int64_t>() < 0)
            throw std::invalid_argument("expected a non-negative integer");
        } else if constexpr (std::is_same_v<V, double>) {
          if (!v->is_number()) throw std::invalid_argument("expected a number");
        } else if constexpr (std::is_same_v<V, bool>) {
          if (!v->is_boolean()) throw std::invalid_argument("expected true or false");
        } else if constexpr (std::is_same_v<V, std::string>) {
          if (!v->is_string()) throw std::invalid_argument("expected a string");
        }
        out = v->template get<V>();
      } catch (const std::exception& e) {
        r_.problems.push_back(where(key) + ": " + e.what());
      }
    }

    std::string where(const std::string& key) const { return path_ + "." + key; }
    JsonReader& reader() { return r_; }

   private:
    JsonReader& r_;
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
  };

  template <typename Fn>
  void guard(const std::string& where, Fn&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      problems.push_back(where + ": " + e.what());
    }
  }
};

inline std::vector<std::pair<std::string, double>> read_combination(const Json& j) {
  if (!j.is_object()) throw std::invalid_argument("expected an object of band weights");
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [band, w] : j.items()) {
    if (!w.is_number()) throw std::invalid_argument("weight of band '" + band + "' is not a number");
    out.emplace_back(band, w.get<double>());
  }
  if (out.empty()) throw std::invalid_argument("empty band combination");
  return out;
}

inline void read_training(JsonReader::Object&& o, TrainConfig& t) {
  o.read("epochs", t.epochs);
  o.read("batch_size", t.batch_size);
  o.read("max_steps", t.max_steps);
  o.read("learning_rate", t.learning_rate);
  o.read("decay", t.decay);
  o.read("beta1", t.beta1);
  o.read("beta2", t.beta2);
  o.read("adam_eps", t.adam_eps);
  o.read("weight_decay", t.weight_decay);
  o.read("seed", t.seed);
  o.read("record_norms", t.record_norms);
  o.read("probe_images", t.probe_images);
  o.read("evaluate_val", t.evaluate_val);
  if (const Json* m = o.get("milestones")) {
    o.reader().guard(o.where("milestones"), [&] { t.milestones = m->get<std::vector<double>>(); });
  }
  for (const auto& p : t.problems()) o.reader().problems.push_back(o.where("") + " " + p);
}

inline void read_synthetic(JsonReader::Object&& syn, SyntheticTaskSpec& spec) {
  std::string task = std::string(task_name(spec.task));
  syn.read("task", task);
  syn.reader().guard(syn.where("task"), [&] { spec.task = parse_task(task); });
  syn.read("num_classes", spec.num_classes);
  syn.read("ambiguous_classes", spec.ambiguous_classes);
  if (const Json* b = syn.get("bands")) syn.reader().guard(syn.where("bands"), [&] { spec.bands = b->get<std::vector<std::string>>(); });
  syn.read("image_size", spec.image_size);
  syn.read("blob_count", spec.blob_count);
  syn.read("smoothness", spec.smoothness);
  syn.read("texture", spec.texture);
  syn.read("illumination", spec.illumination);
  syn.read("noise", spec.noise);
  syn.read("train_size", spec.train_size);
  syn.read("val_size", spec.val_size);
  syn.read("test_size", spec.test_size);
  if (const Json* s2 = syn.get("class_spectra")) {
    syn.reader().guard(syn.where("class_spectra"), [&] { spec.class_spectra = s2->get<std::vector<std::vector<double>>>(); });
  }
}

}  // namespace detail

/// Parses and validates; throws ConfigError listing every problem found.
inline ExperimentConfig parse_experiment_config(const Json& root) {
  using detail::JsonReader;
  JsonReader r;
  ExperimentConfig c;
  {
    JsonReader::Object top(r, root, "config");
    top.read("seed", c.seed);
    top.read("output_dir", c.output_dir);

    if (const Json* d = top.get("data")) {
      JsonReader::Object data(r, *d, "config.data");
      std::string path;
      data.read("path", path);
      if (!path.empty()) c.dataset_path = path;
      if (const Json* s = data.get("synthetic")) {
        detail::read_synthetic(JsonReader::Object(r, *s, "config.data.synthetic"), c.synthetic);
        for (const auto& p : c.synthetic.problems()) r.problems.push_back("config.data.synthetic: " + p);
      }
    }

    if (const Json* m = top.get("model")) {
      JsonReader::Object model(r, *m, "config.model");
      model.read("image_size", c.model.image_size);
      model.read("patch_size", c.model.patch_size);
      model.read("depth", c.model.depth);
      model.read("embed_dim", c.model.embed_dim);
      model.read("num_heads", c.model.num_heads);
      model.read("mlp_ratio", c.model.mlp_ratio);
    }
    r.guard("config.model", [&] { c.model.validate(); });
    if (!c.dataset_path && c.model.image_size != c.synthetic.image_size) {
      r.problems.push_back("config.model.image_size (" + std::to_string(c.model.image_size) +
                           ") differs from config.data.synthetic.image_size (" +
                           std::to_string(c.synthetic.image_size) + ")");
    }

    if (const Json* p = top.get("pretrained")) {
      JsonReader::Object pre(r, *p, "config.pretrained");
      std::string source = "random";
      pre.read("source", source);
      if (source == "random") c.pretrained.source = PretrainSource::random;
      else if (source == "supervised") c.pretrained.source = PretrainSource::supervised;
      else r.problems.push_back("config.pretrained.source: expected 'random' or 'supervised', got '" + source + "'");
      pre.read("seed", c.pretrained.seed);
      if (const Json* t = pre.get("training")) detail::read_training(JsonReader::Object(r, *t, "config.pretrained.training"), c.pretrained.training);
    }

    if (const Json* m = top.get("method")) {
      JsonReader::Object method(r, *m, "config.method");
      std::string kind = "deflect";
      method.read("kind", kind);
      r.guard(method.where("kind"), [&] { c.method = PeftMethod::defaults(parse_method(kind)); });
      method.read("lora_rank", c.method.lora_rank);
      if (const Json* t = method.get("lora_targets")) {
        r.guard(method.where("lora_targets"), [&] { c.method.lora_targets = t->get<std::vector<std::string>>(); });
      }
      std::string input = c.method.input == StemInput::rgb ? "rgb" : "all";
      method.read("stem_input", input);
      if (input == "rgb") c.method.input = StemInput::rgb;
      else if (input == "all") c.method.input = StemInput::all;
      else r.problems.push_back("config.method.stem_input: expected 'rgb' or 'all', got '" + input + "'");
      std::string init = std::string(stem_init_name(c.method.stem_init));
      method.read("stem_init", init);
      r.guard(method.where("stem_init"), [&] { c.method.stem_init = parse_stem_init(init); });
    }

    if (const Json* a = top.get("adapter")) {
      JsonReader::Object ad(r, *a, "config.adapter");
      if (const Json* l = ad.get("layers")) r.guard(ad.where("layers"), [&] { c.adapter.layers = l->get<std::vector<std::size_t>>(); });
      if (const Json* rk = ad.get("rank")) {
        if (rk->is_null()) c.adapter.rank.reset();
        else if (rk->is_number_integer() && rk->get<std::int64_t>() > 0) c.adapter.rank = rk->get<std::size_t>();
        else r.problems.push_back("config.adapter.rank: expected a positive integer or null");
      }
      ad.read("epsilon", c.adapter.epsilon);
      ad.read("detach_reference_norm", c.adapter.detach_reference_norm);
      ad.read("reference_from_frozen_trajectory", c.adapter.reference_from_frozen_trajectory);
    } else if (c.method.kind == MethodKind::deflect && c.model.depth != 12) {
      r.guard("config.adapter.layers", [&] { c.adapter.layers = AdapterConfig::default_layers(c.model.depth); });
    }

    if (const Json* u = top.get("upe")) {
      JsonReader::Object upe(r, *u, "config.upe");
      upe.read("sample_fraction", c.upe.sample_fraction);
      upe.read("use_projection", c.upe.use_projection);
      upe.read("seed", c.upe.seed);
      if (const Json* st = upe.get("statistics")) {
        r.guard(upe.where("statistics"), [&] {
          c.upe.statistics.clear();
          for (const auto& s : st->get<std::vector<std::string>>()) c.upe.statistics.push_back(parse_statistic(s));
        });
      }
      if (const Json* idx = upe.get("indices")) {
        if (!idx->is_array()) r.problems.push_back("config.upe.indices: expected an array");
        else
          for (std::size_t i = 0; i < idx->size(); ++i) {
            const auto path = "config.upe.indices[" + std::to_string(i) + "]";
            JsonReader::Object def(r, (*idx)[i], path);
            SpectralIndexDef d;
            def.read("name", d.name);
            const Json* num = def.get("numerator");
            const Json* den = def.get("denominator");
            if (!num || !den) {
              r.problems.push_back(path + ": needs numerator and denominator");
              continue;
            }
            r.guard(path, [&] {
              d.numerator = detail::read_combination(*num);
              d.denominator = detail::read_combination(*den);
            });
            c.upe.indices.push_back(std::move(d));
          }
      }
    }

    if (const Json* t = top.get("training")) detail::read_training(JsonReader::Object(r, *t, "config.training"), c.training);
  }

  if (!c.dataset_path) {
    for (const auto& p : c.model_config().problems()) r.problems.push_back("config: " + p);
  } else {
    r.guard("config.method", [&] { c.method.validate(); });
    if (c.method.kind == MethodKind::deflect) r.guard("config.adapter", [&] { c.adapter.validate(c.model.depth); });
  }

  if (!r.problems.empty()) {
    std::string msg = "invalid experiment configuration (" + std::to_string(r.problems.size()) + " problem" +
                      (r.problems.size() == 1 ? "" : "s") + "):";
    for (const auto& p : r.problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  return c;
}

/// A synthetic task specification on its own (the object under data.synthetic).
inline SyntheticTaskSpec parse_synthetic_spec(const Json& j) {
  detail::JsonReader r;
  SyntheticTaskSpec spec;
  detail::read_synthetic(detail::JsonReader::Object(r, j, "spec"), spec);
  for (const auto& p : spec.problems()) r.problems.push_back("spec: " + p);
  if (!r.problems.empty()) {
    std::string msg = "invalid synthetic task specification:";
    for (const auto& p : r.problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  return spec;
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_experiment_config(j);
}

inline Json training_to_json(const TrainConfig& t) {
  return Json{{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"max_steps", t.max_steps},
              {"learning_rate", t.learning_rate},
              {"milestones", t.milestones},
              {"decay", t.decay},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"adam_eps", t.adam_eps},
              {"weight_decay", t.weight_decay},
              {"seed", t.seed},
              {"record_norms", t.record_norms},
              {"probe_images", t.probe_images},
              {"evaluate_val", t.evaluate_val}};
}

/// Canonical serialisation; parse_experiment_config(to_json(c)) reproduces c.
inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  Json data;
  if (c.dataset_path) data["path"] = *c.dataset_path;
  const auto& s = c.synthetic;
  data["synthetic"] = Json{{"task", task_name(s.task)},
                           {"num_classes", s.num_classes},
                           {"ambiguous_classes", s.ambiguous_classes},
                           {"bands", s.bands},
                           {"image_size", s.image_size},
                           {"blob_count", s.blob_count},
                           {"smoothness", s.smoothness},
                           {"texture", s.texture},
                           {"illumination", s.illumination},
                           {"noise", s.noise},
                           {"train_size", s.train_size},
                           {"val_size", s.val_size},
                           {"test_size", s.test_size}};
  if (!s.class_spectra.empty()) data["synthetic"]["class_spectra"] = s.class_spectra;
  j["data"] = data;
  j["model"] = Json{{"image_size", c.model.image_size}, {"patch_size", c.model.patch_size},
                    {"depth", c.model.depth},           {"embed_dim", c.model.embed_dim},
                    {"num_heads", c.model.num_heads},   {"mlp_ratio", c.model.mlp_ratio}};
  j["pretrained"] = Json{{"source", c.pretrained.source == PretrainSource::random ? "random" : "supervised"},
                         {"seed", c.pretrained.seed},
                         {"training", training_to_json(c.pretrained.training)}};
  j["method"] = Json{{"kind", method_name(c.method.kind)},
                     {"lora_rank", c.method.lora_rank},
                     {"lora_targets", c.method.lora_targets},
                     {"stem_input", c.method.input == StemInput::rgb ? "rgb" : "all"},
                     {"stem_init", stem_init_name(c.method.stem_init)}};
  j["adapter"] = Json{{"layers", c.adapter.layers},
                      {"rank", c.adapter.rank ? Json(*c.adapter.rank) : Json(nullptr)},
                      {"epsilon", c.adapter.epsilon},
                      {"detach_reference_norm", c.adapter.detach_reference_norm},
                      {"reference_from_frozen_trajectory", c.adapter.reference_from_frozen_trajectory}};
  Json stats = Json::array();
  for (auto st : c.upe.statistics) stats.push_back(statistic_name(st));
  Json indices = Json::array();
  for (const auto& d : c.upe.indices) {
    Json num = Json::object(), den = Json::object();
    for (const auto& [b, w] : d.numerator) num[b] = w;
    for (const auto& [b, w] : d.denominator) den[b] = w;
    indices.push_back(Json{{"name", d.name}, {"numerator", num}, {"denominator", den}});
  }
  j["upe"] = Json{{"sample_fraction", c.upe.sample_fraction},
                  {"use_projection", c.upe.use_projection},
                  {"seed", c.upe.seed},
                  {"statistics", stats},
                  {"indices", indices}};
  j["training"] = training_to_json(c.training);
  return j;
}

}  // namespace deflect
