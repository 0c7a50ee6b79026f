#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trigact/attacks.hpp"
#include "trigact/data.hpp"
#include "trigact/defenses.hpp"
#include "trigact/errors.hpp"
#include "trigact/io.hpp"
#include "trigact/models.hpp"
#include "trigact/training.hpp"

namespace trigact {

using json = nlohmann::json;

inline constexpr const char* kCodeVersion = "trigact-0.3";

enum class Procedure { kStandard, kFixedTrigger, kLearnableTrigger, kAdversarialPgd };

inline const char* procedure_name(Procedure p) {
  switch (p) {
    case Procedure::kStandard: return "standard";
    case Procedure::kFixedTrigger: return "fixed_trigger";
    case Procedure::kLearnableTrigger: return "learnable_trigger";
    case Procedure::kAdversarialPgd: return "adversarial_pgd";
  }
  return "?";
}

struct ModelSpec {
  std::string id;
  std::string arch;
  Procedure training = Procedure::kStandard;
  std::uint64_t seed = 0;
  double eps_t = 0;
  double step_alpha = 0;
  std::uint64_t trigger_seed = 0;
  double at_eps = 8.0 / 255.0;
  std::size_t at_steps = 7;
  double at_step = 2.0 / 255.0;
  TrainSchedule schedule;
  json raw;  // normalized spec, used for fingerprints

  bool triggered() const {
    return training == Procedure::kFixedTrigger || training == Procedure::kLearnableTrigger;
  }
};

struct VictimSpec {
  std::string id;
  std::string model;
  std::string group;  // column label in defense tables; defaults to id
  PreprocessorConfig defense;
};

struct NamedAttack {
  std::string id;
  AttackConfig cfg;
};

struct TheorySpec {
  std::vector<std::string> models;
  std::vector<double> flip_proportions = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<double> theorem2_eps;  // empty: {eps_t / 4, eps_t / 2, eps_t}
  std::size_t random_draws = 100;
  std::size_t linearization_samples = 500;
  std::uint64_t seed = 0;
};

struct AdvancedSpec {
  std::vector<std::string> surrogates;
  std::vector<std::string> victims;
};

struct DatasetSpec {
  std::string name = "synthetic10";
  std::string data_dir;
  double train_fraction = 1.0;
  double test_fraction = 1.0;
  SyntheticSpec synthetic;
  json raw;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  TrainSchedule schedule;
  std::vector<ModelSpec> models;
  std::vector<std::string> surrogates;
  std::vector<VictimSpec> victims;
  std::vector<NamedAttack> attacks;
  std::vector<std::string> sweep;  // victim ids forming the trigger-bound sweep table
  std::optional<TheorySpec> theory;
  std::optional<AdvancedSpec> advanced;
  bool clip_triggered = false;
  std::size_t parallel = 1;
  json raw;  // normalized document

  const ModelSpec& model(const std::string& id) const {
    for (const auto& m : models)
      if (m.id == id) return m;
    throw ConfigError("unknown model id '" + id + "'");
  }
  const VictimSpec& victim(const std::string& id) const {
    for (const auto& v : victims)
      if (v.id == id) return v;
    throw ConfigError("unknown victim id '" + id + "'");
  }
};

/// Collects every problem before failing, so one error lists all offending keys.
class ConfigErrors {
 public:
  void add(const std::string& where, const std::string& what) { items_.push_back(where + ": " + what); }
  bool empty() const { return items_.empty(); }
  [[noreturn]] void raise() const {
    std::string msg = "invalid experiment config:";
    for (const auto& i : items_) msg += "\n  " + i;
    throw ConfigError(msg);
  }

 private:
  std::vector<std::string> items_;
};

namespace detail {

/// A real given as a number or as a fraction string such as "8/255".
inline std::optional<double> parse_real(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    const auto slash = s.find('/');
    try {
      std::size_t used = 0;
      if (slash == std::string::npos) {
        double v = std::stod(s, &used);
        if (used == s.size()) return v;
      } else {
        const std::string a = s.substr(0, slash), b = s.substr(slash + 1);
        std::size_t ua = 0, ub = 0;
        double num = std::stod(a, &ua), den = std::stod(b, &ub);
        if (ua == a.size() && ub == b.size() && den != 0) return num / den;
      }
    } catch (const std::exception&) {
    }
  }
  return std::nullopt;
}

class Reader {
 public:
  Reader(const json& obj, std::string path, ConfigErrors& errs, std::set<std::string> allowed)
      : obj_(obj), path_(std::move(path)), errs_(errs) {
    if (!obj_.is_object()) {
      errs_.add(path_, "expected an object");
      return;
    }
    for (const auto& [k, _] : obj_.items())
      if (!allowed.count(k)) errs_.add(path_ + "." + k, "unknown key");
  }

  bool has(const std::string& k) const { return obj_.is_object() && obj_.contains(k); }
  const json& at(const std::string& k) const { return obj_.at(k); }
  std::string where(const std::string& k) const { return path_ + "." + k; }

  template <typename V>
  V get(const std::string& k, V fallback, bool required = false) {
    if (!has(k)) {
      if (required) errs_.add(where(k), "required key missing");
      return fallback;
    }
    const json& j = obj_.at(k);
    if constexpr (std::is_same_v<V, double>) {
      if (auto v = parse_real(j)) return *v;
      errs_.add(where(k), "expected a real number or a fraction string");
      return fallback;
    } else if constexpr (std::is_same_v<V, bool>) {
      if (j.is_boolean()) return j.get<bool>();
      errs_.add(where(k), "expected a boolean");
      return fallback;
    } else if constexpr (std::is_integral_v<V>) {
      if (j.is_number_integer() && j.get<long long>() >= 0) return j.get<V>();
      errs_.add(where(k), "expected a non-negative integer");
      return fallback;
    } else {
      if (j.is_string()) return j.get<std::string>();
      errs_.add(where(k), "expected a string");
      return fallback;
    }
  }

  std::vector<std::string> strings(const std::string& k) {
    std::vector<std::string> out;
    if (!has(k)) return out;
    if (!obj_.at(k).is_array()) {
      errs_.add(where(k), "expected a list of strings");
      return out;
    }
    for (const auto& e : obj_.at(k)) {
      if (e.is_string()) out.push_back(e.get<std::string>());
      else errs_.add(where(k), "expected a list of strings");
    }
    return out;
  }

  std::vector<double> reals(const std::string& k) {
    std::vector<double> out;
    if (!has(k)) return out;
    if (!obj_.at(k).is_array()) {
      errs_.add(where(k), "expected a list of reals");
      return out;
    }
    for (const auto& e : obj_.at(k)) {
      if (auto v = parse_real(e)) out.push_back(*v);
      else errs_.add(where(k), "expected a list of reals");
    }
    return out;
  }

 private:
  const json& obj_;
  std::string path_;
  ConfigErrors& errs_;
};

inline TrainSchedule read_schedule(Reader& r, TrainSchedule base) {
  base.epochs = r.get<std::size_t>("epochs", base.epochs);
  base.lr_initial = r.get<double>("lr", base.lr_initial);
  base.momentum = r.get<double>("momentum", base.momentum);
  base.weight_decay = r.get<double>("weight_decay", base.weight_decay);
  base.batch_size = r.get<std::size_t>("batch_size", base.batch_size);
  return base;
}

inline json schedule_json(const TrainSchedule& s) {
  return {{"epochs", s.epochs},
          {"lr", s.lr_initial},
          {"momentum", s.momentum},
          {"weight_decay", s.weight_decay},
          {"batch_size", s.batch_size},
          {"seed", s.seed},
          {"bn_momentum", s.bn_momentum}};
}

inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t s) {
  return base == 0 ? s : Rng::derive(base, s).next_u64();
}

}  // namespace detail

/// Parse and validate a config document. `seed_override` replaces the
/// top-level seed (the CLI's --seed).
inline ExperimentConfig parse_experiment_config(const json& doc, std::optional<std::uint64_t> seed_override = {}) {
  using detail::Reader;
  ConfigErrors errs;
  ExperimentConfig cfg;
  Reader top(doc, "config", errs,
             {"name", "seed", "dataset", "schedule", "models", "surrogates", "victims", "attacks", "sweep", "theory",
              "advanced", "clip_triggered", "parallel"});
  if (!doc.is_object()) errs.raise();
  cfg.name = top.get<std::string>("name", cfg.name);
  cfg.seed = seed_override.value_or(top.get<std::uint64_t>("seed", 0));
  cfg.clip_triggered = top.get<bool>("clip_triggered", false);
  cfg.parallel = std::max<std::size_t>(1, top.get<std::size_t>("parallel", 1));

  // dataset
  {
    static const json empty = json::object();
    const json& d = top.has("dataset") ? top.at("dataset") : empty;
    if (!top.has("dataset")) errs.add("config.dataset", "required key missing");
    Reader r(d, "config.dataset", errs, {"name", "data_dir", "train_fraction", "test_fraction", "synthetic"});
    cfg.dataset.name = r.get<std::string>("name", "", true);
    if (!cfg.dataset.name.empty() &&
        std::find(registered_datasets().begin(), registered_datasets().end(), cfg.dataset.name) ==
            registered_datasets().end())
      errs.add("config.dataset.name", "unknown dataset '" + cfg.dataset.name + "'");
    cfg.dataset.data_dir = r.get<std::string>("data_dir", "");
    cfg.dataset.train_fraction = r.get<double>("train_fraction", 1.0);
    cfg.dataset.test_fraction = r.get<double>("test_fraction", 1.0);
    for (const char* k : {"train_fraction", "test_fraction"}) {
      const double f = std::string(k) == "train_fraction" ? cfg.dataset.train_fraction : cfg.dataset.test_fraction;
      if (!(f > 0 && f <= 1)) errs.add(r.where(k), "must be in (0, 1]");
    }
    SyntheticSpec& s = cfg.dataset.synthetic;
    if (r.has("synthetic")) {
      Reader sr(r.at("synthetic"), "config.dataset.synthetic", errs,
                {"train_size", "test_size", "height", "width", "template_amplitude", "background_amplitude",
                 "noise_std", "max_shift", "template_seed"});
      s.train_size = sr.get<std::size_t>("train_size", s.train_size);
      s.test_size = sr.get<std::size_t>("test_size", s.test_size);
      s.height = sr.get<std::size_t>("height", s.height);
      s.width = sr.get<std::size_t>("width", s.width);
      s.template_amplitude = sr.get<double>("template_amplitude", s.template_amplitude);
      s.background_amplitude = sr.get<double>("background_amplitude", s.background_amplitude);
      s.noise_std = sr.get<double>("noise_std", s.noise_std);
      s.max_shift = int(sr.get<std::size_t>("max_shift", std::size_t(s.max_shift)));
      s.template_seed = sr.get<std::uint64_t>("template_seed", s.template_seed);
    }
    cfg.dataset.raw = {{"name", cfg.dataset.name},
                       {"train_fraction", cfg.dataset.train_fraction},
                       {"test_fraction", cfg.dataset.test_fraction}};
    if (cfg.dataset.name == "synthetic10")
      cfg.dataset.raw["synthetic"] = {{"train_size", s.train_size},
                                      {"test_size", s.test_size},
                                      {"height", s.height},
                                      {"width", s.width},
                                      {"template_amplitude", s.template_amplitude},
                                      {"background_amplitude", s.background_amplitude},
                                      {"noise_std", s.noise_std},
                                      {"max_shift", s.max_shift},
                                      {"template_seed", s.template_seed}};
  }

  // schedule
  if (top.has("schedule")) {
    Reader r(top.at("schedule"), "config.schedule", errs,
             {"epochs", "lr", "momentum", "weight_decay", "batch_size"});
    cfg.schedule = detail::read_schedule(r, cfg.schedule);
  }

  // models
  std::set<std::string> model_ids;
  if (!top.has("models") || !top.at("models").is_array() || top.at("models").empty())
    errs.add("config.models", "required non-empty list");
  else
    for (std::size_t i = 0; i < top.at("models").size(); ++i) {
      const std::string where = "config.models[" + std::to_string(i) + "]";
      Reader r(top.at("models")[i], where, errs,
               {"id", "arch", "training", "seed", "eps_t", "step_alpha", "trigger_seed", "at_eps", "at_steps",
                "at_step", "epochs", "lr", "momentum", "weight_decay", "batch_size"});
      ModelSpec m;
      m.id = r.get<std::string>("id", "", true);
      m.arch = r.get<std::string>("arch", "", true);
      if (!m.arch.empty() && !is_registered_architecture(m.arch))
        errs.add(where + ".arch", "unknown architecture '" + m.arch + "'");
      const std::string tr = r.get<std::string>("training", "standard");
      if (tr == "standard") m.training = Procedure::kStandard;
      else if (tr == "fixed_trigger") m.training = Procedure::kFixedTrigger;
      else if (tr == "learnable_trigger") m.training = Procedure::kLearnableTrigger;
      else if (tr == "adversarial_pgd") m.training = Procedure::kAdversarialPgd;
      else errs.add(where + ".training", "unknown training procedure '" + tr + "'");
      if (!r.has("seed")) errs.add(where + ".seed", "required key missing (seeds must be explicit)");
      m.seed = detail::mix_seed(cfg.seed, r.get<std::uint64_t>("seed", 0));
      m.schedule = detail::read_schedule(r, cfg.schedule);
      m.schedule.seed = m.seed;
      json raw = {{"id", m.id}, {"arch", m.arch}, {"training", tr}, {"seed", m.seed},
                  {"schedule", detail::schedule_json(m.schedule)}};
      if (m.training == Procedure::kFixedTrigger) {
        m.eps_t = r.get<double>("eps_t", 0, true);
        if (!(m.eps_t > 0)) errs.add(where + ".eps_t", "must be > 0");
        raw["eps_t"] = m.eps_t;
      }
      if (m.training == Procedure::kLearnableTrigger) {
        m.step_alpha = r.get<double>("step_alpha", 0, true);
        if (!(m.step_alpha > 0)) errs.add(where + ".step_alpha", "must be > 0");
        raw["step_alpha"] = m.step_alpha;
      }
      if (m.triggered()) {
        if (!r.has("trigger_seed")) errs.add(where + ".trigger_seed", "required key missing (seeds must be explicit)");
        m.trigger_seed = detail::mix_seed(cfg.seed, r.get<std::uint64_t>("trigger_seed", 0));
        raw["trigger_seed"] = m.trigger_seed;
      }
      if (m.training == Procedure::kAdversarialPgd) {
        m.at_eps = r.get<double>("at_eps", m.at_eps);
        m.at_steps = r.get<std::size_t>("at_steps", m.at_steps);
        m.at_step = r.get<double>("at_step", m.at_step);
        if (!(m.at_eps >= 0)) errs.add(where + ".at_eps", "must be >= 0");
        raw["at"] = {{"eps", m.at_eps}, {"steps", m.at_steps}, {"step", m.at_step}};
      }
      if (!(m.schedule.lr_initial > 0)) errs.add(where + ".lr", "must be > 0");
      if (m.schedule.batch_size < 1) errs.add(where + ".batch_size", "must be >= 1");
      if (!m.id.empty() && !model_ids.insert(m.id).second) errs.add(where + ".id", "duplicate model id '" + m.id + "'");
      m.raw = raw;
      cfg.models.push_back(std::move(m));
    }

  auto check_model_ref = [&](const std::string& where, const std::string& id) {
    if (!model_ids.count(id)) errs.add(where, "references unknown model '" + id + "'");
  };

  cfg.surrogates = top.strings("surrogates");
  if (cfg.surrogates.empty()) errs.add("config.surrogates", "required non-empty list");
  for (const auto& s : cfg.surrogates) check_model_ref("config.surrogates", s);

  // victims
  std::set<std::string> victim_ids;
  if (!top.has("victims") || !top.at("victims").is_array() || top.at("victims").empty())
    errs.add("config.victims", "required non-empty list");
  else
    for (std::size_t i = 0; i < top.at("victims").size(); ++i) {
      const std::string where = "config.victims[" + std::to_string(i) + "]";
      Reader r(top.at("victims")[i], where, errs, {"id", "model", "group", "defense"});
      VictimSpec v;
      v.model = r.get<std::string>("model", "", true);
      v.id = r.get<std::string>("id", v.model);
      v.group = r.get<std::string>("group", v.id);
      check_model_ref(where + ".model", v.model);
      if (r.has("defense")) {
        Reader d(r.at("defense"), where + ".defense", errs, {"kind", "bit_depth", "sigma", "scale_max", "seed"});
        try {
          v.defense.kind = parse_defense_kind(d.get<std::string>("kind", "none", true));
        } catch (const ConfigError& e) {
          errs.add(where + ".defense.kind", e.what());
        }
        v.defense.bit_depth = int(d.get<std::size_t>("bit_depth", 2));
        v.defense.sigma = d.get<double>("sigma", 1.0);
        v.defense.scale_max = d.get<double>("scale_max", 1.1);
        v.defense.seed = detail::mix_seed(cfg.seed, d.get<std::uint64_t>("seed", 0));
        try {
          v.defense.validate();
        } catch (const ConfigError& e) {
          errs.add(where + ".defense", e.what());
        }
      }
      if (!victim_ids.insert(v.id).second) errs.add(where + ".id", "duplicate victim id '" + v.id + "'");
      cfg.victims.push_back(std::move(v));
    }

  // attacks
  std::set<std::string> attack_ids;
  if (!top.has("attacks") || !top.at("attacks").is_array() || top.at("attacks").empty())
    errs.add("config.attacks", "required non-empty list");
  else
    for (std::size_t i = 0; i < top.at("attacks").size(); ++i) {
      const std::string where = "config.attacks[" + std::to_string(i) + "]";
      Reader r(top.at("attacks")[i], where, errs,
               {"id", "method", "eps", "attack_step", "iterations", "momentum_mu", "di_probability", "di_resize_max",
                "random_start", "seed"});
      NamedAttack a;
      const std::string method = r.get<std::string>("method", "", true);
      try {
        if (!method.empty()) a.cfg.method = parse_attack_method(method);
      } catch (const ConfigError& e) {
        errs.add(where + ".method", e.what());
      }
      a.id = r.get<std::string>("id", method);
      a.cfg.eps = r.get<double>("eps", a.cfg.eps);
      a.cfg.attack_step = r.get<double>("attack_step", a.cfg.attack_step);
      a.cfg.iterations = r.get<std::size_t>("iterations", a.cfg.iterations);
      a.cfg.momentum_mu = r.get<double>("momentum_mu", a.cfg.momentum_mu);
      a.cfg.di_probability = r.get<double>("di_probability", a.cfg.di_probability);
      a.cfg.di_resize_max = r.get<std::size_t>("di_resize_max", 0);
      if (r.has("random_start")) a.cfg.random_start = r.get<bool>("random_start", false);
      a.cfg.seed = detail::mix_seed(cfg.seed, r.get<std::uint64_t>("seed", 0));
      try {
        a.cfg.validate();
      } catch (const ConfigError& e) {
        errs.add(where, e.what());
      }
      if (!attack_ids.insert(a.id).second) errs.add(where + ".id", "duplicate attack id '" + a.id + "'");
      cfg.attacks.push_back(std::move(a));
    }

  cfg.sweep = top.strings("sweep");
  for (const auto& s : cfg.sweep)
    if (!victim_ids.count(s)) errs.add("config.sweep", "references unknown victim '" + s + "'");

  if (top.has("theory")) {
    Reader r(top.at("theory"), "config.theory", errs,
             {"models", "flip_proportions", "theorem2_eps", "random_draws", "linearization_samples", "seed"});
    TheorySpec t;
    t.models = r.strings("models");
    for (const auto& m : t.models) {
      check_model_ref("config.theory.models", m);
      if (model_ids.count(m) && !cfg.model(m).triggered())
        errs.add("config.theory.models", "model '" + m + "' has no trigger");
    }
    if (r.has("flip_proportions")) t.flip_proportions = r.reals("flip_proportions");
    for (double p : t.flip_proportions)
      if (!(p >= 0 && p <= 1)) errs.add("config.theory.flip_proportions", "proportions must be in [0, 1]");
    t.theorem2_eps = r.reals("theorem2_eps");
    t.random_draws = r.get<std::size_t>("random_draws", t.random_draws);
    t.linearization_samples = r.get<std::size_t>("linearization_samples", t.linearization_samples);
    t.seed = detail::mix_seed(cfg.seed, r.get<std::uint64_t>("seed", 0));
    cfg.theory = t;
  }

  if (top.has("advanced")) {
    Reader r(top.at("advanced"), "config.advanced", errs, {"surrogates", "victims"});
    AdvancedSpec a{r.strings("surrogates"), r.strings("victims")};
    for (const auto& s : a.surrogates) {
      check_model_ref("config.advanced.surrogates", s);
      if (model_ids.count(s) && !cfg.model(s).triggered())
        errs.add("config.advanced.surrogates", "advanced-scenario surrogate '" + s + "' must be trigger-trained");
    }
    for (const auto& v : a.victims)
      if (!victim_ids.count(v)) errs.add("config.advanced.victims", "references unknown victim '" + v + "'");
    if (a.surrogates.empty() || a.victims.empty()) errs.add("config.advanced", "needs surrogates and victims");
    cfg.advanced = a;
  }

  if (!errs.empty()) errs.raise();

  cfg.raw = doc;
  cfg.raw["seed"] = cfg.seed;
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                               std::optional<std::uint64_t> seed_override = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(doc, seed_override);
}

inline std::string fingerprint_of(const json& j) { return sha256_hex(j.dump()); }

}  // namespace trigact
