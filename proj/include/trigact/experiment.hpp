#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "trigact/checkpoint.hpp"
#include "trigact/config.hpp"
#include "trigact/evaluation.hpp"
#include "trigact/report.hpp"
#include "trigact/theory.hpp"
#include "trigact/training.hpp"

namespace trigact {

namespace fs = std::filesystem;

/// Run `fn(i)` for i in [0, n) on up to `workers` threads; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        {
          std::lock_guard lock(mu);
          if (failure) return;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".part";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
  }
  fs::rename(tmp, path);
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct RunOptions {
  fs::path out = "runs/experiment";
  bool resume = false;
  std::size_t parallel = 0;  // 0: take the config value
};

/// Stage statistics, mostly for tests of the caching contract.
struct StageCounters {
  std::size_t trained = 0, train_hits = 0;
  std::size_t attacked = 0, attack_hits = 0;
  std::size_t evaluated = 0, eval_hits = 0;
  std::size_t theory_runs = 0, theory_hits = 0;
};

/// Artifact directory layout:
///   experiment.json                 normalized config + fingerprint
///   checkpoints/<model>.tac         trained weights (+ trigger)
///   logs/<model>.jsonl              per-epoch training log
///   timing/<model>.json             wall-clock data (excluded from hashes)
///   triggers/<model>.{tac,ppm}      trigger export
///   perturbations/<surrogate>__<attack>.tac
///   results/results.{csv,json}      result rows, matrices, diagnostics
///   theory/<model>.json, theory/flip_<model>.csv
///   report/...                      tables, plots, JSON mirror
///   manifest.json
class Experiment {
 public:
  Experiment(ExperimentConfig cfg, RunOptions opt) : cfg_(std::move(cfg)), opt_(std::move(opt)) {
    workers_ = opt_.parallel ? opt_.parallel : cfg_.parallel;
    claim_directory();
  }

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& out() const { return opt_.out; }
  const StageCounters& counters() const { return counters_; }

  fs::path checkpoint_path(const std::string& model) const { return opt_.out / "checkpoints" / (model + ".tac"); }
  fs::path perturbation_path(const std::string& surrogate, const std::string& attack) const {
    return opt_.out / "perturbations" / (surrogate + "__" + attack + ".tac");
  }
  fs::path results_path() const { return opt_.out / "results" / "results.json"; }

  void train() {
    std::vector<std::string> ids;
    for (const auto& m : cfg_.models) ids.push_back(m.id);
    ensure_models(ids);
    write_manifest();
  }

  void attack() {
    ensure_perturbations();
    write_manifest();
  }

  void eval() {
    evaluate();
    write_manifest();
  }

  void theory() {
    run_theory();
    write_manifest();
  }

  void report() {
    emit_report();
    write_manifest();
  }

  void all() {
    train();
    evaluate();
    if (cfg_.theory) run_theory();
    emit_report();
    write_manifest();
  }

  // ---- data ----

  const LabeledImageSet& train_set() {
    std::call_once(train_once_, [&] {
      train_set_ = load_dataset(cfg_.dataset.name, Split::kTrain, cfg_.dataset.train_fraction,
                                detail::mix_seed(cfg_.seed, 0xd1), cfg_.dataset.data_dir, cfg_.dataset.synthetic);
    });
    return train_set_;
  }

  const LabeledImageSet& test_set() {
    std::call_once(test_once_, [&] {
      test_set_ = load_dataset(cfg_.dataset.name, Split::kTest, cfg_.dataset.test_fraction,
                               detail::mix_seed(cfg_.seed, 0xd2), cfg_.dataset.data_dir, cfg_.dataset.synthetic);
    });
    return test_set_;
  }

  // ---- fingerprints ----

  std::string dataset_fingerprint() const {
    return fingerprint_of({{"version", kCodeVersion}, {"dataset", cfg_.dataset.raw}, {"seed", cfg_.seed}});
  }

  std::string model_fingerprint(const ModelSpec& m) const {
    json j = {{"version", kCodeVersion}, {"dataset", dataset_fingerprint()}, {"model", m.raw}};
    if (m.triggered()) j["clip_triggered"] = cfg_.clip_triggered;
    return fingerprint_of(j);
  }

  std::string attack_fingerprint(const std::string& surrogate, const NamedAttack& a) const {
    return fingerprint_of({{"version", kCodeVersion},
                           {"dataset", dataset_fingerprint()},
                           {"surrogate", model_fingerprint(cfg_.model(surrogate))},
                           {"attack", a.cfg.describe()}});
  }

  // ---- checkpoints ----

  /// Train every listed model whose checkpoint is missing; verify the rest.
  void ensure_models(const std::vector<std::string>& ids) {
    std::vector<std::string> todo;
    for (const auto& id : ids) {
      if (ready_.count(id)) continue;
      const ModelSpec& m = cfg_.model(id);
      const fs::path p = checkpoint_path(id);
      if (fs::exists(p)) {
        const std::string fp = Container::load(p).get_text("fingerprint");
        if (fp != model_fingerprint(m))
          throw FingerprintConflict(p.string() + " was produced by a different configuration; refusing to overwrite");
        ++counters_.train_hits;
        ready_.insert(id);
        spdlog::info("train {}: cache hit", id);
      } else if (std::find(todo.begin(), todo.end(), id) == todo.end()) {
        todo.push_back(id);
      }
    }
    if (todo.empty()) return;
    train_set();
    parallel_for(todo.size(), workers_, [&](std::size_t i) { train_one(cfg_.model(todo[i])); });
    counters_.trained += todo.size();
    ready_.insert(todo.begin(), todo.end());
  }

  const Checkpoint<float>& checkpoint(const std::string& id) {
    std::lock_guard lock(ckpt_mu_);
    auto it = ckpts_.find(id);
    if (it != ckpts_.end()) return it->second;
    const fs::path p = checkpoint_path(id);
    if (!fs::exists(p)) throw ContractError("no checkpoint for model '" + id + "'; run the train stage first");
    auto ck = Checkpoint<float>::load(p);
    if (ck.fingerprint != model_fingerprint(cfg_.model(id)))
      throw FingerprintConflict(p.string() + " does not match the current configuration");
    file_hashes_[id] = sha256_file(p);
    return ckpts_.emplace(id, std::move(ck)).first->second;
  }

  std::string checkpoint_hash(const std::string& id) {
    checkpoint(id);
    std::lock_guard lock(ckpt_mu_);
    return file_hashes_.at(id);
  }

  Victim<float> victim(const VictimSpec& v) {
    const auto& ck = checkpoint(v.model);
    Victim<float> out{v.id, ck.model, v.defense, checkpoint_hash(v.model)};
    if (ck.trigger) out.model = ck.triggered();
    return out;
  }

  // ---- perturbations ----

  std::vector<std::string> attacked_surrogates() const {
    std::vector<std::string> s = cfg_.surrogates;
    if (cfg_.advanced)
      for (const auto& a : cfg_.advanced->surrogates)
        if (std::find(s.begin(), s.end(), a) == s.end()) s.push_back(a);
    return s;
  }

  void ensure_perturbations() {
    const auto surrogates = attacked_surrogates();
    ensure_models(surrogates);
    struct Cell {
      std::string surrogate;
      const NamedAttack* attack;
    };
    std::vector<Cell> todo;
    for (const auto& s : surrogates)
      for (const auto& a : cfg_.attacks) {
        const fs::path p = perturbation_path(s, a.id);
        if (fs::exists(p)) {
          if (Container::load(p).get_text("attack_fingerprint") != attack_fingerprint(s, a))
            throw FingerprintConflict(p.string() + " was produced by a different configuration; refusing to overwrite");
          ++counters_.attack_hits;
        } else {
          todo.push_back({s, &a});
        }
      }
    if (todo.empty()) return;
    const auto& test = test_set();
    for (const auto& c : todo) checkpoint(c.surrogate);
    parallel_for(todo.size(), workers_, [&](std::size_t i) {
      const auto& c = todo[i];
      const auto& ck = checkpoint(c.surrogate);
      spdlog::info("attack {} on surrogate {} ({} samples)", c.attack->id, c.surrogate, test.size());
      PerturbationSet<float> ps;
      ps.indices.resize(test.size());
      std::iota(ps.indices.begin(), ps.indices.end(), std::size_t(0));
      ps.delta = ck.trigger ? run_attack_chunked(ck.triggered(), test.images, test.labels, c.attack->cfg)
                            : run_attack_chunked(ck.model, test.images, test.labels, c.attack->cfg);
      ps.attack_fingerprint = attack_fingerprint(c.surrogate, *c.attack);
      ps.surrogate_hash = checkpoint_hash(c.surrogate);
      ps.surrogate_id = c.surrogate;
      ps.to_container().save(perturbation_path(c.surrogate, c.attack->id));
    });
    counters_.attacked += todo.size();
  }

  PerturbationSet<float> perturbation(const std::string& surrogate, const NamedAttack& a) {
    auto ps = PerturbationSet<float>::from_container(Container::load(perturbation_path(surrogate, a.id)));
    if (ps.attack_fingerprint != attack_fingerprint(surrogate, a))
      throw FingerprintConflict(perturbation_path(surrogate, a.id).string() + " does not match the configuration");
    if (ps.surrogate_hash != checkpoint_hash(surrogate))
      throw FingerprintConflict(perturbation_path(surrogate, a.id).string() + " was crafted on another checkpoint");
    return ps;
  }

  // ---- evaluation ----

  std::string eval_fingerprint() {
    json j = {{"version", kCodeVersion}, {"dataset", dataset_fingerprint()}};
    for (const auto& v : cfg_.victims)
      j["victims"].push_back({{"id", v.id}, {"group", v.group}, {"model", model_fingerprint(cfg_.model(v.model))},
                              {"defense", v.defense.describe()}});
    for (const auto& s : attacked_surrogates())
      for (const auto& a : cfg_.attacks) j["cells"].push_back(attack_fingerprint(s, a));
    j["surrogates"] = cfg_.surrogates;
    if (cfg_.advanced) j["advanced"] = {{"surrogates", cfg_.advanced->surrogates}, {"victims", cfg_.advanced->victims}};
    return fingerprint_of(j);
  }

  /// Fill every robustness matrix; results/results.json is the single source for reports.
  json evaluate() {
    const std::string fp = eval_fingerprint();
    if (fs::exists(results_path())) {
      json old = json::parse(read_text_file(results_path()));
      if (old.value("fingerprint", "") == fp) {
        ++counters_.eval_hits;
        spdlog::info("eval: cache hit");
        return old;
      }
      if (!opt_.resume)
        throw FingerprintConflict(results_path().string() +
                                  " belongs to a different configuration; use --resume to recompute derived results");
    }
    std::vector<std::string> victim_models;
    for (const auto& v : cfg_.victims) victim_models.push_back(v.model);
    ensure_models(victim_models);
    ensure_perturbations();
    const auto& test = test_set();
    const std::span<const std::int32_t> labels(test.labels);

    std::vector<Victim<float>> victims;
    for (const auto& v : cfg_.victims) victims.push_back(victim(v));
    std::map<std::string, std::size_t> victim_index;
    for (std::size_t i = 0; i < victims.size(); ++i) victim_index[victims[i].id] = i;

    std::vector<double> clean(victims.size());
    parallel_for(victims.size(), workers_, [&](std::size_t i) { clean[i] = clean_accuracy(victims[i], test.images, labels); });

    // Every (victim, surrogate, attack) cell that any matrix needs.
    struct Cell {
      std::size_t victim;
      std::string surrogate;
      std::size_t attack;
      double value = 0;
      double no_trigger = -1;
    };
    std::vector<Cell> cells;
    auto need = [&](std::size_t v, const std::string& s, std::size_t a) {
      for (const auto& c : cells)
        if (c.victim == v && c.surrogate == s && c.attack == a) return;
      cells.push_back({v, s, a});
    };
    for (std::size_t a = 0; a < cfg_.attacks.size(); ++a)
      for (std::size_t v = 0; v < victims.size(); ++v) {
        for (const auto& s : cfg_.surrogates) need(v, s, a);
      }
    if (cfg_.advanced)
      for (std::size_t a = 0; a < cfg_.attacks.size(); ++a)
        for (const auto& vid : cfg_.advanced->victims)
          for (const auto& s : cfg_.advanced->surrogates) need(victim_index.at(vid), s, a);

    std::map<std::pair<std::string, std::size_t>, PerturbationSet<float>> perts;
    for (const auto& c : cells)
      if (!perts.count({c.surrogate, c.attack}))
        perts.emplace(std::make_pair(c.surrogate, c.attack), perturbation(c.surrogate, cfg_.attacks[c.attack]));

    parallel_for(cells.size(), workers_, [&](std::size_t i) {
      Cell& c = cells[i];
      const auto& ps = perts.at({c.surrogate, c.attack});
      c.value = robust_accuracy(victims[c.victim], test.images, labels, ps,
                                attack_fingerprint(c.surrogate, cfg_.attacks[c.attack]));
      if (victims[c.victim].triggered())
        c.no_trigger = accuracy(victims[c.victim].predict_without_trigger(test.images + ps.delta), labels);
    });
    counters_.evaluated += cells.size();
    auto cell_value = [&](std::size_t v, const std::string& s, std::size_t a) -> const Cell& {
      for (const auto& c : cells)
        if (c.victim == v && c.surrogate == s && c.attack == a) return c;
      throw ContractError("missing evaluation cell");
    };

    std::vector<ResultRow> rows;
    json matrices = json::array(), advanced = json::array();
    std::vector<std::string> victim_ids;
    for (const auto& v : victims) victim_ids.push_back(v.id);
    for (std::size_t a = 0; a < cfg_.attacks.size(); ++a) {
      const auto& att = cfg_.attacks[a];
      RobustnessMatrix m(cfg_.surrogates, victim_ids, att.id);
      for (const auto& s : cfg_.surrogates) m.fingerprints.push_back(attack_fingerprint(s, att));
      for (std::size_t v = 0; v < victims.size(); ++v)
        for (std::size_t s = 0; s < cfg_.surrogates.size(); ++s) {
          const double r = cell_value(v, cfg_.surrogates[s], a).value;
          m.set(v, s, r);
          rows.push_back({cfg_.dataset.name, victims[v].id, victims[v].defense.describe(), cfg_.surrogates[s],
                          att.id + " " + att.cfg.describe(), att.cfg.eps, r, clean[v], cfg_.seed,
                          victims[v].checkpoint_hash, checkpoint_hash(cfg_.surrogates[s])});
        }
      matrices.push_back(to_json(m));

      if (cfg_.advanced) {
        const auto& adv = *cfg_.advanced;
        std::vector<std::size_t> vidx;
        for (const auto& vid : adv.victims) vidx.push_back(victim_index.at(vid));
        RobustnessMatrix am(adv.surrogates, adv.victims, att.id);
        json flags = json::array();
        for (std::size_t v = 0; v < vidx.size(); ++v)
          for (std::size_t s = 0; s < adv.surrogates.size(); ++s) {
            am.set(v, s, cell_value(vidx[v], adv.surrogates[s], a).value);
            const ModelSpec& sm = cfg_.model(adv.surrogates[s]);
            const ModelSpec& vm = cfg_.model(cfg_.victim(adv.victims[v]).model);
            if (vm.triggered() && sm.trigger_seed == vm.trigger_seed) {
              spdlog::warn("advanced scenario: surrogate {} shares trigger seed {} with victim {}; "
                           "this attacker is unrealistically strong",
                           sm.id, sm.trigger_seed, adv.victims[v]);
              flags.push_back({{"victim", adv.victims[v]}, {"surrogate", sm.id}, {"trigger_seed_collision", true}});
            }
          }
        json naive = json::array();
        for (std::size_t v = 0; v < vidx.size(); ++v) naive.push_back(m.victim_mean(vidx[v]));
        json advm = json::array();
        for (std::size_t v = 0; v < vidx.size(); ++v) advm.push_back(am.victim_mean(v));
        advanced.push_back({{"matrix", to_json(am)}, {"advanced_mean", advm}, {"naive_mean", naive}, {"flags", flags}});
      }
    }

    json diag = json::array();
    for (std::size_t v = 0; v < victims.size(); ++v) {
      json d = {{"victim_id", victims[v].id}, {"triggered", victims[v].triggered()}, {"clean_acc", clean[v]}};
      if (victims[v].triggered()) {
        d["clean_acc_without_trigger"] = accuracy(victims[v].predict_without_trigger(test.images), labels);
        json adv = json::array();
        for (const auto& c : cells)
          if (c.victim == v)
            adv.push_back({{"surrogate", c.surrogate}, {"attack", cfg_.attacks[c.attack].id}, {"acc", c.no_trigger}});
        d["adversarial_acc_without_trigger"] = adv;
      }
      diag.push_back(d);
    }

    json results = {{"fingerprint", fp},
                    {"dataset", cfg_.dataset.name},
                    {"test_size", test.size()},
                    {"rows", results_to_json(rows)},
                    {"matrices", matrices},
                    {"diagnostics", diag}};
    if (cfg_.advanced) results["advanced"] = advanced;
    write_text_file(results_path(), results.dump(2) + "\n");
    write_text_file(opt_.out / "results" / "results.csv", results_to_csv(rows));
    return results;
  }

  // ---- theory ----

  json theory_for(const std::string& id) {
    const ModelSpec& m = cfg_.model(id);
    const TheorySpec& t = *cfg_.theory;
    json spec = {{"version", kCodeVersion},
                 {"model", model_fingerprint(m)},
                 {"flip", t.flip_proportions},
                 {"eps", t.theorem2_eps},
                 {"draws", t.random_draws},
                 {"lin", t.linearization_samples},
                 {"seed", t.seed}};
    const std::string fp = fingerprint_of(spec);
    const fs::path p = opt_.out / "theory" / (id + ".json");
    if (fs::exists(p)) {
      json old = json::parse(read_text_file(p));
      if (old.value("fingerprint", "") == fp) {
        ++counters_.theory_hits;
        return old;
      }
      if (!opt_.resume) throw FingerprintConflict(p.string() + " belongs to a different configuration");
    }
    const auto& ck = checkpoint(id);
    const Trigger<float>& trig = *ck.trigger;
    const auto& train = train_set();
    const auto& test = test_set();
    ClassifierProbe<float> probe(ck.model);
    auto align_json = [&](const LabeledImageSet& d) {
      const auto r = gradient_alignment(probe, trig, d.images, d.labels);
      return json{{"dot_product", r.dot_product},
                  {"sign_agreement", r.sign_agreement},
                  {"log_c", r.log_c},
                  {"ratio", r.ratio},
                  {"relative_gap", std::abs(r.dot_product + r.log_c) / r.log_c}};
    };
    json out = {{"fingerprint", fp}, {"model", id}};
    out["alignment_test"] = align_json(test);
    out["alignment_train"] = align_json(train);
    out["alignment_gap"] = out["alignment_test"]["dot_product"].get<double>() -
                           out["alignment_train"]["dot_product"].get<double>();

    const double eps_t = trig.mode == TriggerMode::kFixed ? trig.eps_t : double(linf_norm<float>(trig.values.values()));
    std::vector<double> eps_list = t.theorem2_eps;
    if (eps_list.empty()) eps_list = {eps_t / 4, eps_t / 2, eps_t};
    out["theorem2"] = json::array();
    for (std::size_t i = 0; i < eps_list.size(); ++i) {
      const auto r = theorem2_check(probe, trig, eps_list[i], test.images, test.labels, t.random_draws,
                                    Rng::derive(t.seed, i).next_u64());
      out["theorem2"].push_back({{"eps", r.eps},
                                 {"eps_t", r.eps_t},
                                 {"eps_t_substituted", r.eps_t_substituted},
                                 {"bound", r.bound},
                                 {"loss_zero", r.loss_zero},
                                 {"loss_star", r.loss_star},
                                 {"gain_star", r.loss_star - r.loss_zero},
                                 {"max_random_gain", r.max_random_gain},
                                 {"fraction_star_beats_random", r.fraction_star_beats_random}});
    }
    const auto flip = flip_experiment(probe, trig, t.flip_proportions, test.images, test.labels, t.seed);
    out["flip"] = {{"proportions", flip.proportions}, {"losses", flip.losses}, {"accuracies", flip.accuracies}};
    const auto lin = linearization_error(probe, trig, test.images, test.labels, t.linearization_samples, t.seed);
    out["linearization"] = {{"mean", lin.mean}, {"median", lin.median}, {"max", lin.max}, {"count", lin.count}};
    out["trigger_mse_x100"] = trigger_magnitude(trig);
    out["eps_t"] = eps_t;

    std::string csv = "p,loss,accuracy\n";
    for (std::size_t i = 0; i < flip.proportions.size(); ++i)
      csv += format_real(flip.proportions[i]) + "," + format_real(flip.losses[i]) + "," +
             format_real(flip.accuracies[i]) + "\n";
    write_text_file(opt_.out / "theory" / ("flip_" + id + ".csv"), csv);
    write_text_file(p, out.dump(2) + "\n");
    ++counters_.theory_runs;
    return out;
  }

  json run_theory() {
    if (!cfg_.theory) throw ConfigError("config has no theory section");
    ensure_models(cfg_.theory->models);
    json all = json::object();
    for (const auto& id : cfg_.theory->models) all[id] = theory_for(id);
    return all;
  }

  // ---- report ----

  ReportBundle emit_report() {
    json results;
    if (fs::exists(results_path())) results = json::parse(read_text_file(results_path()));
    json theory = json::object();
    if (cfg_.theory)
      for (const auto& id : cfg_.theory->models) {
        const fs::path p = opt_.out / "theory" / (id + ".json");
        if (fs::exists(p)) theory[id] = json::parse(read_text_file(p));
      }
    ReportBundle b = build_report(cfg_, results, theory);
    write_report(b, opt_.out / "report");
    return b;
  }

  // ---- manifest ----

  json manifest() const {
    json files = json::array();
    std::vector<fs::path> paths;
    if (fs::exists(opt_.out))
      for (const auto& e : fs::recursive_directory_iterator(opt_.out))
        if (e.is_regular_file()) paths.push_back(fs::relative(e.path(), opt_.out));
    std::sort(paths.begin(), paths.end());
    for (const auto& rel : paths) {
      const std::string r = rel.generic_string();
      if (r == "manifest.json" || r.ends_with(".part")) continue;
      json f = {{"path", r}};
      if (r.starts_with("timing/")) {
        f["volatile"] = true;
      } else {
        f["bytes"] = fs::file_size(opt_.out / rel);
        f["sha256"] = sha256_file(opt_.out / rel);
      }
      files.push_back(f);
    }
    return {{"code_version", kCodeVersion}, {"config_fingerprint", config_fingerprint()}, {"files", files}};
  }

  void write_manifest() const { write_text_file(opt_.out / "manifest.json", manifest().dump(2) + "\n"); }

  std::string config_fingerprint() const { return fingerprint_of({{"version", kCodeVersion}, {"config", cfg_.raw}}); }

 private:
  void claim_directory() {
    const fs::path p = opt_.out / "experiment.json";
    if (fs::exists(p)) {
      const json old = json::parse(read_text_file(p));
      if (old.value("fingerprint", "") != config_fingerprint() && !opt_.resume)
        throw FingerprintConflict(opt_.out.string() +
                                  " holds a run with a different configuration; pass --resume to reuse matching "
                                  "artifacts or choose another --out");
    }
    write_text_file(p, json{{"fingerprint", config_fingerprint()}, {"code_version", kCodeVersion}, {"config", cfg_.raw}}
                               .dump(2) +
                           "\n");
  }

  void train_one(const ModelSpec& m) {
    const auto& data = train_set();
    spdlog::info("train {} ({} {}, {})", m.id, m.arch, procedure_name(m.training), m.schedule.describe());
    const Shape in{1, data.images.shape().c, data.images.shape().h, data.images.shape().w};
    Classifier<float> model = build_model<float>(m.arch, data.class_count, m.seed, in);
    Checkpoint<float> ck{model, std::nullopt, cfg_.clip_triggered,
                         {{"id", m.id}, {"spec", m.raw}, {"dataset", cfg_.dataset.raw}}, model_fingerprint(m)};
    TrainHooks<float> hooks;
    std::vector<double> seconds;
    hooks.on_epoch = [&](const EpochRecord& r) {
      seconds.push_back(r.seconds);
      spdlog::info("  {} epoch {}/{} loss {:.4f} clean {:.3f} trig {:.3f}", m.id, r.epoch, m.schedule.epochs,
                   r.loss_total, r.clean_acc, r.triggered_acc);
    };
    hooks.on_abort = [&](const Classifier<float>& last, const Trigger<float>* trig) {
      Checkpoint<float> bad = ck;
      bad.model = last;
      if (trig) bad.trigger = *trig;
      bad.fingerprint = "aborted";
      bad.save(opt_.out / "checkpoints" / (m.id + ".aborted.tac"));
    };
    TrainLog log;
    switch (m.training) {
      case Procedure::kStandard: {
        auto r = train_standard(std::move(model), data, m.schedule, hooks);
        ck.model = std::move(r.model);
        log = std::move(r.log);
        break;
      }
      case Procedure::kAdversarialPgd: {
        auto r = train_adversarial_pgd(std::move(model), data, m.schedule, m.at_eps, m.at_steps, m.at_step, hooks);
        ck.model = std::move(r.model);
        log = std::move(r.log);
        break;
      }
      case Procedure::kFixedTrigger:
      case Procedure::kLearnableTrigger: {
        const bool fixed = m.training == Procedure::kFixedTrigger;
        auto trig = fixed ? init_fixed_trigger<float>(in, m.eps_t, m.trigger_seed)
                          : init_learnable_trigger<float>(in, m.step_alpha, m.trigger_seed);
        auto r = fixed ? train_fixed_trigger(std::move(model), std::move(trig), data, m.schedule, hooks,
                                             cfg_.clip_triggered)
                       : train_learnable_trigger(std::move(model), std::move(trig), data, m.schedule, hooks,
                                                 cfg_.clip_triggered);
        ck.model = std::move(r.tm.model);
        ck.trigger = std::move(r.tm.trig);
        log = std::move(r.log);
        export_trigger(*ck.trigger, opt_.out / "triggers" / m.id);
        break;
      }
    }
    std::string jsonl;
    for (auto rec : log.epochs) {
      rec.seconds = 0;
      json j = to_json(rec);
      j.erase("seconds");
      jsonl += j.dump() + "\n";
    }
    write_text_file(opt_.out / "logs" / (m.id + ".jsonl"), jsonl);
    double total = 0;
    for (double s : seconds) total += s;
    write_text_file(opt_.out / "timing" / (m.id + ".json"),
                    json{{"procedure", procedure_name(m.training)},
                         {"epoch_seconds", seconds},
                         {"mean_epoch_seconds", seconds.empty() ? 0.0 : total / double(seconds.size())}}
                            .dump(2));
    fs::create_directories(checkpoint_path(m.id).parent_path());
    const fs::path tmp = checkpoint_path(m.id).string() + ".part";
    ck.save(tmp);
    fs::rename(tmp, checkpoint_path(m.id));
  }

  ExperimentConfig cfg_;
  RunOptions opt_;
  std::size_t workers_ = 1;
  StageCounters counters_;
  LabeledImageSet train_set_, test_set_;
  std::once_flag train_once_, test_once_;
  std::mutex ckpt_mu_;
  std::map<std::string, Checkpoint<float>> ckpts_;
  std::map<std::string, std::string> file_hashes_;
  std::set<std::string> ready_;  // checkpoints verified or trained by this instance
};

}  // namespace trigact
