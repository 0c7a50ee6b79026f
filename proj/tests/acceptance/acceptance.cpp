// Acceptance run: twelve criteria, one PASS/FAIL line each. Exact-oracle
// criteria run in seconds; desk criteria train (or reuse from --cache) the
// model zoo of configs/desk.json.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "helpers.hpp"
#include "linear_oracle.hpp"
#include "trigact/experiment.hpp"

using namespace trigact;
using trigact::testing::random_images;
using trigact::testing::random_labels;
using trigact::testing::rel_err;
namespace linear_oracle = trigact::testing::linear_oracle;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt_num(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

std::string pts(double v) { return fmt_num(100 * v, 4); }

// ---- 1. metric algebra ----

Verdict metric_algebra() {
  Rng rng(2024);
  double worst = 0;
  for (int k = 0; k < 1000; ++k) {
    const std::size_t nv = 1 + rng.below(12), ns = 1 + rng.below(12);
    std::vector<std::string> sur, vic;
    for (std::size_t j = 0; j < ns; ++j) sur.push_back("s" + std::to_string(j));
    for (std::size_t i = 0; i < nv; ++i) vic.push_back("v" + std::to_string(i));
    RobustnessMatrix m(sur, vic, "pgd");
    long double grand = 0;
    for (std::size_t i = 0; i < nv; ++i)
      for (std::size_t j = 0; j < ns; ++j) {
        const double v = rng.uniform(0, 1);
        m.set(i, j, v);
        grand += v;
      }
    grand /= (long double)(nv * ns);
    worst = std::max(worst, std::abs(mean_over_victims(m) - double(grand)));
  }
  return {worst <= 1e-12, "max |mean-of-means - grand mean| = " + fmt_num(worst, 3) + " over 1000 matrices"};
}

// ---- 2. attack oracle ----

Verdict attack_oracle() {
  using linear_oracle::LinearBinary;
  LinearBinary model;
  Rng r(9);
  const Shape s{40, 3, 8, 8};
  for (std::size_t i = 0; i < s.per_sample(); ++i) model.w.push_back(r.uniform(-1, 1));
  // Pixels near both ends of the range exercise the box constraint.
  Tensor<double> x = random_images<double>(s, 3);
  for (std::size_t i = 0; i < x.size(); i += 7) x[i] = (i / 7) % 2 ? 1.0 : 0.0;
  const auto y = random_labels(s.n, 2, 4);
  const double eps = 8.0 / 255.0;

  auto cfg_for = [&](AttackMethod m) {
    AttackConfig c;
    c.method = m;
    c.eps = eps;
    c.attack_step = 2.0 / 255.0;
    c.iterations = 20;
    c.seed = 5;
    return c;
  };

  std::vector<std::string> problems;
  double conv_err = 0;
  const auto want = linear_oracle::optimal_delta(model, x, y, eps);
  for (auto m : {AttackMethod::kIfgsm, AttackMethod::kPgd}) {
    const auto d = run_attack(model, x, y, cfg_for(m));
    for (std::size_t i = 0; i < d.size(); ++i) conv_err = std::max(conv_err, std::abs(d[i] - want[i]));
  }
  if (conv_err > 1e-7) problems.push_back("convergence error " + fmt_num(conv_err, 3));

  // Iterate-for-iterate equivalences, on the linear model and on a small net.
  auto iterates = [](const auto& model, const auto& x, const auto& y, const AttackConfig& c) {
    using Tn = std::decay_t<decltype(x)>;
    std::vector<Tn> out;
    AttackObserver<typename Tn::value_type> obs = [&](std::size_t, const Tn& d) { out.push_back(d); };
    run_attack(model, x, y, c, &obs);
    return out;
  };
  const auto net = build_model<double>("tiny_conv", 10, 3);
  const auto xn = random_images<double>({6, 3, 16, 16}, 8);
  const auto yn = random_labels(6, 10, 9);
  bool mi_same = true, di_same = true;
  auto compare = [&](auto&& model, const auto& xx, const auto& yy) {
    auto ifgsm = cfg_for(AttackMethod::kIfgsm);
    auto mi = cfg_for(AttackMethod::kMifgsm);
    mi.momentum_mu = 0;
    auto di = cfg_for(AttackMethod::kDifgsm);
    di.di_probability = 0;
    const auto base = iterates(model, xx, yy, ifgsm);
    mi_same = mi_same && iterates(model, xx, yy, mi) == base;
    di_same = di_same && iterates(model, xx, yy, di) == base;
  };
  compare(model, x, y);
  compare(net, xn, yn);
  if (!mi_same) problems.push_back("MI(mu=0) differs from I-FGSM");
  if (!di_same) problems.push_back("DI(p=0) differs from I-FGSM");

  // Feasibility of every iterate, in float and double.
  std::size_t checked = 0, infeasible = 0;
  const auto netf = build_model<float>("tiny_conv", 10, 3);
  const auto xf = xn.cast<float>();
  for (auto m : {AttackMethod::kFgsm, AttackMethod::kIfgsm, AttackMethod::kPgd, AttackMethod::kMifgsm,
                 AttackMethod::kDifgsm}) {
    AttackObserver<double> od = [&](std::size_t, const Tensor<double>& d) {
      for (std::size_t i = 0; i < d.size(); ++i, ++checked)
        infeasible += !(std::abs(d[i]) <= eps && x[i] + d[i] >= 0 && x[i] + d[i] <= 1);
    };
    run_attack(model, x, y, cfg_for(m), &od);
    AttackObserver<float> of = [&](std::size_t, const Tensor<float>& d) {
      for (std::size_t i = 0; i < d.size(); ++i, ++checked)
        infeasible += !(std::abs(d[i]) <= float(eps) && xf[i] + d[i] >= 0.f && xf[i] + d[i] <= 1.f);
    };
    run_attack(netf, xf, std::span<const std::int32_t>(yn), cfg_for(m), &of);
  }
  if (infeasible) problems.push_back(std::to_string(infeasible) + " infeasible iterate entries");

  std::string detail = "convergence err " + fmt_num(conv_err, 3) + ", MI(0)==I-FGSM " + (mi_same ? "yes" : "no") +
                       ", DI(0)==I-FGSM " + (di_same ? "yes" : "no") + ", " + std::to_string(checked) +
                       " iterate entries feasible-checked";
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

// ---- 3. theorem oracle ----

Verdict theorem_oracle() {
  const double eps_t = 8.0 / 255.0;
  const auto trig = init_fixed_trigger<double>({1, 3, 16, 16}, eps_t, 3);
  const auto oracle = make_theorem_oracle(trig, 10, 0.5, 7);
  const auto x = random_images<double>({32, 3, 16, 16}, 1);
  const auto y = random_labels(32, 10, 2);
  const double log_c = std::log(10.0);
  const auto a = gradient_alignment(oracle, trig, x, y);
  const double dot_err = std::abs(a.dot_product + log_c);
  double gain_err = 0, frac = 1;
  for (double eps : {eps_t / 4, eps_t / 2, eps_t}) {
    const auto r = theorem2_check(oracle, trig, eps, x, y, 10000, 11);
    gain_err = std::max(gain_err, std::abs(r.loss_star - r.loss_zero - eps / eps_t * log_c));
    frac = std::min(frac, r.fraction_star_beats_random);
  }
  return {dot_err <= 1e-9 && gain_err <= 1e-9 && frac == 1.0,
          "|dot + log C| = " + fmt_num(dot_err, 3) + ", max |gain - (eps/eps_t) log C| = " + fmt_num(gain_err, 3) +
              ", delta* beats " + fmt_num(100 * frac, 5) + "% of 10000 random draws per eps"};
}

// ---- 11. finite differences ----

Verdict gradient_correctness() {
  std::size_t cases = 0, failed = 0;
  double worst_smooth = 0;
  std::string first_failure;
  for (const auto& base : registered_architectures())
    for (const std::string& arch : {base, base + "_smooth"})
      for (LossId loss : {LossId::kCrossEntropy, LossId::kKldToUniform, LossId::kTotalTriggerLoss})
        for (Mode mode : {Mode::kInference, Mode::kTrain}) {
          ++cases;
          const bool smooth = arch.ends_with("_smooth");
          const double tol = smooth ? 1e-5 : 1e-3, h = smooth ? 1e-3 : 1e-6;
          auto model = build_model<double>(arch, 10, 7);
          auto ref = model;
          const auto x = random_images<double>({3, 3, 16, 16}, 1);
          const auto y = random_labels(3, 10, 2);
          const auto trig = random_images<double>({1, 3, 16, 16}, 3, -0.03, 0.03);
          const Tensor<double>* tp = loss == LossId::kTotalTriggerLoss ? &trig : nullptr;
          const auto g = model.grad(x, y, loss, Wrt::kBoth, mode, tp);
          auto loss_at = [&](const Tensor<double>& xi) { return ref.grad(xi, y, loss, Wrt::kInput, mode, tp).loss_value; };
          auto derivative = [&](auto&& f) {
            if (!smooth) return (f(h) - f(-h)) / (2 * h);
            return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
          };
          Rng rng(11);
          std::size_t bad = 0;
          for (int k = 0; k < 20; ++k) {
            const std::size_t i = rng.below(x.size());
            const double fd = derivative([&](double d) {
              Tensor<double> xi = x;
              xi[i] += d;
              return loss_at(xi);
            });
            const double e = rel_err((*g.input_grad)[i], fd, 1e-6);
            bad += e > tol;
            if (smooth) worst_smooth = std::max(worst_smooth, e);
          }
          auto params = ref.parameters();
          for (int k = 0; k < 20; ++k) {
            const std::size_t p = rng.below(params.size());
            const std::size_t i = rng.below(params[p]->value.size());
            const double orig = params[p]->value[i];
            const double fd = derivative([&](double d) {
              params[p]->value[i] = orig + d;
              const double v = loss_at(x);
              params[p]->value[i] = orig;
              return v;
            });
            const double e = rel_err((*g.param_grads)[p][i], fd, 1e-6);
            bad += e > tol;
            if (smooth) worst_smooth = std::max(worst_smooth, e);
          }
          // A central difference on a ReLU/max-pool net may straddle one kink.
          if (bad > (smooth ? 0u : 1u)) {
            ++failed;
            if (first_failure.empty()) first_failure = "; first failure " + arch;
          }
        }
  return {failed == 0, std::to_string(cases - failed) + "/" + std::to_string(cases) +
                           " (arch, loss, mode) cases within tolerance, 40 coordinates each; worst smooth rel err " +
                           fmt_num(worst_smooth, 3) + first_failure};
}

// ---- 10. determinism ----

json determinism_config() {
  return json::parse(R"({
    "name": "determinism", "seed": 3,
    "dataset": {"name": "synthetic10", "synthetic": {"train_size": 600, "test_size": 200}},
    "schedule": {"epochs": 3, "lr": 0.02, "batch_size": 64},
    "models": [
      {"id": "sur", "arch": "tiny_conv", "seed": 1},
      {"id": "fixed", "arch": "tiny_conv", "training": "fixed_trigger", "seed": 2, "eps_t": "8/255", "trigger_seed": 4},
      {"id": "learn", "arch": "tiny_conv", "training": "learnable_trigger", "seed": 2, "step_alpha": "4/255",
       "trigger_seed": 4}
    ],
    "surrogates": ["sur"],
    "victims": [
      {"id": "fixed", "model": "fixed"},
      {"id": "learn", "model": "learn"},
      {"id": "rp", "model": "fixed", "defense": {"kind": "rp", "seed": 8}}
    ],
    "attacks": [
      {"id": "pgd", "method": "pgd", "iterations": 5, "seed": 6},
      {"id": "di", "method": "difgsm", "iterations": 5, "seed": 7}
    ],
    "theory": {"models": ["fixed"], "random_draws": 10, "linearization_samples": 50, "seed": 5}
  })");
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Verdict determinism(const fs::path& scratch) {
  std::vector<fs::path> dirs = {scratch / "det_a", scratch / "det_b"};
  for (const auto& d : dirs) {
    fs::remove_all(d);
    Experiment exp(parse_experiment_config(determinism_config()), RunOptions{d, false, 1});
    exp.all();
  }
  std::size_t compared = 0, triggers = 0, deltas = 0, tables = 0;
  std::vector<std::string> differing;
  for (const auto& e : fs::recursive_directory_iterator(dirs[0])) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dirs[0]).generic_string();
    if (rel.starts_with("timing/")) continue;  // wall-clock data
    ++compared;
    triggers += rel.starts_with("triggers/");
    deltas += rel.starts_with("perturbations/");
    tables += rel.starts_with("report/") || rel.starts_with("results/");
    if (!fs::exists(dirs[1] / rel) || file_bytes(e.path()) != file_bytes(dirs[1] / rel)) differing.push_back(rel);
  }
  std::string detail = std::to_string(compared) + " artifact files compared bitwise (" + std::to_string(triggers) +
                       " trigger, " + std::to_string(deltas) + " perturbation, " + std::to_string(tables) +
                       " result/table files)";
  for (const auto& d : differing) detail += "; differs: " + d;
  return {differing.empty() && triggers > 0 && deltas > 0 && tables > 0, detail};
}

// ---- desk criteria ----

class Desk {
 public:
  Desk(const fs::path& config, const fs::path& cache)
      : exp_(load_experiment_config(config), RunOptions{cache / "desk", true, 0}) {
    exp_.all();
    results_ = json::parse(read_text_file(exp_.results_path()));
    for (const auto& id : exp_.config().theory->models)
      theory_[id] = json::parse(read_text_file(exp_.out() / "theory" / (id + ".json")));
    for (const auto& d : results_.at("diagnostics")) diag_[d.at("victim_id")] = d;
  }

  const ExperimentConfig& cfg() const { return exp_.config(); }
  const json& diag(const std::string& victim) const { return diag_.at(victim); }
  const json& theory(const std::string& model) const { return theory_.at(model); }
  double clean(const std::string& victim) const { return diag(victim).at("clean_acc"); }

  /// Transferred robust accuracy of one victim, averaged over the surrogate set.
  double R(const std::string& victim, const std::string& attack = "pgd") const {
    const auto m = detail::matrix_from_json(results_, attack);
    if (!m) throw ContractError("no matrix for attack " + attack);
    for (std::size_t i = 0; i < m->victim_ids.size(); ++i)
      if (m->victim_ids[i] == victim) return m->victim_mean(i);
    throw ContractError("victim " + victim + " not in matrix");
  }

  const json& results() const { return results_; }
  Experiment& experiment() { return exp_; }

 private:
  Experiment exp_;
  json results_;
  std::map<std::string, json> theory_, diag_;
};

const NamedAttack& attack_named(const ExperimentConfig& cfg, const std::string& id) {
  for (const auto& a : cfg.attacks)
    if (a.id == id) return a;
  throw ContractError("desk config lacks attack " + id);
}

Verdict trigger_activation(const Desk& d) {
  const auto& m = d.cfg().model("f8");
  const auto& pgd = attack_named(d.cfg(), "pgd").cfg;
  const std::size_t train_size = d.cfg().dataset.synthetic.train_size;
  const double chance = 0.1;
  const double trig = d.clean("f8"), twin = d.clean("std");
  const double clean_in = d.diag("f8").at("clean_acc_without_trigger");
  bool ok = train_size >= 10000 && m.arch == "tiny_conv" && m.schedule.epochs <= 60 &&
            std::abs(m.eps_t - 8.0 / 255.0) < 1e-15 && pgd.eps > 0;
  ok = ok && std::abs(trig - twin) <= 0.05 && std::abs(clean_in - chance) <= 0.05;
  std::string adv;
  for (const auto& a : d.diag("f8").at("adversarial_acc_without_trigger")) {
    if (a.at("attack") != "pgd") continue;
    const std::string sur = a.at("surrogate");
    if (std::find(d.cfg().surrogates.begin(), d.cfg().surrogates.end(), sur) == d.cfg().surrogates.end()) continue;
    const double v = a.at("acc");
    ok = ok && std::abs(v - chance) <= 0.05;
    adv += " " + sur + "=" + pts(v);
  }
  return {ok, "triggered " + pts(trig) + " vs twin " + pts(twin) + ", clean input " + pts(clean_in) +
                  ", no-trigger PGD inputs" + adv + " (chance 10 +- 5; " + std::to_string(train_size) + " train, " +
                  std::to_string(m.schedule.epochs) + " epochs)"};
}

Verdict eps_t_trend(const Desk& d) {
  const std::vector<std::string> sweep = {"f1", "f2", "f4", "f8"};
  const auto& pgd = attack_named(d.cfg(), "pgd").cfg;
  std::size_t standard_surrogates = 0;
  for (const auto& s : d.cfg().surrogates) standard_surrogates += d.cfg().model(s).training == Procedure::kStandard;
  bool ok = standard_surrogates >= 2 && pgd.method == AttackMethod::kPgd && pgd.iterations == 20 &&
            std::abs(pgd.eps - 8.0 / 255.0) < 1e-15;
  std::string rs, cs;
  double min_clean = 1;
  for (std::size_t k = 0; k < sweep.size(); ++k) {
    rs += (k ? " -> " : "") + pts(d.R(sweep[k]));
    cs += (k ? " -> " : "") + pts(d.clean(sweep[k]));
    if (k) ok = ok && d.R(sweep[k]) > d.R(sweep[k - 1]);
    min_clean = std::min(min_clean, d.clean(sweep[k]));
  }
  const double rise = d.R(sweep.back()) - d.R(sweep.front());
  const double drop = d.clean(sweep.front()) - min_clean;
  ok = ok && rise >= 0.15 && drop <= 0.03;
  return {ok, "R " + rs + " (rise " + pts(rise) + ", need strictly increasing and >= 15); triggered clean " + cs +
                  " (drop " + pts(drop) + ", need <= 3)"};
}

Verdict headline_gap(const Desk& d) {
  const double rl = d.R("learn"), rs = d.R("std"), cl = d.clean("learn");
  bool ok = rl - rs >= 0.30;
  std::string matched;
  double best_fixed = -1;
  for (const auto& m : d.cfg().models) {
    if (m.training != Procedure::kFixedTrigger) continue;
    bool is_victim = false;
    for (const auto& v : d.cfg().victims) is_victim |= v.id == m.id && v.model == m.id;
    if (!is_victim || d.clean(m.id) < cl - 0.02) continue;
    best_fixed = std::max(best_fixed, d.R(m.id));
    matched += " " + m.id + "(" + pts(d.clean(m.id)) + "/" + pts(d.R(m.id)) + ")";
  }
  if (best_fixed >= 0) ok = ok && rl >= best_fixed - 0.02;
  return {ok, "R learnable " + pts(rl) + " vs undefended " + pts(rs) + " (gap " + pts(rl - rs) +
                  ", need >= 30); learnable clean/R " + pts(cl) + "/" + pts(rl) +
                  ", fixed models at clean >= learnable - 2 (clean/R):" + (matched.empty() ? " none" : matched)};
}

Verdict flip(const Desk& d) {
  const json& f = d.theory("f8").at("flip");
  const auto ps = f.at("proportions").get<std::vector<double>>();
  const auto acc = f.at("accuracies").get<std::vector<double>>();
  const auto loss = f.at("losses").get<std::vector<double>>();
  auto at = [&](double p) {
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (std::abs(ps[i] - p) < 1e-12) return i;
    throw ContractError("flip curve lacks p=" + fmt_num(p));
  };
  const std::size_t i0 = at(0.0), i3 = at(0.3);
  const double log_c = std::log(10.0), trig = d.clean("f8");
  const bool ok = acc[i0] <= 0.15 && std::abs(loss[i0] - log_c) <= 0.2 * log_c && acc[i3] >= 0.8 * trig;
  return {ok, "acc(p=0) " + pts(acc[i0]) + " (need <= 15), loss(p=0) " + fmt_num(loss[i0]) + " vs log C " +
                  fmt_num(log_c) + " (need within 20%), acc(p=0.3) " + pts(acc[i3]) + " vs 0.8 x " + pts(trig)};
}

Verdict sign_check(const Desk& d) {
  bool ok = true;
  std::string detail;
  for (const std::string id : {"f4", "f8"}) {
    const json& a = d.theory(id).at("alignment_test");
    const double dot = a.at("dot_product"), agree = a.at("sign_agreement"), ratio = a.at("ratio");
    ok = ok && dot < 0 && agree > 0.5;
    detail += (detail.empty() ? "" : "; ") + id + ": dot " + fmt_num(dot) + ", sign agreement " + fmt_num(agree) +
              ", |dot|/log C " + fmt_num(ratio);
  }
  return {ok, detail};
}

Verdict linearization(const Desk& d) {
  std::vector<double> means;
  std::string detail;
  for (const std::string id : {"f4", "f16", "f64"}) {
    means.push_back(d.theory(id).at("linearization").at("mean"));
    detail += (detail.empty() ? "" : " -> ") + id + " " + fmt_num(means.back());
  }
  return {means[0] <= means[1] && means[1] <= means[2], "mean residual " + detail};
}

Verdict at_sanity(Desk& d) {
  auto& exp = d.experiment();
  const auto& test = exp.test_set();
  AttackConfig pgd = attack_named(d.cfg(), "pgd").cfg;
  auto whitebox = [&](const std::string& id) {
    const auto& ck = exp.checkpoint(id);
    const auto delta = run_attack_chunked(ck.model, test.images, test.labels, pgd);
    return accuracy(predict(ck.model, test.images + delta), test.labels);
  };
  const double r_at = whitebox("at"), r_std = whitebox("std");
  const double c_at = d.clean("at"), c_std = d.clean("std");
  return {r_at - r_std >= 0.20 && c_at < c_std, "white-box PGD R: AT " + pts(r_at) + " vs standard " + pts(r_std) +
                                                    " (need +20); clean AT " + pts(c_at) + " vs standard " +
                                                    pts(c_std) + " (need lower)"};
}

void extra_observations(const Desk& d) {
  // Reported, not gated.
  if (d.results().contains("advanced"))
    for (const auto& a : d.results().at("advanced")) {
      const std::string attack = a.at("matrix").at("attack_id");
      const auto victims = a.at("matrix").at("victim_ids");
      for (std::size_t i = 0; i < victims.size(); ++i)
        std::cout << "INFO advanced scenario " << attack << " " << victims[i].get<std::string>() << ": R "
                  << pts(a.at("advanced_mean")[i]) << " vs naive " << pts(a.at("naive_mean")[i]) << "\n";
    }
  std::cout << "INFO trigger MSE x100: learnable " << fmt_num(d.theory("learn").at("trigger_mse_x100")) << ", fixed 8/255 "
            << fmt_num(d.theory("f8").at("trigger_mse_x100")) << ", fixed 64/255 "
            << fmt_num(d.theory("f64").at("trigger_mse_x100")) << "\n";
  for (const std::string id : {"f4", "f8", "f16", "f64"})
    for (const auto& t : d.theory(id).at("theorem2"))
      std::cout << "INFO first-order maximizer " << id << " eps=" << fmt_num(255 * t.at("eps").get<double>())
                << "/255: gain " << fmt_num(t.at("gain_star")) << " vs bound " << fmt_num(t.at("bound"))
                << ", beats " << pts(t.at("fraction_star_beats_random")) << "% of random draws\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string cache = "acceptance_cache";
  std::string config = std::string(TRIGACT_SOURCE_DIR) + "/configs/desk.json";
  bool skip_desk = false;
  app.add_option("--cache", cache, "directory for desk checkpoints and scratch runs");
  app.add_option("--config", config, "desk experiment config")->check(CLI::ExistingFile);
  app.add_flag("--skip-desk", skip_desk, "run only the exact-oracle and determinism criteria");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);
  fs::create_directories(cache);

  std::size_t failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Verdict()>& fn) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failures += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << v.detail << std::endl;
  };

  report(1, "metric algebra", metric_algebra);
  report(2, "attack oracle", attack_oracle);
  report(3, "theorem oracle", theorem_oracle);

  std::unique_ptr<Desk> desk;
  std::string desk_error;
  if (!skip_desk) {
    spdlog::set_level(spdlog::level::info);
    try {
      desk = std::make_unique<Desk>(config, cache);
    } catch (const std::exception& e) {
      desk_error = e.what();
    }
    spdlog::set_level(spdlog::level::warn);
  } else {
    desk_error = "skipped (--skip-desk)";
  }
  auto desk_report = [&](int id, const std::string& name, const std::function<Verdict(Desk&)>& fn) {
    report(id, name, [&] {
      if (!desk) return Verdict{false, "desk run unavailable: " + desk_error};
      return fn(*desk);
    });
  };
  desk_report(4, "trigger activation", trigger_activation);
  desk_report(5, "robustness vs trigger bound", eps_t_trend);
  desk_report(6, "learnable trigger gap", headline_gap);
  desk_report(7, "flip experiment", flip);
  desk_report(8, "gradient-trigger sign", sign_check);
  desk_report(9, "linearization degradation", linearization);
  report(10, "determinism", [&] { return determinism(cache); });
  report(11, "gradient correctness", gradient_correctness);
  desk_report(12, "adversarial training sanity", at_sanity);
  if (desk) extra_observations(*desk);

  std::cout << (failures ? std::to_string(failures) + " of 12 criteria failed" : "all 12 criteria passed") << std::endl;
  return failures ? 1 : 0;
}
