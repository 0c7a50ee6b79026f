#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "trigact/attacks.hpp"
#include "trigact/defenses.hpp"
#include "trigact/errors.hpp"
#include "trigact/io.hpp"
#include "trigact/triggered_model.hpp"

namespace trigact {

/// A deployed model: plain or trigger-activated, optionally behind a
/// preprocessing defense. Perturbations are added before preprocessing.
template <typename T>
struct Victim {
  std::string id;
  std::variant<Classifier<T>, TriggeredModel<T>> model;
  PreprocessorConfig defense;
  std::string checkpoint_hash;

  bool triggered() const { return std::holds_alternative<TriggeredModel<T>>(model); }

  std::vector<std::int32_t> predict(const Tensor<T>& images) const {
    return std::visit([&](const auto& m) { return defend_then_predict(m, defense, images); }, model);
  }

  /// Diagnostic: the underlying classifier on inputs without the trigger.
  std::vector<std::int32_t> predict_without_trigger(const Tensor<T>& images) const {
    const Classifier<T>& c =
        triggered() ? std::get<TriggeredModel<T>>(model).model : std::get<Classifier<T>>(model);
    return defend_then_predict(c, defense, images);
  }
};

/// Persisted adversarial set: delta for the test samples at `indices`,
/// crafted on one surrogate with one attack configuration.
template <typename T>
struct PerturbationSet {
  std::vector<std::size_t> indices;
  Tensor<T> delta;
  std::string attack_fingerprint;
  std::string surrogate_hash;
  std::string surrogate_id;

  Container to_container() const {
    Container c;
    std::vector<std::int32_t> idx(indices.begin(), indices.end());
    c.put_vector("indices", idx);
    c.put_tensor("delta", delta);
    c.put_text("attack_fingerprint", attack_fingerprint);
    c.put_text("surrogate_hash", surrogate_hash);
    c.put_text("surrogate_id", surrogate_id);
    return c;
  }

  static PerturbationSet from_container(const Container& c) {
    PerturbationSet p;
    for (auto i : c.get_vector<std::int32_t>("indices")) p.indices.push_back(std::size_t(i));
    p.delta = c.get_tensor<T>("delta");
    p.attack_fingerprint = c.get_text("attack_fingerprint");
    p.surrogate_hash = c.get_text("surrogate_hash");
    p.surrogate_id = c.get_text("surrogate_id");
    return p;
  }
};

/// Fraction of samples with victim(x + delta) = y.
template <typename T>
double robust_accuracy(const Victim<T>& victim, const Tensor<T>& images, std::span<const std::int32_t> labels,
                       const PerturbationSet<T>& pert, const std::optional<std::string>& expected_fingerprint = {}) {
  if (expected_fingerprint && *expected_fingerprint != pert.attack_fingerprint)
    throw FingerprintConflict("perturbation set was generated with a different attack/surrogate fingerprint");
  if (!(pert.delta.shape() == images.shape())) throw ContractError("robust_accuracy: delta shape mismatch");
  return accuracy(victim.predict(images + pert.delta), labels);
}

template <typename T>
double clean_accuracy(const Victim<T>& victim, const Tensor<T>& images, std::span<const std::int32_t> labels) {
  return accuracy(victim.predict(images), labels);
}

/// Arithmetic mean over the surrogate set.
inline double mean_over_surrogates(std::span<const double> values) {
  if (values.empty()) throw ContractError("mean_over_surrogates: empty surrogate set");
  double s = 0;
  for (double v : values) s += v;
  return s / double(values.size());
}

/// R values indexed (victim, surrogate) for one attack.
struct RobustnessMatrix {
  std::vector<std::string> surrogate_ids;
  std::vector<std::string> victim_ids;
  std::string attack_id;
  std::vector<std::vector<std::optional<double>>> values;  // [victim][surrogate]
  std::vector<std::string> fingerprints;

  RobustnessMatrix() = default;
  RobustnessMatrix(std::vector<std::string> surrogates, std::vector<std::string> victims, std::string attack)
      : surrogate_ids(std::move(surrogates)), victim_ids(std::move(victims)), attack_id(std::move(attack)) {
    values.assign(victim_ids.size(), std::vector<std::optional<double>>(surrogate_ids.size()));
  }

  void set(std::size_t victim, std::size_t surrogate, double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("robustness value outside [0, 1]");
    values.at(victim).at(surrogate) = v;
  }

  bool complete() const {
    for (const auto& row : values)
      for (const auto& v : row)
        if (!v) return false;
    return !values.empty() && !surrogate_ids.empty();
  }

  /// Mean over surrogates for one victim.
  double victim_mean(std::size_t victim) const {
    std::vector<double> row;
    for (const auto& v : values.at(victim)) {
      if (!v) throw ContractError("robustness matrix: missing cell for victim " + victim_ids[victim]);
      row.push_back(*v);
    }
    return mean_over_surrogates(row);
  }
};

/// Mean of the per-victim surrogate means.
inline double mean_over_victims(const RobustnessMatrix& m) {
  if (!m.complete()) throw ContractError("mean_over_victims: incomplete robustness matrix");
  double s = 0;
  for (std::size_t v = 0; v < m.victim_ids.size(); ++v) s += m.victim_mean(v);
  return s / double(m.victim_ids.size());
}

inline nlohmann::json to_json(const RobustnessMatrix& m) {
  nlohmann::json vals = nlohmann::json::array();
  for (const auto& row : m.values) {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& v : row) r.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    vals.push_back(r);
  }
  return {{"attack_id", m.attack_id}, {"surrogate_ids", m.surrogate_ids}, {"victim_ids", m.victim_ids},
          {"values", vals}, {"fingerprints", m.fingerprints}};
}

/// One cell of a results table.
struct ResultRow {
  std::string dataset;
  std::string victim_id;
  std::string defense;
  std::string surrogate_id;
  std::string attack;
  double eps = 0;
  double robust_acc = 0;
  double clean_acc = 0;
  std::uint64_t seed = 0;
  std::string victim_hash;
  std::string surrogate_hash;
};

inline const std::vector<std::string>& result_columns() {
  static const std::vector<std::string> cols = {"dataset", "victim_id", "defense",   "surrogate_id",
                                                "attack",  "eps",       "R",         "clean_acc",
                                                "seed",    "victim_hash", "surrogate_hash"};
  return cols;
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline nlohmann::json to_json(const ResultRow& r) {
  return {{"dataset", r.dataset},       {"victim_id", r.victim_id},       {"defense", r.defense},
          {"surrogate_id", r.surrogate_id}, {"attack", r.attack},         {"eps", r.eps},
          {"R", r.robust_acc},          {"clean_acc", r.clean_acc},       {"seed", r.seed},
          {"victim_hash", r.victim_hash}, {"surrogate_hash", r.surrogate_hash}};
}

inline ResultRow result_row_from_json(const nlohmann::json& j) {
  return {j.at("dataset"),  j.at("victim_id"), j.at("defense"), j.at("surrogate_id"),
          j.at("attack"),   j.at("eps"),       j.at("R"),       j.at("clean_acc"),
          j.at("seed"),     j.at("victim_hash"), j.at("surrogate_hash")};
}

inline std::string results_to_csv(const std::vector<ResultRow>& rows) {
  std::string out;
  for (std::size_t i = 0; i < result_columns().size(); ++i) out += (i ? "," : "") + result_columns()[i];
  out += "\n";
  for (const auto& r : rows) {
    const std::vector<std::string> f = {r.dataset, r.victim_id, r.defense, r.surrogate_id, r.attack,
                                        format_real(r.eps), format_real(r.robust_acc), format_real(r.clean_acc),
                                        std::to_string(r.seed), r.victim_hash, r.surrogate_hash};
    for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + csv_escape(f[i]);
    out += "\n";
  }
  return out;
}

inline nlohmann::json results_to_json(const std::vector<ResultRow>& rows) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : rows) a.push_back(to_json(r));
  return a;
}

inline std::vector<ResultRow> results_from_json(const nlohmann::json& a) {
  std::vector<ResultRow> rows;
  for (const auto& j : a) rows.push_back(result_row_from_json(j));
  return rows;
}

}  // namespace trigact
