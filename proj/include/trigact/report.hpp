#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trigact/config.hpp"
#include "trigact/evaluation.hpp"

namespace trigact {

/// Row-labelled numeric table; missing cells stay empty and flag the report.
struct ReportTable {
  std::string title;
  std::vector<std::string> columns;
  std::vector<std::string> rows;
  std::vector<std::vector<std::optional<double>>> cells;  // [row][column]

  bool complete() const {
    for (const auto& r : cells)
      for (const auto& c : r)
        if (!c) return false;
    return true;
  }
};

inline std::string table_to_csv(const ReportTable& t) {
  std::string out = "row";
  for (const auto& c : t.columns) out += "," + csv_escape(c);
  out += "\n";
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out += csv_escape(t.rows[r]);
    for (const auto& c : t.cells[r]) out += "," + (c ? format_real(*c) : std::string());
    out += "\n";
  }
  return out;
}

/// Percentages with two decimals, as in the published tables.
inline std::string table_to_markdown(const ReportTable& t) {
  std::string out = "| " + t.title + " |";
  for (const auto& c : t.columns) out += " " + c + " |";
  out += "\n|---|";
  for (std::size_t i = 0; i < t.columns.size(); ++i) out += "---:|";
  out += "\n";
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out += "| " + t.rows[r] + " |";
    for (const auto& c : t.cells[r]) {
      char buf[32];
      if (c) std::snprintf(buf, sizeof buf, " %.2f |", *c * 100.0);
      else std::snprintf(buf, sizeof buf, " -- |");
      out += buf;
    }
    out += "\n";
  }
  return out;
}

inline nlohmann::json to_json(const ReportTable& t) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& r : t.cells) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& c : r) row.push_back(c ? nlohmann::json(*c) : nlohmann::json(nullptr));
    cells.push_back(row);
  }
  return {{"title", t.title}, {"columns", t.columns}, {"rows", t.rows}, {"cells", cells}};
}

inline ReportTable report_table_from_json(const nlohmann::json& j) {
  ReportTable t{j.at("title"), j.at("columns"), j.at("rows"), {}};
  for (const auto& r : j.at("cells")) {
    std::vector<std::optional<double>> row;
    for (const auto& c : r) row.push_back(c.is_null() ? std::nullopt : std::optional<double>(c.get<double>()));
    t.cells.push_back(row);
  }
  return t;
}

struct ReportBundle {
  ReportTable defense;
  std::optional<ReportTable> sweep;
  bool incomplete = false;
  std::vector<std::string> problems;
  nlohmann::json theory = nlohmann::json::object();
  nlohmann::json advanced = nlohmann::json::array();
  std::string flip_svg, flip_loss_svg, bound_svg;

  nlohmann::json mirror() const {
    nlohmann::json j = {{"status", incomplete ? "INCOMPLETE" : "COMPLETE"},
                        {"problems", problems},
                        {"defense_table", to_json(defense)},
                        {"theory", theory},
                        {"advanced", advanced}};
    if (sweep) j["sweep_table"] = to_json(*sweep);
    return j;
  }
};

namespace detail {

/// Matrix for one attack from the results document, if present.
inline std::optional<RobustnessMatrix> matrix_from_json(const nlohmann::json& results, const std::string& attack) {
  if (!results.is_object() || !results.contains("matrices")) return std::nullopt;
  for (const auto& m : results.at("matrices")) {
    if (m.at("attack_id") != attack) continue;
    RobustnessMatrix out(m.at("surrogate_ids"), m.at("victim_ids"), attack);
    for (std::size_t v = 0; v < out.victim_ids.size(); ++v)
      for (std::size_t s = 0; s < out.surrogate_ids.size(); ++s) {
        const auto& c = m.at("values")[v][s];
        if (!c.is_null()) out.set(v, s, c.get<double>());
      }
    return out;
  }
  return std::nullopt;
}

inline std::optional<double> clean_of(const nlohmann::json& results, const std::string& victim) {
  if (!results.is_object() || !results.contains("diagnostics")) return std::nullopt;
  for (const auto& d : results.at("diagnostics"))
    if (d.at("victim_id") == victim) return d.at("clean_acc").get<double>();
  return std::nullopt;
}

/// Mean over a subset of the matrix's victims.
inline std::optional<double> group_mean(const RobustnessMatrix& m, const std::vector<std::string>& victims) {
  std::vector<std::string> present;
  for (const auto& v : victims)
    if (std::find(m.victim_ids.begin(), m.victim_ids.end(), v) != m.victim_ids.end()) present.push_back(v);
  if (present.size() != victims.size()) return std::nullopt;
  RobustnessMatrix sub(m.surrogate_ids, present, m.attack_id);
  for (std::size_t i = 0; i < present.size(); ++i) {
    const std::size_t v = std::size_t(std::find(m.victim_ids.begin(), m.victim_ids.end(), present[i]) - m.victim_ids.begin());
    for (std::size_t s = 0; s < m.surrogate_ids.size(); ++s)
      if (m.values[v][s]) sub.set(i, s, *m.values[v][s]);
  }
  if (!sub.complete()) return std::nullopt;
  return mean_over_victims(sub);
}

/// Table with a Clean row and one row per attack; each column averages a victim group.
inline ReportTable attack_table(const std::string& title, const std::vector<std::string>& labels,
                                const std::vector<std::vector<std::string>>& groups, const ExperimentConfig& cfg,
                                const nlohmann::json& results) {
  ReportTable t{title, labels, {"Clean"}, {}};
  std::vector<std::optional<double>> clean;
  for (const auto& g : groups) {
    double s = 0;
    bool ok = true;
    for (const auto& v : g) {
      auto c = clean_of(results, v);
      ok = ok && c.has_value();
      if (c) s += *c;
    }
    clean.push_back(ok ? std::optional<double>(s / double(g.size())) : std::nullopt);
  }
  t.cells.push_back(clean);
  for (const auto& a : cfg.attacks) {
    t.rows.push_back(a.id);
    std::vector<std::optional<double>> row;
    auto m = matrix_from_json(results, a.id);
    for (const auto& g : groups) row.push_back(m ? group_mean(*m, g) : std::nullopt);
    t.cells.push_back(row);
  }
  return t;
}

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
  return colors[i % 7];
}

struct Series {
  std::string label;
  std::vector<double> x, y;
};

/// Minimal line chart with axes, ticks and a legend.
inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series) {
  const double W = 520, H = 360, L = 60, R = 150, T = 40, B = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (first) x0 = x1 = s.x[i], y0 = y1 = s.y[i], first = false;
      x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
    }
  y0 = std::min(y0, 0.0);
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + svg_num(W) + "\" height=\"" + svg_num(H) +
                  "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + svg_num(W / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" + title + "</text>\n";
  s += "<line x1=\"" + svg_num(L) + "\" y1=\"" + svg_num(H - B) + "\" x2=\"" + svg_num(W - R) + "\" y2=\"" +
       svg_num(H - B) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + svg_num(L) + "\" y1=\"" + svg_num(T) + "\" x2=\"" + svg_num(L) + "\" y2=\"" + svg_num(H - B) +
       "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double xv = x0 + (x1 - x0) * k / 5.0, yv = y0 + (y1 - y0) * k / 5.0;
    s += "<text x=\"" + svg_num(px(xv)) + "\" y=\"" + svg_num(H - B + 15) + "\" text-anchor=\"middle\">" +
         svg_num(xv) + "</text>\n";
    s += "<text x=\"" + svg_num(L - 5) + "\" y=\"" + svg_num(py(yv) + 4) + "\" text-anchor=\"end\">" + svg_num(yv) +
         "</text>\n";
  }
  s += "<text x=\"" + svg_num((L + W - R) / 2) + "\" y=\"" + svg_num(H - 12) + "\" text-anchor=\"middle\">" + xlabel +
       "</text>\n";
  s += "<text x=\"14\" y=\"" + svg_num((T + H - B) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
       svg_num((T + H - B) / 2) + ")\">" + ylabel + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    std::string pts;
    for (std::size_t i = 0; i < series[k].x.size(); ++i)
      pts += svg_num(px(series[k].x[i])) + "," + svg_num(py(series[k].y[i])) + " ";
    s += "<polyline fill=\"none\" stroke=\"" + std::string(palette(k)) + "\" stroke-width=\"2\" points=\"" + pts +
         "\"/>\n";
    const double ly = T + 14.0 * double(k);
    s += "<rect x=\"" + svg_num(W - R + 10) + "\" y=\"" + svg_num(ly) + "\" width=\"10\" height=\"10\" fill=\"" +
         palette(k) + "\"/>\n";
    s += "<text x=\"" + svg_num(W - R + 25) + "\" y=\"" + svg_num(ly + 9) + "\">" + series[k].label + "</text>\n";
  }
  return s + "</svg>\n";
}

/// Grouped bar chart: one group per label, one bar per series entry.
inline std::string bar_chart(const std::string& title, const std::vector<std::string>& groups,
                             const std::vector<std::string>& series, const std::vector<std::vector<double>>& values) {
  const double W = 640, H = 360, L = 60, R = 150, T = 40, B = 80;
  double y1 = 0, y0 = 0;
  for (const auto& g : values)
    for (double v : g) y1 = std::max(y1, v), y0 = std::min(y0, v);
  if (y1 == y0) y1 = y0 + 1;
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  const double gw = (W - L - R) / double(std::max<std::size_t>(1, groups.size()));
  const double bw = gw * 0.8 / double(std::max<std::size_t>(1, series.size()));
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + svg_num(W) + "\" height=\"" + svg_num(H) +
                  "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + svg_num(W / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" + title + "</text>\n";
  s += "<line x1=\"" + svg_num(L) + "\" y1=\"" + svg_num(py(0)) + "\" x2=\"" + svg_num(W - R) + "\" y2=\"" +
       svg_num(py(0)) + "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double yv = y0 + (y1 - y0) * k / 5.0;
    s += "<text x=\"" + svg_num(L - 5) + "\" y=\"" + svg_num(py(yv) + 4) + "\" text-anchor=\"end\">" + svg_num(yv) +
         "</text>\n";
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = L + gw * double(g) + gw * 0.1;
    for (std::size_t k = 0; k < series.size() && k < values[g].size(); ++k) {
      const double v = values[g][k], top = std::min(py(v), py(0)), h = std::abs(py(v) - py(0));
      s += "<rect x=\"" + svg_num(gx + bw * double(k)) + "\" y=\"" + svg_num(top) + "\" width=\"" + svg_num(bw) +
           "\" height=\"" + svg_num(h) + "\" fill=\"" + palette(k) + "\"/>\n";
    }
    s += "<text x=\"" + svg_num(gx + gw * 0.4) + "\" y=\"" + svg_num(H - B + 15) +
         "\" text-anchor=\"end\" transform=\"rotate(-30 " + svg_num(gx + gw * 0.4) + " " + svg_num(H - B + 15) +
         ")\">" + groups[g] + "</text>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double ly = T + 14.0 * double(k);
    s += "<rect x=\"" + svg_num(W - R + 10) + "\" y=\"" + svg_num(ly) + "\" width=\"10\" height=\"10\" fill=\"" +
         palette(k) + "\"/>\n";
    s += "<text x=\"" + svg_num(W - R + 25) + "\" y=\"" + svg_num(ly + 9) + "\">" + series[k] + "</text>\n";
  }
  return s + "</svg>\n";
}

inline std::string eps_label(double eps) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g/255", std::round(eps * 255.0 * 1000.0) / 1000.0);
  return buf;
}

}  // namespace detail

/// Assemble tables and plots from the evaluation results and theory reports.
inline ReportBundle build_report(const ExperimentConfig& cfg, const nlohmann::json& results,
                                 const nlohmann::json& theory) {
  ReportBundle b;
  if (!results.is_object() || !results.contains("matrices")) b.problems.push_back("no evaluation results");

  // Defense table: victims outside the sweep, grouped by their group label.
  std::vector<std::string> labels;
  std::vector<std::vector<std::string>> groups;
  auto add = [&](const VictimSpec& v) {
    auto it = std::find(labels.begin(), labels.end(), v.group);
    if (it == labels.end()) {
      labels.push_back(v.group);
      groups.push_back({v.id});
    } else {
      groups[std::size_t(it - labels.begin())].push_back(v.id);
    }
  };
  for (const auto& v : cfg.victims)
    if (std::find(cfg.sweep.begin(), cfg.sweep.end(), v.id) == cfg.sweep.end()) add(v);
  if (labels.empty())
    for (const auto& v : cfg.victims) add(v);
  b.defense = detail::attack_table("Defense", labels, groups, cfg, results);
  if (!b.defense.complete()) b.problems.push_back("defense table has missing cells");

  if (!cfg.sweep.empty()) {
    std::vector<std::string> sl;
    std::vector<std::vector<std::string>> sg;
    for (const auto& id : cfg.sweep) {
      const ModelSpec& m = cfg.model(cfg.victim(id).model);
      sl.push_back(m.training == Procedure::kFixedTrigger ? "eps_t=" + detail::eps_label(m.eps_t) : id);
      sg.push_back({id});
    }
    b.sweep = detail::attack_table("Trigger bound", sl, sg, cfg, results);
    if (!b.sweep->complete()) b.problems.push_back("sweep table has missing cells");
  }

  if (results.is_object() && results.contains("advanced")) b.advanced = results.at("advanced");

  std::vector<detail::Series> acc, loss;
  std::vector<std::string> bar_groups;
  std::vector<std::vector<double>> bars;
  for (const auto& [id, rep] : theory.items()) {
    nlohmann::json s = {{"alignment_test", rep.at("alignment_test")},
                        {"alignment_train", rep.at("alignment_train")},
                        {"linearization", rep.at("linearization")},
                        {"trigger_mse_x100", rep.at("trigger_mse_x100")},
                        {"theorem2", rep.at("theorem2")},
                        {"flip", rep.at("flip")}};
    b.theory[id] = s;
    const auto& f = rep.at("flip");
    acc.push_back({id, f.at("proportions"), f.at("accuracies")});
    loss.push_back({id, f.at("proportions"), f.at("losses")});
    for (const auto& t : rep.at("theorem2")) {
      bar_groups.push_back(id + " eps=" + detail::eps_label(t.at("eps")));
      bars.push_back({t.at("bound"), t.at("gain_star"), t.at("max_random_gain")});
    }
  }
  if (cfg.theory && theory.size() < cfg.theory->models.size()) b.problems.push_back("theory reports missing");
  b.flip_svg = detail::line_chart("Flip experiment: accuracy", "flipped proportion p", "accuracy", acc);
  b.bound_svg = detail::bar_chart("Loss gain above x+tau", bar_groups,
                                  {"(eps/eps_t) log C", "gain of delta*", "best random gain"}, bars);
  b.incomplete = !b.problems.empty();
  b.flip_loss_svg = detail::line_chart("Flip experiment: loss", "flipped proportion p", "loss", loss);
  return b;
}

inline void write_report(const ReportBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto put = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir / name, std::ios::binary) << text;
  };
  std::string banner;
  if (b.incomplete) {
    banner = "**INCOMPLETE**:";
    for (const auto& p : b.problems) banner += " " + p + ";";
    banner += "\n\n";
  }
  put("defense_table.csv", table_to_csv(b.defense));
  std::string md = "# Report\n\n" + banner + "## Robust accuracy (%) per defense\n\n" + table_to_markdown(b.defense);
  if (b.sweep) {
    put("sweep_table.csv", table_to_csv(*b.sweep));
    md += "\n## Robust accuracy (%) versus trigger bound\n\n" + table_to_markdown(*b.sweep);
  }
  put("report.md", md);
  put("flip_accuracy.svg", b.flip_svg);
  put("flip_loss.svg", b.flip_loss_svg);
  put("bound_check.svg", b.bound_svg);
  put("report.json", b.mirror().dump(2) + "\n");
  if (b.incomplete) put("INCOMPLETE", banner);
  else std::filesystem::remove(dir / "INCOMPLETE");
}

}  // namespace trigact
