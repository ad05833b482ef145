#include "noiselab/experiment.hpp"

#include "noiselab/data.hpp"
#include "noiselab/equilibria.hpp"
#include "noiselab/errors.hpp"
#include "noiselab/io.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace noiselab {

namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

struct Population {
  Matrix V;
  Matrix sigma_x;
  Matrix sigma_eps;
};

Population population(const DataSpec& data) {
  Population p;
  p.V = teacher_matrix(data);
  p.sigma_x = input_variances(data).asDiagonal();
  p.sigma_eps = label_noise_variances(data).asDiagonal();
  return p;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string param_string(const Json& p, const char* key, const std::string& dflt = "") {
  auto it = p.find(key);
  if (it == p.end() || it->is_null()) return dflt;
  if (!it->is_string()) throw ConfigError(std::string("check parameter '") + key + "' must be a string");
  return it->get<std::string>();
}

std::string require_string(const Json& p, const char* key, const std::string& where) {
  const std::string v = param_string(p, key);
  if (v.empty()) throw ConfigError(where + ": missing field '" + key + "'");
  return v;
}

double param_double(const Json& p, const char* key, double dflt) {
  auto it = p.find(key);
  if (it == p.end() || it->is_null()) return dflt;
  if (!it->is_number()) throw ConfigError(std::string("check parameter '") + key + "' must be a number");
  return it->get<double>();
}

std::vector<std::string> param_strings(const Json& p, const char* key) {
  std::vector<std::string> out;
  auto it = p.find(key);
  if (it == p.end() || it->is_null()) return out;
  if (it->is_string()) return {it->get<std::string>()};
  for (const auto& e : *it) out.push_back(e.get<std::string>());
  return out;
}

const LoadedRun* find_run(const std::vector<LoadedRun>& runs, const std::string& id) {
  for (const auto& r : runs)
    if (r.run_id() == id) return &r;
  return nullptr;
}

std::vector<const LoadedRun*> sweep_members(const std::vector<LoadedRun>& runs, const std::string& id) {
  std::vector<const LoadedRun*> out;
  for (const auto& r : runs)
    if (r.sweep && r.sweep->sweep_id == id) out.push_back(&r);
  std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->sweep->index < b->sweep->index; });
  return out;
}

double final_value(const LoadedRun& r, const std::string& column) {
  const auto& t = r.diagnostics;
  if (t.size() == 0) return kNaN;
  return t.column(column).back();
}

double terminal_norm2(const LoadedRun& r, const std::vector<std::string>& blocks) {
  if (blocks.empty()) return r.terminal.squared_norm();
  double s = 0.0;
  for (const auto& b : blocks) s += r.terminal.squared_norm(b);
  return s;
}

double initial_norm2(const LoadedRun& r, const std::vector<std::string>& blocks) {
  if (blocks.empty()) return r.initial.squared_norm();
  double s = 0.0;
  for (const auto& b : blocks) s += r.initial.squared_norm(b);
  return s;
}

double terminal_balance(const LoadedRun& r) {
  const double v = final_value(r, "balance_residual");
  if (std::isfinite(v)) return v;
  const Dataset data = materialize_dataset(r.spec);
  const GammaPair pair = gamma_pair(r.terminal.block("U"), r.terminal.block("W"), data, r.spec.optim.weight_decay);
  return balance_residual(r.terminal.block("U"), r.terminal.block("W"), pair);
}

double terminal_sharpness(const LoadedRun& r) {
  const double v = final_value(r, "sharpness");
  if (std::isfinite(v)) return v;
  const Population p = population(r.spec.data);
  return sharpness(r.terminal.block("U"), r.terminal.block("W"), p.sigma_x, output_dim(r.spec.data));
}

// Per recorded step, the summed squared norm of the listed blocks (all when empty).
std::vector<double> norm_series(const LoadedRun& r, const std::vector<std::string>& blocks) {
  const auto& t = r.diagnostics;
  std::vector<std::string> names = blocks;
  if (names.empty())
    for (const auto& b : r.initial.layout().blocks()) names.push_back(b.name);
  std::vector<double> out;
  for (std::size_t i : t.step_rows()) {
    double s = 0.0;
    for (const auto& b : names) s += t.column("norm2_" + b)[i];
    out.push_back(s);
  }
  return out;
}

std::string join(const std::vector<std::string>& v, const char* sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

DeepLinearEquilibrium equilibrium_for(const RunSpec& spec, DeepLinearNormalization norm,
                                      std::vector<Index> widths = {}) {
  const auto* m = std::get_if<DeepLinear>(&spec.model);
  if (!m) throw ConfigError("deep-linear prediction needs a deep_linear model");
  if (widths.empty()) widths.assign(m->dims.begin() + 1, m->dims.end() - 1);
  const Population p = population(spec.data);
  return deep_linear_equilibrium(p.V, p.sigma_x, p.sigma_eps, static_cast<int>(m->dims.size()) - 1, widths, {},
                                 norm);
}

DeepLinearNormalization parse_normalization(const std::string& s) {
  if (s.empty() || s == "trace_balanced") return DeepLinearNormalization::TraceBalanced;
  if (s == "published") return DeepLinearNormalization::Published;
  throw ConfigError("unknown normalization '" + s + "' (trace_balanced or published)");
}

RunSpec spec_for(const ExperimentConfig& cfg, const std::string& id) {
  for (const auto& r : cfg.runs)
    if (r.id == id) return cfg.resolve_run(r);
  for (const auto& s : cfg.sweeps)
    if (s.id == id) return cfg.resolve_sweep_base(s);
  throw ConfigError("no run or sweep named '" + id + "'");
}

int sign_of(double v) { return (v > 0) - (v < 0); }

// Fraction of entries sharing the majority sign (zeros count against).
double sign_agreement(const Vector& v) {
  Index pos = 0, neg = 0;
  for (Index i = 0; i < v.size(); ++i) {
    pos += v(i) > 0;
    neg += v(i) < 0;
  }
  return v.size() ? static_cast<double>(std::max(pos, neg)) / static_cast<double>(v.size()) : 1.0;
}

void evaluate_one(const ExperimentConfig& cfg, const CheckSpec& c, const std::vector<LoadedRun>& runs,
                  std::vector<ReportRow>& out) {
  const Json& p = c.params;
  const std::string where = "check '" + c.kind + "'";
  ReportRow row;
  row.anchor = c.anchor;
  row.check = c.kind;
  row.scaled = !cfg.scaled.empty();
  auto emit = [&](ReportRow r) { out.push_back(std::move(r)); };

  if (c.kind == "balance_below" || c.kind == "global_min_balance_below" || c.kind == "diverged" ||
      c.kind == "norm_nondecreasing" || c.kind == "layer_norm_spread_below" || c.kind == "deep_linear_norm_match" ||
      c.kind == "charge_decay" || c.kind == "sign_alignment" || c.kind == "neuron_output_sign_alignment" ||
      c.kind == "final_loss_below") {
    const std::string id = require_string(p, "run", where);
    const LoadedRun* r = find_run(runs, id);
    if (!r) return;
    row.subject = id;
    if (c.kind == "diverged") {
      const bool expect = p.value("expect", true);
      row.measured = r->diverged ? 1.0 : 0.0;
      row.threshold = expect ? 1.0 : 0.0;
      row.pass = r->diverged == expect;
      row.notes = r->diverged ? "diverged at step " + std::to_string(r->divergence_step.value_or(-1))
                              : "completed " + std::to_string(r->spec.optim.steps) + " steps";
      emit(row);
      return;
    }
    if (r->diverged) {
      row.measured = kNaN;
      row.threshold = param_double(p, "threshold", kNaN);
      row.pass = false;
      row.notes = "run diverged";
      emit(row);
      return;
    }
    if (c.kind == "balance_below") {
      row.measured = terminal_balance(*r);
      row.threshold = param_double(p, "threshold", 0.1);
      row.pass = row.measured < row.threshold;
    } else if (c.kind == "final_loss_below") {
      row.measured = final_value(*r, "loss");
      row.threshold = param_double(p, "threshold", 1.0);
      row.pass = row.measured < row.threshold;
    } else if (c.kind == "global_min_balance_below") {
      const Population pop = population(r->spec.data);
      row.measured = global_min_balance_residual(r->terminal.block("U"), r->terminal.block("W"), pop.sigma_x,
                                                 pop.sigma_eps);
      row.threshold = param_double(p, "threshold", 0.1);
      row.pass = row.measured < row.threshold;
    } else if (c.kind == "norm_nondecreasing") {
      const auto blocks = param_strings(p, "blocks");
      const auto series = norm_series(*r, blocks);
      double worst = 0.0;
      Index where_step = -1;
      const auto steps = r->diagnostics.step_rows();
      for (std::size_t i = 1; i < series.size(); ++i) {
        const double rel = (series[i] - series[i - 1]) / std::max(std::abs(series[i - 1]), 1e-300);
        if (rel < worst) {
          worst = rel;
          where_step = static_cast<Index>(r->diagnostics.column("step")[steps[i]]);
        }
      }
      row.subject = id + (blocks.empty() ? "" : ":" + join(blocks));
      row.measured = worst;
      row.threshold = -1e-12;
      row.pass = worst >= row.threshold;
      row.notes = where_step >= 0 ? "largest relative drop at step " + std::to_string(where_step)
                                  : "no drop over " + std::to_string(series.size()) + " records";
    } else if (c.kind == "layer_norm_spread_below") {
      const auto blocks = param_strings(p, "blocks");
      std::vector<double> n;
      for (const auto& b : blocks) n.push_back(r->terminal.squared_norm(b));
      if (n.empty()) throw ConfigError(where + ": missing field 'blocks'");
      const auto [lo, hi] = std::minmax_element(n.begin(), n.end());
      double mean = 0.0;
      for (double v : n) mean += v / static_cast<double>(n.size());
      row.subject = id + ":" + join(blocks);
      row.measured = (*hi - *lo) / mean;
      row.threshold = param_double(p, "threshold", 0.1);
      row.pass = row.measured < row.threshold;
      std::ostringstream notes;
      for (std::size_t i = 0; i < n.size(); ++i) notes << (i ? " " : "") << blocks[i] << "=" << fmt(n[i]);
      row.notes = notes.str();
    } else if (c.kind == "deep_linear_norm_match") {
      const auto blocks = param_strings(p, "blocks");
      if (blocks.empty()) throw ConfigError(where + ": missing field 'blocks'");
      const auto eq = equilibrium_for(r->spec, parse_normalization(param_string(p, "normalization")));
      double worst = 0.0;
      std::ostringstream notes;
      for (const auto& b : blocks) {
        const std::size_t i = r->terminal.layout().find(b).value();
        const double target = eq.sigmas[i].squaredNorm();
        const double got = r->terminal.squared_norm(b);
        worst = std::max(worst, std::abs(got - target) / target);
        notes << b << "=" << fmt(got) << " vs " << fmt(target) << "; ";
      }
      const double d = static_cast<double>(eq.rank);
      const int D = static_cast<int>(eq.layers.size());
      notes << "(TrS')^{2/D} d^{1-2/D}=" << fmt(std::pow(eq.s_prime.sum(), 2.0 / D) * std::pow(d, 1.0 - 2.0 / D));
      row.subject = id + ":" + join(blocks);
      row.measured = worst;
      row.threshold = param_double(p, "rel_tol", 0.25);
      row.pass = row.measured <= row.threshold;
      row.notes = notes.str();
    } else if (c.kind == "charge_decay") {
      const std::string type = param_string(p, "type", "double_rotation");
      const double min_factor = param_double(p, "min_factor", 100.0);
      double worst = std::numeric_limits<double>::infinity();
      std::string worst_id;
      for (const auto& d : r->spec.symmetries) {
        if (d.type_name() != type) continue;
        const auto rows = r->diagnostics.rows_for(d.id());
        if (rows.size() < 2) continue;
        const double c0 = std::abs(r->diagnostics.column("C")[rows.front()]);
        const double c1 = std::abs(r->diagnostics.column("C")[rows.back()]);
        const double f = c1 > 0 ? c0 / c1 : std::numeric_limits<double>::infinity();
        if (f < worst) {
          worst = f;
          worst_id = d.id();
        }
      }
      row.measured = worst;
      row.threshold = min_factor;
      row.pass = worst >= min_factor;
      row.notes = "weakest decay: " + worst_id;
    } else if (c.kind == "sign_alignment" || c.kind == "neuron_output_sign_alignment") {
      Vector v;
      if (c.kind == "sign_alignment") {
        v = Eigen::Map<const Vector>(r->terminal.block("U").data(), r->terminal.block("U").size());
      } else {
        v = r->terminal.block("U").transpose().cwiseProduct(r->terminal.block("W"));
      }
      row.measured = sign_agreement(v);
      row.threshold = 1.0;
      row.pass = row.measured >= 1.0;
      Vector v0;
      if (c.kind == "sign_alignment") {
        v0 = Eigen::Map<const Vector>(r->initial.block("U").data(), r->initial.block("U").size());
      } else {
        v0 = r->initial.block("U").transpose().cwiseProduct(r->initial.block("W"));
      }
      Index flips = 0;
      for (Index i = 0; i < v.size(); ++i) flips += sign_of(v(i)) != sign_of(v0(i));
      row.notes = "initial agreement " + fmt(sign_agreement(v0)) + ", entries that changed sign " +
                  std::to_string(flips);
    }
    emit(row);
    return;
  }

  if (c.kind == "balance_ratio_above" || c.kind == "relative_norm_change_ratio_below") {
    const std::string id = require_string(p, "run", where);
    const std::string ref = require_string(p, "reference", where);
    const LoadedRun* r = find_run(runs, id);
    const LoadedRun* q = find_run(runs, ref);
    if (!r || !q) return;
    row.subject = id + "/" + ref;
    if (r->diverged || q->diverged) {
      row.measured = kNaN;
      row.pass = false;
      row.notes = "run diverged";
    } else if (c.kind == "balance_ratio_above") {
      const double a = terminal_balance(*r);
      const double b = terminal_balance(*q);
      row.measured = a / b;
      row.threshold = param_double(p, "threshold", 5.0);
      row.pass = row.measured > row.threshold;
      row.notes = id + "=" + fmt(a) + ", " + ref + "=" + fmt(b);
    } else {
      const auto blocks = param_strings(p, "blocks");
      auto rel = [&](const LoadedRun& x) {
        const double n0 = initial_norm2(x, blocks);
        return std::abs(terminal_norm2(x, blocks) - n0) / n0;
      };
      const double a = rel(*r);
      const double b = rel(*q);
      row.measured = b > 0 ? a / b : std::numeric_limits<double>::infinity();
      row.threshold = param_double(p, "threshold", 0.01);
      row.pass = row.measured < row.threshold;
      row.notes = "relative change " + id + "=" + fmt(a) + ", " + ref + "=" + fmt(b);
    }
    emit(row);
    return;
  }

  if (c.kind == "sweep_balance_below") {
    const std::string id = require_string(p, "sweep", where);
    const auto members = sweep_members(runs, id);
    if (members.empty()) return;
    row.subject = id;
    row.threshold = param_double(p, "threshold", 0.1);
    double worst = 0.0;
    bool diverged = false;
    for (auto* m : members) {
      if (m->diverged) {
        diverged = true;
        continue;
      }
      worst = std::max(worst, terminal_balance(*m));
    }
    row.measured = diverged ? kNaN : worst;
    row.pass = !diverged && worst < row.threshold;
    row.notes = diverged ? "a member diverged" : "max over " + std::to_string(members.size()) + " members";
    emit(row);
    return;
  }

  if (c.kind == "norm_ratio_crossing") {
    const std::string id = require_string(p, "sweep", where);
    const auto members = sweep_members(runs, id);
    if (members.empty()) return;
    const std::string num = param_string(p, "numerator", "U");
    const std::string den = param_string(p, "denominator", "W");
    const double at = param_double(p, "at", 1.0);
    std::vector<double> x, ratio;
    std::ostringstream notes;
    for (auto* m : members) {
      x.push_back(m->sweep->value);
      ratio.push_back(m->diverged ? kNaN : m->terminal.squared_norm(num) / m->terminal.squared_norm(den));
      notes << fmt(x.back()) << ":" << fmt(ratio.back()) << " ";
    }
    bool up = true, down = true;
    for (std::size_t i = 1; i < ratio.size(); ++i) {
      up = up && ratio[i] >= ratio[i - 1];
      down = down && ratio[i] <= ratio[i - 1];
    }
    const bool monotone = up || down;
    // A crossing between adjacent points counts when one of them is within one grid step of `at`.
    bool crossing = false;
    for (std::size_t i = 0; i + 1 < ratio.size(); ++i) {
      if ((ratio[i] - 1.0) * (ratio[i + 1] - 1.0) > 0.0) continue;
      std::size_t k = 0;
      for (std::size_t j = 1; j < x.size(); ++j)
        if (std::abs(x[j] - at) < std::abs(x[k] - at)) k = j;
      const std::size_t lo = k > 0 ? k - 1 : 0;
      const std::size_t hi = std::min(k + 1, x.size() - 1);
      if (i + 1 >= lo && i <= hi) crossing = true;
    }
    double nearest = kNaN;
    for (std::size_t j = 0; j < x.size(); ++j)
      if (x[j] == at) nearest = ratio[j];
    row.subject = id + ":" + num + "/" + den;
    row.measured = nearest;
    row.threshold = 1.0;
    row.pass = monotone && crossing;
    row.notes = notes.str() + "| monotone=" + (monotone ? "yes" : "no") + " crossing=" + (crossing ? "yes" : "no");
    emit(row);
    return;
  }

  if (c.kind == "sharpness_straddles") {
    const std::string id = require_string(p, "sweep", where);
    const std::string ref = require_string(p, "reference", where);
    const auto a = sweep_members(runs, id);
    const auto b = sweep_members(runs, ref);
    if (a.empty() || b.empty()) return;
    int above = 0, below = 0;
    std::ostringstream notes;
    for (auto* m : a) {
      const LoadedRun* match = nullptr;
      for (auto* n : b)
        if (n->sweep->value == m->sweep->value) match = n;
      if (!match || m->diverged || match->diverged) continue;
      const double sa = terminal_sharpness(*m);
      const double sb = terminal_sharpness(*match);
      above += sa > sb;
      below += sa < sb;
      notes << fmt(m->sweep->value) << ":" << fmt(sa) << "/" << fmt(sb) << " ";
    }
    row.subject = id + " vs " + ref;
    row.measured = static_cast<double>(std::min(above, below));
    row.threshold = 1.0;
    row.pass = above > 0 && below > 0;
    row.notes = notes.str() + "| above=" + std::to_string(above) + " below=" + std::to_string(below);
    emit(row);
    return;
  }

  if (c.kind == "deep_linear_stationarity") {
    const std::string id = require_string(p, "run", where);
    const RunSpec spec = spec_for(cfg, id);
    const auto eq = equilibrium_for(spec, parse_normalization(param_string(p, "normalization")));
    const Population pop = population(spec.data);
    const auto res = deep_linear_stationarity_residuals(eq.layers, pop.sigma_x, pop.sigma_eps);
    row.subject = id;
    row.measured = *std::max_element(res.begin(), res.end());
    row.threshold = param_double(p, "threshold", 1e-8);
    row.pass = row.measured <= row.threshold;
    row.notes = "constructed equilibrium, not a trained run";
    emit(row);
    return;
  }

  throw ConfigError("unknown check kind '" + c.kind + "'");
}

std::vector<std::string> check_kinds() {
  return {"balance_below",         "global_min_balance_below", "diverged",
          "norm_nondecreasing",    "layer_norm_spread_below",  "deep_linear_norm_match",
          "charge_decay",          "sign_alignment",           "neuron_output_sign_alignment",
          "final_loss_below",      "balance_ratio_above",      "relative_norm_change_ratio_below",
          "sweep_balance_below",   "norm_ratio_crossing",      "sharpness_straddles",
          "deep_linear_stationarity"};
}

std::vector<std::string> expected_run_ids(const ExperimentConfig& cfg) {
  std::vector<std::string> ids;
  for (const auto& r : cfg.runs) ids.push_back(r.id);
  for (const auto& s : cfg.sweeps)
    for (std::size_t i = 0; i < s.values.size(); ++i) ids.push_back(s.id + "_" + std::to_string(i));
  return ids;
}

RunSummary summarize(const LoadedRun& r) {
  RunSummary s;
  s.run_id = r.run_id();
  s.sweep_id = r.sweep ? r.sweep->sweep_id : "";
  s.diverged = r.diverged;
  s.expect_divergence = r.expect_divergence;
  s.divergence_step = r.divergence_step;
  s.steps_completed = r.manifest.at("summary").value("steps_completed", Index{0});
  s.final_loss = r.diagnostics.size() ? r.diagnostics.column("loss").back() : kNaN;
  return s;
}

Json number_to_json(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return nullptr;
  return v > 0 ? "inf" : "-inf";
}

double number_from_json(const Json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) return j.get<std::string>() == "-inf" ? -kInf : kInf;
  return kNaN;
}

Json row_to_json(const ReportRow& r) {
  Json e;
  e["anchor"] = r.anchor;
  e["check"] = r.check;
  e["subject"] = r.subject;
  e["measured"] = number_to_json(r.measured);
  e["threshold"] = number_to_json(r.threshold);
  e["pass"] = r.pass;
  e["scaled"] = r.scaled;
  e["notes"] = r.notes;
  return e;
}

ReportRow row_from_json(const Json& e) {
  ReportRow r;
  r.anchor = e.value("anchor", std::string());
  r.check = e.value("check", std::string());
  r.subject = e.value("subject", std::string());
  r.measured = number_from_json(e.value("measured", Json(nullptr)));
  r.threshold = number_from_json(e.value("threshold", Json(nullptr)));
  r.pass = e.value("pass", false);
  r.scaled = e.value("scaled", false);
  r.notes = e.value("notes", std::string());
  return r;
}

std::vector<std::string> prediction_files_in(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("prediction_", 0) == 0 && e.path().extension() == ".csv") out.push_back(name);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

bool ExperimentReport::all_pass() const {
  return std::all_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.pass; });
}

std::vector<std::string> ExperimentReport::unexpected_divergences() const {
  std::vector<std::string> out;
  for (const auto& r : runs)
    if (r.diverged && !r.expect_divergence) out.push_back(r.run_id);
  return out;
}

Json report_to_json(const ExperimentReport& report) {
  const auto num = number_to_json;
  Json j;
  j["experiment"] = report.experiment_id;
  j["anchor"] = report.anchor;
  j["scaled"] = report.scaled;
  Json runs = Json::array();
  for (const auto& r : report.runs) {
    Json e;
    e["run_id"] = r.run_id;
    e["sweep"] = r.sweep_id.empty() ? Json(nullptr) : Json(r.sweep_id);
    e["diverged"] = r.diverged;
    e["expect_divergence"] = r.expect_divergence;
    e["divergence_step"] = r.divergence_step ? Json(*r.divergence_step) : Json(nullptr);
    e["steps_completed"] = r.steps_completed;
    e["final_loss"] = num(r.final_loss);
    runs.push_back(e);
  }
  j["runs"] = runs;
  Json rows = Json::array();
  for (const auto& r : report.rows) rows.push_back(row_to_json(r));
  j["rows"] = rows;
  j["prediction_files"] = report.prediction_files;
  j["unexpected_divergences"] = report.unexpected_divergences();
  j["all_pass"] = report.all_pass();
  return j;
}

std::string report_table(const ExperimentReport& report) {
  std::ostringstream out;
  out << "experiment " << report.experiment_id;
  if (!report.anchor.empty()) out << " [" << report.anchor << "]";
  out << "\n";
  for (const auto& s : report.scaled) out << "  scaled: " << s << "\n";
  out << "runs:\n";
  for (const auto& r : report.runs) {
    out << "  " << std::left << std::setw(28) << r.run_id << " steps=" << r.steps_completed
        << " final_loss=" << fmt(r.final_loss);
    if (r.diverged) out << " DIVERGED@" << r.divergence_step.value_or(-1) << (r.expect_divergence ? " (expected)" : "");
    out << "\n";
  }
  if (!report.rows.empty()) {
    out << "checks:\n";
    for (const auto& r : report.rows) {
      out << "  " << (r.pass ? "PASS" : "FAIL") << "  " << std::left << std::setw(12) << r.anchor << std::setw(34)
          << r.check << std::setw(30) << r.subject << " measured=" << fmt(r.measured)
          << " threshold=" << fmt(r.threshold) << (r.scaled ? " (scaled)" : "") << "\n";
      if (!r.notes.empty()) out << "        " << r.notes << "\n";
    }
  }
  for (const auto& f : report.prediction_files) out << "  prediction: " << f << "\n";
  return out.str();
}

fs::path resolve_output_root(const std::optional<std::string>& explicit_root, const ExperimentConfig& cfg) {
  if (explicit_root && !explicit_root->empty()) return *explicit_root;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  if (const char* env = std::getenv("NOISE_LAB_OUT"); env && *env) return env;
  return "noise_lab_out";
}

std::vector<fs::path> write_prediction(const ExperimentConfig& cfg, const PredictionSpec& pred, const fs::path& dir,
                                       std::vector<ReportRow>* rows) {
  std::vector<fs::path> files;
  const Json& p = pred.params;
  const std::string base = "prediction_" + pred.name;
  auto add_row = [&](const std::string& check, double measured, double threshold, bool pass, std::string notes) {
    if (!rows) return;
    ReportRow r;
    r.anchor = cfg.anchor;
    if (auto it = p.find("anchor"); it != p.end() && it->is_string()) r.anchor = it->get<std::string>();
    r.check = check;
    r.subject = pred.name;
    r.measured = measured;
    r.threshold = threshold;
    r.pass = pass;
    r.scaled = !cfg.scaled.empty();
    r.notes = std::move(notes);
    rows->push_back(std::move(r));
  };

  if (pred.kind == "deep_linear") {
    const RunSpec spec = spec_for(cfg, require_string(p, "run", "prediction '" + pred.name + "'"));
    std::vector<Index> widths;
    if (auto it = p.find("widths"); it != p.end() && !it->is_null())
      for (const auto& w : *it) widths.push_back(w.get<Index>());
    const auto eq = equilibrium_for(spec, parse_normalization(param_string(p, "normalization")), widths);
    const Population pop = population(spec.data);
    std::ostringstream norms;
    norms << "layer,frobenius_norm2,sigma_norm2\n";
    for (std::size_t i = 0; i < eq.layers.size(); ++i) {
      const fs::path f = dir / (base + "_W" + std::to_string(i + 1) + ".csv");
      write_matrix_csv(f, eq.layers[i]);
      files.push_back(f);
      norms << "W" << i + 1 << "," << format_double(eq.layers[i].squaredNorm()) << ","
            << format_double(eq.sigmas[i].squaredNorm()) << "\n";
    }
    write_file_atomic(dir / (base + "_norms.csv"), norms.str());
    files.push_back(dir / (base + "_norms.csv"));
    const auto res = deep_linear_stationarity_residuals(eq.layers, pop.sigma_x, pop.sigma_eps);
    std::ostringstream st;
    st << "pair,residual\n";
    for (std::size_t i = 0; i < res.size(); ++i) st << i + 1 << "-" << i + 2 << "," << format_double(res[i]) << "\n";
    write_file_atomic(dir / (base + "_stationarity.csv"), st.str());
    files.push_back(dir / (base + "_stationarity.csv"));

    Matrix prod = eq.layers.front();
    for (std::size_t i = 1; i < eq.layers.size(); ++i) prod = eq.layers[i] * prod;
    const double prod_err = relative_difference(prod, pop.V);
    add_row("prediction_product", prod_err, 1e-8, prod_err <= 1e-8, "W_D ... W_1 against the teacher");
    const double worst = *std::max_element(res.begin(), res.end());
    add_row("prediction_stationarity", worst, 1e-8, worst <= 1e-8, "max over adjacent layer pairs");
    if (eq.layers.size() > 2) {
      double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
      for (std::size_t i = 1; i + 1 < eq.layers.size(); ++i) {
        lo = std::min(lo, eq.layers[i].squaredNorm());
        hi = std::max(hi, eq.layers[i].squaredNorm());
      }
      const double spread = (hi - lo) / hi;
      add_row("prediction_interior_norms_equal", spread, 1e-10, spread <= 1e-10,
              "interior layer norm^2 = " + fmt(hi));
    }
  } else if (pred.kind == "sharpness_table") {
    const Index d = static_cast<Index>(param_double(p, "d", 0));
    const Index d_x = static_cast<Index>(param_double(p, "d_x", 0));
    const Index d_y = static_cast<Index>(param_double(p, "d_y", static_cast<double>(d_x)));
    if (d < 1 || d_x < 1 || d_y < 1) throw ConfigError("prediction '" + pred.name + "': d, d_x, d_y must be >= 1");
    const double tr = param_double(p, "trace_sigma_x", static_cast<double>(d_x));
    std::vector<std::string> schemes = param_strings(p, "schemes");
    if (schemes.empty()) schemes = {"xavier", "kaiming", "kaiming-unit-output"};
    const ModelSpec model = TwoLayerLinear{d_x, d, d_y};
    const auto layout = make_layout(model);
    std::ostringstream out;
    out << "scheme,sigma_U2,sigma_W2,S_init,S_end\n";
    for (const auto& s : schemes) {
      InitSpec init;
      init.scheme = s;
      init.scale = param_double(p, "scale", 1.0);
      const double su = init_variance(model, init, layout->at("U"));
      const double sw = init_variance(model, init, layout->at("W"));
      const auto e = sharpness_init_end(d, d_x, d_y, su, sw, tr);
      out << s << "," << format_double(su) << "," << format_double(sw) << "," << format_double(e.s_init) << ","
          << format_double(e.s_end) << "\n";
    }
    write_file_atomic(dir / (base + ".csv"), out.str());
    files.push_back(dir / (base + ".csv"));
  } else if (pred.kind == "balanced_global_minimum") {
    const RunSpec spec = spec_for(cfg, require_string(p, "run", "prediction '" + pred.name + "'"));
    const auto* m = std::get_if<TwoLayerLinear>(&spec.model);
    if (!m) throw ConfigError("prediction '" + pred.name + "' needs a two_layer_linear model");
    const Population pop = population(spec.data);
    const auto bf = balanced_global_minimum(pop.V, pop.sigma_x, pop.sigma_eps, m->d);
    const Matrix sx = pop.sigma_x / pop.sigma_x.trace();
    const Matrix se = pop.sigma_eps / pop.sigma_eps.trace();
    const std::vector<std::pair<std::string, Matrix>> mats{
        {"_U", bf.U},
        {"_W", bf.W},
        {"_W_Sbar_x_Wt", bf.W * sx * bf.W.transpose()},
        {"_Ut_Sbar_e_U", bf.U.transpose() * se * bf.U}};
    for (const auto& [suffix, mat] : mats) {
      write_matrix_csv(dir / (base + suffix + ".csv"), mat);
      files.push_back(dir / (base + suffix + ".csv"));
    }
    const double res = global_min_balance_residual(bf.U, bf.W, pop.sigma_x, pop.sigma_eps);
    add_row("prediction_global_min_balance", res, 1e-10, res <= 1e-10, "rank " + std::to_string(bf.rank));
  } else {
    throw ConfigError("unknown prediction kind '" + pred.kind + "'");
  }
  return files;
}

std::vector<ReportRow> evaluate_checks(const ExperimentConfig& cfg, const std::vector<LoadedRun>& runs) {
  std::vector<ReportRow> out;
  const auto kinds = check_kinds();
  for (const auto& c : cfg.checks) {
    if (std::find(kinds.begin(), kinds.end(), c.kind) == kinds.end()) {
      throw ConfigError("unknown check kind '" + c.kind + "'");
    }
    evaluate_one(cfg, c, runs, out);
  }
  return out;
}

std::vector<LoadedRun> load_runs_below(const fs::path& dir) {
  std::vector<fs::path> found;
  if (fs::exists(dir / "manifest.json")) found.push_back(dir);
  if (fs::is_directory(dir)) {
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().filename() == "manifest.json" && e.path().parent_path() != dir) {
        found.push_back(e.path().parent_path());
      }
    }
  }
  std::sort(found.begin(), found.end());
  std::vector<LoadedRun> out;
  for (const auto& f : found) out.push_back(load_run(f));
  return out;
}

namespace {

ExperimentReport report_for(const ExperimentConfig& cfg, const fs::path& dir, std::vector<ReportRow> extra_rows) {
  std::vector<LoadedRun> runs;
  for (const auto& id : expected_run_ids(cfg)) {
    if (fs::exists(dir / id / "manifest.json")) runs.push_back(load_run(dir / id));
  }
  ExperimentReport rep;
  rep.experiment_id = cfg.id;
  rep.anchor = cfg.anchor;
  rep.scaled = cfg.scaled;
  for (const auto& r : runs) rep.runs.push_back(summarize(r));
  rep.rows = evaluate_checks(cfg, runs);
  if (extra_rows.empty() && fs::exists(dir / "prediction_rows.json")) {
    try {
      for (const auto& e : Json::parse(read_text(dir / "prediction_rows.json"))) extra_rows.push_back(row_from_json(e));
    } catch (const Json::exception& e) {
      throw ParseError((dir / "prediction_rows.json").string() + ": " + e.what());
    }
  }
  for (auto& r : extra_rows) rep.rows.push_back(std::move(r));
  rep.prediction_files = prediction_files_in(dir);
  return rep;
}

void write_report(const fs::path& dir, const ExperimentReport& rep) {
  write_file_atomic(dir / "report.json", report_to_json(rep).dump(2) + "\n");
  write_file_atomic(dir / "report.txt", report_table(rep));
}

}  // namespace

ExperimentOutcome execute_experiment(const ExperimentConfig& cfg, const ExecuteOptions& opts) {
  ExperimentOutcome outcome;
  outcome.dir = opts.out_root / cfg.id;
  fs::create_directories(outcome.dir);
  write_file_atomic(outcome.dir / "experiment.json", experiment_to_json(cfg).dump(2) + "\n");

  struct Job {
    RunSpec spec;
    bool expect = false;
    std::optional<SweepMembership> sweep;
  };
  std::vector<Job> jobs;
  if (opts.runs) {
    for (const auto& r : cfg.runs) {
      Job j{cfg.resolve_run(r), r.expect_divergence, std::nullopt};
      if (opts.seed) j.spec.optim.seed = *opts.seed;
      jobs.push_back(std::move(j));
    }
  }
  if (opts.sweeps) {
    for (const auto& s : cfg.sweeps) {
      RunSpec base = cfg.resolve_sweep_base(s);
      if (opts.seed) base.optim.seed = *opts.seed;
      const auto specs = sweep_specs(base, s.axis, s.values);
      for (std::size_t i = 0; i < specs.size(); ++i) {
        jobs.push_back(Job{specs[i], false, SweepMembership{s.id, s.axis, s.values[i], static_cast<Index>(i)}});
      }
    }
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const RunRecord rec = run(jobs[i].spec);
        save_run(outcome.dir / jobs[i].spec.run_id, rec, cfg.id, jobs[i].expect, jobs[i].sweep);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(opts.threads, static_cast<int>(jobs.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<ReportRow> prediction_rows;
  if (opts.predictions) {
    for (const auto& p : cfg.predictions) write_prediction(cfg, p, outcome.dir, &prediction_rows);
    Json rows = Json::array();
    for (const auto& r : prediction_rows) rows.push_back(row_to_json(r));
    write_file_atomic(outcome.dir / "prediction_rows.json", rows.dump(2) + "\n");
  }
  outcome.report = report_for(cfg, outcome.dir, std::move(prediction_rows));
  write_report(outcome.dir, outcome.report);
  return outcome;
}

ExperimentReport report_from_dirs(const std::vector<fs::path>& dirs) {
  ExperimentReport merged;
  std::vector<std::string> ids;
  for (const auto& dir : dirs) {
    if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
    if (fs::exists(dir / "experiment.json")) {
      Json j;
      try {
        j = Json::parse(read_text(dir / "experiment.json"));
      } catch (const Json::exception& e) {
        throw ConfigError((dir / "experiment.json").string() + ": " + e.what());
      }
      const ExperimentConfig cfg = experiment_from_json(j);
      ExperimentReport rep = report_for(cfg, dir, {});
      ids.push_back(cfg.id);
      if (merged.anchor.empty()) merged.anchor = cfg.anchor;
      for (auto& s : rep.scaled) merged.scaled.push_back(s);
      for (auto& r : rep.runs) merged.runs.push_back(r);
      for (auto& r : rep.rows) merged.rows.push_back(r);
      for (auto& f : rep.prediction_files) merged.prediction_files.push_back((dir / f).string());
      continue;
    }
    const auto runs = load_runs_below(dir);
    for (const auto& r : runs) {
      merged.runs.push_back(summarize(r));
      ReportRow row;
      row.anchor = r.manifest.value("experiment", std::string("run"));
      row.check = "divergence_as_declared";
      row.subject = r.run_id();
      row.measured = r.diverged ? 1.0 : 0.0;
      row.threshold = r.expect_divergence ? 1.0 : 0.0;
      row.pass = r.diverged == r.expect_divergence;
      merged.rows.push_back(row);
    }
    if (runs.empty()) {
      for (auto& f : prediction_files_in(dir)) merged.prediction_files.push_back((dir / f).string());
    } else {
      ids.push_back(dir.filename().string());
    }
  }
  if (merged.runs.empty() && merged.prediction_files.empty()) {
    throw ConfigError("no runs or predictions found in the given directories");
  }
  merged.experiment_id = ids.empty() ? "predictions" : join(ids, "+");
  return merged;
}

}  // namespace noiselab
