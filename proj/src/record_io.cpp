#include "noiselab/record_io.hpp"

#include "noiselab/data.hpp"
#include "noiselab/errors.hpp"
#include "noiselab/io.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

namespace noiselab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const std::vector<std::string> kLeading{"step", "eta", "time", "loss", "sharpness", "balance_residual"};
const std::vector<std::string> kCharge{"C", "G_pred", "dCdt_meas", "lambda_star", "rel_dist"};

Json number_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double parse_number(const std::string& s, std::size_t line) {
  if (s.empty()) return kNaN;
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE) {
    throw ParseError("line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::vector<std::string> diagnostics_columns(const std::vector<std::string>& block_names) {
  std::vector<std::string> cols = kLeading;
  for (const auto& b : block_names) cols.push_back("norm2_" + b);
  cols.push_back("charge_id");
  for (const auto& c : kCharge) cols.push_back(c);
  return cols;
}

std::string diagnostics_csv(const RunRecord& rec) {
  std::ostringstream out;
  const auto cols = diagnostics_columns(rec.block_names);
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  for (const auto& row : rec.rows) {
    std::ostringstream prefix;
    prefix << row.step << "," << format_double(row.lr) << "," << format_double(row.time) << ","
           << format_double(row.loss) << "," << format_double(row.sharpness) << ","
           << format_double(row.balance_residual);
    for (double v : row.block_norm2) prefix << "," << format_double(v);
    if (row.charges.empty()) {
      out << prefix.str() << ",,nan,nan,nan,nan,nan\n";
      continue;
    }
    for (const auto& c : row.charges) {
      out << prefix.str() << "," << c.id << "," << format_double(c.C) << "," << format_double(c.G_pred) << ","
          << format_double(c.dCdt) << "," << format_double(c.lambda_star) << "," << format_double(c.rel_dist)
          << "\n";
    }
  }
  return out.str();
}

Json params_to_json(const ParamBlocks& params) {
  Json blocks = Json::array();
  for (std::size_t b = 0; b < params.layout().blocks().size(); ++b) {
    const BlockInfo& info = params.layout().blocks()[b];
    Json e;
    e["name"] = info.name;
    e["rows"] = info.rows;
    e["cols"] = info.cols;
    Json vals = Json::array();
    for (Index i = 0; i < info.size(); ++i) vals.push_back(params.flatten()(info.offset + i));
    e["values"] = vals;
    blocks.push_back(e);
  }
  return blocks;
}

ParamBlocks params_from_json(const Json& j) {
  if (!j.is_array()) throw ParseError("parameter blocks must be a list");
  std::vector<std::pair<std::string, Matrix>> mats;
  for (const auto& e : j) {
    const Index rows = e.at("rows").get<Index>();
    const Index cols = e.at("cols").get<Index>();
    const auto& vals = e.at("values");
    if (static_cast<Index>(vals.size()) != rows * cols) throw ParseError("parameter block has wrong value count");
    Matrix m(rows, cols);
    for (Index i = 0; i < rows * cols; ++i) {
      m(i % rows, i / rows) = vals[static_cast<std::size_t>(i)].is_null() ? kNaN : vals[static_cast<std::size_t>(i)].get<double>();
    }
    mats.push_back({e.at("name").get<std::string>(), m});
  }
  return ParamBlocks::from_matrices(mats);
}

Json run_manifest(const RunRecord& rec, const std::string& experiment_id, bool expect_divergence,
                  const std::optional<SweepMembership>& sweep) {
  Json m;
  m["run_id"] = rec.spec.run_id;
  m["experiment"] = experiment_id;
  m["seed"] = rec.spec.optim.seed;
  m["data_seed"] = rec.spec.data.seed;
  m["rng"] = rec.rng_name;
  m["expect_divergence"] = expect_divergence;
  if (sweep) {
    m["sweep"] = {{"id", sweep->sweep_id}, {"axis", sweep->axis}, {"value", sweep->value}, {"index", sweep->index}};
  } else {
    m["sweep"] = nullptr;
  }
  m["spec"] = run_spec_to_json(rec.spec);
  Json s;
  s["steps_completed"] = rec.steps_completed;
  s["diverged"] = rec.diverged;
  s["divergence_step"] = rec.divergence_step ? Json(*rec.divergence_step) : Json(nullptr);
  s["recorded_rows"] = rec.rows.size();
  if (!rec.rows.empty()) {
    s["final_loss"] = number_or_null(rec.rows.back().loss);
    s["final_balance_residual"] = number_or_null(rec.rows.back().balance_residual);
    s["final_sharpness"] = number_or_null(rec.rows.back().sharpness);
  }
  Json n0, n1;
  for (std::size_t b = 0; b < rec.block_names.size(); ++b) {
    n0[rec.block_names[b]] = rec.initial.block(b).squaredNorm();
    if (rec.terminal.dim() > 0) n1[rec.block_names[b]] = number_or_null(rec.terminal.block(b).squaredNorm());
  }
  s["initial_norm2"] = n0;
  s["terminal_norm2"] = n1;
  m["summary"] = s;
  m["initial_params"] = params_to_json(rec.initial);
  m["terminal_params"] = rec.terminal.dim() > 0 ? params_to_json(rec.terminal) : Json::array();
  return m;
}

std::pair<Matrix, Matrix> representation_matrices(const RunSpec& spec, const ParamBlocks& params) {
  const Vector vx = input_variances(spec.data);
  const Vector ve = label_noise_variances(spec.data);
  if (!(vx.sum() > 0.0) || !(ve.sum() > 0.0)) throw NumericalError("covariance with zero trace");
  const Matrix sx = (vx / vx.sum()).asDiagonal();
  const Matrix se = (ve / ve.sum()).asDiagonal();
  const auto U = params.block("U");
  const auto W = params.block("W");
  return {W * sx * W.transpose(), U.transpose() * se * U};
}

void save_run(const std::filesystem::path& dir, const RunRecord& rec, const std::string& experiment_id,
              bool expect_divergence, const std::optional<SweepMembership>& sweep) {
  write_file_atomic(dir / "manifest.json", run_manifest(rec, experiment_id, expect_divergence, sweep).dump(2) + "\n");
  write_file_atomic(dir / "diagnostics.csv", diagnostics_csv(rec));
  const bool two_layer = std::holds_alternative<TwoLayerLinear>(rec.spec.model) ||
                         std::holds_alternative<TwoLayerNonlinear>(rec.spec.model);
  if (two_layer && rec.terminal.dim() > 0 && rec.terminal.all_finite() && rec.spec.dataset_csv.empty()) {
    const Vector ve = label_noise_variances(rec.spec.data);
    if (ve.sum() > 0.0) {
      const auto [wsw, usu] = representation_matrices(rec.spec, rec.terminal);
      write_matrix_csv(dir / "matrix_W_Sbar_x_Wt.csv", wsw);
      write_matrix_csv(dir / "matrix_Ut_Sbar_e_U.csv", usu);
    }
  }
}

const std::vector<double>& DiagnosticsTable::column(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) throw ParseError("diagnostics has no column '" + name + "'");
  return it->second;
}

std::vector<std::size_t> DiagnosticsTable::rows_for(const std::string& charge) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < charge_id.size(); ++i)
    if (charge_id[i] == charge || charge_id[i].empty()) out.push_back(i);
  return out;
}

std::vector<std::size_t> DiagnosticsTable::step_rows() const {
  std::vector<std::size_t> out;
  const auto& step = column("step");
  for (std::size_t i = 0; i < step.size(); ++i)
    if (i == 0 || step[i] != step[i - 1]) out.push_back(i);
  return out;
}

std::string diagnostics_to_string(const DiagnosticsTable& t) {
  std::ostringstream out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? "," : "") << t.columns[i];
  out << "\n";
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::size_t i = 0; i < t.columns.size(); ++i) {
      if (i) out << ",";
      if (t.columns[i] == "charge_id") {
        out << t.charge_id[r];
      } else if (t.columns[i] == "step") {
        out << static_cast<long long>(t.values.at("step")[r]);
      } else {
        out << format_double(t.values.at(t.columns[i])[r]);
      }
    }
    out << "\n";
  }
  return out.str();
}

DiagnosticsTable parse_diagnostics(const std::string& text) {
  DiagnosticsTable t;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("diagnostics: empty file");
  t.columns = split_commas(line);
  if (t.columns.empty() || t.columns[0] != "step") throw ParseError("diagnostics: header must start with 'step'");
  for (const auto& c : t.columns)
    if (c != "charge_id") t.values[c];
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_commas(line);
    if (cells.size() != t.columns.size()) {
      throw ParseError("diagnostics line " + std::to_string(lineno) + ": expected " +
                       std::to_string(t.columns.size()) + " fields, got " + std::to_string(cells.size()));
    }
    std::string id;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (t.columns[i] == "charge_id") {
        id = cells[i];
      } else {
        t.values[t.columns[i]].push_back(parse_number(cells[i], lineno));
      }
    }
    t.charge_id.push_back(id);
  }
  return t;
}

LoadedRun load_run(const std::filesystem::path& dir) {
  LoadedRun r;
  r.dir = dir;
  try {
    r.manifest = Json::parse(read_text(dir / "manifest.json"));
  } catch (const Json::exception& e) {
    throw ParseError((dir / "manifest.json").string() + ": " + e.what());
  }
  try {
    r.spec = run_spec_from_json(r.manifest.at("spec"), "spec");
    r.initial = params_from_json(r.manifest.at("initial_params"));
    const Json& term = r.manifest.at("terminal_params");
    if (!term.empty()) r.terminal = params_from_json(term);
    const Json& s = r.manifest.at("summary");
    r.diverged = s.at("diverged").get<bool>();
    if (!s.at("divergence_step").is_null()) r.divergence_step = s.at("divergence_step").get<Index>();
    r.expect_divergence = r.manifest.value("expect_divergence", false);
    const Json& sw = r.manifest.at("sweep");
    if (!sw.is_null()) {
      r.sweep = SweepMembership{sw.at("id").get<std::string>(), sw.at("axis").get<std::string>(),
                                sw.at("value").get<double>(), sw.at("index").get<Index>()};
    }
  } catch (const Json::exception& e) {
    throw ParseError((dir / "manifest.json").string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ParseError((dir / "manifest.json").string() + ": " + e.what());
  }
  r.diagnostics = parse_diagnostics(read_text(dir / "diagnostics.csv"));
  return r;
}

}  // namespace noiselab
