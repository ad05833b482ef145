#include "noiselab/config.hpp"

#include "noiselab/errors.hpp"
#include "noiselab/io.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace noiselab {

namespace {

std::string join_path(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void check_object(const Json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError("field '" + path + "' must be a mapping");
}

void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& path) {
  check_object(j, path);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError("unknown field '" + join_path(path, it.key()) + "'");
  }
}

const Json& require(const Json& j, const std::string& key, const std::string& path) {
  check_object(j, path);
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) throw ConfigError("missing field '" + join_path(path, key) + "'");
  return *it;
}

double as_double(const Json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError("field '" + path + "' must be a number");
  return v.get<double>();
}

Index as_index(const Json& v, const std::string& path) {
  if (v.is_number_integer()) return v.get<Index>();
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d == std::floor(d) && std::abs(d) < 9e15) return static_cast<Index>(d);
  }
  throw ConfigError("field '" + path + "' must be an integer");
}

bool as_bool(const Json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError("field '" + path + "' must be true or false");
  return v.get<bool>();
}

std::string as_string(const Json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError("field '" + path + "' must be a string");
  return v.get<std::string>();
}

double get_double(const Json& j, const std::string& key, const std::string& path, double dflt) {
  auto it = j.find(key);
  return it == j.end() || it->is_null() ? dflt : as_double(*it, join_path(path, key));
}

Index get_index(const Json& j, const std::string& key, const std::string& path, Index dflt) {
  auto it = j.find(key);
  return it == j.end() || it->is_null() ? dflt : as_index(*it, join_path(path, key));
}

bool get_bool(const Json& j, const std::string& key, const std::string& path, bool dflt) {
  auto it = j.find(key);
  return it == j.end() || it->is_null() ? dflt : as_bool(*it, join_path(path, key));
}

std::string get_string(const Json& j, const std::string& key, const std::string& path, const std::string& dflt) {
  auto it = j.find(key);
  return it == j.end() || it->is_null() ? dflt : as_string(*it, join_path(path, key));
}

std::vector<double> get_doubles(const Json& j, const std::string& key, const std::string& path) {
  std::vector<double> out;
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return out;
  if (!it->is_array()) throw ConfigError("field '" + join_path(path, key) + "' must be a list");
  for (std::size_t i = 0; i < it->size(); ++i) {
    out.push_back(as_double((*it)[i], join_path(path, key) + "[" + std::to_string(i) + "]"));
  }
  return out;
}

std::vector<std::string> get_strings(const Json& j, const std::string& key, const std::string& path) {
  std::vector<std::string> out;
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return out;
  if (it->is_string()) return {it->get<std::string>()};
  if (!it->is_array()) throw ConfigError("field '" + join_path(path, key) + "' must be a list");
  for (std::size_t i = 0; i < it->size(); ++i) {
    out.push_back(as_string((*it)[i], join_path(path, key) + "[" + std::to_string(i) + "]"));
  }
  return out;
}

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json r = Json::array();
    for (Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

Matrix matrix_from_json(const Json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) throw ConfigError("field '" + path + "' must be a nonempty list of rows");
  const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
  if (cols == 0) throw ConfigError("field '" + path + "' must be a nonempty list of rows");
  Matrix m(static_cast<Index>(j.size()), static_cast<Index>(cols));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || j[i].size() != cols) throw ConfigError("field '" + path + "' has ragged rows");
    for (std::size_t k = 0; k < cols; ++k) {
      m(static_cast<Index>(i), static_cast<Index>(k)) =
          as_double(j[i][k], path + "[" + std::to_string(i) + "][" + std::to_string(k) + "]");
    }
  }
  return m;
}

}  // namespace

Json model_to_json(const ModelSpec& spec) {
  Json j;
  j["type"] = model_type_name(spec);
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, DeepLinear>) {
          j["dims"] = m.dims;
        } else if constexpr (std::is_same_v<T, Rank1Factorization>) {
          j["d"] = m.d;
        } else {
          if constexpr (std::is_same_v<T, ScaleInvariantNet>) j["variant"] = m.variant == ScaleVariant::A ? "A" : "B";
          j["d_x"] = m.d_x;
          j["d"] = m.d;
          j["d_y"] = m.d_y;
          if constexpr (std::is_same_v<T, TwoLayerNonlinear>) {
            j["activation"] = activation_name(m.activation);
            j["alpha"] = m.alpha;
          }
        }
      },
      spec);
  return j;
}

ModelSpec model_from_json(const Json& j, const std::string& path) {
  const std::string type = as_string(require(j, "type", path), join_path(path, "type"));
  ModelSpec spec;
  if (type == "two_layer_linear") {
    check_keys(j, {"type", "d_x", "d", "d_y"}, path);
    spec = TwoLayerLinear{as_index(require(j, "d_x", path), join_path(path, "d_x")),
                          as_index(require(j, "d", path), join_path(path, "d")),
                          as_index(require(j, "d_y", path), join_path(path, "d_y"))};
  } else if (type == "deep_linear") {
    check_keys(j, {"type", "dims"}, path);
    const Json& dims = require(j, "dims", path);
    if (!dims.is_array()) throw ConfigError("field '" + join_path(path, "dims") + "' must be a list");
    DeepLinear m;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      m.dims.push_back(as_index(dims[i], join_path(path, "dims") + "[" + std::to_string(i) + "]"));
    }
    spec = m;
  } else if (type == "two_layer_nonlinear") {
    check_keys(j, {"type", "d_x", "d", "d_y", "activation", "alpha"}, path);
    TwoLayerNonlinear m;
    m.d_x = as_index(require(j, "d_x", path), join_path(path, "d_x"));
    m.d = as_index(require(j, "d", path), join_path(path, "d"));
    m.d_y = as_index(require(j, "d_y", path), join_path(path, "d_y"));
    try {
      m.activation = parse_activation(as_string(require(j, "activation", path), join_path(path, "activation")));
    } catch (const ConfigError& e) {
      throw ConfigError("field '" + join_path(path, "activation") + "': " + e.what());
    }
    m.alpha = get_double(j, "alpha", path, 0.01);
    spec = m;
  } else if (type == "scale_invariant") {
    check_keys(j, {"type", "variant", "d_x", "d", "d_y"}, path);
    ScaleInvariantNet m;
    const std::string v = as_string(require(j, "variant", path), join_path(path, "variant"));
    if (v != "A" && v != "B") throw ConfigError("field '" + join_path(path, "variant") + "' must be A or B");
    m.variant = v == "A" ? ScaleVariant::A : ScaleVariant::B;
    m.d_x = as_index(require(j, "d_x", path), join_path(path, "d_x"));
    m.d = as_index(require(j, "d", path), join_path(path, "d"));
    m.d_y = as_index(require(j, "d_y", path), join_path(path, "d_y"));
    spec = m;
  } else if (type == "rank1") {
    check_keys(j, {"type", "d"}, path);
    spec = Rank1Factorization{as_index(require(j, "d", path), join_path(path, "d"))};
  } else {
    throw ConfigError("field '" + join_path(path, "type") + "': unknown model type '" + type + "'");
  }
  try {
    validate(spec);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return spec;
}

Json data_to_json(const DataSpec& spec) {
  Json j;
  j["d_x"] = spec.d_x;
  j["n"] = spec.n;
  j["seed"] = spec.seed;
  Json in;
  switch (spec.input.kind) {
    case InputSpec::Kind::Isotropic:
      in["kind"] = "isotropic";
      in["variance"] = spec.input.variance;
      break;
    case InputSpec::Kind::Split:
      in["kind"] = "split";
      in["phi"] = spec.input.phi;
      break;
    case InputSpec::Kind::Diagonal:
      in["kind"] = "diagonal";
      in["diagonal"] = spec.input.diagonal;
      break;
  }
  j["input"] = in;
  Json t;
  switch (spec.teacher.kind) {
    case TeacherSpec::Kind::Identity:
      t["kind"] = "identity";
      break;
    case TeacherSpec::Kind::Random:
      t["kind"] = "random";
      t["d_y"] = spec.teacher.d_y;
      t["scale"] = spec.teacher.scale;
      break;
    case TeacherSpec::Kind::Explicit:
      t["kind"] = "explicit";
      t["matrix"] = matrix_to_json(spec.teacher.matrix);
      break;
  }
  j["teacher"] = t;
  Json nz;
  nz["variance"] = spec.noise.variance;
  nz["diagonal"] = spec.noise.diagonal;
  Json ov = Json::array();
  for (const auto& [i, v] : spec.noise.overrides) ov.push_back(Json::array({i, v}));
  nz["overrides"] = ov;
  j["noise"] = nz;
  return j;
}

DataSpec data_from_json(const Json& j, const std::string& path) {
  check_keys(j, {"d_x", "n", "seed", "input", "teacher", "noise"}, path);
  DataSpec s;
  s.d_x = as_index(require(j, "d_x", path), join_path(path, "d_x"));
  s.n = as_index(require(j, "n", path), join_path(path, "n"));
  s.seed = static_cast<std::uint64_t>(get_index(j, "seed", path, 0));
  if (auto it = j.find("input"); it != j.end() && !it->is_null()) {
    const std::string p = join_path(path, "input");
    check_keys(*it, {"kind", "variance", "phi", "diagonal"}, p);
    const std::string kind = get_string(*it, "kind", p, "isotropic");
    if (kind == "isotropic") {
      s.input.kind = InputSpec::Kind::Isotropic;
    } else if (kind == "split") {
      s.input.kind = InputSpec::Kind::Split;
    } else if (kind == "diagonal") {
      s.input.kind = InputSpec::Kind::Diagonal;
    } else {
      throw ConfigError("field '" + join_path(p, "kind") + "': unknown input kind '" + kind + "'");
    }
    s.input.variance = get_double(*it, "variance", p, 1.0);
    s.input.phi = get_double(*it, "phi", p, 1.0);
    s.input.diagonal = get_doubles(*it, "diagonal", p);
  }
  if (auto it = j.find("teacher"); it != j.end() && !it->is_null()) {
    const std::string p = join_path(path, "teacher");
    check_keys(*it, {"kind", "d_y", "scale", "matrix"}, p);
    const std::string kind = get_string(*it, "kind", p, "identity");
    if (kind == "identity") {
      s.teacher.kind = TeacherSpec::Kind::Identity;
    } else if (kind == "random") {
      s.teacher.kind = TeacherSpec::Kind::Random;
      s.teacher.d_y = as_index(require(*it, "d_y", p), join_path(p, "d_y"));
    } else if (kind == "explicit") {
      s.teacher.kind = TeacherSpec::Kind::Explicit;
      s.teacher.matrix = matrix_from_json(require(*it, "matrix", p), join_path(p, "matrix"));
    } else {
      throw ConfigError("field '" + join_path(p, "kind") + "': unknown teacher kind '" + kind + "'");
    }
    s.teacher.scale = get_double(*it, "scale", p, 1.0);
  }
  if (auto it = j.find("noise"); it != j.end() && !it->is_null()) {
    const std::string p = join_path(path, "noise");
    check_keys(*it, {"variance", "diagonal", "overrides"}, p);
    s.noise.variance = get_double(*it, "variance", p, 0.0);
    s.noise.diagonal = get_doubles(*it, "diagonal", p);
    if (auto ov = it->find("overrides"); ov != it->end() && !ov->is_null()) {
      if (!ov->is_array()) throw ConfigError("field '" + join_path(p, "overrides") + "' must be a list");
      for (std::size_t i = 0; i < ov->size(); ++i) {
        const std::string q = join_path(p, "overrides") + "[" + std::to_string(i) + "]";
        const Json& e = (*ov)[i];
        if (!e.is_array() || e.size() != 2) throw ConfigError("field '" + q + "' must be [index, variance]");
        s.noise.overrides.push_back({as_index(e[0], q), as_double(e[1], q)});
      }
    }
  }
  try {
    validate(s);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return s;
}

Json init_to_json(const InitSpec& init) {
  Json j;
  j["scheme"] = init.scheme;
  j["scale"] = init.scale;
  j["layer_scales"] = init.layer_scales;
  return j;
}

InitSpec init_from_json(const Json& j, const std::string& path) {
  check_keys(j, {"scheme", "scale", "layer_scales"}, path);
  InitSpec s;
  s.scheme = get_string(j, "scheme", path, "xavier");
  s.scale = get_double(j, "scale", path, 1.0);
  s.layer_scales = get_doubles(j, "layer_scales", path);
  static const std::set<std::string> schemes{"xavier", "kaiming", "kaiming-unit-output", "uniform-norm"};
  if (!schemes.count(s.scheme)) {
    throw ConfigError("field '" + join_path(path, "scheme") + "': unknown init scheme '" + s.scheme + "'");
  }
  return s;
}

Json optim_to_json(const OptimConfig& c) {
  Json j;
  j["algorithm"] = algorithm_name(c.algorithm);
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["weight_decay"] = c.weight_decay;
  j["steps"] = c.steps;
  j["seed"] = c.seed;
  j["divergence_norm2"] = c.divergence_norm2;
  if (c.warmup) {
    Json w;
    w["start"] = c.warmup->start;
    w["end"] = c.warmup->end;
    w["switch_step"] = c.warmup->switch_step;
    w["shape"] = c.warmup->shape == Warmup::Shape::Step ? "step" : "linear";
    j["warmup"] = w;
  } else {
    j["warmup"] = nullptr;
  }
  Json d;
  d["cadence"] = c.diagnostics.cadence;
  d["noise"] = c.diagnostics.noise;
  d["lambda_star"] = c.diagnostics.lambda_star;
  d["sharpness"] = c.diagnostics.sharpness;
  d["balance"] = c.diagnostics.balance;
  d["slope_window"] = c.diagnostics.slope_window;
  j["diagnostics"] = d;
  return j;
}

OptimConfig optim_from_json(const Json& j, const std::string& path) {
  check_keys(j, {"algorithm", "lr", "batch_size", "weight_decay", "steps", "seed", "divergence_norm2", "warmup",
                 "diagnostics"},
             path);
  OptimConfig c;
  const std::string algo = as_string(require(j, "algorithm", path), join_path(path, "algorithm"));
  if (algo == "sgd") {
    c.algorithm = Algorithm::SGD;
  } else if (algo == "gd") {
    c.algorithm = Algorithm::GD;
  } else {
    throw ConfigError("field '" + join_path(path, "algorithm") + "' must be sgd or gd");
  }
  c.lr = as_double(require(j, "lr", path), join_path(path, "lr"));
  c.steps = as_index(require(j, "steps", path), join_path(path, "steps"));
  c.batch_size = get_index(j, "batch_size", path, 1);
  c.weight_decay = get_double(j, "weight_decay", path, 0.0);
  c.seed = static_cast<std::uint64_t>(get_index(j, "seed", path, 0));
  c.divergence_norm2 = get_double(j, "divergence_norm2", path, 1e12);
  if (auto it = j.find("warmup"); it != j.end() && !it->is_null()) {
    const std::string p = join_path(path, "warmup");
    check_keys(*it, {"start", "end", "switch_step", "shape"}, p);
    Warmup w;
    w.start = as_double(require(*it, "start", p), join_path(p, "start"));
    w.end = as_double(require(*it, "end", p), join_path(p, "end"));
    w.switch_step = as_index(require(*it, "switch_step", p), join_path(p, "switch_step"));
    const std::string shape = get_string(*it, "shape", p, "step");
    if (shape == "step") {
      w.shape = Warmup::Shape::Step;
    } else if (shape == "linear") {
      w.shape = Warmup::Shape::Linear;
    } else {
      throw ConfigError("field '" + join_path(p, "shape") + "' must be step or linear");
    }
    c.warmup = w;
  }
  if (auto it = j.find("diagnostics"); it != j.end() && !it->is_null()) {
    const std::string p = join_path(path, "diagnostics");
    check_keys(*it, {"cadence", "noise", "lambda_star", "sharpness", "balance", "slope_window"}, p);
    c.diagnostics.cadence = get_index(*it, "cadence", p, 10);
    c.diagnostics.noise = get_bool(*it, "noise", p, true);
    c.diagnostics.lambda_star = get_bool(*it, "lambda_star", p, false);
    c.diagnostics.sharpness = get_bool(*it, "sharpness", p, false);
    c.diagnostics.balance = get_bool(*it, "balance", p, false);
    c.diagnostics.slope_window = get_index(*it, "slope_window", p, 200);
  }
  return c;
}

Json symmetry_to_json(const SymmetryDescriptor& desc) {
  Json j;
  const SymmetryKind& k = desc.kind();
  if (auto* r = std::get_if<Rescaling>(&k)) {
    j["type"] = "rescaling";
    j["plus"] = r->plus;
    j["minus"] = r->minus;
  } else if (auto* s = std::get_if<Scaling>(&k)) {
    j["type"] = "scaling";
    j["blocks"] = s->blocks;
  } else if (auto* d = std::get_if<DoubleRotationBasis>(&k)) {
    j["type"] = "double_rotation";
    j["outer"] = d->outer;
    j["inner"] = d->inner;
    j["k"] = d->k;
    j["l"] = d->l;
  } else {
    const auto& g = std::get<GenericDense>(k);
    j["type"] = "dense";
    j["blocks"] = g.blocks;
    j["A"] = matrix_to_json(g.A);
  }
  j["id"] = desc.id();
  return j;
}

std::vector<SymmetryDescriptor> symmetries_from_json(const Json& j, const ModelSpec& model, const std::string& path) {
  if (j.is_string() && j.get<std::string>() == "declared") return declared_symmetries(model);
  if (!j.is_array()) throw ConfigError("field '" + path + "' must be a list or 'declared'");
  std::vector<SymmetryDescriptor> out;
  const auto layout = make_layout(model);
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    const Json& e = j[i];
    const std::string type = as_string(require(e, "type", p), join_path(p, "type"));
    const std::string id = get_string(e, "id", p, "");
    if (type == "declared") {
      check_keys(e, {"type"}, p);
      for (auto& d : declared_symmetries(model)) out.push_back(d);
      continue;
    }
    if (type == "rescaling") {
      check_keys(e, {"type", "id", "plus", "minus"}, p);
      out.emplace_back(Rescaling{get_strings(e, "plus", p), get_strings(e, "minus", p)}, id);
    } else if (type == "scaling") {
      check_keys(e, {"type", "id", "blocks"}, p);
      out.emplace_back(Scaling{get_strings(e, "blocks", p)}, id);
    } else if (type == "double_rotation") {
      check_keys(e, {"type", "id", "outer", "inner", "k", "l"}, p);
      out.emplace_back(DoubleRotationBasis{as_string(require(e, "outer", p), join_path(p, "outer")),
                                           as_string(require(e, "inner", p), join_path(p, "inner")),
                                           as_index(require(e, "k", p), join_path(p, "k")),
                                           as_index(require(e, "l", p), join_path(p, "l"))},
                       id);
    } else if (type == "dense") {
      check_keys(e, {"type", "id", "blocks", "A"}, p);
      out.emplace_back(GenericDense{get_strings(e, "blocks", p), matrix_from_json(require(e, "A", p), join_path(p, "A"))},
                       id);
    } else {
      throw ConfigError("field '" + join_path(p, "type") + "': unknown symmetry type '" + type + "'");
    }
    try {
      BoundSymmetry(out.back(), *layout);
    } catch (const ConfigError& err) {
      throw ConfigError(p + ": " + err.what());
    }
  }
  std::set<std::string> ids;
  for (const auto& d : out) {
    if (!ids.insert(d.id()).second) throw ConfigError(path + ": duplicate symmetry id '" + d.id() + "'");
  }
  return out;
}

Json run_spec_to_json(const RunSpec& spec) {
  Json j;
  j["run_id"] = spec.run_id;
  j["model"] = model_to_json(spec.model);
  j["init"] = init_to_json(spec.init);
  j["data"] = data_to_json(spec.data);
  j["dataset_csv"] = spec.dataset_csv;
  j["optim"] = optim_to_json(spec.optim);
  Json syms = Json::array();
  for (const auto& d : spec.symmetries) syms.push_back(symmetry_to_json(d));
  j["symmetries"] = syms;
  return j;
}

RunSpec run_spec_from_json(const Json& j, const std::string& path) {
  check_keys(j, {"run_id", "model", "init", "data", "dataset_csv", "optim", "symmetries"}, path);
  RunSpec s;
  s.run_id = get_string(j, "run_id", path, "run");
  s.model = model_from_json(require(j, "model", path), join_path(path, "model"));
  if (auto it = j.find("init"); it != j.end() && !it->is_null()) s.init = init_from_json(*it, join_path(path, "init"));
  s.data = data_from_json(require(j, "data", path), join_path(path, "data"));
  s.dataset_csv = get_string(j, "dataset_csv", path, "");
  s.optim = optim_from_json(require(j, "optim", path), join_path(path, "optim"));
  if (auto it = j.find("symmetries"); it != j.end() && !it->is_null()) {
    s.symmetries = symmetries_from_json(*it, s.model, join_path(path, "symmetries"));
  } else {
    s.symmetries = declared_symmetries(s.model);
  }
  if (s.dataset_csv.empty()) {
    if (s.data.d_x != model_input_dim(s.model) || output_dim(s.data) != model_output_dim(s.model)) {
      throw ConfigError(path + ": data dimensions (" + std::to_string(s.data.d_x) + ", " +
                        std::to_string(output_dim(s.data)) + ") do not match the model (" +
                        std::to_string(model_input_dim(s.model)) + ", " + std::to_string(model_output_dim(s.model)) +
                        ")");
    }
  }
  return s;
}

RunSpec ExperimentConfig::resolve_run(const RunEntry& entry) const {
  Json merged = defaults;
  merged.merge_patch(entry.overrides);
  merged["run_id"] = entry.id;
  return run_spec_from_json(merged, "runs." + entry.id);
}

RunSpec ExperimentConfig::resolve_sweep_base(const SweepEntry& entry) const {
  Json merged = defaults;
  merged.merge_patch(entry.overrides);
  merged["run_id"] = entry.id;
  return run_spec_from_json(merged, "sweeps." + entry.id);
}

Json experiment_to_json(const ExperimentConfig& cfg) {
  Json j;
  j["experiment"] = cfg.id;
  j["anchor"] = cfg.anchor;
  j["description"] = cfg.description;
  j["scaled"] = cfg.scaled;
  j["output_dir"] = cfg.output_dir;
  j["defaults"] = cfg.defaults;
  Json runs = Json::array();
  for (const auto& r : cfg.runs) {
    Json e;
    e["id"] = r.id;
    e["expect_divergence"] = r.expect_divergence;
    for (auto it = r.overrides.begin(); it != r.overrides.end(); ++it) e[it.key()] = it.value();
    runs.push_back(e);
  }
  j["runs"] = runs;
  Json sweeps = Json::array();
  for (const auto& s : cfg.sweeps) {
    Json e;
    e["id"] = s.id;
    e["axis"] = s.axis;
    e["values"] = s.values;
    for (auto it = s.overrides.begin(); it != s.overrides.end(); ++it) e[it.key()] = it.value();
    sweeps.push_back(e);
  }
  j["sweeps"] = sweeps;
  Json preds = Json::array();
  for (const auto& p : cfg.predictions) {
    Json e;
    e["kind"] = p.kind;
    e["name"] = p.name;
    for (auto it = p.params.begin(); it != p.params.end(); ++it) e[it.key()] = it.value();
    preds.push_back(e);
  }
  j["predictions"] = preds;
  Json checks = Json::array();
  for (const auto& c : cfg.checks) {
    Json e;
    e["kind"] = c.kind;
    e["anchor"] = c.anchor;
    for (auto it = c.params.begin(); it != c.params.end(); ++it) e[it.key()] = it.value();
    checks.push_back(e);
  }
  j["checks"] = checks;
  return j;
}

namespace {

Json strip(const Json& e, const std::set<std::string>& keys) {
  Json out = Json::object();
  for (auto it = e.begin(); it != e.end(); ++it)
    if (!keys.count(it.key())) out[it.key()] = it.value();
  return out;
}

}  // namespace

ExperimentConfig experiment_from_json(const Json& j) {
  check_keys(j, {"experiment", "anchor", "description", "scaled", "output_dir", "defaults", "runs", "sweeps",
                 "predictions", "checks"},
             "");
  ExperimentConfig cfg;
  cfg.id = as_string(require(j, "experiment", ""), "experiment");
  cfg.anchor = get_string(j, "anchor", "", "");
  cfg.description = get_string(j, "description", "", "");
  cfg.scaled = get_strings(j, "scaled", "");
  cfg.output_dir = get_string(j, "output_dir", "", "");
  if (auto it = j.find("defaults"); it != j.end() && !it->is_null()) {
    check_object(*it, "defaults");
    cfg.defaults = *it;
  }
  std::set<std::string> ids;
  auto list = [&](const char* key) -> Json {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return Json::array();
    if (!it->is_array()) throw ConfigError(std::string("field '") + key + "' must be a list");
    return *it;
  };
  const Json runs = list("runs");
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const std::string p = "runs[" + std::to_string(i) + "]";
    check_object(runs[i], p);
    RunEntry r;
    r.id = as_string(require(runs[i], "id", p), p + ".id");
    r.expect_divergence = get_bool(runs[i], "expect_divergence", p, false);
    r.overrides = strip(runs[i], {"id", "expect_divergence"});
    if (!ids.insert(r.id).second) throw ConfigError("duplicate run id '" + r.id + "'");
    cfg.runs.push_back(std::move(r));
  }
  const Json sweeps = list("sweeps");
  for (std::size_t i = 0; i < sweeps.size(); ++i) {
    const std::string p = "sweeps[" + std::to_string(i) + "]";
    check_object(sweeps[i], p);
    SweepEntry s;
    s.id = as_string(require(sweeps[i], "id", p), p + ".id");
    s.axis = as_string(require(sweeps[i], "axis", p), p + ".axis");
    s.values = get_doubles(sweeps[i], "values", p);
    if (s.values.empty()) throw ConfigError("missing field '" + p + ".values'");
    s.overrides = strip(sweeps[i], {"id", "axis", "values"});
    if (!ids.insert(s.id).second) throw ConfigError("duplicate run id '" + s.id + "'");
    cfg.sweeps.push_back(std::move(s));
  }
  const Json preds = list("predictions");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::string p = "predictions[" + std::to_string(i) + "]";
    check_object(preds[i], p);
    PredictionSpec ps;
    ps.kind = as_string(require(preds[i], "kind", p), p + ".kind");
    ps.name = get_string(preds[i], "name", p, ps.kind);
    ps.params = strip(preds[i], {"kind", "name"});
    cfg.predictions.push_back(std::move(ps));
  }
  const Json checks = list("checks");
  for (std::size_t i = 0; i < checks.size(); ++i) {
    const std::string p = "checks[" + std::to_string(i) + "]";
    check_object(checks[i], p);
    CheckSpec c;
    c.kind = as_string(require(checks[i], "kind", p), p + ".kind");
    c.anchor = as_string(require(checks[i], "anchor", p), p + ".anchor");
    c.params = strip(checks[i], {"kind", "anchor"});
    cfg.checks.push_back(std::move(c));
  }
  // Resolve everything once so errors surface at load time.
  for (const auto& r : cfg.runs) cfg.resolve_run(r);
  for (const auto& s : cfg.sweeps) {
    RunSpec base = cfg.resolve_sweep_base(s);
    for (double v : s.values) with_axis_value(base, s.axis, v);
  }
  return cfg;
}

namespace {

Json yaml_node_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Sequence: {
      Json a = Json::array();
      for (const auto& e : n) a.push_back(yaml_node_to_json(e));
      return a;
    }
    case YAML::NodeType::Map: {
      Json o = Json::object();
      for (const auto& kv : n) o[kv.first.as<std::string>()] = yaml_node_to_json(kv.second);
      return o;
    }
    case YAML::NodeType::Scalar: {
      const std::string s = n.Scalar();
      if (n.Tag() == "!") return s;  // quoted
      if (s == "true" || s == "True") return true;
      if (s == "false" || s == "False") return false;
      if (s == "null" || s == "~" || s.empty()) return nullptr;
      long long iv = 0;
      auto [p1, e1] = std::from_chars(s.data(), s.data() + s.size(), iv);
      if (e1 == std::errc() && p1 == s.data() + s.size()) return iv;
      double dv = 0.0;
      const char* b = s.data();
      if (!s.empty() && s[0] == '+') ++b;
      auto [p2, e2] = std::from_chars(b, s.data() + s.size(), dv);
      if (e2 == std::errc() && p2 == s.data() + s.size()) return dv;
      return s;
    }
  }
  return nullptr;
}

bool looks_non_string(const std::string& s) {
  if (s.empty()) return true;
  const Json probe = yaml_node_to_json(YAML::Load(s));
  return !probe.is_string() || probe.get<std::string>() != s;
}

void emit_json(YAML::Emitter& out, const Json& j) {
  if (j.is_object()) {
    out << YAML::BeginMap;
    for (auto it = j.begin(); it != j.end(); ++it) {
      out << YAML::Key << it.key() << YAML::Value;
      emit_json(out, it.value());
    }
    out << YAML::EndMap;
  } else if (j.is_array()) {
    const bool flat = std::all_of(j.begin(), j.end(), [](const Json& e) { return e.is_primitive(); });
    if (flat) out << YAML::Flow;
    out << YAML::BeginSeq;
    for (const auto& e : j) emit_json(out, e);
    out << YAML::EndSeq;
  } else if (j.is_null()) {
    out << YAML::Null;
  } else if (j.is_boolean()) {
    out << (j.get<bool>() ? "true" : "false");
  } else if (j.is_number_integer()) {
    out << j.get<long long>();
  } else if (j.is_number_unsigned()) {
    out << j.get<unsigned long long>();
  } else if (j.is_number_float()) {
    std::string s = format_double(j.get<double>());
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    out << s;
  } else {
    const std::string s = j.get<std::string>();
    if (looks_non_string(s)) {
      out << YAML::DoubleQuoted << s;
    } else {
      out << s;
    }
  }
}

}  // namespace

Json yaml_to_json(const std::string& text) {
  try {
    return yaml_node_to_json(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw ParseError(std::string("invalid YAML: ") + e.what());
  }
}

std::string json_to_yaml(const Json& j) {
  YAML::Emitter out;
  emit_json(out, j);
  return std::string(out.c_str()) + "\n";
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Json j;
  try {
    j = yaml_to_json(ss.str());
  } catch (const ParseError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": top level must be a mapping");
  return experiment_from_json(j);
}

void save_experiment(const std::filesystem::path& path, const ExperimentConfig& cfg) {
  write_file_atomic(path, json_to_yaml(experiment_to_json(cfg)));
}

}  // namespace noiselab
