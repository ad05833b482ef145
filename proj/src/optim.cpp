#include "noiselab/optim.hpp"

#include "noiselab/equilibria.hpp"
#include "noiselab/errors.hpp"
#include "noiselab/linalg.hpp"
#include "noiselab/rng.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <optional>
#include <thread>

namespace noiselab {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool is_two_layer_linear(const ModelSpec& spec) {
  return std::holds_alternative<TwoLayerLinear>(spec) || std::holds_alternative<Rank1Factorization>(spec);
}
}  // namespace

std::string algorithm_name(Algorithm a) { return a == Algorithm::GD ? "gd" : "sgd"; }

void validate(const OptimConfig& cfg, Index dataset_size) {
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("optim.lr must be > 0");
  if (cfg.batch_size < 1) throw ConfigError("optim.batch_size must be >= 1");
  if (cfg.algorithm == Algorithm::SGD && cfg.batch_size > dataset_size) {
    throw ConfigError("optim.batch_size exceeds the dataset size");
  }
  if (cfg.weight_decay < 0.0) throw ConfigError("optim.weight_decay must be >= 0");
  if (cfg.steps < 0) throw ConfigError("optim.steps must be >= 0");
  if (cfg.diagnostics.cadence < 1) throw ConfigError("optim.diagnostics.cadence must be >= 1");
  if (cfg.diagnostics.slope_window < 2) throw ConfigError("optim.diagnostics.slope_window must be >= 2");
  if (cfg.warmup) {
    const auto& w = *cfg.warmup;
    if (!(w.start > 0.0) || !(w.end > 0.0)) throw ConfigError("optim.warmup rates must be > 0");
    if (w.start > w.end) throw ConfigError("optim.warmup.start must not exceed optim.warmup.end");
    if (w.switch_step < 0) throw ConfigError("optim.warmup.switch_step must be >= 0");
  }
}

double learning_rate_at(const OptimConfig& cfg, Index step) {
  if (!cfg.warmup) return cfg.lr;
  const auto& w = *cfg.warmup;
  if (step >= w.switch_step) return w.end;
  if (w.shape == Warmup::Shape::Step) return w.start;
  const double frac = static_cast<double>(step) / static_cast<double>(w.switch_step);
  return w.start + (w.end - w.start) * frac;
}

double noise_scale(const OptimConfig& cfg, Index step, Index dataset_size) {
  const Index S = cfg.algorithm == Algorithm::GD ? dataset_size : cfg.batch_size;
  return learning_rate_at(cfg, step) / (2.0 * static_cast<double>(S));
}

StepResult sgd_step(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data,
                    const std::vector<Index>& batch, double lr, double gamma) {
  if (batch.empty()) throw ConfigError("empty batch");
  Vector g = mean_grad(spec, params, data, batch, gamma);
  Vector next = params.flatten() - lr * g;
  return {ParamBlocks(params.layout_ptr(), std::move(next)), std::move(g)};
}

StepResult gd_step(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data, double lr, double gamma) {
  Vector g = mean_grad(spec, params, data, gamma);
  Vector next = params.flatten() - lr * g;
  return {ParamBlocks(params.layout_ptr(), std::move(next)), std::move(g)};
}

StepResult gd_step(const ModelSpec& spec, const ParamBlocks& params, const DataMoments& moments, double lr,
                   double gamma) {
  Vector g = mean_grad(spec, params, moments, gamma);
  Vector next = params.flatten() - lr * g;
  return {ParamBlocks(params.layout_ptr(), std::move(next)), std::move(g)};
}

std::vector<Index> draw_batch(std::uint64_t seed, Index step, Index batch_size, Index dataset_size) {
  CounterRng rng(seed, Stream::Batch, static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch_size));
  std::vector<Index> out(static_cast<std::size_t>(batch_size));
  for (auto& i : out) i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(dataset_size)));
  return out;
}

std::vector<ChargeSeries> RunRecord::charge_series() const {
  std::vector<ChargeSeries> out;
  for (const auto& d : spec.symmetries) {
    ChargeSeries s;
    s.charge_id = d.id();
    out.push_back(std::move(s));
  }
  for (const auto& row : rows) {
    for (std::size_t k = 0; k < row.charges.size() && k < out.size(); ++k) {
      const auto& c = row.charges[k];
      out[k].steps.push_back(row.step);
      out[k].time.push_back(row.time);
      out[k].C.push_back(c.C);
      out[k].G.push_back(c.G_pred);
      out[k].dCdt.push_back(c.dCdt);
      out[k].lambda_star.push_back(c.lambda_star);
      out[k].rel_dist.push_back(c.rel_dist);
    }
  }
  return out;
}

Dataset materialize_dataset(const RunSpec& spec) {
  if (!spec.dataset_csv.empty()) return load_dataset_csv(spec.dataset_csv);
  return generate_dataset(spec.data);
}

RunRecord run(const RunSpec& spec) {
  const Dataset data = materialize_dataset(spec);
  const ParamBlocks init = initialize(spec.model, spec.init, spec.optim.seed);
  return run(spec, data, init);
}

RunRecord run(const RunSpec& spec, const Dataset& data, const ParamBlocks& init, const StepObserver& observer) {
  validate(spec.model);
  validate(spec.optim, data.size());
  if (data.input_dim() != model_input_dim(spec.model) || data.output_dim() != model_output_dim(spec.model)) {
    throw ConfigError("data dimensions (" + std::to_string(data.input_dim()) + ", " +
                      std::to_string(data.output_dim()) + ") do not match the model (" +
                      std::to_string(model_input_dim(spec.model)) + ", " +
                      std::to_string(model_output_dim(spec.model)) + ")");
  }
  const auto layout = make_layout(spec.model);
  if (!(init.layout() == *layout)) throw ConfigError("initial parameters do not match the model");

  const OptimConfig& cfg = spec.optim;
  const DiagnosticsConfig& diag = cfg.diagnostics;
  const double gamma = cfg.weight_decay;

  RunRecord rec;
  rec.spec = spec;
  rec.rng_name = std::string(CounterRng::kName);
  for (const auto& b : layout->blocks()) rec.block_names.push_back(b.name);
  rec.initial = ParamBlocks(layout, init.flatten());

  std::vector<BoundSymmetry> syms;
  for (const auto& d : spec.symmetries) syms.emplace_back(d, *layout);
  std::vector<std::vector<double>> hist_t(syms.size()), hist_c(syms.size());

  const bool linear2 = is_two_layer_linear(spec.model);
  Matrix sigma_x_emp;
  if (linear2 && diag.sharpness) {
    sigma_x_emp = symmetrize(data.X() * data.X().transpose() / static_cast<double>(data.size()));
  }

  ParamBlocks theta(layout, init.flatten());
  double time = 0.0;

  auto record = [&](Index step) {
    DiagnosticRow row;
    row.step = step;
    row.lr = learning_rate_at(cfg, step);
    row.time = time;
    row.loss = mean_loss(spec.model, theta, data, gamma);
    for (std::size_t b = 0; b < layout->blocks().size(); ++b) row.block_norm2.push_back(theta.block(b).squaredNorm());
    row.sharpness = kNaN;
    row.balance_residual = kNaN;
    if (linear2 && diag.sharpness) {
      row.sharpness = sharpness(theta.block("U"), theta.block("W"), sigma_x_emp, model_output_dim(spec.model));
    }
    if (linear2 && diag.balance) {
      const GammaPair pair = gamma_pair(theta.block("U"), theta.block("W"), data, gamma);
      row.balance_residual = balance_residual(theta.block("U"), theta.block("W"), pair);
    }
    if (!syms.empty()) {
      Matrix grads;
      const bool need_grads = (diag.noise || diag.lambda_star) && data.size() >= 2;
      if (need_grads) grads = per_sample_grads(spec.model, theta, data, gamma);
      const double sigma2 = noise_scale(cfg, step, data.size());
      for (std::size_t k = 0; k < syms.size(); ++k) {
        ChargeRow c;
        c.id = syms[k].descriptor().id();
        c.C = syms[k].charge(theta.flatten());
        c.G_pred = kNaN;
        c.lambda_star = kNaN;
        c.rel_dist = kNaN;
        if (need_grads && diag.noise) c.G_pred = -4.0 * gamma * c.C + sigma2 * trace_sigma_A(grads, syms[k]);
        hist_t[k].push_back(time);
        hist_c[k].push_back(c.C);
        const std::size_t n = hist_t[k].size();
        const std::size_t w = std::min<std::size_t>(n, static_cast<std::size_t>(diag.slope_window));
        if (w >= 2) {
          std::vector<double> tx(hist_t[k].end() - static_cast<std::ptrdiff_t>(w), hist_t[k].end());
          std::vector<double> cy(hist_c[k].end() - static_cast<std::ptrdiff_t>(w), hist_c[k].end());
          c.dCdt = least_squares_slope(tx, cy).slope;
        } else {
          c.dCdt = kNaN;
        }
        if (need_grads && diag.lambda_star) {
          ChargeFlowProfile profile(spectral_terms(syms[k], theta.flatten(), grads), gamma, sigma2);
          const LambdaStar ls = find_lambda_star(profile);
          c.lambda_star = ls.lambda;
          if (std::isfinite(ls.lambda)) {
            const double cstar = syms[k].charge(syms[k].exp_map(ls.lambda, theta.flatten()));
            c.rel_dist = cstar != 0.0 ? (c.C - cstar) * (c.C - cstar) / (cstar * cstar) : kNaN;
          }
        }
        row.charges.push_back(std::move(c));
      }
    }
    rec.rows.push_back(std::move(row));
  };

  std::optional<DataMoments> moments;
  if (cfg.algorithm == Algorithm::GD && has_moment_gradient(spec.model) && data.size() > data.input_dim()) {
    moments = data_moments(data);
  }
  for (Index t = 0; t < cfg.steps; ++t) {
    if (t % diag.cadence == 0) record(t);
    const double lr = learning_rate_at(cfg, t);
    StepResult r = moments ? gd_step(spec.model, theta, *moments, lr, gamma)
                   : cfg.algorithm == Algorithm::GD
                       ? gd_step(spec.model, theta, data, lr, gamma)
                       : sgd_step(spec.model, theta, data, draw_batch(cfg.seed, t, cfg.batch_size, data.size()), lr,
                                  gamma);
    if (observer) observer(t, theta, r.grad, r.params, lr);
    const bool bad = !r.params.all_finite() || !(r.params.squared_norm() <= cfg.divergence_norm2);
    if (bad) {
      rec.diverged = true;
      rec.divergence_step = t + 1;
      rec.steps_completed = t;
      rec.terminal = theta;
      return rec;
    }
    theta = std::move(r.params);
    time += lr;
    rec.steps_completed = t + 1;
  }
  record(cfg.steps);
  rec.terminal = theta;
  return rec;
}

std::vector<std::string> sweep_axes() {
  return {"optim.lr",        "optim.batch_size", "optim.weight_decay", "optim.steps",       "optim.seed",
          "data.phi_x",      "data.n",           "data.noise_variance", "data.input_variance", "model.width",
          "model.dim",       "init.scale"};
}

RunSpec with_axis_value(const RunSpec& base, const std::string& axis, double value) {
  RunSpec s = base;
  auto as_index = [&](double v) {
    if (v != std::floor(v) || v < 0) throw ConfigError("axis '" + axis + "' needs a non-negative integer value");
    return static_cast<Index>(v);
  };
  if (axis == "optim.lr") {
    s.optim.lr = value;
  } else if (axis == "optim.batch_size") {
    s.optim.batch_size = as_index(value);
  } else if (axis == "optim.weight_decay") {
    s.optim.weight_decay = value;
  } else if (axis == "optim.steps") {
    s.optim.steps = as_index(value);
  } else if (axis == "optim.seed") {
    s.optim.seed = static_cast<std::uint64_t>(as_index(value));
  } else if (axis == "data.phi_x") {
    s.data.input.kind = InputSpec::Kind::Split;
    s.data.input.phi = value;
  } else if (axis == "data.n") {
    s.data.n = as_index(value);
  } else if (axis == "data.noise_variance") {
    s.data.noise.variance = value;
    s.data.noise.diagonal.clear();
  } else if (axis == "data.input_variance") {
    s.data.input.kind = InputSpec::Kind::Isotropic;
    s.data.input.variance = value;
  } else if (axis == "init.scale") {
    s.init.scale = value;
  } else if (axis == "model.width") {
    const Index w = as_index(value);
    std::visit(
        [&](auto& m) {
          using T = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<T, DeepLinear>) {
            for (std::size_t i = 1; i + 1 < m.dims.size(); ++i) m.dims[i] = w;
          } else {
            m.d = w;
          }
        },
        s.model);
  } else if (axis == "model.dim") {
    const Index d = as_index(value);
    std::visit(
        [&](auto& m) {
          using T = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<T, DeepLinear>) {
            m.dims.front() = d;
            m.dims.back() = d;
          } else if constexpr (std::is_same_v<T, Rank1Factorization>) {
            throw ConfigError("axis 'model.dim' does not apply to rank1 models");
          } else {
            m.d_x = d;
            m.d_y = d;
          }
        },
        s.model);
    s.data.d_x = d;
    if (s.data.teacher.kind != TeacherSpec::Kind::Identity) {
      throw ConfigError("axis 'model.dim' requires an identity teacher");
    }
  } else {
    throw ConfigError("unknown sweep axis '" + axis + "'");
  }
  return s;
}

std::vector<RunSpec> sweep_specs(const RunSpec& base, const std::string& axis, const std::vector<double>& values) {
  std::vector<RunSpec> specs;
  for (std::size_t i = 0; i < values.size(); ++i) {
    RunSpec s = with_axis_value(base, axis, values[i]);
    if (axis != "optim.seed") s.optim.seed = base.optim.seed + i;
    s.run_id = base.run_id + "_" + std::to_string(i);
    specs.push_back(std::move(s));
  }
  return specs;
}

std::vector<RunRecord> sweep(const RunSpec& base, const std::string& axis, const std::vector<double>& values,
                             int threads) {
  const std::vector<RunSpec> specs = sweep_specs(base, axis, values);
  std::vector<RunRecord> out(specs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < specs.size(); i = next++) {
      try {
        out[i] = run(specs[i]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(specs.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace noiselab
