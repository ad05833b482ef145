#include "noiselab/models.hpp"

#include "noiselab/errors.hpp"
#include "noiselab/rng.hpp"

#include <cmath>

namespace noiselab {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void require_positive(Index v, const char* what) {
  if (v < 1) throw ConfigError(std::string("model.") + what + " must be >= 1");
}

Matrix activate(Activation act, double alpha, const Matrix& z) {
  switch (act) {
    case Activation::Tanh:
      return z.array().tanh().matrix();
    case Activation::Relu:
      return z.array().max(0.0).matrix();
    case Activation::LeakyRelu:
      return (z.array() > 0.0).select(z.array(), alpha * z.array()).matrix();
    case Activation::Swish:
      return (z.array() / (1.0 + (-z.array()).exp())).matrix();
  }
  return z;
}

Matrix activate_deriv(Activation act, double alpha, const Matrix& z) {
  switch (act) {
    case Activation::Tanh:
      return (1.0 - z.array().tanh().square()).matrix();
    case Activation::Relu:
      return (z.array() > 0.0).cast<double>().matrix();
    case Activation::LeakyRelu:
      return (z.array() > 0.0).select(Matrix::Ones(z.rows(), z.cols()).array(), alpha).matrix();
    case Activation::Swish: {
      Eigen::ArrayXXd s = 1.0 / (1.0 + (-z.array()).exp());
      return (s + z.array() * s * (1.0 - s)).matrix();
    }
  }
  return z;
}

void check_layout(const ModelSpec& spec, const ParamBlocks& params) {
  if (params.layout_ptr() == nullptr || !(params.layout() == *make_layout(spec))) {
    throw ConfigError("parameter blocks do not match the " + model_type_name(spec) + " model shape");
  }
}

void check_data(const ModelSpec& spec, const Matrix& X, const Matrix& Y) {
  if (X.rows() != model_input_dim(spec) || Y.rows() != model_output_dim(spec)) {
    throw ConfigError("sample dimensions (" + std::to_string(X.rows()) + ", " + std::to_string(Y.rows()) +
                      ") do not match model (" + std::to_string(model_input_dim(spec)) + ", " +
                      std::to_string(model_output_dim(spec)) + ")");
  }
}

Matrix forward(const ModelSpec& spec, const ParamBlocks& p, const Matrix& X) {
  return std::visit(
      Overloaded{
          [&](const TwoLayerLinear&) -> Matrix { return p.block("U") * (p.block("W") * X); },
          [&](const Rank1Factorization&) -> Matrix { return p.block("U") * (p.block("W") * X); },
          [&](const DeepLinear& m) -> Matrix {
            Matrix h = X;
            for (std::size_t i = 0; i + 1 < m.dims.size(); ++i) h = p.block(i) * h;
            return h;
          },
          [&](const TwoLayerNonlinear& m) -> Matrix {
            return p.block("U") * activate(m.activation, m.alpha, p.block("W") * X);
          },
          [&](const ScaleInvariantNet& m) -> Matrix {
            const double nu = p.block("u").norm();
            const double nw = p.block("w").norm();
            const double a = m.variant == ScaleVariant::A ? nw : nu;
            const double b = m.variant == ScaleVariant::A ? nu : nw;
            return p.block("u") * ((p.block("w") * X) / b).array().tanh().matrix() / a;
          },
      },
      spec);
}

// Sum of weights[s] * |f(x_s) - y_s|^2 and its gradient (without the decay term).
double loss_and_grad(const ModelSpec& spec, const ParamBlocks& p, const Matrix& X, const Matrix& Y, double weight,
                     Vector* grad) {
  check_data(spec, X, Y);
  ParamBlocks g(p.layout_ptr());
  double loss = 0.0;
  std::visit(
      Overloaded{
          [&](const DeepLinear& m) {
            const std::size_t D = m.dims.size() - 1;
            std::vector<Matrix> h(D + 1);
            h[0] = X;
            for (std::size_t i = 0; i < D; ++i) h[i + 1] = p.block(i) * h[i];
            Matrix R = h[D] - Y;
            loss = weight * R.squaredNorm();
            if (!grad) return;
            Matrix delta = 2.0 * weight * R;
            for (std::size_t i = D; i-- > 0;) {
              g.block(i) = delta * h[i].transpose();
              if (i > 0) delta = p.block(i).transpose() * delta;
            }
          },
          [&](const auto& m) {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, TwoLayerLinear> || std::is_same_v<T, Rank1Factorization>) {
              const auto U = p.block("U");
              const auto W = p.block("W");
              Matrix H = W * X;
              Matrix R = U * H - Y;
              loss = weight * R.squaredNorm();
              if (!grad) return;
              Matrix delta = 2.0 * weight * R;
              g.block("U") = delta * H.transpose();
              g.block("W") = (U.transpose() * delta) * X.transpose();
            } else if constexpr (std::is_same_v<T, TwoLayerNonlinear>) {
              const auto U = p.block("U");
              const auto W = p.block("W");
              Matrix Z = W * X;
              Matrix H = activate(m.activation, m.alpha, Z);
              Matrix R = U * H - Y;
              loss = weight * R.squaredNorm();
              if (!grad) return;
              Matrix delta = 2.0 * weight * R;
              g.block("U") = delta * H.transpose();
              Matrix Q = activate_deriv(m.activation, m.alpha, Z).cwiseProduct(U.transpose() * delta);
              g.block("W") = Q * X.transpose();
            } else if constexpr (std::is_same_v<T, ScaleInvariantNet>) {
              const auto u = p.block("u");
              const auto w = p.block("w");
              const double nu = u.norm();
              const double nw = w.norm();
              const bool net_a = m.variant == ScaleVariant::A;
              const double a = net_a ? nw : nu;  // output divisor
              const double b = net_a ? nu : nw;  // pre-activation divisor
              Matrix Z = (w * X) / b;
              Matrix H = Z.array().tanh().matrix();
              Matrix F = u * H / a;
              Matrix R = F - Y;
              loss = weight * R.squaredNorm();
              if (!grad) return;
              Matrix delta = 2.0 * weight * R;
              Matrix Q = (1.0 - H.array().square()).matrix().cwiseProduct(u.transpose() * delta) / a;
              const double dl_da = -delta.cwiseProduct(F).sum() / a;
              const double dl_db = -Q.cwiseProduct(Z).sum() / b;
              Matrix gu = delta * H.transpose() / a;
              Matrix gw = Q * X.transpose() / b;
              if (net_a) {
                gu += (dl_db / b) * u;
                gw += (dl_da / a) * w;
              } else {
                gu += (dl_da / a) * u;
                gw += (dl_db / b) * w;
              }
              g.block("u") = gu;
              g.block("w") = gw;
            }
          },
      },
      spec);
  if (grad) *grad = g.flatten();
  return loss;
}

}  // namespace

void validate(const ModelSpec& spec) {
  std::visit(Overloaded{
                 [](const TwoLayerLinear& m) {
                   require_positive(m.d_x, "d_x");
                   require_positive(m.d, "d");
                   require_positive(m.d_y, "d_y");
                 },
                 [](const DeepLinear& m) {
                   if (m.dims.size() < 2) throw ConfigError("model.dims needs at least two entries");
                   for (Index d : m.dims) require_positive(d, "dims");
                 },
                 [](const TwoLayerNonlinear& m) {
                   require_positive(m.d_x, "d_x");
                   require_positive(m.d, "d");
                   require_positive(m.d_y, "d_y");
                   if (m.activation == Activation::LeakyRelu && !(m.alpha > 0.0 && m.alpha < 1.0)) {
                     throw ConfigError("model.alpha must lie in (0, 1)");
                   }
                 },
                 [](const ScaleInvariantNet& m) {
                   require_positive(m.d_x, "d_x");
                   require_positive(m.d, "d");
                   require_positive(m.d_y, "d_y");
                 },
                 [](const Rank1Factorization& m) { require_positive(m.d, "d"); },
             },
             spec);
}

std::string model_type_name(const ModelSpec& spec) {
  return std::visit(Overloaded{
                        [](const TwoLayerLinear&) { return std::string("two_layer_linear"); },
                        [](const DeepLinear&) { return std::string("deep_linear"); },
                        [](const TwoLayerNonlinear&) { return std::string("two_layer_nonlinear"); },
                        [](const ScaleInvariantNet&) { return std::string("scale_invariant"); },
                        [](const Rank1Factorization&) { return std::string("rank1"); },
                    },
                    spec);
}

Index model_input_dim(const ModelSpec& spec) {
  return std::visit(Overloaded{
                        [](const DeepLinear& m) { return m.dims.front(); },
                        [](const Rank1Factorization&) { return Index{1}; },
                        [](const auto& m) { return m.d_x; },
                    },
                    spec);
}

Index model_output_dim(const ModelSpec& spec) {
  return std::visit(Overloaded{
                        [](const DeepLinear& m) { return m.dims.back(); },
                        [](const Rank1Factorization&) { return Index{1}; },
                        [](const auto& m) { return m.d_y; },
                    },
                    spec);
}

LayoutPtr make_layout(const ModelSpec& spec) {
  validate(spec);
  std::vector<std::pair<std::string, std::pair<Index, Index>>> shapes;
  std::visit(Overloaded{
                 [&](const DeepLinear& m) {
                   for (std::size_t i = 1; i < m.dims.size(); ++i) {
                     shapes.push_back({"W" + std::to_string(i), {m.dims[i], m.dims[i - 1]}});
                   }
                 },
                 [&](const Rank1Factorization& m) {
                   shapes.push_back({"U", {1, m.d}});
                   shapes.push_back({"W", {m.d, 1}});
                 },
                 [&](const ScaleInvariantNet& m) {
                   shapes.push_back({"u", {m.d_y, m.d}});
                   shapes.push_back({"w", {m.d, m.d_x}});
                 },
                 [&](const auto& m) {
                   shapes.push_back({"U", {m.d_y, m.d}});
                   shapes.push_back({"W", {m.d, m.d_x}});
                 },
             },
             spec);
  return std::make_shared<const BlockLayout>(shapes);
}

std::string output_block(const ModelSpec& spec) {
  if (auto* m = std::get_if<DeepLinear>(&spec)) return "W" + std::to_string(m->dims.size() - 1);
  if (std::holds_alternative<ScaleInvariantNet>(spec)) return "u";
  return "U";
}

std::string input_block(const ModelSpec& spec) {
  if (std::holds_alternative<DeepLinear>(spec)) return "W1";
  if (std::holds_alternative<ScaleInvariantNet>(spec)) return "w";
  return "W";
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Tanh:
      return "tanh";
    case Activation::Relu:
      return "relu";
    case Activation::LeakyRelu:
      return "leaky_relu";
    case Activation::Swish:
      return "swish";
  }
  return "tanh";
}

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  if (name == "leaky_relu") return Activation::LeakyRelu;
  if (name == "swish") return Activation::Swish;
  throw ConfigError("unknown activation '" + name + "'");
}

Vector predict(const ModelSpec& spec, const ParamBlocks& params, const Vector& x) {
  check_layout(spec, params);
  Matrix X = x;
  check_data(spec, X, Matrix::Zero(model_output_dim(spec), 1));
  return forward(spec, params, X).col(0);
}

double per_sample_loss(const ModelSpec& spec, const ParamBlocks& params, const Sample& sample, double gamma) {
  check_layout(spec, params);
  Matrix X = sample.x, Y = sample.y;
  return loss_and_grad(spec, params, X, Y, 1.0, nullptr) + gamma * params.squared_norm();
}

ParamBlocks per_sample_grad(const ModelSpec& spec, const ParamBlocks& params, const Sample& sample, double gamma) {
  check_layout(spec, params);
  Matrix X = sample.x, Y = sample.y;
  Vector g;
  loss_and_grad(spec, params, X, Y, 1.0, &g);
  if (gamma != 0.0) g += 2.0 * gamma * params.flatten();
  return ParamBlocks(params.layout_ptr(), std::move(g));
}

double mean_loss(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data, double gamma) {
  check_layout(spec, params);
  if (data.size() == 0) throw ConfigError("empty dataset");
  return loss_and_grad(spec, params, data.X(), data.Y(), 1.0 / static_cast<double>(data.size()), nullptr) +
         gamma * params.squared_norm();
}

Vector mean_grad(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data, double gamma) {
  check_layout(spec, params);
  if (data.size() == 0) throw ConfigError("empty dataset");
  Vector g;
  loss_and_grad(spec, params, data.X(), data.Y(), 1.0 / static_cast<double>(data.size()), &g);
  if (gamma != 0.0) g += 2.0 * gamma * params.flatten();
  return g;
}

DataMoments data_moments(const Dataset& data) {
  if (data.size() == 0) throw ConfigError("empty dataset");
  const double inv = 1.0 / static_cast<double>(data.size());
  DataMoments m;
  m.xx = inv * (data.X() * data.X().transpose());
  m.yx = inv * (data.Y() * data.X().transpose());
  return m;
}

bool has_moment_gradient(const ModelSpec& spec) {
  return std::holds_alternative<TwoLayerLinear>(spec) || std::holds_alternative<Rank1Factorization>(spec) ||
         std::holds_alternative<DeepLinear>(spec);
}

Vector mean_grad(const ModelSpec& spec, const ParamBlocks& params, const DataMoments& moments, double gamma) {
  check_layout(spec, params);
  if (!has_moment_gradient(spec)) throw ConfigError("moment gradient needs a linear model");
  const std::size_t D = params.layout().blocks().size();
  // Blocks in the order they act on the input.
  std::vector<std::size_t> order(D);
  for (std::size_t i = 0; i < D; ++i) order[i] = std::holds_alternative<DeepLinear>(spec) ? i : D - 1 - i;
  auto layer = [&](std::size_t i) { return params.block(order[i]); };
  std::vector<Matrix> below(D + 1), above(D + 1);
  below[0] = Matrix::Identity(moments.xx.rows(), moments.xx.rows());
  for (std::size_t i = 0; i < D; ++i) below[i + 1] = layer(i) * below[i];
  const Matrix& P = below[D];
  above[D] = Matrix::Identity(P.rows(), P.rows());
  for (std::size_t i = D; i-- > 0;) above[i] = above[i + 1] * layer(i);
  const Matrix dP = 2.0 * (P * moments.xx - moments.yx);
  ParamBlocks g(params.layout_ptr());
  for (std::size_t i = 0; i < D; ++i) g.block(order[i]) = above[i + 1].transpose() * dP * below[i].transpose();
  Vector out = g.flatten();
  if (gamma != 0.0) out += 2.0 * gamma * params.flatten();
  return out;
}

Vector mean_grad(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data,
                 const std::vector<Index>& indices, double gamma) {
  check_layout(spec, params);
  if (indices.empty()) throw ConfigError("empty batch");
  Matrix X(data.input_dim(), static_cast<Index>(indices.size()));
  Matrix Y(data.output_dim(), static_cast<Index>(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j) {
    X.col(static_cast<Index>(j)) = data.X().col(indices[j]);
    Y.col(static_cast<Index>(j)) = data.Y().col(indices[j]);
  }
  Vector g;
  loss_and_grad(spec, params, X, Y, 1.0 / static_cast<double>(indices.size()), &g);
  if (gamma != 0.0) g += 2.0 * gamma * params.flatten();
  return g;
}

Matrix per_sample_grads(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data, double gamma) {
  check_layout(spec, params);
  Matrix G(params.dim(), data.size());
  Vector g;
  for (Index s = 0; s < data.size(); ++s) {
    Matrix X = data.X().col(s), Y = data.Y().col(s);
    loss_and_grad(spec, params, X, Y, 1.0, &g);
    G.col(s) = g;
  }
  if (gamma != 0.0) G.colwise() += 2.0 * gamma * params.flatten();
  return G;
}

double init_variance(const ModelSpec& spec, const InitSpec& init, const BlockInfo& block) {
  const double fan_in = static_cast<double>(block.cols);
  const double fan_out = static_cast<double>(block.rows);
  if (init.scheme == "xavier") return 1.0 / (fan_in + fan_out);
  if (init.scheme == "kaiming") return 1.0 / fan_in;
  if (init.scheme == "kaiming-unit-output") return block.name == output_block(spec) ? 1.0 : 1.0 / fan_in;
  if (init.scheme == "uniform-norm") return init.scale * init.scale;
  throw ConfigError("unknown init scheme '" + init.scheme + "'");
}

ParamBlocks initialize(const ModelSpec& spec, const InitSpec& init, std::uint64_t seed) {
  ParamBlocks p(make_layout(spec));
  const auto& blocks = p.layout().blocks();
  if (!init.layer_scales.empty() && init.layer_scales.size() != blocks.size()) {
    throw ConfigError("init.layer_scales must have one entry per block");
  }
  CounterRng rng(seed, Stream::Init);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    double sd = std::sqrt(init_variance(spec, init, blocks[i]));
    if (!init.layer_scales.empty()) sd *= init.layer_scales[i];
    auto B = p.block(i);
    for (Index c = 0; c < B.cols(); ++c)
      for (Index r = 0; r < B.rows(); ++r) B(r, c) = sd * rng.normal();
  }
  return p;
}

}  // namespace noiselab
