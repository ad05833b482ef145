#pragma once

#include "noiselab/data.hpp"
#include "noiselab/params.hpp"

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace noiselab {

enum class Activation { Tanh, Relu, LeakyRelu, Swish };

// f(x) = U W x, blocks U (d_y x d) and W (d x d_x).
struct TwoLayerLinear {
  Index d_x = 1, d = 1, d_y = 1;
};

// f(x) = W_D ... W_1 x with W_i of shape dims[i] x dims[i-1].
struct DeepLinear {
  std::vector<Index> dims;
};

// f(x) = U act(W x).
struct TwoLayerNonlinear {
  Index d_x = 1, d = 1, d_y = 1;
  Activation activation = Activation::Tanh;
  double alpha = 0.01;  // leaky_relu slope
};

// Normalized tanh nets over blocks u (d_y x d) and w (d x d_x), Frobenius norms:
//   A: f(x) = u tanh(w x / |u|) / |w|
//   B: f(x) = u tanh(w x / |w|) / |u|
enum class ScaleVariant { A, B };
struct ScaleInvariantNet {
  ScaleVariant variant = ScaleVariant::A;
  Index d_x = 1, d = 1, d_y = 1;
};

// f(x) = U W x with U (1 x d), W (d x 1).
struct Rank1Factorization {
  Index d = 1;
};

using ModelSpec = std::variant<TwoLayerLinear, DeepLinear, TwoLayerNonlinear, ScaleInvariantNet, Rank1Factorization>;

void validate(const ModelSpec& spec);
std::string model_type_name(const ModelSpec& spec);
Index model_input_dim(const ModelSpec& spec);
Index model_output_dim(const ModelSpec& spec);
LayoutPtr make_layout(const ModelSpec& spec);
// Name of the block feeding the output and of the block reading the input.
std::string output_block(const ModelSpec& spec);
std::string input_block(const ModelSpec& spec);

std::string activation_name(Activation a);
Activation parse_activation(const std::string& name);

Vector predict(const ModelSpec& spec, const ParamBlocks& params, const Vector& x);

// Squared error plus gamma times the squared norm of every block.
double per_sample_loss(const ModelSpec& spec, const ParamBlocks& params, const Sample& sample, double gamma);
ParamBlocks per_sample_grad(const ModelSpec& spec, const ParamBlocks& params, const Sample& sample, double gamma);

// Batch means over the columns of data (or the listed columns).
double mean_loss(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data, double gamma);
Vector mean_grad(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data, double gamma);
Vector mean_grad(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data,
                 const std::vector<Index>& indices, double gamma);

// Sample means X X^T / n and Y X^T / n. Linear families reach their full-batch
// gradient through these alone.
struct DataMoments {
  Matrix xx;
  Matrix yx;
};
DataMoments data_moments(const Dataset& data);
bool has_moment_gradient(const ModelSpec& spec);
// Same value as mean_grad over the whole dataset; ConfigError for nonlinear families.
Vector mean_grad(const ModelSpec& spec, const ParamBlocks& params, const DataMoments& moments, double gamma);
// Column s holds the flattened per-sample gradient of sample s.
Matrix per_sample_grads(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data, double gamma);

struct InitSpec {
  // xavier: 1/(fan_in+fan_out); kaiming: 1/fan_in;
  // kaiming-unit-output: 1 on the output block, 1/fan_in elsewhere;
  // uniform-norm: scale^2 on every entry.
  std::string scheme = "xavier";
  double scale = 1.0;
  // Optional per-block multipliers applied after drawing.
  std::vector<double> layer_scales;
};

// Variance used for one block under a scheme.
double init_variance(const ModelSpec& spec, const InitSpec& init, const BlockInfo& block);
ParamBlocks initialize(const ModelSpec& spec, const InitSpec& init, std::uint64_t seed);

}  // namespace noiselab
