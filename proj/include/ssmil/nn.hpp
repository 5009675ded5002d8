#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssmil/linalg.hpp"

namespace ssmil {

enum class Activation { identity, relu, tanh };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view s);

/// Affine layer y = x W^T + b with W stored out x in.
struct DenseLayer {
  Matrix weight;
  Vector bias;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
};

/// Widths of a perceptron: widths.front() is the input, widths.back() the output.
struct MlpArch {
  std::vector<std::size_t> widths;
  Activation hidden = Activation::relu;
  Activation output = Activation::identity;
};

/// Multi-layer perceptron. The encoder, every projection head, the MIL
/// reducer and the attention scorer are all instances of this type.
struct Mlp {
  std::vector<DenseLayer> layers;
  Activation hidden = Activation::relu;
  Activation output = Activation::identity;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
  Activation activation_of(std::size_t layer) const {
    return layer + 1 == layers.size() ? output : hidden;
  }
  MlpArch arch() const;
};

using EncoderParams = Mlp;

enum class HeadRole { contrastive, prototype, distillation };

struct ProjectionHead {
  Mlp mlp;
  HeadRole role = HeadRole::contrastive;
};

/// Fan-in scaled uniform init: W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), b = 0.
Mlp init_mlp(const MlpArch& arch, std::uint64_t seed);
/// Same shapes as `like`, every entry zero.
Mlp zeros_like(const Mlp& like);

/// Everything backward() needs from one forward pass.
struct MlpCache {
  Matrix input;
  std::vector<Matrix> outputs;  // post-activation output of each layer
  std::vector<std::size_t> widths;
};

Matrix forward(const Mlp& net, const Matrix& x, MlpCache* cache = nullptr);

struct MlpGrads {
  Mlp params;    // same shapes as the network
  Matrix input;  // d(loss)/dx, empty unless requested
};

MlpGrads backward(const Mlp& net, const MlpCache& cache, const Matrix& upstream,
                  bool want_input_grad = true);

/// Named view onto one parameter tensor. Vectors appear with shape {len}.
struct ParamRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<double> values;
};

struct ConstParamRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<const double> values;
};

using ParamList = std::vector<ParamRef>;
using ConstParamList = std::vector<ConstParamRef>;

/// Appends "<prefix>.<i>.weight" / "<prefix>.<i>.bias" views for every layer.
void append_params(Mlp& net, const std::string& prefix, ParamList& out);
void append_params(const Mlp& net, const std::string& prefix, ConstParamList& out);
ParamList params_of(Mlp& net, const std::string& prefix);
ConstParamList params_of(const Mlp& net, const std::string& prefix);

/// Number of scalars across a parameter list.
std::size_t scalar_count(const ConstParamList& params);
/// Throws ShapeMismatch unless both lists have identical names order and shapes.
void require_matching(const ConstParamList& a, const ConstParamList& b, const char* what);
ConstParamList as_const(const ParamList& params);

}  // namespace ssmil
