#include "ssmil/nn.hpp"

#include <cmath>
#include <random>

#include "ssmil/error.hpp"

namespace ssmil {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "identity";
}

Activation activation_from_string(std::string_view s) {
  if (s == "identity" || s == "linear") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw InvalidParameter("unknown activation '" + std::string(s) + "'");
}

MlpArch Mlp::arch() const {
  MlpArch a;
  a.hidden = hidden;
  a.output = output;
  if (!layers.empty()) a.widths.push_back(layers.front().in_dim());
  for (const auto& l : layers) a.widths.push_back(l.out_dim());
  return a;
}

Mlp init_mlp(const MlpArch& arch, std::uint64_t seed) {
  if (arch.widths.size() < 2) throw InvalidParameter("init_mlp: need at least input and output width");
  for (std::size_t w : arch.widths)
    if (w == 0) throw InvalidParameter("init_mlp: layer widths must be positive");

  std::mt19937_64 rng(seed);
  Mlp net;
  net.hidden = arch.hidden;
  net.output = arch.output;
  for (std::size_t l = 0; l + 1 < arch.widths.size(); ++l) {
    const std::size_t in = arch.widths[l];
    const std::size_t out = arch.widths[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer layer{Matrix(out, in), Vector(out)};
    for (double& w : layer.weight.values()) w = dist(rng);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

Mlp zeros_like(const Mlp& like) {
  Mlp z;
  z.hidden = like.hidden;
  z.output = like.output;
  for (const auto& l : like.layers)
    z.layers.push_back({Matrix(l.weight.rows(), l.weight.cols()), Vector(l.bias.size())});
  return z;
}

namespace {

void apply_activation(Activation act, Matrix& m) {
  switch (act) {
    case Activation::identity: return;
    case Activation::relu:
      for (double& x : m.values()) x = x > 0.0 ? x : 0.0;
      return;
    case Activation::tanh:
      for (double& x : m.values()) x = std::tanh(x);
      return;
  }
}

// Turns d(loss)/d(output) into d(loss)/d(pre-activation), in place.
void activation_backward(Activation act, const Matrix& output, Matrix& grad) {
  switch (act) {
    case Activation::identity: return;
    case Activation::relu:
      for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(output.data()[i] > 0.0)) grad.data()[i] = 0.0;
      return;
    case Activation::tanh:
      for (std::size_t i = 0; i < grad.size(); ++i) {
        const double y = output.data()[i];
        grad.data()[i] *= 1.0 - y * y;
      }
      return;
  }
}

}  // namespace

Matrix forward(const Mlp& net, const Matrix& x, MlpCache* cache) {
  if (net.layers.empty()) throw InvalidParameter("forward: network has no layers");
  if (x.cols() != net.input_dim()) {
    throw ShapeMismatch("forward: input has " + std::to_string(x.cols()) + " columns, network expects " +
                        std::to_string(net.input_dim()));
  }
  if (cache) {
    cache->input = x;
    cache->outputs.clear();
    cache->widths = net.arch().widths;
  }
  Matrix h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    Matrix y = matmul_nt(h, layer.weight);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto row = y.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += layer.bias[c];
    }
    apply_activation(net.activation_of(l), y);
    if (cache) cache->outputs.push_back(y);
    h = std::move(y);
  }
  return h;
}

MlpGrads backward(const Mlp& net, const MlpCache& cache, const Matrix& upstream, bool want_input_grad) {
  if (cache.outputs.size() != net.layers.size() || cache.widths != net.arch().widths) {
    throw ShapeMismatch("backward: cache does not belong to this network");
  }
  if (upstream.rows() != cache.input.rows() || upstream.cols() != net.output_dim()) {
    throw ShapeMismatch("backward: upstream gradient shape does not match forward output");
  }
  MlpGrads grads;
  grads.params = zeros_like(net);
  Matrix delta = upstream;
  for (std::size_t l = net.layers.size(); l-- > 0;) {
    activation_backward(net.activation_of(l), cache.outputs[l], delta);
    const Matrix& layer_in = l == 0 ? cache.input : cache.outputs[l - 1];
    auto& g = grads.params.layers[l];
    g.weight = matmul_tn(delta, layer_in);
    for (std::size_t r = 0; r < delta.rows(); ++r) {
      auto row = delta.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) g.bias[c] += row[c];
    }
    if (l > 0 || want_input_grad) delta = matmul(delta, net.layers[l].weight);
  }
  if (want_input_grad) grads.input = std::move(delta);
  return grads;
}

void append_params(Mlp& net, const std::string& prefix, ParamList& out) {
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    auto& layer = net.layers[l];
    const std::string base = prefix + "." + std::to_string(l);
    out.push_back({base + ".weight", {layer.weight.rows(), layer.weight.cols()}, layer.weight.values()});
    out.push_back({base + ".bias", {layer.bias.size()}, layer.bias.values()});
  }
}

void append_params(const Mlp& net, const std::string& prefix, ConstParamList& out) {
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    const std::string base = prefix + "." + std::to_string(l);
    out.push_back({base + ".weight", {layer.weight.rows(), layer.weight.cols()}, layer.weight.values()});
    out.push_back({base + ".bias", {layer.bias.size()}, layer.bias.values()});
  }
}

ParamList params_of(Mlp& net, const std::string& prefix) {
  ParamList out;
  append_params(net, prefix, out);
  return out;
}

ConstParamList params_of(const Mlp& net, const std::string& prefix) {
  ConstParamList out;
  append_params(net, prefix, out);
  return out;
}

std::size_t scalar_count(const ConstParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.values.size();
  return n;
}

void require_matching(const ConstParamList& a, const ConstParamList& b, const char* what) {
  if (a.size() != b.size()) throw ShapeMismatch(std::string(what) + ": parameter count differs");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape != b[i].shape || a[i].values.size() != b[i].values.size()) {
      throw ShapeMismatch(std::string(what) + ": shape of '" + a[i].name + "' differs");
    }
  }
}

ConstParamList as_const(const ParamList& params) {
  ConstParamList out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.shape, p.values});
  return out;
}

}  // namespace ssmil
