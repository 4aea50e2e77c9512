#include "scanfill/mlp.hpp"

#include <string>

#include "scanfill/error.hpp"

namespace scanfill {
namespace {

using Eigen::ArrayXXd;
using Eigen::MatrixXd;

MatrixXd activate(Activation act, const MatrixXd& z) {
  switch (act) {
    case Activation::kIdentity: return z;
    case Activation::kRelu: return z.cwiseMax(0.0);
    case Activation::kSilu: return (z.array() / (1.0 + (-z.array()).exp())).matrix();
    case Activation::kSigmoid: return (1.0 / (1.0 + (-z.array()).exp())).matrix();
  }
  return z;
}

ArrayXXd sigmoid(const MatrixXd& z) { return 1.0 / (1.0 + (-z.array()).exp()); }

// First derivative of the activation, evaluated at the pre-activation z.
ArrayXXd derivative(Activation act, const MatrixXd& z) {
  switch (act) {
    case Activation::kIdentity: return ArrayXXd::Ones(z.rows(), z.cols());
    case Activation::kRelu: return (z.array() > 0.0).cast<double>();
    case Activation::kSilu: {
      const ArrayXXd s = sigmoid(z);
      return s * (1.0 + z.array() * (1.0 - s));
    }
    case Activation::kSigmoid: {
      const ArrayXXd s = sigmoid(z);
      return s * (1.0 - s);
    }
  }
  return {};
}

// Second derivative; zero almost everywhere for piecewise-linear activations.
ArrayXXd second_derivative(Activation act, const MatrixXd& z) {
  switch (act) {
    case Activation::kIdentity:
    case Activation::kRelu: return ArrayXXd::Zero(z.rows(), z.cols());
    case Activation::kSilu: {
      const ArrayXXd s = sigmoid(z);
      return s * (1.0 - s) * (2.0 + z.array() * (1.0 - 2.0 * s));
    }
    case Activation::kSigmoid: {
      const ArrayXXd s = sigmoid(z);
      return s * (1.0 - s) * (1.0 - 2.0 * s);
    }
  }
  return {};
}

bool has_curvature(Activation act) {
  return act == Activation::kSilu || act == Activation::kSigmoid;
}

void accumulate(MatrixXd& target, const MatrixXd& value) {
  if (target.size() == 0) {
    target = value;
  } else {
    target += value;
  }
}

Eigen::Map<MatrixXd> grad_weights(const LayerSpec& layer, Eigen::VectorXd& grad) {
  return Eigen::Map<MatrixXd>(grad.data() + layer.weight_offset, layer.out, layer.in);
}

Eigen::Map<Eigen::VectorXd> grad_bias(const LayerSpec& layer, Eigen::VectorXd& grad) {
  return Eigen::Map<Eigen::VectorXd>(grad.data() + layer.bias_offset, layer.out);
}

void check_params(const MlpSpec& spec, const Eigen::VectorXd& params) {
  if (spec.layers.empty()) fail(ErrorCode::kInvalidArgument, "empty network");
  if (static_cast<std::size_t>(params.size()) < spec.param_end()) {
    fail(ErrorCode::kInvalidArgument, "parameter vector shorter than the network layout");
  }
}

}  // namespace

ConstWeights layer_weights(const LayerSpec& layer, const Eigen::VectorXd& params) {
  return ConstWeights(params.data() + layer.weight_offset, layer.out, layer.in);
}

ConstBias layer_bias(const LayerSpec& layer, const Eigen::VectorXd& params) {
  return ConstBias(params.data() + layer.bias_offset, layer.out);
}

MatrixXd mlp_forward(const MlpSpec& spec, const Eigen::VectorXd& params, const MatrixXd& input,
                     MlpCache* cache) {
  check_params(spec, params);
  if (input.rows() != spec.input_dim()) {
    fail(ErrorCode::kInvalidArgument, "input has " + std::to_string(input.rows()) +
                                          " rows, network expects " +
                                          std::to_string(spec.input_dim()));
  }
  // Residual links need earlier activations; without a cache only those are kept.
  std::vector<MatrixXd> kept;
  if (cache) {
    cache->z.assign(spec.layers.size(), {});
    cache->h.assign(spec.layers.size() + 1, {});
    cache->h[0] = input;
  } else {
    kept.resize(spec.layers.size() + 1);
  }
  auto needs_keep = [&](std::size_t index) {
    for (const auto& layer : spec.layers) {
      if (layer.residual_from == static_cast<int>(index)) return true;
    }
    return false;
  };
  if (!cache && needs_keep(0)) kept[0] = input;
  MatrixXd h = input;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerSpec& layer = spec.layers[l];
    MatrixXd z(layer.out, h.cols());
    z.noalias() = layer_weights(layer, params) * h;
    z.colwise() += layer_bias(layer, params);
    if (layer.residual_from >= 0) {
      z += cache ? cache->h[layer.residual_from] : kept[layer.residual_from];
    }
    h = activate(layer.activation, z);
    if (cache) {
      cache->z[l] = std::move(z);
      cache->h[l + 1] = h;
    } else if (needs_keep(l + 1)) {
      kept[l + 1] = h;
    }
  }
  return h;
}

MatrixXd mlp_backward(const MlpSpec& spec, const Eigen::VectorXd& params, const MlpCache& cache,
                      const MatrixXd& d_output, Eigen::VectorXd& grad) {
  check_params(spec, params);
  const std::size_t n_layers = spec.layers.size();
  if (cache.z.size() != n_layers || cache.h.size() != n_layers + 1) {
    fail(ErrorCode::kInvalidArgument, "forward cache does not match the network");
  }
  if (d_output.rows() != spec.output_dim() || d_output.cols() != cache.h.back().cols()) {
    fail(ErrorCode::kInvalidArgument, "output gradient shape mismatch");
  }
  if (grad.size() != params.size()) {
    fail(ErrorCode::kInvalidArgument, "gradient buffer shape mismatch");
  }

  std::vector<MatrixXd> dh(n_layers + 1);
  dh[n_layers] = d_output;
  for (std::size_t l = n_layers; l-- > 0;) {
    const LayerSpec& layer = spec.layers[l];
    MatrixXd dz = dh[l + 1];
    if (layer.activation != Activation::kIdentity) {
      dz.array() *= derivative(layer.activation, cache.z[l]);
    }
    grad_weights(layer, grad).noalias() += dz * cache.h[l].transpose();
    grad_bias(layer, grad) += dz.rowwise().sum();
    MatrixXd back(layer.in, dz.cols());
    back.noalias() = layer_weights(layer, params).transpose() * dz;
    accumulate(dh[l], back);
    if (layer.residual_from >= 0) accumulate(dh[layer.residual_from], dz);
  }
  return dh[0];
}

MatrixXd mlp_forward_tangent(const MlpSpec& spec, const Eigen::VectorXd& params,
                             const MatrixXd& input,
                             const std::array<MatrixXd, 3>& input_tangents, MlpCache& cache,
                             MlpTangentCache& tangents, std::array<MatrixXd, 3>& output_tangents) {
  check_params(spec, params);
  if (input.rows() != spec.input_dim()) fail(ErrorCode::kInvalidArgument, "input shape mismatch");
  const std::size_t n_layers = spec.layers.size();
  cache.z.assign(n_layers, {});
  cache.h.assign(n_layers + 1, {});
  tangents.zt.assign(n_layers, {});
  tangents.ht.assign(n_layers + 1, {});
  cache.h[0] = input;
  tangents.ht[0] = input_tangents;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const LayerSpec& layer = spec.layers[l];
    const auto w = layer_weights(layer, params);
    MatrixXd z(layer.out, input.cols());
    z.noalias() = w * cache.h[l];
    z.colwise() += layer_bias(layer, params);
    if (layer.residual_from >= 0) z += cache.h[layer.residual_from];
    const ArrayXXd slope = derivative(layer.activation, z);
    for (int a = 0; a < 3; ++a) {
      MatrixXd zt(layer.out, input.cols());
      zt.noalias() = w * tangents.ht[l][a];
      if (layer.residual_from >= 0) zt += tangents.ht[layer.residual_from][a];
      tangents.ht[l + 1][a] = (zt.array() * slope).matrix();
      tangents.zt[l][a] = std::move(zt);
    }
    cache.h[l + 1] = activate(layer.activation, z);
    cache.z[l] = std::move(z);
  }
  output_tangents = tangents.ht[n_layers];
  return cache.h[n_layers];
}

void mlp_backward_tangent(const MlpSpec& spec, const Eigen::VectorXd& params,
                          const MlpCache& cache, const MlpTangentCache& tangents,
                          const MatrixXd& d_output, const std::array<MatrixXd, 3>& d_output_tangents,
                          Eigen::VectorXd& grad) {
  check_params(spec, params);
  const std::size_t n_layers = spec.layers.size();
  if (cache.z.size() != n_layers || tangents.zt.size() != n_layers) {
    fail(ErrorCode::kInvalidArgument, "tangent cache does not match the network");
  }
  if (grad.size() != params.size()) fail(ErrorCode::kInvalidArgument, "gradient shape mismatch");

  std::vector<MatrixXd> dh(n_layers + 1);
  std::vector<std::array<MatrixXd, 3>> dht(n_layers + 1);
  dh[n_layers] = d_output;
  dht[n_layers] = d_output_tangents;
  for (std::size_t l = n_layers; l-- > 0;) {
    const LayerSpec& layer = spec.layers[l];
    const auto w = layer_weights(layer, params);
    const ArrayXXd slope = derivative(layer.activation, cache.z[l]);
    MatrixXd dz = (dh[l + 1].array() * slope).matrix();
    std::array<MatrixXd, 3> dzt;
    const bool curved = has_curvature(layer.activation);
    const ArrayXXd curvature = curved ? second_derivative(layer.activation, cache.z[l]) : ArrayXXd();
    for (int a = 0; a < 3; ++a) {
      if (curved) dz.array() += dht[l + 1][a].array() * curvature * tangents.zt[l][a].array();
      dzt[a] = (dht[l + 1][a].array() * slope).matrix();
    }
    auto gw = grad_weights(layer, grad);
    gw.noalias() += dz * cache.h[l].transpose();
    for (int a = 0; a < 3; ++a) gw.noalias() += dzt[a] * tangents.ht[l][a].transpose();
    grad_bias(layer, grad) += dz.rowwise().sum();
    if (l == 0) break;  // input gradients are not needed
    MatrixXd back(layer.in, dz.cols());
    back.noalias() = w.transpose() * dz;
    accumulate(dh[l], back);
    for (int a = 0; a < 3; ++a) {
      back.noalias() = w.transpose() * dzt[a];
      accumulate(dht[l][a], back);
    }
    if (layer.residual_from > 0) {
      accumulate(dh[layer.residual_from], dz);
      for (int a = 0; a < 3; ++a) accumulate(dht[layer.residual_from][a], dzt[a]);
    }
  }
}

}  // namespace scanfill
