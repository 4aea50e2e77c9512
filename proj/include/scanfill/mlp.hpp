#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include <Eigen/Core>

namespace scanfill {

enum class Activation { kIdentity, kRelu, kSilu, kSigmoid };

/// One dense layer z = W h + b (+ h_skip), h' = act(z). Offsets index the owning flat
/// parameter vector; W is stored column-major as an out x in block.
struct LayerSpec {
  int in = 0;
  int out = 0;
  Activation activation = Activation::kIdentity;
  int residual_from = -1;  ///< index into the activation list (0 = network input), or -1
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;
};

struct MlpSpec {
  std::vector<LayerSpec> layers;

  int input_dim() const { return layers.front().in; }
  int output_dim() const { return layers.back().out; }
  std::size_t param_begin() const { return layers.front().weight_offset; }
  std::size_t param_end() const { return layers.back().bias_offset + layers.back().out; }
};

/// Activations kept by a forward pass. h[0] is the input, h[l + 1] the output of layer l.
struct MlpCache {
  std::vector<Eigen::MatrixXd> z;
  std::vector<Eigen::MatrixXd> h;
};

/// Directional derivatives of every activation along the three input-space axes.
struct MlpTangentCache {
  std::vector<std::array<Eigen::MatrixXd, 3>> zt;
  std::vector<std::array<Eigen::MatrixXd, 3>> ht;
};

using ConstWeights = Eigen::Map<const Eigen::MatrixXd>;
using ConstBias = Eigen::Map<const Eigen::VectorXd>;

ConstWeights layer_weights(const LayerSpec& layer, const Eigen::VectorXd& params);
ConstBias layer_bias(const LayerSpec& layer, const Eigen::VectorXd& params);

/// Columns of `input` are samples. Fills `cache` when non-null.
Eigen::MatrixXd mlp_forward(const MlpSpec& spec, const Eigen::VectorXd& params,
                            const Eigen::MatrixXd& input, MlpCache* cache);

/// Reverse pass for the cached forward: adds dL/dparams into `grad` (same layout as `params`)
/// and returns dL/dinput.
Eigen::MatrixXd mlp_backward(const MlpSpec& spec, const Eigen::VectorXd& params,
                             const MlpCache& cache, const Eigen::MatrixXd& d_output,
                             Eigen::VectorXd& grad);

/// Forward pass that also pushes three input tangents through the network.
Eigen::MatrixXd mlp_forward_tangent(const MlpSpec& spec, const Eigen::VectorXd& params,
                                    const Eigen::MatrixXd& input,
                                    const std::array<Eigen::MatrixXd, 3>& input_tangents,
                                    MlpCache& cache, MlpTangentCache& tangents,
                                    std::array<Eigen::MatrixXd, 3>& output_tangents);

/// Parameter gradient of a loss depending on both the outputs and their input tangents.
void mlp_backward_tangent(const MlpSpec& spec, const Eigen::VectorXd& params,
                          const MlpCache& cache, const MlpTangentCache& tangents,
                          const Eigen::MatrixXd& d_output,
                          const std::array<Eigen::MatrixXd, 3>& d_output_tangents,
                          Eigen::VectorXd& grad);

}  // namespace scanfill
