#include "scanfill/fields.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "scanfill/error.hpp"

namespace scanfill {
namespace {

using Eigen::Matrix3Xd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr Eigen::Index kChunk = 8192;

MlpSpec build_spec(int in, int width, int out, Activation hidden, Activation last,
                   int residual_layer, std::size_t& offset) {
  MlpSpec spec;
  const int dims[5] = {in, width, width, width, out};
  for (int l = 0; l < 4; ++l) {
    LayerSpec layer;
    layer.in = dims[l];
    layer.out = dims[l + 1];
    layer.activation = l == 3 ? last : hidden;
    layer.residual_from = l == residual_layer ? 1 : -1;
    layer.weight_offset = offset;
    offset += static_cast<std::size_t>(layer.in) * layer.out;
    layer.bias_offset = offset;
    offset += layer.out;
    spec.layers.push_back(layer);
  }
  return spec;
}

template <typename Fn>
void for_chunks(Eigen::Index n, Fn&& fn) {
  for (Eigen::Index begin = 0; begin < n; begin += kChunk) {
    fn(begin, std::min(kChunk, n - begin));
  }
}

Eigen::Map<MatrixXd> weights_of(const LayerSpec& layer, VectorXd& values) {
  return Eigen::Map<MatrixXd>(values.data() + layer.weight_offset, layer.out, layer.in);
}

Eigen::Map<VectorXd> bias_of(const LayerSpec& layer, VectorXd& values) {
  return Eigen::Map<VectorXd>(values.data() + layer.bias_offset, layer.out);
}

}  // namespace

VectorXd positional_encoding(const Vec3& x, const EncodingConfig& cfg) {
  Matrix3Xd p(3, 1);
  p.col(0) = x;
  return encode_points(p, cfg).col(0);
}

MatrixXd encode_points(const Matrix3Xd& points, const EncodingConfig& cfg) {
  if (cfg.levels < 0) fail(ErrorCode::kInvalidArgument, "negative encoding levels");
  MatrixXd out(cfg.output_dim(), points.cols());
  int row = 0;
  if (cfg.include_input) {
    out.topRows(3) = points;
    row = 3;
  }
  for (int k = 0; k < cfg.levels; ++k) {
    const auto scaled = (points.array() * std::ldexp(1.0, k));
    out.middleRows(row, 3) = scaled.sin().matrix();
    out.middleRows(row + 3, 3) = scaled.cos().matrix();
    row += 6;
  }
  return out;
}

std::array<MatrixXd, 3> encoding_tangents(const Matrix3Xd& points, const EncodingConfig& cfg) {
  const Eigen::Index n = points.cols();
  std::array<MatrixXd, 3> t;
  for (auto& m : t) m = MatrixXd::Zero(cfg.output_dim(), n);
  int row = 0;
  if (cfg.include_input) {
    for (int a = 0; a < 3; ++a) t[a].row(a).setOnes();
    row = 3;
  }
  for (int k = 0; k < cfg.levels; ++k) {
    const double freq = std::ldexp(1.0, k);
    for (int a = 0; a < 3; ++a) {
      const auto s = (points.row(a).array() * freq);
      t[a].row(row + a) = (freq * s.cos()).matrix();
      t[a].row(row + 3 + a) = (-freq * s.sin()).matrix();
    }
    row += 6;
  }
  return t;
}

Matrix3Xd encoding_backward(const Matrix3Xd& points, const EncodingConfig& cfg,
                            const MatrixXd& d_encoded) {
  if (d_encoded.rows() != cfg.output_dim() || d_encoded.cols() != points.cols()) {
    fail(ErrorCode::kInvalidArgument, "encoding gradient shape mismatch");
  }
  Matrix3Xd dx = Matrix3Xd::Zero(3, points.cols());
  int row = 0;
  if (cfg.include_input) {
    dx = d_encoded.topRows(3);
    row = 3;
  }
  for (int k = 0; k < cfg.levels; ++k) {
    const double freq = std::ldexp(1.0, k);
    const auto s = (points.array() * freq);
    dx.array() += freq * (d_encoded.middleRows(row, 3).array() * s.cos() -
                          d_encoded.middleRows(row + 3, 3).array() * s.sin());
    row += 6;
  }
  return dx;
}

FieldParams FieldParams::zeros(const FieldConfig& config) {
  if (config.sdf_width < 1 || config.color_width < 1) {
    fail(ErrorCode::kInvalidArgument, "network width must be positive");
  }
  FieldParams p;
  p.config = config;
  std::size_t offset = 0;
  const int in = config.encoding.output_dim();
  p.sdf = build_spec(in, config.sdf_width, 1, Activation::kRelu, Activation::kIdentity, -1, offset);
  p.color = build_spec(in, config.color_width, 3, Activation::kSilu, Activation::kSigmoid, 2,
                       offset);
  p.values = VectorXd::Zero(static_cast<Eigen::Index>(offset));
  return p;
}

void DensityParams::validate() const {
  if (!(alpha > 0.0) || !(beta > 0.0)) {
    fail(ErrorCode::kInvalidArgument, "density parameters must be positive");
  }
}

double density_from_sdf(double f, const DensityParams& dp) {
  // Laplace CDF at s = -f.
  const double s = -f;
  const double cdf = s <= 0.0 ? 0.5 * std::exp(s / dp.beta) : 1.0 - 0.5 * std::exp(-s / dp.beta);
  return dp.alpha * cdf;
}

double density_derivative(double f, const DensityParams& dp) {
  return -dp.alpha * 0.5 / dp.beta * std::exp(-std::abs(f) / dp.beta);
}

SdfSample sdf_eval(const FieldParams& params, const Vec3& x) {
  Matrix3Xd p(3, 1);
  p.col(0) = x;
  MlpCache cache;
  const MatrixXd enc = encode_points(p, params.config.encoding);
  const MatrixXd f = mlp_forward(params.sdf, params.values, enc, &cache);
  VectorXd scratch = VectorXd::Zero(params.values.size());
  const MatrixXd d_enc = mlp_backward(params.sdf, params.values, cache, MatrixXd::Ones(1, 1), scratch);
  const Matrix3Xd dx = encoding_backward(p, params.config.encoding, d_enc);
  return SdfSample{f(0, 0), dx.col(0)};
}

VectorXd sdf_values(const FieldParams& params, const Matrix3Xd& points) {
  VectorXd out(points.cols());
  for_chunks(points.cols(), [&](Eigen::Index begin, Eigen::Index n) {
    const MatrixXd enc = encode_points(points.middleCols(begin, n), params.config.encoding);
    out.segment(begin, n) = mlp_forward(params.sdf, params.values, enc, nullptr).row(0).transpose();
  });
  return out;
}

void sdf_values_and_gradients(const FieldParams& params, const Matrix3Xd& points,
                              VectorXd& values, Matrix3Xd& gradients) {
  values.resize(points.cols());
  gradients.resize(3, points.cols());
  for_chunks(points.cols(), [&](Eigen::Index begin, Eigen::Index n) {
    const Matrix3Xd p = points.middleCols(begin, n);
    MlpCache cache;
    MlpTangentCache tangents;
    std::array<MatrixXd, 3> out_t;
    const MatrixXd f = mlp_forward_tangent(params.sdf, params.values,
                                           encode_points(p, params.config.encoding),
                                           encoding_tangents(p, params.config.encoding), cache,
                                           tangents, out_t);
    values.segment(begin, n) = f.row(0).transpose();
    for (int a = 0; a < 3; ++a) gradients.block(a, begin, 1, n) = out_t[a];
  });
}

void sdf_backward(const FieldParams& params, const Matrix3Xd& points, const VectorXd& d_values,
                  FieldGradient& grad) {
  if (d_values.size() != points.cols()) fail(ErrorCode::kInvalidArgument, "gradient size mismatch");
  for_chunks(points.cols(), [&](Eigen::Index begin, Eigen::Index n) {
    MlpCache cache;
    mlp_forward(params.sdf, params.values,
                encode_points(points.middleCols(begin, n), params.config.encoding), &cache);
    mlp_backward(params.sdf, params.values, cache, d_values.segment(begin, n).transpose(), grad);
  });
}

void sdf_gradient_backward(const FieldParams& params, const Matrix3Xd& points,
                           const VectorXd& d_values, const Matrix3Xd& d_gradients,
                           FieldGradient& grad) {
  if (d_values.size() != points.cols() || d_gradients.cols() != points.cols()) {
    fail(ErrorCode::kInvalidArgument, "gradient size mismatch");
  }
  for_chunks(points.cols(), [&](Eigen::Index begin, Eigen::Index n) {
    const Matrix3Xd p = points.middleCols(begin, n);
    MlpCache cache;
    MlpTangentCache tangents;
    std::array<MatrixXd, 3> out_t;
    mlp_forward_tangent(params.sdf, params.values, encode_points(p, params.config.encoding),
                        encoding_tangents(p, params.config.encoding), cache, tangents, out_t);
    std::array<MatrixXd, 3> d_t;
    for (int a = 0; a < 3; ++a) d_t[a] = d_gradients.block(a, begin, 1, n);
    mlp_backward_tangent(params.sdf, params.values, cache, tangents,
                         d_values.segment(begin, n).transpose(), d_t, grad);
  });
}

Vec3 color_eval(const FieldParams& params, const Vec3& x) {
  Matrix3Xd p(3, 1);
  p.col(0) = x;
  return color_values(params, p).col(0);
}

Matrix3Xd color_values(const FieldParams& params, const Matrix3Xd& points) {
  Matrix3Xd out(3, points.cols());
  for_chunks(points.cols(), [&](Eigen::Index begin, Eigen::Index n) {
    const MatrixXd enc = encode_points(points.middleCols(begin, n), params.config.encoding);
    out.middleCols(begin, n) = mlp_forward(params.color, params.values, enc, nullptr);
  });
  return out;
}

void color_backward(const FieldParams& params, const Matrix3Xd& points, const Matrix3Xd& d_rgb,
                    FieldGradient& grad) {
  if (d_rgb.cols() != points.cols()) fail(ErrorCode::kInvalidArgument, "gradient size mismatch");
  for_chunks(points.cols(), [&](Eigen::Index begin, Eigen::Index n) {
    MlpCache cache;
    mlp_forward(params.color, params.values,
                encode_points(points.middleCols(begin, n), params.config.encoding), &cache);
    mlp_backward(params.color, params.values, cache, d_rgb.middleCols(begin, n), grad);
  });
}

FieldParams sphere_init(const FieldConfig& config, double radius, std::uint64_t seed) {
  if (!(radius > 0.0)) fail(ErrorCode::kInvalidArgument, "sphere radius must be positive");
  FieldParams p = FieldParams::zeros(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // SDF: the first layer pairs +d/-d over well-spread directions so that the summed ReLUs
  // give sum_k |d_k . x|, proportional to |x|. Middle layers pass it through (identity plus
  // a small perturbation) and the output layer rescales and subtracts the radius.
  const int width = config.sdf_width;
  const int pairs = width / 2;
  const auto& sdf = p.sdf.layers;
  auto w0 = weights_of(sdf[0], p.values);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int k = 0; k < pairs; ++k) {
    const double z = 1.0 - (2.0 * k + 1.0) / pairs;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const Vec3 d(r * std::cos(golden * k), r * std::sin(golden * k), z);
    // Columns 0..2 hold x, or sin(x) ~ x near the origin when raw inputs are excluded.
    w0.block(2 * k, 0, 1, 3) = d.transpose();
    w0.block(2 * k + 1, 0, 1, 3) = -d.transpose();
  }
  const double perturbation = 1e-3 / std::sqrt(static_cast<double>(width));
  for (int l = 1; l <= 2; ++l) {
    auto w = weights_of(sdf[l], p.values);
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        w(r, c) = (r == c ? 1.0 : 0.0) + perturbation * normal(rng);
      }
    }
  }
  // E|d . u| = 1/2 for unit vectors, so the pair sum averages pairs/2 * |x|.
  weights_of(sdf[3], p.values).setConstant(pairs > 0 ? 2.0 / pairs : 0.0);
  bias_of(sdf[3], p.values).setConstant(-radius);

  const auto& color = p.color.layers;
  for (std::size_t l = 0; l < color.size(); ++l) {
    auto w = weights_of(color[l], p.values);
    const double scale =
        (l + 1 == color.size() ? 0.1 : 1.0) / std::sqrt(static_cast<double>(color[l].in));
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = scale * normal(rng);
    }
  }
  return p;
}

}  // namespace scanfill
