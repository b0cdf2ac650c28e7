#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "decorseg/common.hpp"
#include "decorseg/decor/correlation.hpp"
#include "decorseg/tensor.hpp"

namespace decorseg {

enum class Reduction { kMean, kSum };

/// Weights of the combined training objective
///   L = weight_ce * L_ce + weight_dice * L_dice + lambda_decor * L_decor.
struct LossWeights {
  real lambda_decor = 0.01;
  real weight_ce = 0.5;
  real weight_dice = 0.5;
  Reduction layer_reduction = Reduction::kMean;
  Reduction batch_reduction = Reduction::kMean;
  /// Optional per-encoder-unit multipliers on the decor term; empty = all 1.
  std::vector<real> layer_scale;

  real scale_for_layer(std::size_t layer) const {
    if (layer_scale.empty()) return 1.0;
    return layer < layer_scale.size() ? layer_scale[layer] : 1.0;
  }
};

struct DecorLossResult {
  real loss = 0.0;
  Tensor gradient;  // shaped like the input feature map; empty unless requested
  ProbabilityMap probability_map;
};

/// Decorrelation loss of one feature map: -sum_i log(x_ii) of the normalized
/// softmax of the channel Gram matrix. Returns the loss and probability map;
/// the gradient field is left empty.
inline DecorLossResult decor_loss_forward(const FeatureMap& features,
                                          real epsilon = kCorrelationEpsilon) {
  DecorLossResult result;
  const CorrelationMap corr = channel_correlation(features);
  result.probability_map = normalized_softmax(corr, epsilon);
  const std::size_t c = corr.channels();
  real loss = 0.0;
  for (std::size_t i = 0; i < c; ++i) loss -= std::log(result.probability_map.values(i, i));
  result.loss = loss;
  return result;
}

namespace detail {

inline void check_backward_shapes(const FeatureMap& features, const ProbabilityMap& prob,
                                  const CorrelationMap& corr) {
  const std::size_t c = features.channels();
  if (prob.channels() != c || corr.channels() != c || corr.values.dim(0) != c ||
      corr.values.dim(1) != c) {
    throw ConfigError("decor_loss_backward: shape mismatch between feature map (" +
                      std::to_string(c) + " channels) and probability/correlation maps");
  }
}

/// Reciprocal row normalizers with dead rows pinned to zero: a uniform row is
/// constant in the inputs, so no gradient may flow through it.
inline std::vector<real> inverse_normalizers(const ProbabilityMap& prob,
                                             const CorrelationMap& corr) {
  std::vector<real> inv(corr.channels());
  for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 / corr.row_normalizers[i];
  for (std::size_t row : prob.degenerate_rows) inv[row] = 0.0;
  return inv;
}

}  // namespace detail

/// Closed-form gradient of the decorrelation loss with respect to the feature
/// map, with the row normalizers held constant:
///   d/dh_a = sum_{i != a} (x_ai/z_a + x_ia/z_i) h_i + 2 (x_aa - 1)/z_a h_a.
/// Implemented as grad = M * H with M = D X + (D X)^T - 2 D, D = diag(1/z).
inline Tensor decor_loss_backward(const FeatureMap& features, const ProbabilityMap& prob,
                                  const CorrelationMap& corr) {
  detail::check_backward_shapes(features, prob, corr);
  const std::size_t c = features.channels();
  const std::size_t hw = features.pixels();
  const std::vector<real> inv_z = detail::inverse_normalizers(prob, corr);

  Tensor coeff({c, c});
  for (std::size_t a = 0; a < c; ++a) {
    for (std::size_t i = 0; i < c; ++i) {
      coeff(a, i) = prob.values(a, i) * inv_z[a] + prob.values(i, a) * inv_z[i];
    }
    coeff(a, a) -= 2.0 * inv_z[a];
  }

  Tensor grad(features.data.shape());
  ConstMapRM m(coeff.data(), static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
  ConstMapRM flat(features.data.data(), static_cast<Eigen::Index>(c),
                  static_cast<Eigen::Index>(hw));
  MapRM out(grad.data(), static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(hw));
  out.noalias() = m * flat;
  return grad;
}

/// Same gradient assembled stage by stage (softmax/NLL backward into the Gram
/// matrix, then the symmetric Gram backward), instead of the fused coefficient
/// matrix above. Kept as an independently wired route for cross-checking.
inline Tensor decor_loss_backward_chained(const FeatureMap& features, const ProbabilityMap& prob,
                                          const CorrelationMap& corr) {
  detail::check_backward_shapes(features, prob, corr);
  const std::size_t c = features.channels();
  const std::size_t hw = features.pixels();
  const std::vector<real> inv_z = detail::inverse_normalizers(prob, corr);

  // dL/dc_ij of the softmax cross-entropy on the diagonal, z frozen.
  Tensor dcorr({c, c});
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      dcorr(i, j) = (prob.values(i, j) - (i == j ? 1.0 : 0.0)) * inv_z[i];
    }
  }
  // c_ij contributes through both its slots: d/dH = (G + G^T) H.
  Tensor sym({c, c});
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) sym(i, j) = dcorr(i, j) + dcorr(j, i);
  }

  Tensor grad(features.data.shape());
  ConstMapRM m(sym.data(), static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
  ConstMapRM flat(features.data.data(), static_cast<Eigen::Index>(c),
                  static_cast<Eigen::Index>(hw));
  MapRM out(grad.data(), static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(hw));
  out.noalias() = m * flat;
  return grad;
}

/// Forward + closed-form backward in one call.
inline DecorLossResult decor_loss(const FeatureMap& features, real epsilon = kCorrelationEpsilon,
                                  bool chained_backward = false) {
  const CorrelationMap corr = channel_correlation(features);
  DecorLossResult result;
  result.probability_map = normalized_softmax(corr, epsilon);
  real loss = 0.0;
  for (std::size_t i = 0; i < corr.channels(); ++i) {
    loss -= std::log(result.probability_map.values(i, i));
  }
  result.loss = loss;
  result.gradient = chained_backward
                        ? decor_loss_backward_chained(features, result.probability_map, corr)
                        : decor_loss_backward(features, result.probability_map, corr);
  return result;
}

struct MultiLayerDecorResult {
  real loss = 0.0;                        // reduced across layers and batch
  std::vector<real> layer_losses;         // batch-reduced raw loss per layer
  std::vector<Tensor> mean_probability_maps;  // per layer, averaged over the batch
  /// d(loss)/d(tap), [sample][layer]; includes reduction coefficients and
  /// per-layer scales but not lambda. Empty unless gradients were requested.
  std::vector<std::vector<Tensor>> tap_gradients;
};

/// Decorrelation loss over all encoder taps of a batch. taps[sample][layer]
/// holds one FeatureMap per encoder unit.
inline MultiLayerDecorResult decor_loss_multi_layer(
    const std::vector<std::vector<FeatureMap>>& taps, const LossWeights& weights,
    bool with_gradients = false, real epsilon = kCorrelationEpsilon,
    bool chained_backward = false) {
  if (taps.empty() || taps.front().empty()) {
    throw ConfigError("decor_loss_multi_layer: empty tap list");
  }
  const std::size_t batch = taps.size();
  const std::size_t layers = taps.front().size();
  for (const auto& sample : taps) {
    if (sample.size() != layers) {
      throw ConfigError("decor_loss_multi_layer: inconsistent tap counts across samples");
    }
  }

  MultiLayerDecorResult result;
  result.layer_losses.assign(layers, 0.0);
  result.mean_probability_maps.resize(layers);
  if (with_gradients) result.tap_gradients.assign(batch, std::vector<Tensor>(layers));

  const real layer_coef =
      weights.layer_reduction == Reduction::kMean ? 1.0 / static_cast<real>(layers) : 1.0;
  const real batch_coef =
      weights.batch_reduction == Reduction::kMean ? 1.0 / static_cast<real>(batch) : 1.0;

  real total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    real sample_sum = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
      const FeatureMap& tap = taps[b][l];
      DecorLossResult one = with_gradients ? decor_loss(tap, epsilon, chained_backward)
                                           : decor_loss_forward(tap, epsilon);
      sample_sum += weights.scale_for_layer(l) * one.loss;
      result.layer_losses[l] += batch_coef * one.loss;

      Tensor& mean_map = result.mean_probability_maps[l];
      if (mean_map.empty()) {
        mean_map = Tensor(one.probability_map.values.shape());
      }
      mean_map.axpy(1.0 / static_cast<real>(batch), one.probability_map.values);

      if (with_gradients) {
        one.gradient *= weights.scale_for_layer(l) * layer_coef * batch_coef;
        result.tap_gradients[b][l] = std::move(one.gradient);
      }
    }
    total += batch_coef * layer_coef * sample_sum;
  }
  result.loss = total;
  return result;
}

}  // namespace decorseg
