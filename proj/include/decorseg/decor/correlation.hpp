#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "decorseg/common.hpp"
#include "decorseg/tensor.hpp"

namespace decorseg {

/// Rows with a normalizer below this are treated as dead channels and fall
/// back to a uniform probability row.
inline constexpr real kCorrelationEpsilon = 1e-12;

/// One sample's activation tensor (C, H, W) from an encoder unit.
struct FeatureMap {
  Tensor data;       // shape (C, H, W)
  int layer_id = 0;  // 1-based encoder unit index, 0 when detached

  std::size_t channels() const { return data.dim(0); }
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
  std::size_t pixels() const { return data.dim(1) * data.dim(2); }
};

/// C x C Gram matrix of flattened channels plus per-row maxima.
struct CorrelationMap {
  Tensor values;                     // (C, C), exactly symmetric
  std::vector<real> row_normalizers;  // z_i = max over row i

  std::size_t channels() const { return row_normalizers.size(); }
};

/// Row-stochastic matrix obtained from a CorrelationMap; each row i is the
/// softmax of values[i] / z_i. Degenerate rows are uniform.
struct ProbabilityMap {
  Tensor values;  // (C, C)
  std::vector<std::size_t> degenerate_rows;

  std::size_t channels() const { return values.empty() ? 0 : values.dim(0); }

  real diagonal_mass() const {
    const std::size_t c = channels();
    real s = 0.0;
    for (std::size_t i = 0; i < c; ++i) s += values(i, i);
    return c > 0 ? s / static_cast<real>(c) : 0.0;
  }
};

using MatrixRM = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

inline void validate_feature_map(const FeatureMap& features, const char* op) {
  if (features.data.rank() != 3 || features.data.dim(0) < 1 || features.data.dim(1) < 1 ||
      features.data.dim(2) < 1) {
    throw ConfigError(std::string(op) + ": feature map must have shape (C, H, W) with C,H,W >= 1");
  }
  if (!all_finite(features.data)) {
    throw NumericalError(std::string(op) + ": non-finite value in feature map of encoder unit " +
                         std::to_string(features.layer_id));
  }
}

/// Gram matrix of the flattened channels: values[i][j] = sum_hw h_i * h_j.
/// The result is made exactly symmetric by mirroring the upper triangle.
inline CorrelationMap channel_correlation(const FeatureMap& features) {
  validate_feature_map(features, "channel_correlation");
  const std::size_t c = features.channels();
  const std::size_t hw = features.pixels();

  CorrelationMap corr;
  corr.values = Tensor({c, c});
  ConstMapRM flat(features.data.data(), static_cast<Eigen::Index>(c),
                  static_cast<Eigen::Index>(hw));
  MapRM values(corr.values.data(), static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c));
  values.noalias() = flat * flat.transpose();
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = i + 1; j < c; ++j) corr.values(j, i) = corr.values(i, j);
  }

  corr.row_normalizers.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    real m = corr.values(i, 0);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, corr.values(i, j));
    corr.row_normalizers[i] = m;
  }
  return corr;
}

/// Row-wise softmax of values[i] / z_i. The normalizer z_i is the row maximum
/// and is treated as a constant under differentiation; rows whose z_i falls
/// below epsilon carry no correlation signal and become uniform.
inline ProbabilityMap normalized_softmax(const CorrelationMap& corr,
                                         real epsilon = kCorrelationEpsilon) {
  const std::size_t c = corr.channels();
  if (c == 0 || corr.values.rank() != 2 || corr.values.dim(0) != c || corr.values.dim(1) != c) {
    throw ConfigError("normalized_softmax: malformed correlation map");
  }
  ProbabilityMap prob;
  prob.values = Tensor({c, c});
  for (std::size_t i = 0; i < c; ++i) {
    const real z = corr.row_normalizers[i];
    if (!(z >= epsilon)) {
      for (std::size_t j = 0; j < c; ++j) prob.values(i, j) = 1.0 / static_cast<real>(c);
      prob.degenerate_rows.push_back(i);
      continue;
    }
    // All scaled entries are <= 1 because z is the row max, so shifting by 1
    // keeps every exponent non-positive.
    real sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const real e = std::exp(corr.values(i, j) / z - 1.0);
      prob.values(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < c; ++j) prob.values(i, j) /= sum;
  }
  return prob;
}

}  // namespace decorseg
