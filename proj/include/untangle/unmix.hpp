#pragma once

#include <Eigen/SVD>

#include "untangle/common.hpp"

namespace untangle {

/// Recovered linear unmixing: a p̂-dimensional affine reduction of the
/// observed data. Columns of W are orthonormal; the same (W, c) is applied
/// to observational and interventional batches alike.
struct UnmixResult {
  int p_hat = 0;
  Matrix W;           // n x p_hat, orthonormal columns
  RowVector c;        // n, observational mean
  Vector singular_values;

  Matrix apply(const Matrix& observed) const { return (observed.rowwise() - c) * W; }

  /// Affine right-inverse of apply on the image of the mixing map.
  Matrix reconstruct(const Matrix& latent) const {
    return (latent * W.transpose()).rowwise() + c;
  }
};

/// Number of singular values of the centered data above rel_tol times the
/// largest one. The rank of noiseless linearly mixed data equals the latent
/// dimension.
inline int estimate_dimension(const Matrix& x_obs, double rel_tol = 1e-6) {
  require(x_obs.rows() >= 2, "estimate_dimension: need at least 2 rows");
  Matrix centered = x_obs.rowwise() - x_obs.colwise().mean();
  Eigen::BDCSVD<Matrix> svd(centered);
  const Vector& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  int p_hat = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) > rel_tol * sv(0)) ++p_hat;
  return p_hat;
}

/// PCA basis of the centered observational data. Any invertible linear
/// re-mixing of the truth is an acceptable representative, so no whitening
/// or sign convention is imposed beyond orthonormal columns.
inline UnmixResult unmix(const Matrix& x_obs, int p_hat, double rel_tol = 1e-6) {
  require(x_obs.rows() >= 2, "unmix: need at least 2 rows");
  require(p_hat >= 0 && p_hat <= x_obs.cols(), "unmix: p_hat out of range");
  RowVector mean = x_obs.colwise().mean();
  Matrix centered = x_obs.rowwise() - mean;
  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  int rank = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (sv(i) > rel_tol * std::max(sv(0), 1e-300)) ++rank;
  require(p_hat <= rank, "unmix: p_hat exceeds the numerical rank of the data");
  UnmixResult out;
  out.p_hat = p_hat;
  out.W = svd.matrixV().leftCols(p_hat);
  out.c = mean;
  out.singular_values = sv;
  return out;
}

}  // namespace untangle
