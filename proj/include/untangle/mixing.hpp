#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/SVD>

#include "untangle/common.hpp"

namespace untangle {

namespace detail {

inline std::int64_t feature_dim(int p, int degree) {
  std::int64_t dim = 0, power = 1;
  for (int d = 1; d <= degree; ++d) {
    power *= p;
    dim += power;
  }
  return dim;
}

/// Feature vector (U, U⊗U, ..., U^{⊗d}). Index order within each degree-k
/// block is lexicographic over the index tuples (Kronecker order), fixed so
/// that serialized maps are portable.
inline RowVector polynomial_features(const RowVector& u, int degree) {
  int p = static_cast<int>(u.size());
  RowVector out(feature_dim(p, degree));
  std::int64_t pos = 0;
  std::vector<double> block(u.data(), u.data() + p);
  for (int i = 0; i < p; ++i) out(pos++) = u(i);
  for (int d = 2; d <= degree; ++d) {
    std::vector<double> next;
    next.reserve(block.size() * p);
    for (double b : block)
      for (int i = 0; i < p; ++i) next.push_back(b * u(i));
    for (double v : next) out(pos++) = v;
    block.swap(next);
  }
  return out;
}

}  // namespace detail

/// Full-row-rank polynomial map X = (U, ⊗U², ..., ⊗U^d) H + h.
struct MixingMap {
  int p = 0;
  int n = 0;
  int degree = 1;
  Matrix H;     // feature_dim(p, degree) x n
  RowVector h;  // n

  MixingMap() = default;
  MixingMap(int p_, int n_, int degree_, Matrix H_, RowVector h_)
      : p(p_), n(n_), degree(degree_), H(std::move(H_)), h(std::move(h_)) {
    require(degree >= 1, "MixingMap: degree must be >= 1");
    require(n >= p, "MixingMap: observed dimension must be >= latent dimension");
    require(H.rows() == detail::feature_dim(p, degree) && H.cols() == n,
            "MixingMap: H shape mismatch");
    require(h.size() == n, "MixingMap: offset shape mismatch");
    Eigen::JacobiSVD<Matrix> svd(H);
    double smax = svd.singularValues()(0);
    double smin = svd.singularValues()(svd.singularValues().size() - 1);
    require(smax > 0.0 && smin > 1e-10 * smax, "MixingMap: H is not full row rank");
  }
};

inline Matrix mix(const MixingMap& map, const Matrix& latent) {
  require(static_cast<int>(latent.cols()) == map.p, "mix: latent dimension mismatch");
  Matrix out(latent.rows(), map.n);
  for (std::int64_t s = 0; s < latent.rows(); ++s)
    out.row(s) = detail::polynomial_features(latent.row(s), map.degree) * map.H + map.h;
  return out;
}

/// Random degree-1 map with Gaussian entries, regenerated until the smallest
/// singular value exceeds 1e-3 times the largest.
inline MixingMap random_linear_map(int p, int n, std::uint64_t seed) {
  require(n >= p, "random_linear_map: n must be >= p");
  auto rng = make_rng(seed, 47);
  for (int attempt = 0; attempt < 100; ++attempt) {
    Matrix H = gaussian_matrix(p, n, rng);
    Eigen::JacobiSVD<Matrix> svd(H);
    double smax = svd.singularValues()(0);
    double smin = svd.singularValues()(p - 1);
    if (smin > 1e-3 * smax) return MixingMap(p, n, 1, std::move(H), RowVector::Zero(n));
  }
  throw std::runtime_error("random_linear_map: failed to draw a well-conditioned map");
}

/// Decodes observed rows through the Moore–Penrose pseudo-inverse of a d=1
/// map: U = (X − h) H†. Rows off the image of mix are projected onto it.
inline Matrix pseudo_decode(const MixingMap& map, const Matrix& observed) {
  require(map.degree == 1, "pseudo_decode: only degree-1 maps are invertible here");
  require(static_cast<int>(observed.cols()) == map.n, "pseudo_decode: observed dimension mismatch");
  Matrix pinv = map.H.completeOrthogonalDecomposition().pseudoInverse();  // n x p
  return (observed.rowwise() - map.h) * pinv;
}

}  // namespace untangle
