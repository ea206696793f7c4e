#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "untangle/common.hpp"

namespace untangle {

/// Mixture of Gaussian kernels with dyadically spaced widths ε·2^j,
/// j = 0..num_widths-1, k(x,y) = exp(-||x-y||²/(2w²)).
struct KernelSpec {
  double base_width = 1.0;
  int num_widths = 1;

  KernelSpec() = default;
  KernelSpec(double eps, int m_k) : base_width(eps), num_widths(m_k) {
    require(eps > 0.0, "KernelSpec: base width must be positive");
    require(m_k >= 1, "KernelSpec: need at least one width");
  }

  std::vector<double> widths() const {
    std::vector<double> out(num_widths);
    double w = base_width;
    for (int j = 0; j < num_widths; ++j, w *= 2.0) out[j] = w;
    return out;
  }
};

struct TestResult {
  double statistic = 0.0;
  double threshold = 0.0;
  bool rejected = false;
};

namespace detail {

inline Matrix pairwise_sqdist(const Matrix& a, const Matrix& b) {
  Vector ra = a.rowwise().squaredNorm();
  Vector rb = b.rowwise().squaredNorm();
  Matrix d = (-2.0 * a * b.transpose()).colwise() + ra;
  d.rowwise() += rb.transpose();
  return d.cwiseMax(0.0);
}

inline double kernel_mixture_mean(double sqdist, const std::vector<double>& widths) {
  double s = 0.0;
  for (double w : widths) s += std::exp(-sqdist / (2.0 * w * w));
  return s / static_cast<double>(widths.size());
}

}  // namespace detail

/// Unbiased estimate of the squared MMD: the three-term sum with diagonal
/// terms removed from the within-sample averages, averaged over the kernel
/// mixture. May be negative; callers threshold rather than clamp.
inline double mmd2_unbiased(const Matrix& x, const Matrix& y, const KernelSpec& kernel) {
  require(x.rows() == y.rows(), "mmd2_unbiased: equal sample counts required");
  require(x.cols() == y.cols(), "mmd2_unbiased: dimension mismatch");
  std::int64_t m = x.rows();
  require(m >= 2, "mmd2_unbiased: need at least 2 samples per side");

  auto widths = kernel.widths();
  Matrix dxx = detail::pairwise_sqdist(x, x);
  Matrix dyy = detail::pairwise_sqdist(y, y);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < m; ++j) {
      if (i != j) {
        sxx += detail::kernel_mixture_mean(dxx(i, j), widths);
        syy += detail::kernel_mixture_mean(dyy(i, j), widths);
      }
    }
  }
  // The cross term accumulates pairs in a canonical order so that swapping
  // the arguments yields a bit-identical result.
  for (std::int64_t i = 0; i < m; ++i)
    sxy += detail::kernel_mixture_mean((x.row(i) - y.row(i)).squaredNorm(), widths);
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = i + 1; j < m; ++j) {
      double a = detail::kernel_mixture_mean((x.row(i) - y.row(j)).squaredNorm(), widths);
      double b = detail::kernel_mixture_mean((x.row(j) - y.row(i)).squaredNorm(), widths);
      if (a > b) std::swap(a, b);
      sxy += a;
      sxy += b;
    }
  }
  double mm1 = static_cast<double>(m) * static_cast<double>(m - 1);
  double mm = static_cast<double>(m) * static_cast<double>(m);
  return sxx / mm1 + syy / mm1 - 2.0 * sxy / mm;
}

/// Compares the order-1 or order-2 (co)moments of two samples. The statistic
/// is the largest relative difference, scaled per entry by the pooled
/// standard deviations so tolerances are unit-free.
inline TestResult two_sample_moment_test(const Matrix& x, const Matrix& y, int order,
                                         double tolerance) {
  require(order == 1 || order == 2, "two_sample_moment_test: order must be 1 or 2");
  require(x.rows() >= 1 && y.rows() >= 1, "two_sample_moment_test: empty samples");
  require(x.cols() == y.cols(), "two_sample_moment_test: dimension mismatch");
  int d = static_cast<int>(x.cols());

  RowVector mx = x.colwise().mean();
  RowVector my = y.colwise().mean();
  Matrix cx = x.rowwise() - mx;
  Matrix cy = y.rowwise() - my;
  RowVector sx = (cx.array().square().colwise().mean()).sqrt();
  RowVector sy = (cy.array().square().colwise().mean()).sqrt();

  double stat = 0.0;
  if (order == 1) {
    for (int a = 0; a < d; ++a) {
      double scale = std::max(0.5 * (sx(a) + sy(a)), 1e-12);
      stat = std::max(stat, std::abs(mx(a) - my(a)) / scale);
    }
  } else {
    Matrix covx = cx.transpose() * cx / static_cast<double>(x.rows());
    Matrix covy = cy.transpose() * cy / static_cast<double>(y.rows());
    for (int a = 0; a < d; ++a) {
      for (int b = 0; b < d; ++b) {
        double scale = std::max(0.5 * (sx(a) * sx(b) + sy(a) * sy(b)), 1e-12);
        stat = std::max(stat, std::abs(covx(a, b) - covy(a, b)) / scale);
      }
    }
  }
  return TestResult{stat, tolerance, stat > tolerance};
}

/// Permutation two-sample test on the unbiased MMD² statistic. Subsamples
/// both sides to max_samples rows to keep the kernel sums tractable.
inline TestResult mmd_permutation_test(const Matrix& x, const Matrix& y, const KernelSpec& kernel,
                                       double alpha = 0.05, int permutations = 200,
                                       std::uint64_t seed = 0, std::int64_t max_samples = 500) {
  std::int64_t m = std::min({x.rows(), y.rows(), max_samples});
  require(m >= 2, "mmd_permutation_test: need at least 2 samples per side");
  auto rng = make_rng(seed, 101);

  auto subsample = [&](const Matrix& src) {
    if (src.rows() == m) return Matrix(src);
    std::vector<std::int64_t> idx(src.rows());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    Matrix out(m, src.cols());
    for (std::int64_t i = 0; i < m; ++i) out.row(i) = src.row(idx[i]);
    return out;
  };
  Matrix xs = subsample(x);
  Matrix ys = subsample(y);

  double observed = mmd2_unbiased(xs, ys, kernel);
  Matrix pooled(2 * m, xs.cols());
  pooled.topRows(m) = xs;
  pooled.bottomRows(m) = ys;
  std::vector<std::int64_t> idx(2 * m);
  std::iota(idx.begin(), idx.end(), 0);
  int geq = 0;
  for (int t = 0; t < permutations; ++t) {
    std::shuffle(idx.begin(), idx.end(), rng);
    Matrix px(m, pooled.cols()), py(m, pooled.cols());
    for (std::int64_t i = 0; i < m; ++i) {
      px.row(i) = pooled.row(idx[i]);
      py.row(i) = pooled.row(idx[m + i]);
    }
    if (mmd2_unbiased(px, py, kernel) >= observed) ++geq;
  }
  double pvalue = (1.0 + geq) / (1.0 + permutations);
  // Report the statistic on the p-value scale: reject when pvalue < alpha.
  return TestResult{1.0 - pvalue, 1.0 - alpha, pvalue < alpha};
}

/// Tests whether the distribution of the projected scalar X·direction differs
/// between the two samples: first two moments plus a 1-D MMD permutation
/// test; rejected iff any sub-test rejects.
inline TestResult projection_changed(const Matrix& x_obs, const Matrix& x_int,
                                     const RowVector& direction, double tolerance = 0.05,
                                     std::uint64_t seed = 0) {
  require(direction.size() == x_obs.cols() && direction.size() == x_int.cols(),
          "projection_changed: direction dimension mismatch");
  require(direction.norm() > 0.0, "projection_changed: zero direction");
  Matrix po = x_obs * direction.transpose();
  Matrix pi = x_int * direction.transpose();
  TestResult m1 = two_sample_moment_test(po, pi, 1, tolerance);
  TestResult m2 = two_sample_moment_test(po, pi, 2, tolerance);
  TestResult mmd = mmd_permutation_test(po, pi, KernelSpec(std::max(po.norm() / std::sqrt(double(po.rows())), 1e-6), 3),
                                        0.05, 200, seed);
  double stat = std::max({m1.statistic / std::max(m1.threshold, 1e-12),
                          m2.statistic / std::max(m2.threshold, 1e-12),
                          mmd.statistic / std::max(mmd.threshold, 1e-12)});
  return TestResult{stat, 1.0, m1.rejected || m2.rejected || mmd.rejected};
}

/// Fisher-z test of partial correlation: statistic = sqrt(N-|S|-3)·atanh(r),
/// rejected iff |statistic| exceeds the two-sided normal quantile.
inline TestResult partial_correlation_ci(const Matrix& z, int i, int j,
                                         const std::vector<int>& cond, double alpha = 0.05) {
  require(i != j, "partial_correlation_ci: i and j must differ");
  std::int64_t n = z.rows();
  int q = static_cast<int>(cond.size());
  require(n > q + 3, "partial_correlation_ci: need N > |S| + 3");

  Matrix centered = z.rowwise() - z.colwise().mean();
  Vector vi = centered.col(i);
  Vector vj = centered.col(j);
  if (q > 0) {
    Matrix s(n, q);
    for (int a = 0; a < q; ++a) s.col(a) = centered.col(cond[a]);
    Matrix gram = s.transpose() * s;
    Eigen::FullPivLU<Matrix> lu(gram);
    if (!lu.isInvertible())
      throw std::runtime_error("partial_correlation_ci: singular conditioning covariance");
    Matrix proj = s * lu.solve(s.transpose() * centered);
    vi = centered.col(i) - proj.col(i);
    vj = centered.col(j) - proj.col(j);
  }
  double denom = vi.norm() * vj.norm();
  double r = denom > 0.0 ? vi.dot(vj) / denom : 0.0;
  r = std::clamp(r, -0.999999999, 0.999999999);
  double stat = std::sqrt(static_cast<double>(n - q - 3)) * std::atanh(r);

  // Two-sided normal quantile via erfc inverse (Acklam-style rational fit is
  // overkill here; bisection on erfc is exact enough and has no tables).
  auto normal_quantile = [](double prob) {
    double lo = 0.0, hi = 40.0;
    for (int it = 0; it < 200; ++it) {
      double mid = 0.5 * (lo + hi);
      double tail = 0.5 * std::erfc(mid / std::sqrt(2.0));
      (tail > prob ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  };
  double crit = normal_quantile(alpha / 2.0);
  return TestResult{stat, crit, std::abs(stat) > crit};
}

}  // namespace untangle
