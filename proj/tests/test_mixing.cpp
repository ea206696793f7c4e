#include <catch2/catch_amalgamated.hpp>

#include "untangle/mixing.hpp"

using namespace untangle;

TEST_CASE("identity embedding pads with zeros") {
  int p = 3, n = 5;
  Matrix H = Matrix::Zero(p, n);
  H.leftCols(p) = Matrix::Identity(p, p);
  MixingMap map(p, n, 1, H, RowVector::Zero(n));
  Matrix u(2, p);
  u << 1, 2, 3, 4, 5, 6;
  Matrix x = mix(map, u);
  CHECK(x.leftCols(p) == u);
  CHECK(x.rightCols(n - p).norm() == 0.0);
}

TEST_CASE("degree-2 feature expansion by hand") {
  // p=1, d=2: features (U, U^2); H rows (1;1): U=2 maps to 2 + 4 = 6.
  Matrix H(2, 1);
  H << 1, 1;
  MixingMap map(1, 1, 2, H, RowVector::Zero(1));
  Matrix u(1, 1);
  u << 2.0;
  CHECK(mix(map, u)(0, 0) == Catch::Approx(6.0));
}

TEST_CASE("rank-deficient H is rejected at construction") {
  Matrix H(2, 3);
  H << 1, 0, 0, 2, 0, 0;  // rows parallel
  CHECK_THROWS(MixingMap(2, 3, 1, H, RowVector::Zero(3)));
}

TEST_CASE("random linear maps are well conditioned") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MixingMap map = random_linear_map(5, 50, seed);
    Eigen::JacobiSVD<Matrix> svd(map.H);
    CHECK(svd.singularValues()(4) > 1e-3 * svd.singularValues()(0));
  }
  MixingMap square = random_linear_map(3, 3, 1);
  CHECK(square.H.rows() == 3);
  CHECK_THROWS(random_linear_map(5, 3, 0));
}

TEST_CASE("pseudo decode round trip") {
  auto rng = make_rng(3, 0);
  MixingMap map = random_linear_map(4, 20, 5);
  Matrix u = gaussian_matrix(100, 4, rng);
  Matrix x = mix(map, u);
  Matrix back = pseudo_decode(map, x);
  CHECK((back - u).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("decode of mixed zeros is zero") {
  MixingMap map = random_linear_map(3, 8, 9);
  Matrix zeros = Matrix::Zero(5, 3);
  Matrix back = pseudo_decode(map, mix(map, zeros));
  CHECK(back.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("degree-2 maps cannot be pseudo decoded") {
  Matrix H(2, 1);
  H << 1, 1;
  MixingMap map(1, 1, 2, H, RowVector::Zero(1));
  CHECK_THROWS(pseudo_decode(map, Matrix::Zero(1, 1)));
}

TEST_CASE("mix is injective on random samples") {
  auto rng = make_rng(21, 0);
  MixingMap map = random_linear_map(3, 10, 13);
  Matrix u = gaussian_matrix(200, 3, rng);
  Matrix x = mix(map, u);
  for (int i = 0; i < 20; ++i)
    for (int j = i + 1; j < 20; ++j)
      CHECK((x.row(i) - x.row(j)).norm() > 1e-8);
}
