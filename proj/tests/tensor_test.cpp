#include <gtest/gtest.h>

#include "support.hpp"

using namespace sprc;

namespace {

Matrix<double> naive_matmul(const Matrix<double>& a, const Matrix<double>& b) {
  Matrix<double> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

Matrix<double> transpose(const Matrix<double>& a) {
  Matrix<double> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

}  // namespace

TEST(Matrix, ConstructionAndIndexing) {
  Matrix<double> m(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 0), 4);
  EXPECT_EQ(m.row(1)[2], 6);
  EXPECT_THROW(Matrix<double>(2, 2, std::vector<double>{1, 2, 3}), StructuralError);
  EXPECT_EQ(shape_str(m), "[2x3]");
}

TEST(Matrix, MatmulMatchesNaiveProduct) {
  std::mt19937_64 rng(3);
  for (auto [n, k, m] : {std::array<std::size_t, 3>{1, 1, 1}, {3, 5, 2}, {7, 4, 9}, {16, 33, 5}}) {
    auto a = random_normal<double>(n, k, rng, 1.0);
    auto b = random_normal<double>(k, m, rng, 1.0);
    EXPECT_LT(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-12);
  }
}

TEST(Matrix, TransposedAccumulatingProducts) {
  std::mt19937_64 rng(4);
  auto a = random_normal<double>(5, 3, rng, 1.0);
  auto b = random_normal<double>(5, 4, rng, 1.0);
  auto c = random_normal<double>(6, 3, rng, 1.0);

  Matrix<double> tn(3, 4, 1.0);
  gemm_tn_acc(a, b, tn);
  auto expect_tn = naive_matmul(transpose(a), b);
  for (auto& v : expect_tn.flat()) v += 1.0;
  EXPECT_LT(max_abs_diff(tn, expect_tn), 1e-12);

  Matrix<double> nt(5, 6);
  gemm_nt_acc(a, c, nt);
  EXPECT_LT(max_abs_diff(nt, naive_matmul(a, transpose(c))), 1e-12);
}

TEST(Matrix, ShapeMismatchThrows) {
  Matrix<double> a(2, 3), b(2, 3);
  EXPECT_THROW(matmul(a, b), StructuralError);
  EXPECT_THROW(max_abs_diff(a, Matrix<double>(3, 2)), StructuralError);
}

TEST(Matrix, EmptyOperands) {
  Matrix<double> a(0, 3), b(3, 2);
  auto c = matmul(a, b);
  EXPECT_EQ(c.rows(), 0u);
  EXPECT_EQ(c.cols(), 2u);
}

TEST(Matrix, RandomNormalIsSeeded) {
  std::mt19937_64 r1(9), r2(9);
  EXPECT_EQ(random_normal<double>(4, 4, r1, 0.5), random_normal<double>(4, 4, r2, 0.5));
}

TEST(Matrix, FiniteCheck) {
  Matrix<double> m(1, 2);
  EXPECT_TRUE(all_finite(m));
  m[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(all_finite(m));
}
