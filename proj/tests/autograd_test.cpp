#include <gtest/gtest.h>

#include "support.hpp"

using namespace sprc;
using sprc::test::finite_difference_check;

namespace {

constexpr double kTol = 1e-6;

using Build = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

/// Runs FD on every input of `build`, scoring the output with a Frobenius
/// distance to a fixed random target so every entry matters.
double op_grad_error(std::vector<Matrix<double>> inputs, const Build& build, std::uint64_t seed = 1) {
  ParamMap<double> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params["x" + std::to_string(i)] = Parameter<double>{inputs[i], {}, false};
  std::mt19937_64 rng(seed);
  std::optional<Matrix<double>> target;
  auto forward = [&](Tape<double>& tape) {
    std::vector<Var<double>> vs;
    for (std::size_t i = 0; i < inputs.size(); ++i) vs.push_back(tape.parameter(params["x" + std::to_string(i)]));
    Var<double> out = build(tape, vs);
    if (!target) target = random_normal<double>(out.rows(), out.cols(), rng, 1.0);
    return ad::frobenius_distance(out, *target);
  };
  {
    Tape<double> tape;
    for (auto& [_, p] : params) p.zero_grad();
    tape.backward(forward(tape));
  }
  // Central-difference round-off is ~1e-11 here, so entries below 1e-4 are
  // compared on an absolute 1e-10 scale.
  auto check = finite_difference_check(
      params,
      [&] {
        Tape<double> tape;
        return forward(tape).scalar();
      },
      1e-5, 1e-4);
  EXPECT_GT(check.checked, 0u);
  if (check.max_rel_error > kTol) ADD_FAILURE() << "worst entry " << check.worst;
  return check.max_rel_error;
}

Matrix<double> rnd(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_normal<double>(r, c, rng, 1.0);
}

}  // namespace

TEST(AutogradFD, Matmul) {
  EXPECT_LT(op_grad_error({rnd(3, 4, 1), rnd(4, 2, 2)}, [](auto&, auto& v) { return ad::matmul(v[0], v[1]); }), kTol);
  EXPECT_LT(op_grad_error({rnd(3, 4, 1), rnd(5, 4, 2)}, [](auto&, auto& v) { return ad::matmul_nt(v[0], v[1]); }),
            kTol);
}

TEST(AutogradFD, ElementwiseAndBroadcast) {
  EXPECT_LT(op_grad_error({rnd(3, 4, 1), rnd(3, 4, 2)}, [](auto&, auto& v) { return ad::add(v[0], v[1]); }), kTol);
  EXPECT_LT(op_grad_error({rnd(3, 4, 1), rnd(3, 4, 2)}, [](auto&, auto& v) { return ad::sub(v[0], v[1]); }), kTol);
  EXPECT_LT(op_grad_error({rnd(3, 4, 1), rnd(1, 4, 2)}, [](auto&, auto& v) { return ad::add_row(v[0], v[1]); }), kTol);
  EXPECT_LT(op_grad_error({rnd(3, 4, 1), rnd(1, 4, 2)}, [](auto&, auto& v) { return ad::mul_row(v[0], v[1]); }), kTol);
  EXPECT_LT(op_grad_error({rnd(3, 4, 1)}, [](auto&, auto& v) { return ad::scale(v[0], 2.5); }), kTol);
  EXPECT_LT(op_grad_error({rnd(3, 4, 1), rnd(1, 1, 2)}, [](auto&, auto& v) { return ad::scale_by(v[0], v[1]); }), kTol);
}

TEST(AutogradFD, Nonlinearities) {
  EXPECT_LT(op_grad_error({rnd(3, 5, 1)}, [](auto&, auto& v) { return ad::gelu(v[0]); }), kTol);
  EXPECT_LT(op_grad_error({rnd(3, 5, 1)}, [](auto&, auto& v) { return ad::softmax_rows(v[0]); }), kTol);
  EXPECT_LT(op_grad_error({rnd(3, 5, 1)}, [](auto&, auto& v) { return ad::l2_normalize_rows(v[0]); }), kTol);
  EXPECT_LT(op_grad_error({rnd(3, 5, 1), rnd(1, 5, 2), rnd(1, 5, 3)},
                          [](auto&, auto& v) { return ad::layer_norm(v[0], v[1], v[2]); }),
            kTol);
}

TEST(AutogradFD, Structural) {
  EXPECT_LT(op_grad_error({rnd(2, 3, 1), rnd(4, 3, 2)}, [](auto&, auto& v) { return ad::concat_rows<double>({v[0], v[1]}); }),
            kTol);
  EXPECT_LT(op_grad_error({rnd(2, 3, 1), rnd(2, 5, 2)}, [](auto&, auto& v) { return ad::concat_cols<double>({v[0], v[1]}); }),
            kTol);
  EXPECT_LT(op_grad_error({rnd(5, 3, 1)}, [](auto&, auto& v) { return ad::slice_rows(v[0], 1, 3); }), kTol);
  EXPECT_LT(op_grad_error({rnd(3, 6, 1)}, [](auto&, auto& v) { return ad::slice_cols(v[0], 2, 3); }), kTol);
  EXPECT_LT(op_grad_error({rnd(6, 3, 1)}, [](auto&, auto& v) { return ad::gather_rows(v[0], {4, 0, 4, 2}); }), kTol);
  EXPECT_LT(op_grad_error({rnd(4, 3, 1)}, [](auto&, auto& v) { return ad::mean_rows(v[0]); }), kTol);
}

TEST(AutogradFD, Losses) {
  EXPECT_LT(op_grad_error({rnd(4, 5, 1)},
                          [](auto& t, auto& v) {
                            Var<double> ce = ad::softmax_cross_entropy(v[0], {0, 3, 1, 4});
                            return ad::add(ce, t.constant(Matrix<double>(1, 1, 0.5)));
                          }),
            kTol);
  auto target = rnd(3, 4, 7);
  EXPECT_LT(op_grad_error({rnd(3, 4, 1)}, [&](auto&, auto& v) { return ad::row_distance_mean(v[0], target); }), kTol);
}

TEST(Autograd, CrossEntropyClosedForm) {
  Tape<double> t;
  auto z = t.variable(Matrix<double>(1, 2));
  EXPECT_NEAR(ad::softmax_cross_entropy(z, {0}).scalar(), std::log(2.0), 1e-15);
  // large logits must not overflow
  auto big = t.constant(Matrix<double>(1, 2, std::vector<double>{1000.0, 0.0}));
  EXPECT_NEAR(ad::softmax_cross_entropy(big, {1}).scalar(), 1000.0, 1e-9);
}

TEST(Autograd, GeluReferenceValues) {
  Tape<double> t;
  auto x = t.constant(Matrix<double>(1, 3, std::vector<double>{0.0, 1.0, -1.0}));
  auto y = ad::gelu(x).value();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.5 * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * 1.044715)), 1e-15);
  EXPECT_NEAR(y[1] - y[2], 1.0, 1e-15);  // gelu(x) - gelu(-x) = x
}

TEST(Autograd, LayerNormStandardizesRows) {
  Tape<double> t;
  auto x = t.constant(rnd(4, 8, 5));
  auto y = ad::layer_norm(x, t.constant(Matrix<double>(1, 8, 1.0)), t.constant(Matrix<double>(1, 8))).value();
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (double a : y.row(r)) m += a / 8;
    for (double a : y.row(r)) v += (a - m) * (a - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Autograd, NormalizedRowsHaveUnitNorm) {
  Tape<double> t;
  auto y = ad::l2_normalize_rows(t.constant(rnd(5, 7, 2))).value();
  for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(l2_norm<double>(y.row(r)), 1.0, 1e-12);
}

TEST(Autograd, StopGradientBlocksFlow) {
  Tape<double> t;
  auto x = t.variable(rnd(2, 2, 3));
  auto loss = ad::frobenius_distance(ad::add(x, ad::stop_gradient(x)), Matrix<double>(2, 2));
  t.backward(loss);
  // d/dx ||2x|| through one branch only = x / ||x||
  auto g = t.grad(x);
  const double n = l2_norm<double>(x.value().flat());
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g[i], x.value()[i] / n, 1e-12);
}

TEST(Autograd, SharedParameterAccumulates) {
  Parameter<double> p{Matrix<double>(1, 1, 3.0), {}, false};
  Tape<double> t;
  auto a = t.parameter(p);
  auto b = t.parameter(p);
  t.backward(ad::matmul(a, b));  // p^2
  EXPECT_DOUBLE_EQ(p.grad[0], 6.0);
}

TEST(Autograd, FrozenParameterGetsNoGradient) {
  Parameter<double> p{Matrix<double>(1, 1, 3.0), {}, true};
  Tape<double> t;
  auto v = t.parameter(p);
  EXPECT_FALSE(t.requires_grad(v));
  t.backward(ad::scale(v, 2.0));
  EXPECT_TRUE(p.grad.empty());
}

TEST(Autograd, ZeroDistanceHasZeroGradient) {
  Tape<double> t;
  auto x = t.variable(Matrix<double>(1, 3, 1.0));
  t.backward(ad::frobenius_distance(x, Matrix<double>(1, 3, 1.0)));
  const auto g = t.grad(x);
  for (double v : g.flat()) EXPECT_EQ(v, 0.0);
}

TEST(Autograd, ErrorsOnBadShapes) {
  Tape<double> t;
  auto a = t.constant(Matrix<double>(2, 3));
  EXPECT_THROW(ad::add(a, t.constant(Matrix<double>(3, 2))), StructuralError);
  EXPECT_THROW(ad::slice_rows(a, 1, 2), StructuralError);
  EXPECT_THROW(t.backward(a), StructuralError);
  EXPECT_THROW(ad::softmax_cross_entropy(t.constant(Matrix<double>(0, 2)), {}), DomainError);
}
