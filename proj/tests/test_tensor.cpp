#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <random>

#include "roivit/gradcheck.hpp"
#include "roivit/ops.hpp"
#include "test_util.hpp"

using namespace roivit;
using roivit::test::random_tensor;

namespace {

// Straight triple loop, i-j-k order, for 2-D operands.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t p) {
  std::vector<double> c(m * p, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += a[i * k + l] * b[l * p + j];
      c[i * p + j] = acc;
    }
  }
  return c;
}

// Direct enumeration of kernel/input overlaps.
std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, std::size_t stride, std::size_t pad) {
  const long cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0), k = w.dim(2);
  const long ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(cout * ho * wo, 0.0);
  for (long co = 0; co < cout; ++co)
    for (long oy = 0; oy < ho; ++oy)
      for (long ox = 0; ox < wo; ++ox)
        for (long ci = 0; ci < cin; ++ci)
          for (long ky = 0; ky < k; ++ky)
            for (long kx = 0; kx < k; ++kx) {
              const long iy = oy * static_cast<long>(stride) + ky - static_cast<long>(pad);
              const long ix = ox * static_cast<long>(stride) + kx - static_cast<long>(pad);
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              out[(co * ho + oy) * wo + ox] += w.data()[((co * cin + ci) * k + ky) * k + kx] * x.data()[(ci * h + iy) * wd + ix];
            }
  return out;
}

template <class T>
GradCheckResult check_op(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& op,
                         std::vector<Tensor<T>> inputs, std::uint64_t seed, double step) {
  std::mt19937_64 rng(seed);
  auto probe_shape = op(inputs).shape();
  auto weights = random_tensor<T>(probe_shape, rng);
  NamedTensors<T> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    inputs[i].set_requires_grad(true);
    params.emplace_back("in" + std::to_string(i), inputs[i]);
  }
  return gradient_check<T>([&] { return test::probe_loss(op(inputs), weights); }, params, 200, step, seed);
}

}  // namespace

TEST(Matmul, IdentityAndZero) {
  Tensor<double> a({2, 2}, {1.5, -2, 3, 4});
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(matmul(a, eye).to_vector(), a.to_vector());
  EXPECT_EQ(matmul(a, Tensor<double>::zeros({2, 2})).to_vector(), std::vector<double>(4, 0.0));
}

TEST(Matmul, HandExampleMatchesNaiveOracle) {
  std::vector<double> a{1, 2, 3, 4}, b{5, 6, 7, 8};
  const auto expected = naive_matmul(a, b, 2, 2, 2);
  ASSERT_EQ(expected, (std::vector<double>{19, 22, 43, 50}));
  EXPECT_EQ(matmul(Tensor<double>({2, 2}, a), Tensor<double>({2, 2}, b)).to_vector(), expected);
}

TEST(Matmul, RandomInstancesAgreeWithTripleLoop) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> ext(1, 8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = ext(rng), k = ext(rng), p = ext(rng);
    auto a = random_tensor<double>({m, k}, rng), b = random_tensor<double>({k, p}, rng);
    const auto c = matmul(a, b).to_vector();
    const auto ref = naive_matmul(a.to_vector(), b.to_vector(), m, k, p);
    for (std::size_t i = 0; i < c.size(); ++i) ASSERT_NEAR(c[i], ref[i], 1e-12);
  }
}

TEST(Matmul, BatchedAndBroadcast) {
  std::mt19937_64 rng(3);
  auto a = random_tensor<double>({3, 2, 4}, rng);
  auto b = random_tensor<double>({4, 5}, rng);
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (std::size_t s = 0; s < 3; ++s) {
    auto as = slice(a, 0, s, s + 1);
    const auto ref = naive_matmul(as.to_vector(), b.to_vector(), 2, 4, 5);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[s * 10 + i], ref[i], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3] x [2, 3]"), std::string::npos);
  }
}

TEST(Softmax, SymmetricInput) {
  auto y = softmax_last(Tensor<double>({3}, {0.7, 0.7, 0.7}));
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ClosedFormTwoPoint) {
  auto y = softmax_last(Tensor<double>({2}, {0.0, std::log(3.0)}));
  EXPECT_NEAR(y[0], 0.25, 1e-15);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor<float>({4, 7}, rng, -20, 20);
    auto shifted = x.detach();
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t j = 0; j < 7; ++j) shifted.mutable_data()[r * 7 + j] += 3.0f;
    }
    auto y = softmax_last(x), ys = softmax_last(shifted);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        s += y[r * 7 + j];
        EXPECT_NEAR(y[r * 7 + j], ys[r * 7 + j], 1e-6);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(LayerNorm, ConstantSliceGivesZeros) {
  auto y = layer_norm(Tensor<double>::full({2, 4}, 3.0), Tensor<double>::full({4}, 1.0), Tensor<double>::zeros({4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitVariancePreservedUpToEpsilon) {
  auto y = layer_norm(Tensor<double>({2}, {1.0, -1.0}), Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}));
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y[0], expected, 1e-12);
  EXPECT_NEAR(y[1], -expected, 1e-12);
}

TEST(LayerNorm, ZeroGainYieldsBias) {
  std::mt19937_64 rng(5);
  auto bias = random_tensor<double>({5}, rng);
  auto y = layer_norm(random_tensor<double>({3, 5}, rng), Tensor<double>::zeros({5}), bias);
  for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(y[i], bias[i % 5]);
}

TEST(Conv, OneByOneIdentityKernel) {
  std::mt19937_64 rng(2);
  auto x = random_tensor<double>({2, 3, 3}, rng);
  Tensor<double> k({2, 2, 1, 1}, {1, 0, 0, 1});
  EXPECT_EQ(strided_conv2d(x, k, 1, 0).to_vector(), x.to_vector());
}

TEST(Conv, OverlapCountsOnOnes) {
  auto x = Tensor<double>::full({1, 4, 4}, 1.0);
  auto k = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  const auto oracle = naive_conv(x, k, 2, 1);
  ASSERT_EQ(oracle, (std::vector<double>{4, 6, 6, 9}));
  auto y = strided_conv2d(x, k, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(y.to_vector(), oracle);
}

TEST(Conv, StrideTwoHalvesGrid) {
  auto y = strided_conv2d(Tensor<float>::zeros({1, 8, 8}), Tensor<float>::zeros({2, 1, 3, 3}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 4}));
}

TEST(Conv, RandomAgreesWithEnumeration) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<double>({3, 7, 6}, rng);
  auto k = random_tensor<double>({4, 3, 3, 3}, rng);
  const auto oracle = naive_conv(x, k, 2, 1);
  const auto y = strided_conv2d(x, k, 2, 1).to_vector();
  ASSERT_EQ(y.size(), oracle.size());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], oracle[i], 1e-12);
}

TEST(Conv, KernelLargerThanPaddedInput) {
  EXPECT_THROW(strided_conv2d(Tensor<float>::zeros({1, 2, 2}), Tensor<float>::zeros({1, 1, 5, 5}), 1, 1), ShapeError);
}

TEST(Elementwise, Relu) {
  auto y = relu(Tensor<float>({2}, {-1.0f, 2.0f}));
  EXPECT_EQ(y.to_vector(), (std::vector<float>{0.0f, 2.0f}));
}

TEST(Elementwise, MinmaxNormalize) {
  EXPECT_EQ(minmax_normalize(Tensor<float>({3}, {2, 2, 2})).to_vector(), (std::vector<float>{0, 0, 0}));
  EXPECT_EQ(minmax_normalize(Tensor<float>({3}, {1, 3, 2})).to_vector(), (std::vector<float>{0, 1, 0.5f}));
}

TEST(Elementwise, UpsampleConstant) {
  auto y = upsample_bilinear(Tensor<float>({1, 1}, {0.3f}), 4, 4);
  EXPECT_EQ(y.shape(), (Shape{4, 4}));
  for (float v : y.data()) EXPECT_EQ(v, 0.3f);
}

TEST(Elementwise, UpsampleCornerAligned) {
  auto y = upsample_bilinear(Tensor<double>({2, 2}, {0, 1, 2, 3}), 3, 3);
  EXPECT_EQ(y.to_vector(), (std::vector<double>{0, 0.5, 1, 1, 1.5, 2, 2, 2.5, 3}));
}

TEST(Elementwise, ConcatMismatch) {
  EXPECT_THROW(concat<float>({Tensor<float>::zeros({1, 3}), Tensor<float>::zeros({1, 4})}, 0), ShapeError);
  auto c = concat<float>({Tensor<float>({1, 2}, {1, 2}), Tensor<float>({2, 2}, {3, 4, 5, 6})}, 0);
  EXPECT_EQ(c.to_vector(), (std::vector<float>{1, 2, 3, 4, 5, 6}));
}

TEST(Backward, SumOfSquares) {
  Tensor<double> x({3}, {1.0, -2.0, 0.5});
  x.set_requires_grad(true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2.0, -4.0, 1.0}));
}

TEST(Backward, SoftmaxJacobian) {
  Tensor<double> x({2}, {0.0, 0.0});
  x.set_requires_grad(true);
  backward(slice(softmax_last(x), 0, 0, 1));
  EXPECT_NEAR(x.grad()[0], 0.25, 1e-15);
  EXPECT_NEAR(x.grad()[1], -0.25, 1e-15);
}

TEST(Backward, NonScalarRootIsUsageError) {
  Tensor<float> x({2}, {1, 2});
  x.set_requires_grad(true);
  EXPECT_THROW(backward(scale(x, 2.0f)), UsageError);
}

TEST(Backward, TopologicalOrderPrecedesConsumers) {
  std::mt19937_64 rng(1);
  auto a = random_tensor<float>({3, 3}, rng, -1, 1, true);
  auto b = random_tensor<float>({3, 3}, rng, -1, 1, true);
  auto h = gelu(matmul(a, b));
  auto root = sum(add(mul(h, h), softmax_last(h)));
  auto order = topological_order(root);
  std::unordered_map<const Node<float>*, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
  ASSERT_EQ(order.back(), root.node().get());
  for (auto* n : order) {
    for (auto& in : n->inputs) {
      if (in->requires_grad) {
        EXPECT_LT(pos.at(in.get()), pos.at(n));
      }
    }
  }
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  Tensor<double> x({1}, {3.0});
  x.set_requires_grad(true);
  backward(mul(x, x));
  backward(mul(x, x));
  EXPECT_EQ(x.grad()[0], 12.0);
}

// ---------------------------------------------------------------------------
// Finite-difference checks for every differentiable op, f64 and f32.

using OpFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<Tensor<double>(const std::vector<Tensor<double>>&)> f64;
  std::function<Tensor<float>(const std::vector<Tensor<float>>&)> f32;
};

#define ROIVIT_OP(expr)                                                                      \
  [](const std::vector<Tensor<double>>& in) { return expr; },                               \
      [](const std::vector<Tensor<float>>& in) { return expr; }

std::vector<OpCase> op_cases() {
  return {
      {"add", {{3, 4}, {3, 4}}, ROIVIT_OP(add(in[0], in[1]))},
      {"sub", {{3, 4}, {3, 4}}, ROIVIT_OP(sub(in[0], in[1]))},
      {"mul", {{3, 4}, {3, 4}}, ROIVIT_OP(mul(in[0], in[1]))},
      {"scale", {{5}}, ROIVIT_OP(scale(in[0], decltype(in[0][0])(-1.7)))},
      {"add_row", {{3, 4}, {4}}, ROIVIT_OP(add_row(in[0], in[1]))},
      {"gelu", {{4, 5}}, ROIVIT_OP(gelu(in[0]))},
      {"matmul", {{2, 3, 4}, {2, 4, 5}}, ROIVIT_OP(matmul(in[0], in[1]))},
      {"matmul_bcast", {{2, 3, 4}, {4, 5}}, ROIVIT_OP(matmul(in[0], in[1]))},
      {"transpose", {{2, 3, 4}}, ROIVIT_OP(transpose_last2(in[0]))},
      {"permute", {{2, 3, 4}}, ROIVIT_OP(permute(in[0], {2, 0, 1}))},
      {"reshape", {{2, 6}}, ROIVIT_OP(reshape(in[0], {3, 4}))},
      {"concat", {{2, 3}, {4, 3}}, ROIVIT_OP(concat<std::decay_t<decltype(in[0][0])>>({in[0], in[1]}, 0))},
      {"concat_axis1", {{2, 3}, {2, 2}}, ROIVIT_OP(concat<std::decay_t<decltype(in[0][0])>>({in[0], in[1]}, 1))},
      {"slice", {{4, 5}}, ROIVIT_OP(slice(in[0], 1, 1, 4))},
      {"softmax", {{3, 6}}, ROIVIT_OP(softmax_last(in[0]))},
      {"layer_norm", {{3, 6}, {6}, {6}}, ROIVIT_OP(layer_norm(in[0], in[1], in[2]))},
      {"conv2d", {{2, 6, 5}, {3, 2, 3, 3}, {3}}, ROIVIT_OP(strided_conv2d(in[0], in[1], in[2], 2, 1))},
      {"depthwise", {{3, 5, 5}, {3, 3, 3}}, ROIVIT_OP(depthwise_conv2d(in[0], in[1], 2, 1))},
      {"global_avg_pool", {{3, 4, 4}}, ROIVIT_OP(global_avg_pool(in[0]))},
      {"upsample", {{2, 3, 3}}, ROIVIT_OP(upsample_bilinear(in[0], 7, 5))},
      {"cross_entropy", {{5}}, ROIVIT_OP(cross_entropy(in[0], 2))},
      {"mean", {{3, 3}}, ROIVIT_OP(mean(in[0]))},
  };
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto oc = op_cases()[GetParam()];
  std::mt19937_64 rng(100 + GetParam());
  std::vector<Tensor<double>> in64;
  for (const auto& s : oc.shapes) in64.push_back(random_tensor<double>(s, rng, -1.5, 1.5));
  std::vector<Tensor<float>> in32;
  for (const auto& t : in64) in32.push_back(t.cast<float>());

  const auto r64 = check_op<double>(oc.f64, in64, 17, 1e-6);
  EXPECT_TRUE(r64.passed(1e-5)) << oc.name << " f64 max rel err " << r64.max_rel_error << " at " << r64.worst;
  const auto r32 = check_op<float>(oc.f32, in32, 17, 1e-3);
  EXPECT_TRUE(r32.passed(1e-3)) << oc.name << " f32 max rel err " << r32.max_rel_error << " at " << r32.worst;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, op_cases().size()));

// Piecewise-linear ops checked away from their kinks.
TEST(OpGradientPiecewise, ReluMaxPoolMinmax) {
  std::mt19937_64 rng(44);
  std::vector<double> vals(36);
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.1 * static_cast<double>(i) - 1.75;
  std::shuffle(vals.begin(), vals.end(), rng);
  Tensor<double> x({4, 3, 3}, vals);

  const auto r_relu = check_op<double>([](const auto& in) { return relu(in[0]); }, {x.detach()}, 1, 1e-6);
  EXPECT_TRUE(r_relu.passed(1e-5)) << r_relu.max_rel_error;
  const auto r_pool = check_op<double>([](const auto& in) { return max_pool2d(in[0], 2, 1); }, {x.detach()}, 2, 1e-6);
  EXPECT_TRUE(r_pool.passed(1e-5)) << r_pool.max_rel_error;
  const auto r_mm = check_op<double>([](const auto& in) { return minmax_normalize(in[0]); }, {x.detach()}, 3, 1e-6);
  EXPECT_TRUE(r_mm.passed(1e-5)) << r_mm.max_rel_error;
}

TEST(OpGradient, NegatedRuleIsCaught) {
  std::mt19937_64 rng(8);
  auto x = random_tensor<double>({4, 5}, rng);
  testing_hooks::negate_gelu_grad = true;
  const auto r = check_op<double>([](const auto& in) { return gelu(in[0]); }, {x}, 4, 1e-6);
  testing_hooks::negate_gelu_grad = false;
  EXPECT_FALSE(r.passed(1e-5));
}

TEST(Determinism, RepeatedOpsAreBitwiseIdentical) {
  std::mt19937_64 rng(21);
  auto a = random_tensor<float>({6, 8}, rng), b = random_tensor<float>({8, 5}, rng);
  auto g = Tensor<float>::full({5}, 1.0f), z = Tensor<float>::zeros({5});
  auto run = [&] { return softmax_last(layer_norm(gelu(matmul(a, b)), g, z)).to_vector(); };
  EXPECT_TRUE(test::bitwise_equal(std::span<const float>(run()), std::span<const float>(run())));
}

TEST(Determinism, ProductsAndSoftmaxIgnoreBufferAlignment) {
  std::mt19937_64 rng(22);
  const std::size_t m = 37, k = 29, p = 41;
  auto a = random_tensor<float>({m, k}, rng), b = random_tensor<float>({k, p}, rng);
  const auto reference = matmul(a, b).to_vector();
  const auto ref_soft = softmax_last(matmul(a, b)).to_vector();
  for (std::size_t shift = 1; shift < 16; ++shift) {
    std::vector<float> abuf(shift + m * k), bbuf(shift + k * p), cbuf(shift + m * p, 0.0f);
    std::copy(a.data().begin(), a.data().end(), abuf.begin() + static_cast<std::ptrdiff_t>(shift));
    std::copy(b.data().begin(), b.data().end(), bbuf.begin() + static_cast<std::ptrdiff_t>(shift));
    detail::gemm_accumulate(false, false, abuf.data() + shift, bbuf.data() + shift, cbuf.data() + shift, m, k, p);
    EXPECT_TRUE(test::bitwise_equal(std::span<const float>(cbuf).subspan(shift), std::span<const float>(reference)));
    std::vector<float> soft(shift + m * p);
    for (std::size_t r = 0; r < m; ++r) {
      detail::softmax_row(cbuf.data() + shift + r * p, soft.data() + shift + r * p, p);
    }
    EXPECT_TRUE(test::bitwise_equal(std::span<const float>(soft).subspan(shift), std::span<const float>(ref_soft)));
  }
}

TEST(Softmax, FastExponentialIsAccurate) {
  for (float x = -90.0f; x <= 0.0f; x += 0.0137f) {
    const double exact = std::exp(static_cast<double>(x));
    const double got = detail::exp_nonpositive(x);
    if (x >= -87.0f) {
      EXPECT_NEAR(got, exact, 4e-7 * exact) << x;
    } else {
      EXPECT_LE(got, 2e-38) << x;
    }
  }
  EXPECT_EQ(detail::exp_nonpositive(0.0f), 1.0f);
  EXPECT_EQ(detail::exp_nonpositive(-0.0f), 1.0f);
}

TEST(Inference, BlockedAttentionMatchesGraphPath) {
  std::mt19937_64 rng(23);
  for (std::size_t heads : {1u, 2u, 4u}) {
    auto q = random_tensor<double>({150, 8}, rng), k = random_tensor<double>({77, 8}, rng),
         v = random_tensor<double>({77, 8}, rng);
    auto fused = attention_inference(q, k, v, heads);
    const std::size_t d = 8 / heads;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < 150; ++i) {
        std::vector<double> s(77);
        double mx = -1e300;
        for (std::size_t j = 0; j < 77; ++j) {
          double dot = 0;
          for (std::size_t t = 0; t < d; ++t) dot += q.data()[i * 8 + h * d + t] * k.data()[j * 8 + h * d + t];
          s[j] = dot / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (std::size_t t = 0; t < d; ++t) {
          double o = 0;
          for (std::size_t j = 0; j < 77; ++j) o += s[j] / z * v.data()[j * 8 + h * d + t];
          EXPECT_NEAR(fused.data()[i * 8 + h * d + t], o, 1e-12);
        }
      }
    }
  }
}
