#include <gtest/gtest.h>

#include "support/oracles.hpp"

using namespace dstgcnt;

namespace {

std::vector<double> random_values(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

/// Gradient check of `f` with respect to every listed leaf, all entries.
template <class F>
void expect_gradients(F f, std::vector<std::pair<std::string, Var<double>>> leaves, double tol = 1e-6) {
  const auto report = gradcheck([&] { return f(); }, leaves, {1e-6, tol, 1e-7});
  for (const auto& e : report.params) EXPECT_LT(e.max_rel_error, tol) << e.name;
}

/// Weighted sum so every output entry has a distinct sensitivity.
Var<double> probe(const Var<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, constant<double>(y.shape(), random_values(y.numel(), rng))));
}

}  // namespace

TEST(Gemm, MatchesNaiveLoopsForAllTileWidths) {
  Rng rng(1);
  for (std::size_t m : {1u, 3u, 4u, 7u, 9u}) {
    for (std::size_t n : {1u, 3u, 4u, 5u, 8u, 13u, 16u, 21u, 37u}) {
      for (std::size_t k : {1u, 2u, 17u}) {
        const auto a = random_values(m * k, rng), b = random_values(k * n, rng), c0 = random_values(m * n, rng);
        std::vector<double> expect = c0;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) expect[i * n + j] += a[i * k + p] * b[p * n + j];
        auto c = c0;
        detail::gemm_nn(m, n, k, a.data(), k, b.data(), n, c.data(), n);
        for (std::size_t i = 0; i < c.size(); ++i) ASSERT_NEAR(c[i], expect[i], 1e-13);
        // A stored k x m and B stored n x k give the same product.
        std::vector<double> at(k * m), bt(n * k);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
        auto c_tn = c0, c_nt = c0;
        detail::gemm_tn(m, n, k, at.data(), m, b.data(), n, c_tn.data(), n);
        detail::gemm_nt(m, n, k, a.data(), k, bt.data(), k, c_nt.data(), n);
        for (std::size_t i = 0; i < c.size(); ++i) {
          ASSERT_NEAR(c_tn[i], expect[i], 1e-13);
          ASSERT_NEAR(c_nt[i], expect[i], 1e-13);
        }
      }
    }
  }
}

TEST(Gemm, RowResultsDoNotDependOnRowCount) {
  Rng rng(2);
  const std::size_t k = 29, n = 23;
  const auto a = random_values(9 * k, rng), b = random_values(k * n, rng);
  std::vector<float> af(a.begin(), a.end()), bf(b.begin(), b.end());
  std::vector<float> all(9 * n, 0.0f);
  detail::gemm_nn<float>(9, n, k, af.data(), k, bf.data(), n, all.data(), n);
  for (std::size_t r = 0; r < 9; ++r) {
    std::vector<float> one(n, 0.0f);
    detail::gemm_nn<float>(1, n, k, af.data() + r * k, k, bf.data(), n, one.data(), n);
    for (std::size_t j = 0; j < n; ++j) ASSERT_EQ(one[j], all[r * n + j]);
  }
}

TEST(Tensor, ShapeErrorsAreTyped) {
  auto a = constant<double>({2, 3}, std::vector<double>(6, 1.0));
  auto b = constant<double>({2, 3}, std::vector<double>(6, 1.0));
  try {
    matmul(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
  }
  EXPECT_THROW(constant<double>({2, 2}, {1.0}), Error);
}

TEST(Tensor, ElementwiseGradients) {
  Rng rng(3);
  auto a = parameter<double>({2, 3, 4}, random_values(24, rng));
  auto b = parameter<double>({2, 3, 4}, random_values(24, rng));
  auto bias = parameter<double>({4}, random_values(4, rng));
  expect_gradients([&] { return probe(add(mul(a, b), sub(a, b))); }, {{"a", a}, {"b", b}});
  expect_gradients([&] { return probe(sigmoid(a)); }, {{"a", a}});
  expect_gradients([&] { return probe(tanh(a)); }, {{"a", a}});
  expect_gradients([&] { return probe(one_minus(scale(a, 0.3))); }, {{"a", a}});
  expect_gradients([&] { return probe(add_trailing(a, bias)); }, {{"a", a}, {"bias", bias}});
}

TEST(Tensor, LinearGradients) {
  Rng rng(4);
  auto x = parameter<double>({2, 5, 6}, random_values(60, rng));
  auto w = parameter<double>({6, 7}, random_values(42, rng));
  auto y = parameter<double>({2, 5, 6}, random_values(60, rng));
  expect_gradients([&] { return probe(matmul(x, w)); }, {{"x", x}, {"w", w}});
  expect_gradients([&] { return probe(bmm(x, y, true)); }, {{"x", x}, {"y", y}});
  auto z = parameter<double>({2, 6, 3}, random_values(36, rng));
  expect_gradients([&] { return probe(bmm(x, z)); }, {{"x", x}, {"z", z}});
}

TEST(Tensor, GraphMixGradientAndValue) {
  Rng rng(5);
  auto x = parameter<double>({2, 3, 4, 2}, random_values(48, rng));
  Matrix<double> a(4, 4);
  for (auto& v : a.data) v = rng.uniform(-1, 1);
  auto y = graph_mix(x, a);
  // y[b, t, i, c] = sum_j a(j, i) x[b, t, j, c]
  const std::size_t b = 1, t = 2, i = 3, c = 1;
  double expect = 0.0;
  for (std::size_t j = 0; j < 4; ++j) expect += a(j, i) * x.value()[((b * 3 + t) * 4 + j) * 2 + c];
  EXPECT_NEAR(y.value()[((b * 3 + t) * 4 + i) * 2 + c], expect, 1e-14);
  expect_gradients([&] { return probe(graph_mix(x, a)); }, {{"x", x}});
}

TEST(Tensor, TemporalConvMatchesDirectSum) {
  Rng rng(6);
  const std::size_t b_len = 2, t_len = 7, n = 3, fin = 2, fout = 5;
  for (std::size_t k : {1u, 3u, 4u, 9u}) {
    auto x = parameter<double>({b_len, t_len, n, fin}, random_values(b_len * t_len * n * fin, rng));
    auto w = parameter<double>({k, fin, fout}, random_values(k * fin * fout, rng));
    const TemporalPadding pad{(k - 1) / 2, k - 1 - (k - 1) / 2};
    auto y = temporal_conv(x, w, pad);
    for (std::size_t b = 0; b < b_len; ++b)
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t o = 0; o < fout; ++o) {
            double expect = 0.0;
            for (std::size_t d = 0; d < k; ++d) {
              const long s = static_cast<long>(t + d) - static_cast<long>(pad.left);
              if (s < 0 || s >= static_cast<long>(t_len)) continue;
              for (std::size_t c = 0; c < fin; ++c)
                expect += x.value()[((b * t_len + s) * n + j) * fin + c] * w.value()[(d * fin + c) * fout + o];
            }
            ASSERT_NEAR(y.value()[((b * t_len + t) * n + j) * fout + o], expect, 1e-13);
          }
    expect_gradients([&] { return probe(temporal_conv(x, w, pad)); }, {{"x", x}, {"w", w}});
  }
  auto x = parameter<double>({1, 4, 1, 2}, random_values(8, rng));
  auto w = parameter<double>({4, 2, 1}, random_values(8, rng));
  EXPECT_THROW(temporal_conv(x, w), Error);  // same padding needs an odd length
}

TEST(Tensor, TemporalConvKernelLongerThanSequence) {
  Rng rng(7);
  auto x = parameter<double>({1, 3, 2, 2}, random_values(12, rng));
  auto w = parameter<double>({9, 2, 3}, random_values(54, rng));
  expect_gradients([&] { return probe(temporal_conv(x, w)); }, {{"x", x}, {"w", w}});
}

TEST(Tensor, MaskedSoftmaxRowsAndGradient) {
  Rng rng(8);
  auto x = parameter<double>({3, 4}, random_values(12, rng));
  std::vector<std::uint8_t> mask = {1, 0, 1, 1, 1, 1, 1, 1, 0, 0, 1, 0};
  auto p = masked_softmax(x, &mask);
  for (std::size_t r = 0; r < 3; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      total += p.value()[r * 4 + c];
      if (!mask[r * 4 + c]) EXPECT_EQ(p.value()[r * 4 + c], 0.0);
    }
    EXPECT_NEAR(total, 1.0, 1e-15);
  }
  expect_gradients([&] { return probe(masked_softmax(x, &mask)); }, {{"x", x}});
  std::vector<std::uint8_t> dead = {0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1};
  EXPECT_THROW(masked_softmax(x, &dead), Error);
}

TEST(Tensor, SoftmaxIsShiftInvariantAndStable) {
  auto x = constant<double>({1, 3}, {1000.0, 1001.0, 1002.0});
  auto y = constant<double>({1, 3}, {0.0, 1.0, 2.0});
  const auto px = softmax_lastdim(x).value(), py = softmax_lastdim(y).value();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(px[i], py[i], 1e-15);
}

TEST(Tensor, SupportAttentionEqualsDenseMaskedForm) {
  Rng rng(9);
  const JointGraph g = oracle::random_connected_graph(6, 3, rng);
  const auto a = k_hop_adjacency(g, 1).matrix;
  SupportLists cols(6);
  std::vector<std::uint8_t> mask(2 * 3 * 36);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      if (a(i, j) != 0.0) cols[i].push_back(j);
  for (std::size_t s = 0; s < 6; ++s)
    for (std::size_t q = 0; q < 36; ++q) mask[s * 36 + q] = a.data[q] != 0.0;
  auto h = parameter<double>({2, 3, 6, 4}, random_values(144, rng));
  const double sc = 0.5;
  const auto dense = masked_softmax(scale(bmm(h, h, true), sc), &mask);
  const auto sparse = support_softmax(h, cols, sc);
  for (std::size_t i = 0; i < dense.numel(); ++i) ASSERT_NEAR(sparse.value()[i], dense.value()[i], 1e-14);
  const auto mixed_dense = bmm(dense, h);
  const auto mixed = support_mix(sparse, h, cols);
  for (std::size_t i = 0; i < mixed.numel(); ++i) ASSERT_NEAR(mixed.value()[i], mixed_dense.value()[i], 1e-14);
  expect_gradients([&] { return probe(support_softmax(h, cols, sc)); }, {{"h", h}});
  auto m = parameter<double>({2, 3, 6, 6}, sparse.value());
  expect_gradients([&] { return probe(support_mix(m, h, cols)); }, {{"m", m}, {"h", h}});
}

TEST(Tensor, LayerNormValueAndGradient) {
  Rng rng(10);
  auto x = parameter<double>({3, 6}, random_values(18, rng));
  auto gain = parameter<double>({6}, random_values(6, rng));
  auto bias = parameter<double>({6}, random_values(6, rng));
  auto ones = constant<double>({6}, std::vector<double>(6, 1.0));
  auto zero = constant<double>({6}, std::vector<double>(6, 0.0));
  const auto y = layer_norm(x, ones, zero, 1e-6).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 6; ++c) m += y[r * 6 + c] / 6.0;
    for (std::size_t c = 0; c < 6; ++c) v += (y[r * 6 + c] - m) * (y[r * 6 + c] - m) / 6.0;
    EXPECT_NEAR(m, 0.0, 1e-14);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
  expect_gradients([&] { return probe(layer_norm(x, gain, bias, 1e-6)); }, {{"x", x}, {"gain", gain}, {"bias", bias}});
}

TEST(Tensor, DropoutIsSeededAndInactiveInInference) {
  auto x = constant<double>({1000}, std::vector<double>(1000, 1.0));
  EXPECT_EQ(dropout(x, 0.5, 3, false).value(), x.value());
  const auto a = dropout(x, 0.5, 3, true).value(), b = dropout(x, 0.5, 3, true).value();
  EXPECT_EQ(a, b);
  std::size_t zeros = 0;
  for (double v : a) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    zeros += v == 0.0;
  }
  EXPECT_GT(zeros, 400u);
  EXPECT_LT(zeros, 600u);
}

TEST(Tensor, ShapeOpsGradients) {
  Rng rng(11);
  auto a = parameter<double>({2, 3, 2}, random_values(12, rng));
  auto b = parameter<double>({2, 3, 1}, random_values(6, rng));
  expect_gradients([&] { return probe(concat<double>({a, b}, -1)); }, {{"a", a}, {"b", b}});
  expect_gradients([&] { return probe(slice(a, 1, 2)); }, {{"a", a}});
  expect_gradients([&] { return probe(stack<double>({a, a}, 1)); }, {{"a", a}});
  expect_gradients([&] { return probe(reshape(a, {3, 4})); }, {{"a", a}});
  expect_gradients([&] { return mean(a); }, {{"a", a}});
}

TEST(Tensor, MaskedTimeMeanIgnoresPadding) {
  Rng rng(12);
  auto x = parameter<double>({2, 4, 3}, random_values(24, rng));
  const std::vector<double> mask = {1, 1, 0, 0, 1, 1, 1, 1};
  const auto y = masked_time_mean(x, mask).value();
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y[c], 0.5 * (x.value()[c] + x.value()[3 + c]), 1e-15);
  expect_gradients([&] { return probe(masked_time_mean(x, mask)); }, {{"x", x}});
  expect_gradients([&] { return probe(gather_time(x, {1, 3})); }, {{"x", x}});
}

TEST(Tensor, ScaleRowsZeroesMaskedFrames) {
  Rng rng(13);
  auto x = parameter<double>({2, 3, 2, 2}, random_values(24, rng));
  const std::vector<double> mask = {1, 1, 0, 1, 0, 0};
  const auto y = scale_rows(x, mask).value();
  for (std::size_t i = 8; i < 12; ++i) EXPECT_EQ(y[i], 0.0);
  expect_gradients([&] { return probe(scale_rows(x, mask)); }, {{"x", x}});
}

TEST(Tensor, SecondBackwardNeedsZeroGrad) {
  auto w = parameter<double>({2}, {1.0, 2.0});
  backward(sum(mul(w, w)));
  EXPECT_EQ(w.grad(), (std::vector<double>{2.0, 4.0}));
  try {
    backward(sum(mul(w, w)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::contract);
  }
  w.zero_grad();
  EXPECT_FALSE(w.has_grad());
  backward(sum(w));
  EXPECT_EQ(w.grad(), (std::vector<double>{1.0, 1.0}));
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  auto w = parameter<double>({2}, {1.0, 2.0});
  NoGradGuard guard;
  auto y = sum(mul(w, w));
  EXPECT_FALSE(y.requires_grad());
}
