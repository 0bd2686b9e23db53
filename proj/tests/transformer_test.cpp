#include <gtest/gtest.h>

#include <numeric>

#include "support/oracles.hpp"

using namespace dstgcnt;

namespace {

std::vector<double> random_values(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

std::vector<HeadParams<double>> random_heads(std::size_t n_heads, std::size_t d, std::size_t hd, Rng& rng) {
  std::vector<HeadParams<double>> heads;
  for (std::size_t h = 0; h < n_heads; ++h)
    heads.push_back({oracle::random_param({d, hd}, rng), oracle::random_param({d, hd}, rng), oracle::random_param({d, hd}, rng)});
  return heads;
}

EncoderParams<double> random_encoder(std::size_t d, std::size_t n_heads, std::size_t hd, std::size_t ff, Rng& rng) {
  EncoderParams<double> p;
  p.ln1_gain = oracle::random_param({d}, rng);
  p.ln1_bias = oracle::random_param({d}, rng);
  p.heads = random_heads(n_heads, d, hd, rng);
  p.w_o = oracle::random_param({n_heads * hd, d}, rng);
  p.ln2_gain = oracle::random_param({d}, rng);
  p.ln2_bias = oracle::random_param({d}, rng);
  p.ff1_w = oracle::random_param({d, ff}, rng);
  p.ff1_b = oracle::random_param({ff}, rng);
  p.ff2_w = oracle::random_param({ff, d}, rng);
  p.ff2_b = oracle::random_param({d}, rng);
  return p;
}

}  // namespace

TEST(Attention, MatchesLoopOracleWithAndWithoutMasks) {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 1 + rng.index(3), t = 1 + rng.index(7), d = 2 + rng.index(5);
    const std::size_t n_heads = 1 + rng.index(3), hd = 1 + rng.index(4);
    const auto z = random_values(b * t * d, rng);
    const auto heads = random_heads(n_heads, d, hd, rng);
    const auto w_o = oracle::random_param({n_heads * hd, d}, rng);
    std::vector<double> mask;
    if (trial % 2) {
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t valid = 1 + rng.index(t);
        for (std::size_t k = 0; k < t; ++k) mask.push_back(k < valid ? 1.0 : 0.0);
      }
    }
    const auto got = multi_head_attention(constant<double>({b, t, d}, z), heads, w_o, mask).value();
    const auto want = oracle::attention(z, b, t, d, heads, w_o.value(), mask);
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Attention, FullyMaskedSequenceIsRejected) {
  Rng rng(32);
  const auto heads = random_heads(1, 2, 2, rng);
  const auto w_o = oracle::random_param({2, 2}, rng);
  EXPECT_THROW(multi_head_attention(constant<double>({1, 2, 2}, random_values(4, rng)), heads, w_o, {0.0, 0.0}), Error);
}

TEST(Attention, WeightsIgnorePaddedKeys) {
  Rng rng(33);
  const auto heads = random_heads(2, 4, 3, rng);
  const auto w_o = oracle::random_param({6, 4}, rng);
  std::vector<Var<double>> weights;
  multi_head_attention(constant<double>({1, 5, 4}, random_values(20, rng)), heads, w_o, {1, 1, 1, 0, 0}, &weights);
  ASSERT_EQ(weights.size(), 2u);
  for (const auto& w : weights)
    for (std::size_t q = 0; q < 5; ++q) {
      EXPECT_EQ(w.value()[q * 5 + 3], 0.0);
      EXPECT_EQ(w.value()[q * 5 + 4], 0.0);
    }
}

TEST(PositionalEncoding, ClosedForm) {
  const auto pe = positional_encoding<double>(50, 8);
  EXPECT_EQ(pe[0], 0.0);
  EXPECT_EQ(pe[1], 1.0);
  EXPECT_NEAR(pe[7 * 8 + 2], std::sin(7.0 / std::pow(10000.0, 2.0 / 8.0)), 1e-15);
  EXPECT_NEAR(pe[7 * 8 + 5], std::cos(7.0 / std::pow(10000.0, 4.0 / 8.0)), 1e-15);
  EXPECT_THROW(positional_encoding<double>(3, 5), Error);
}

TEST(Encoder, PermutingValidTokensPermutesOutput) {
  Rng rng(34);
  const auto p = random_encoder(6, 2, 3, 5, rng);
  const std::size_t t = 5;
  const auto z = random_values(t * 6, rng);
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  std::vector<double> zp(z.size());
  for (std::size_t i = 0; i < t; ++i) std::copy_n(z.begin() + i * 6, 6, zp.begin() + perm[i] * 6);
  const auto y = encoder_block(constant<double>({1, t, 6}, z), p, {}, {}).value();
  const auto yp = encoder_block(constant<double>({1, t, 6}, zp), p, {}, {}).value();
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t c = 0; c < 6; ++c) ASSERT_NEAR(yp[perm[i] * 6 + c], y[i * 6 + c], 1e-12);
}

TEST(Encoder, GradientCheckWithDropoutAndMask) {
  Rng rng(35);
  auto p = random_encoder(4, 2, 2, 3, rng);
  auto z = oracle::random_param({2, 3, 4}, rng);
  const std::vector<double> mask = {1, 1, 1, 1, 1, 0};
  EncoderOptions opt{0.2, 1e-6, true, 77};
  std::vector<std::pair<std::string, Var<double>>> leaves = {
      {"z", z},           {"ln1_gain", p.ln1_gain}, {"wq", p.heads[0].wq}, {"wv", p.heads[1].wv},
      {"w_o", p.w_o},     {"ff1_w", p.ff1_w},       {"ff2_b", p.ff2_b},    {"ln2_bias", p.ln2_bias}};
  Rng probe_rng(5);
  const auto weights = constant<double>({2, 3, 4}, random_values(24, probe_rng));
  const auto r = gradcheck([&] { return sum(mul(encoder_block(z, p, mask, opt), weights)); }, leaves, {1e-6, 1e-6, 1e-7});
  for (const auto& e : r.params) EXPECT_LT(e.max_rel_error, 1e-6) << e.name;
}

TEST(Readout, MeanAndLastTokenUseOnlyValidFrames) {
  const auto enc = constant<double>({2, 3, 1}, {1, 2, 3, 10, 20, 30});
  const auto w = constant<double>({1, 1}, {1.0});
  const auto b = constant<double>({1}, {0.5});
  const std::vector<double> mask = {1, 1, 0, 1, 1, 1};
  EXPECT_EQ(readout(enc, mask, w, b, ReadoutMode::mean).value(), (std::vector<double>{2.0, 20.5}));
  EXPECT_EQ(readout(enc, mask, w, b, ReadoutMode::last_token).value(), (std::vector<double>{2.5, 30.5}));
}
