#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>

#include "roivit/backbone.hpp"
#include "test_util.hpp"

using namespace roivit;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.base_width = 8;
  c.base_heads = 1;
  c.stage_tb_counts = {1, 1, 1, 1};
  c.stage_db_counts = {1, 1, 1, 1};
  c.num_classes = 3;
  c.seed = 5;
  return c;
}

template <class T>
Tensor<T> random_image(std::size_t c, std::size_t size, std::mt19937_64& rng) {
  return test::random_tensor<T>({c, size, size}, rng, 0.0, 1.0);
}

// Breaks the zero/delta initial values so every parameter carries signal.
template <class T>
void randomise(RoiVit<T>& m, std::mt19937_64& rng, double spread) {
  for (auto& [name, p] : m.named_parameters()) {
    if (!p.requires_grad()) continue;
    auto fresh = test::random_tensor<T>(p.shape(), rng, -spread, spread);
    auto d = p.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += fresh.data()[i];
  }
}

}  // namespace

TEST(Schedule, Table1For224) {
  ModelConfig c;
  const auto plan = c.schedule();
  ASSERT_EQ(plan.size(), 4u);
  const std::size_t tokens[] = {3136, 784, 196, 49};
  for (std::size_t s = 0; s < 4; ++s) {
    EXPECT_EQ(plan[s].tokens(), tokens[s]);
    EXPECT_EQ(plan[s].width, 64u << s);
  }
}

TEST(Schedule, ThirtyTwoPixelWidthEight) {
  ModelConfig c;
  c.image_size = 32;
  c.base_width = 8;
  const auto plan = c.schedule();
  const std::size_t grids[] = {8, 4, 2, 1}, widths[] = {8, 16, 32, 64};
  for (std::size_t s = 0; s < 4; ++s) {
    EXPECT_EQ(plan[s].rows, grids[s]);
    EXPECT_EQ(plan[s].cols, grids[s]);
    EXPECT_EQ(plan[s].width, widths[s]);
  }
}

TEST(Schedule, ForwardReproducesPlanForRandomConfigs) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> pick(0, 2);
  for (int trial = 0; trial < 12; ++trial) {
    ModelConfig c;
    c.patch_size = trial % 2 ? 2 : 4;
    c.image_size = c.patch_size * (trial % 3 == 0 ? 8 : 4);
    c.base_width = 4u << pick(rng) % 2;
    c.base_heads = 1u << pick(rng) % 2;
    for (auto& n : c.stage_tb_counts) n = static_cast<std::size_t>(pick(rng));
    for (auto& n : c.stage_db_counts) n = static_cast<std::size_t>(pick(rng) % 2);
    for (std::size_t s = 0; s < 4; ++s) {
      if (c.stage_tb_counts[s] + c.stage_db_counts[s] == 0) c.stage_tb_counts[s] = 1;
    }
    c.num_classes = 2;
    c.seed = trial;
    auto m = build<float>(c);
    auto r = forward_with_traces(m, random_image<float>(3, c.image_size, rng), random_image<float>(3, c.image_size, rng));
    const auto plan = c.schedule();
    ASSERT_EQ(r.stage_shapes.size(), 4u);
    for (std::size_t s = 0; s < 4; ++s) {
      EXPECT_EQ(r.stage_shapes[s], plan[s]) << "trial " << trial << " stage " << s;
      EXPECT_EQ(r.cls_widths[s], c.base_width << s);
    }
    EXPECT_EQ(r.fusion_traces.size(),
              std::accumulate(c.stage_db_counts.begin(), c.stage_db_counts.end(), std::size_t{0}));
  }
}

TEST(Schedule, InvalidConfigsAreConfigErrors) {
  ModelConfig c;
  c.image_size = 30;
  EXPECT_THROW(c.validate(), ConfigError);
  c.image_size = 24;  // grid 6 -> 3 cannot be halved again
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.stage_tb_counts[1] = 0;
  c.stage_db_counts[1] = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.base_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(build<float>(c), ConfigError);
}

TEST(Schedule, ParseStageCounts) {
  EXPECT_EQ(parse_stage_counts("1,2,10,1", "k"), (std::array<std::size_t, 4>{1, 2, 10, 1}));
  EXPECT_THROW(parse_stage_counts("1,2,3", "k"), ConfigError);
  EXPECT_THROW(parse_stage_counts("1,2,3,4,5", "k"), ConfigError);
  EXPECT_THROW(parse_stage_counts("1,x,3,4", "k"), ConfigError);
}

TEST(Build, EqualSeedsGiveBitwiseEqualParameters) {
  auto a = build<float>(tiny_config()), b = build<float>(tiny_config());
  auto pa = a.named_parameters(), pb = b.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_TRUE(test::bitwise_equal(pa[i].second.data(), pb[i].second.data())) << pa[i].first;
  }
  auto c = tiny_config();
  c.seed = 6;
  EXPECT_NE(build<float>(c).head_w.to_vector(), a.head_w.to_vector());
}

TEST(Build, ClsTokensStartAtZeroAndNamesAreUnique) {
  auto m = build<float>(tiny_config());
  for (float v : m.pest_embed.cls_token.data()) EXPECT_EQ(v, 0.0f);
  for (float v : m.roi_embed.cls_token.data()) EXPECT_EQ(v, 0.0f);
  std::set<std::string> names;
  for (auto& [n, p] : m.named_parameters()) EXPECT_TRUE(names.insert(n).second) << n;
}

TEST(Build, TruncatedInitStaysWithinTwoSigma) {
  auto m = build<double>(tiny_config());
  for (auto& [n, p] : m.named_parameters()) {
    if (n.find(".pool_") != std::string::npos || n.find(".gain") != std::string::npos) continue;
    for (double v : p.data()) EXPECT_LE(std::abs(v), 0.04 + 1e-12) << n;
  }
}

TEST(Forward, LogitsHaveLengthKAndAreDeterministic) {
  std::mt19937_64 rng(2);
  auto m = build<float>(tiny_config());
  auto pest = random_image<float>(3, 16, rng), roi = random_image<float>(3, 16, rng);
  auto a = forward(m, pest, roi), b = forward(m, pest, roi);
  EXPECT_EQ(a.shape(), (Shape{3}));
  EXPECT_TRUE(test::bitwise_equal(a.data(), b.data()));
}

TEST(Forward, ZeroHeaderWeightsGiveBias) {
  std::mt19937_64 rng(3);
  auto m = build<float>(tiny_config());
  m.head_w = Tensor<float>::zeros(m.head_w.shape());
  m.head_b = Tensor<float>({3}, {0.5f, -1.0f, 2.0f});
  auto logits = forward(m, random_image<float>(3, 16, rng), random_image<float>(3, 16, rng));
  EXPECT_EQ(logits.to_vector(), (std::vector<float>{0.5f, -1.0f, 2.0f}));
}

TEST(Forward, TracesAreNormalisedCountedAndRepeatable) {
  std::mt19937_64 rng(4);
  auto cfg = tiny_config();
  cfg.stage_db_counts = {1, 2, 0, 1};
  auto m = build<double>(cfg);
  randomise(m, rng, 0.5);
  auto pest = random_image<double>(3, 16, rng), roi = random_image<double>(3, 16, rng);
  auto a = forward_with_traces(m, pest, roi), b = forward_with_traces(m, pest, roi);
  ASSERT_EQ(a.fusion_traces.size(), 4u);
  EXPECT_EQ(a.block_traces.size(), 2u * (4 + 4));
  auto check = [](const Tensor<double>& w) {
    const std::size_t n = w.shape().back();
    for (std::size_t r = 0; r < w.numel() / n; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += w.data()[r * n + j];
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  };
  for (std::size_t i = 0; i < a.fusion_traces.size(); ++i) {
    check(a.fusion_traces[i].pest.weights);
    check(a.fusion_traces[i].roi.weights);
    EXPECT_TRUE(test::bitwise_equal(a.fusion_traces[i].pest.weights.data(), b.fusion_traces[i].pest.weights.data()));
  }
  for (auto& t : a.block_traces) check(t.weights);
}

TEST(Forward, RoiImageMismatchIsShapeError) {
  std::mt19937_64 rng(5);
  auto m = build<float>(tiny_config());
  EXPECT_THROW(forward(m, random_image<float>(3, 16, rng), random_image<float>(3, 8, rng)), ShapeError);
  EXPECT_THROW(forward(m, random_image<float>(3, 20, rng), random_image<float>(3, 20, rng)), ShapeError);
}

TEST(Forward, ZeroFusionValuesEqualPestOnlyModel) {
  std::mt19937_64 rng(6);
  auto cfg = ModelConfig::toy();
  cfg.num_classes = 4;
  cfg.zero_fusion_values = true;
  auto dual = build<float>(cfg);
  cfg.zero_fusion_values = false;
  cfg.pest_only = true;
  auto single = build<float>(cfg);
  for (int trial = 0; trial < 5; ++trial) {
    auto pest = random_image<float>(3, 32, rng), roi = random_image<float>(3, 32, rng);
    auto a = forward(dual, pest, roi), b = forward(single, pest, Tensor<float>());
    EXPECT_TRUE(test::bitwise_equal(a.data(), b.data()));
  }
  for (auto& [name, p] : dual.named_parameters()) {
    if (name.find(".w_v") != std::string::npos && name.rfind("fusion", 0) == 0) {
      EXPECT_FALSE(p.requires_grad());
    }
  }
}

TEST(Forward, RoiBranchInfluencesLogitsWhenFusionIsLive) {
  std::mt19937_64 rng(7);
  auto m = build<double>(tiny_config());
  randomise(m, rng, 0.3);
  auto pest = random_image<double>(3, 16, rng);
  auto a = forward(m, pest, random_image<double>(3, 16, rng));
  auto b = forward(m, pest, random_image<double>(3, 16, rng));
  EXPECT_NE(a.to_vector(), b.to_vector());
}

TEST(Forward, StageOneBlockIsPermutationEquivariantWithoutPositions) {
  std::mt19937_64 rng(8);
  auto m = build<double>(tiny_config());
  m.pest_embed.pos_embedding = Tensor<double>::zeros(m.pest_embed.pos_embedding.shape());
  auto tokens = tokenize(random_image<double>(3, 16, rng), m.pest_embed);
  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  TokenSequence<double> permuted = tokens;
  std::vector<double> pd(tokens.patches.numel());
  for (std::size_t i = 0; i < 16; ++i) {
    for (std::size_t c = 0; c < 8; ++c) pd[i * 8 + c] = tokens.patches.data()[perm[i] * 8 + c];
  }
  permuted.patches = Tensor<double>({16, 8}, pd);
  const auto& block = m.pest_blocks[0][0];
  auto y = transformer_block(tokens, block), yp = transformer_block(permuted, block);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(y.cls.data()[c], yp.cls.data()[c], 1e-12);
  for (std::size_t i = 0; i < 16; ++i) {
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_NEAR(yp.patches.data()[i * 8 + c], y.patches.data()[perm[i] * 8 + c], 1e-12);
    }
  }
}

template <class T>
class ModelGradient : public ::testing::Test {};
using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(ModelGradient, Precisions);

TYPED_TEST(ModelGradient, CrossEntropyMatchesFiniteDifferences) {
  using T = TypeParam;
  std::mt19937_64 rng(9);
  auto m = build<T>(tiny_config());
  randomise(m, rng, 0.1);
  auto pest = random_image<T>(3, 16, rng), roi = random_image<T>(3, 16, rng);
  const bool f32 = std::is_same_v<T, float>;
  auto r = gradient_check<T>([&] { return cross_entropy(forward(m, pest, roi), 1); }, m.trainable_parameters(), 200,
                             f32 ? 1e-3 : 1e-5, 3);
  EXPECT_EQ(r.coordinates, 200u);
  EXPECT_TRUE(r.passed(f32 ? 1e-3 : 1e-5)) << r.worst << " " << r.max_rel_error;
}

TEST(Forward, Table1ShapesAtFullSize) {
  std::mt19937_64 rng(10);
  ModelConfig c;
  c.stage_tb_counts = {1, 1, 1, 1};
  auto m = build<float>(c);
  auto r = forward_with_traces(m, random_image<float>(3, 224, rng), random_image<float>(3, 224, rng));
  const std::size_t tokens[] = {3136, 784, 196, 49};
  for (std::size_t s = 0; s < 4; ++s) {
    EXPECT_EQ(r.stage_shapes[s].tokens(), tokens[s]);
    EXPECT_EQ(r.stage_shapes[s].width, 64u << s);
    EXPECT_EQ(r.cls_widths[s], 64u << s);
  }
}
