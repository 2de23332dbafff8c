#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "roivit/roi_gen.hpp"
#include "roivit/synthetic.hpp"
#include "cam_oracle.hpp"
#include "test_util.hpp"

using namespace roivit;
using roivit::test::ChannelMeanStub;
using roivit::test::oracle_cam;

namespace {

ImageTensor random_image(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageTensor img(3, h, w);
  for (auto& v : img.values) v = u(rng);
  return img;
}

Tensor<double> one_hot_stack(std::size_t h, std::size_t w, const std::vector<std::size_t>& cells) {
  std::vector<double> data(cells.size() * h * w, 0.0);
  for (std::size_t k = 0; k < cells.size(); ++k) data[k * h * w + cells[k]] = 1.0;
  return Tensor<double>({cells.size(), h, w}, std::move(data));
}

}  // namespace

TEST(ScoreCam, TwoMapsWithLogThreeScoreGap) {
  // Map 0 covers the left half, map 1 the right half. The image is zero on the
  // left and 2 ln 3 on the right, so the masked channel means are 0 and ln 3.
  const std::size_t h = 4, w = 4;
  ImageTensor img(3, h, w);
  std::vector<double> acts(2 * h * w, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) acts[(x < 2 ? 0 : 1) * h * w + y * w + x] = 1.0;
  }
  const float right = static_cast<float>(2.0 * std::log(3.0));
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 2; x < w; ++x) img.at(c, y, x) = right;
    }
  }
  ChannelMeanStub stub(Tensor<double>({2, h, w}, acts));
  ScoreCamState st;
  const auto roi = score_cam(img, stub, 0, &st);
  ASSERT_EQ(st.scores.size(), 2u);
  EXPECT_NEAR(st.scores[0], 0.0, 1e-6);
  EXPECT_NEAR(st.scores[1], std::log(3.0), 1e-6);
  EXPECT_NEAR(st.weights[0], 0.25, 1e-6);
  EXPECT_NEAR(st.weights[1], 0.75, 1e-6);
  EXPECT_NEAR(st.weights[0] + st.weights[1], 1.0, 1e-6);
  // cam = 0.25 on the left and 0.75 on the right, normalized to 0 and 1.
  EXPECT_EQ(roi.at(0, 0), 0.0f);
  EXPECT_EQ(roi.at(0, 3), 1.0f);
}

TEST(ScoreCam, OneHotStubMatchesStraightLineOracle) {
  std::mt19937_64 rng(11);
  const std::size_t h = 6, w = 6;
  const auto img = random_image(h, w, rng);
  const auto acts = one_hot_stack(h, w, {0, 7, 14, 20, 35, 12});
  ChannelMeanStub stub(acts);
  for (std::size_t target = 0; target < 3; ++target) {
    ScoreCamState st;
    const auto roi = score_cam(img, stub, target, &st);
    std::vector<double> a;
    const auto oracle = oracle_cam(img, acts, stub, target, &a);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(st.weights[k], a[k], 1e-6);
    for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(roi.values[i], oracle[i], 1e-6) << "pixel " << i;
  }
}

TEST(ScoreCam, UpsampledActivationsMatchOracle) {
  std::mt19937_64 rng(5);
  const auto img = random_image(9, 13, rng);
  const auto acts = test::random_tensor<double>({5, 3, 4}, rng, -1.0, 2.0);
  ChannelMeanStub stub(acts, 4.0);
  ScoreCamState st;
  const auto roi = score_cam(img, stub, 2, &st);
  std::vector<double> a;
  const auto oracle = oracle_cam(img, acts, stub, 2, &a);
  double total = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_NEAR(st.weights[k], a[k], 1e-6);
    total += st.weights[k];
  }
  EXPECT_NEAR(total, 1.0, 1e-6);
  ASSERT_EQ(roi.height(), 9u);
  ASSERT_EQ(roi.width(), 13u);
  for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(roi.values[i], oracle[i], 1e-6);
}

TEST(ScoreCam, OutputInUnitIntervalAndWeightsSumToOne) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const auto img = random_image(8, 8, rng);
    ChannelMeanStub stub(test::random_tensor<double>({4, 2, 2}, rng, -3.0, 3.0), 10.0);
    ScoreCamState st;
    const auto roi = score_cam(img, stub, std::nullopt, &st);
    EXPECT_NEAR(std::accumulate(st.weights.begin(), st.weights.end(), 0.0), 1.0, 1e-6);
    for (float v : roi.values.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    for (const auto& m : st.masks) {
      for (double v : m.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(ScoreCam, PositiveActivationScalingLeavesMapUnchanged) {
  std::mt19937_64 rng(31);
  const auto img = random_image(8, 8, rng);
  const auto acts = test::random_tensor<double>({3, 4, 4}, rng, 0.0, 1.0);
  auto scaled = acts.detach();
  for (auto& v : scaled.mutable_data()) v *= 7.5;
  const auto a = score_cam(img, ChannelMeanStub(acts), 1);
  const auto b = score_cam(img, ChannelMeanStub(scaled), 1);
  for (std::size_t i = 0; i < a.values.numel(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-6);
}

TEST(ScoreCam, UntargetedUsesTheClassifierPrediction) {
  std::mt19937_64 rng(2);
  auto img = random_image(4, 4, rng);
  for (std::size_t i = 0; i < 16; ++i) img.values[32 + i] = 1.0f;  // channel 2 dominates
  ChannelMeanStub stub(one_hot_stack(4, 4, {1, 5, 9}));
  ScoreCamState st;
  score_cam(img, stub, std::nullopt, &st);
  EXPECT_EQ(st.target, 2u);
}

TEST(ScoreCam, ErrorContracts) {
  std::mt19937_64 rng(1);
  const auto img = random_image(4, 4, rng);
  EXPECT_THROW(score_cam(img, ChannelMeanStub(Tensor<double>({0, 4, 4}, std::vector<double>{})), 0), GeneratorError);
  EXPECT_THROW(score_cam(img, ChannelMeanStub(one_hot_stack(4, 4, {0})), 3), UsageError);
}

namespace {

class WrongSizeSegmenter : public Segmenter {
 public:
  Tensor<float> segment_map(const ImageTensor&) const override { return Tensor<float>({2, 2}, std::vector<float>(4, 0.5f)); }
};

class OverRangeSegmenter : public Segmenter {
 public:
  Tensor<float> segment_map(const ImageTensor& img) const override {
    return Tensor<float>({img.height, img.width}, std::vector<float>(img.height * img.width, 3.0f));
  }
};

}  // namespace

TEST(Segment, ThresholdSegmenterMatchesPerPixelOracle) {
  ImageTensor img(3, 10, 10);
  for (auto& v : img.values) v = 0.2f;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 3; y < 6; ++y) {
      for (std::size_t x = 4; x < 8; ++x) img.at(c, y, x) = 0.9f;
    }
  }
  const auto roi = segment(img, ThresholdSegmenter{});
  EXPECT_EQ(roi.source, RoiSource::seg);
  for (std::size_t y = 0; y < 10; ++y) {
    for (std::size_t x = 0; x < 10; ++x) {
      const bool object = y >= 3 && y < 6 && x >= 4 && x < 8;
      EXPECT_EQ(roi.at(y, x), object ? 1.0f : 0.0f) << y << "," << x;
    }
  }
}

TEST(Segment, UniformImageGivesEmptyMask) {
  ImageTensor img(3, 6, 6);
  for (auto& v : img.values) v = 0.4f;
  const auto roi = segment(img, ThresholdSegmenter{});
  for (float v : roi.values.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Segment, ShapeMismatchIsAGeneratorError) {
  ImageTensor img(3, 6, 6);
  EXPECT_THROW(segment(img, WrongSizeSegmenter{}), GeneratorError);
}

TEST(Segment, OutputIsClampedToUnitInterval) {
  ImageTensor img(3, 3, 3);
  const auto roi = segment(img, OverRangeSegmenter{});
  for (float v : roi.values.data()) EXPECT_EQ(v, 1.0f);
}

TEST(AuxCnn, ArchiveRoundTripPreservesScoresAndDigest) {
  std::mt19937_64 rng(8);
  AuxCnn a(3, 4, 99);
  TensorArchive ar;
  a.append_to(ar);
  const auto b = AuxCnn::from_archive(ar);
  EXPECT_EQ(a.digest(), b.digest());
  const auto img = random_image(16, 16, rng);
  EXPECT_EQ(a.scores(img), b.scores(img));
  const auto acts = a.activations(img);
  EXPECT_EQ(acts.rank(), 3u);
  EXPECT_GT(acts.dim(0), 1u);
  EXPECT_NE(a.digest(), AuxCnn(3, 4, 100).digest());
}

TEST(AuxCnn, TrainingLowersLossOnEasySynthetic) {
  SyntheticSpec spec;
  spec.per_class = 6;
  spec.image_size = 16;
  const auto samples = generate_synthetic(spec);
  std::vector<ImageTensor> images;
  std::vector<std::size_t> labels;
  for (const auto& s : samples) {
    images.push_back(s.image);
    labels.push_back(s.label);
  }
  AuxCnn first(3, 4, 1), longer(3, 4, 1);
  const double l1 = train_aux(first, images, labels, AuxTrainSettings{1, 8, 1e-3, 1});
  const double l20 = train_aux(longer, images, labels, AuxTrainSettings{20, 8, 1e-3, 1});
  EXPECT_LT(l20, l1);
  EXPECT_THROW(train_aux(first, images, {}, AuxTrainSettings{}), UsageError);
}

class RoiCacheTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("roivit_cache_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::remove_all(dir_);
    std::mt19937_64 rng(4);
    for (int i = 0; i < 5; ++i) images_.push_back(random_image(8, 8, rng));
    for (std::size_t i = 0; i < images_.size(); ++i) jobs_.push_back({"c/img" + std::to_string(i), &images_[i], i % 2});
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  std::filesystem::path dir_;
  std::vector<ImageTensor> images_;
  std::vector<RoiJob> jobs_;
};

TEST_F(RoiCacheTest, SecondPassHitsAndIsBitwiseIdentical) {
  std::size_t calls = 0;
  RoiGeneratorFn gen = [&](const ImageTensor& img, std::size_t label) {
    ++calls;
    auto roi = segment(img, ThresholdSegmenter{});
    roi.values.mutable_data()[0] = static_cast<float>(label) * 0.25f + 0.1f;
    return roi;
  };
  RoiCacheStats first, second;
  const auto a = precompute_rois(jobs_, RoiSource::seg, "gen-a", gen, dir_, &first);
  EXPECT_EQ(first.misses, 5u);
  EXPECT_EQ(first.hits, 0u);
  const auto b = precompute_rois(jobs_, RoiSource::seg, "gen-a", gen, dir_, &second);
  EXPECT_EQ(second.hits, 5u);
  EXPECT_EQ(second.misses, 0u);
  EXPECT_EQ(calls, 5u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(test::bitwise_equal(a[i].values.data(), b[i].values.data()));
    EXPECT_EQ(a[i].source, b[i].source);
  }
}

TEST_F(RoiCacheTest, GeneratorHashModeAndPathAllKeyTheCache) {
  RoiGeneratorFn gen = [](const ImageTensor& img, std::size_t) { return segment(img, ThresholdSegmenter{}); };
  precompute_rois(jobs_, RoiSource::seg, "gen-a", gen, dir_);
  RoiCacheStats other;
  precompute_rois(jobs_, RoiSource::seg, "gen-b", gen, dir_, &other);
  EXPECT_EQ(other.misses, 5u);
  EXPECT_NE(roi_cache_key("c/img0", RoiSource::seg, "g"), roi_cache_key("c/img1", RoiSource::seg, "g"));
  EXPECT_NE(roi_cache_key("c/img0", RoiSource::seg, "g"), roi_cache_key("c/img0", RoiSource::cam, "g"));
  EXPECT_NE(roi_cache_key("c/img0", RoiSource::seg, "g"), roi_cache_key("c/img0", RoiSource::seg, "h"));
  EXPECT_EQ(roi_cache_key("c/img0", RoiSource::seg, "g"), roi_cache_key("c/img0", RoiSource::seg, "g"));
}

TEST_F(RoiCacheTest, CachedMapOfWrongSizeIsAFormatError) {
  RoiGeneratorFn gen = [](const ImageTensor& img, std::size_t) { return segment(img, ThresholdSegmenter{}); };
  precompute_rois(jobs_, RoiSource::seg, "gen-a", gen, dir_);
  std::mt19937_64 rng(6);
  const auto bigger = random_image(12, 12, rng);
  std::vector<RoiJob> jobs{{"c/img0", &bigger, 0}};
  EXPECT_THROW(precompute_rois(jobs, RoiSource::seg, "gen-a", gen, dir_), FormatError);
}
