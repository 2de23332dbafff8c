#pragma once

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "roivit/backbone.hpp"
#include "roivit/gradcheck.hpp"
#include "roivit/metrics.hpp"
#include "roivit/roi_gen.hpp"

namespace roivit {

struct SelfTestCheck {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SelfTestReport {
  std::vector<SelfTestCheck> checks;

  bool passed() const {
    for (const auto& c : checks) {
      if (!c.passed) return false;
    }
    return !checks.empty();
  }

  std::string to_text() const {
    std::ostringstream os;
    std::size_t ok = 0;
    for (const auto& c : checks) {
      ok += c.passed ? 1 : 0;
      os << (c.passed ? "PASS " : "FAIL ") << c.name << "  (" << std::fixed << std::setprecision(2) << c.seconds
         << " s)  " << c.detail << '\n';
    }
    os << ok << "/" << checks.size() << " checks passed\n";
    return os.str();
  }
};

struct SelfTestOptions {
  // Runs every check with the GELU backward rule negated; the gradient
  // checks are then expected to fail.
  bool inject_gelu_sign_flip = false;
};

namespace selftest_detail {

inline ModelConfig grad_config() {
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
Tensor<T> uniform_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> data(numel_of(shape));
  for (auto& v : data) v = static_cast<T>(u(rng));
  return Tensor<T>(shape, std::move(data));
}

// Moves every trainable parameter off its structured initial value.
template <class T>
void perturb(RoiVit<T>& m, std::mt19937_64& rng, double spread) {
  std::uniform_real_distribution<double> u(-spread, spread);
  for (auto& [name, p] : m.trainable_parameters()) {
    for (auto& v : p.mutable_data()) v += static_cast<T>(u(rng));
  }
}

template <class T>
GradCheckResult model_gradient(std::size_t coordinates, double rel_step, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto m = build<T>(grad_config());
  perturb(m, rng, 0.1);
  const auto pest = uniform_tensor<T>({3, 16, 16}, rng, 0.0, 1.0);
  const auto roi = uniform_tensor<T>({3, 16, 16}, rng, 0.0, 1.0);
  return gradient_check<T>([&] { return cross_entropy(forward(m, pest, roi), 1); }, m.trainable_parameters(),
                           coordinates, rel_step, seed);
}

template <class T>
double worst_row_sum_error(const Tensor<T>& weights) {
  const std::size_t n = weights.dim(weights.rank() - 1);
  double worst = 0.0;
  const auto d = weights.data();
  for (std::size_t r = 0; r < d.size() / n; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(d[r * n + j]);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

class TwoRegionStub : public AuxiliaryClassifier {
 public:
  std::size_t num_classes() const override { return 1; }
  std::vector<double> scores(const ImageTensor& img) const override {
    double s = 0.0;
    for (std::size_t i = 0; i < img.height * img.width; ++i) s += img.values[i];
    return {s / static_cast<double>(img.height * img.width)};
  }
  Tensor<double> activations(const ImageTensor& img) const override {
    const std::size_t h = img.height, w = img.width;
    std::vector<double> a(2 * h * w, 0.0);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) a[(x < w / 2 ? 0 : 1) * h * w + y * w + x] = 1.0;
    }
    return Tensor<double>({2, h, w}, std::move(a));
  }
};

class RandomStub : public AuxiliaryClassifier {
 public:
  explicit RandomStub(Tensor<double> acts) : acts_(std::move(acts)) {}
  std::size_t num_classes() const override { return 2; }
  std::vector<double> scores(const ImageTensor& img) const override {
    const std::size_t hw = img.height * img.width;
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      a += 5.0 * img.values[i];
      b -= 3.0 * img.values[hw + i];
    }
    return {a / static_cast<double>(hw), b / static_cast<double>(hw)};
  }
  Tensor<double> activations(const ImageTensor&) const override { return acts_; }

 private:
  Tensor<double> acts_;
};

}  // namespace selftest_detail

// Release gate: gradient checks, attention normalization, scale schedule,
// fusion patch invariance, metric oracle and Score-CAM algebra.
inline SelfTestReport run_selftest(const SelfTestOptions& opt = {}, std::ostream* progress = nullptr) {
  namespace sd = selftest_detail;
  SelfTestReport report;
  const bool injected = opt.inject_gelu_sign_flip;
  testing_hooks::negate_gelu_grad = injected;

  auto run = [&](const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    SelfTestCheck c{name, false, "", 0.0};
    try {
      std::tie(c.passed, c.detail) = body();
    } catch (const std::exception& e) {
      c.passed = false;
      c.detail = std::string("exception: ") + e.what();
    }
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (progress) *progress << (c.passed ? "PASS " : "FAIL ") << c.name << "  " << c.detail << std::endl;
    report.checks.push_back(std::move(c));
  };

  auto describe = [](const GradCheckResult& r) {
    std::ostringstream os;
    os << r.coordinates << " coordinates, max rel error " << std::scientific << std::setprecision(3)
       << r.max_rel_error << " at " << r.worst;
    return os.str();
  };

  run("gradient f64", [&] {
    const auto r = sd::model_gradient<double>(200, 1e-5, 3);
    return std::pair{r.coordinates == 200 && r.passed(1e-5), describe(r) + " (tol 1e-5)"};
  });
  run("gradient f32", [&] {
    const auto r = sd::model_gradient<float>(200, 1e-3, 4);
    return std::pair{r.coordinates == 200 && r.passed(1e-3), describe(r) + " (tol 1e-3)"};
  });
  if (!injected) {
    run("gradient negative control", [&] {
      testing_hooks::negate_gelu_grad = true;
      GradCheckResult r;
      try {
        r = sd::model_gradient<double>(200, 1e-5, 3);
      } catch (...) {
        testing_hooks::negate_gelu_grad = false;
        throw;
      }
      testing_hooks::negate_gelu_grad = false;
      return std::pair{!r.passed(1e-5), "flipped GELU backward detected: " + describe(r)};
    });
  }

  run("attention rows sum to one", [&] {
    std::mt19937_64 rng(12);
    auto cfg = sd::grad_config();
    cfg.base_heads = 2;
    auto m = build<double>(cfg);
    sd::perturb(m, rng, 0.2);
    double worst = 0.0;
    std::size_t traces = 0;
    NoGradGuard no_grad;
    for (int trial = 0; trial < 5; ++trial) {
      const auto r = forward_with_traces(m, sd::uniform_tensor<double>({3, 16, 16}, rng, 0.0, 1.0),
                                         sd::uniform_tensor<double>({3, 16, 16}, rng, 0.0, 1.0), true);
      for (const auto& t : r.block_traces) {
        worst = std::max(worst, sd::worst_row_sum_error(t.weights));
        ++traces;
      }
      for (const auto& f : r.fusion_traces) {
        worst = std::max(worst, std::max(sd::worst_row_sum_error(f.pest.weights), sd::worst_row_sum_error(f.roi.weights)));
        traces += 2;
      }
    }
    std::ostringstream os;
    os << traces << " attention maps, worst |row sum - 1| = " << std::scientific << std::setprecision(2) << worst;
    return std::pair{traces > 0 && worst <= 1e-5, os.str()};
  });

  run("scale schedule at 224", [&] {
    ModelConfig cfg;
    cfg.num_classes = 4;
    const std::size_t C = cfg.base_width;
    const std::size_t tokens[] = {3136, 784, 196, 49};
    std::mt19937_64 rng(2);
    const auto m = build<float>(cfg);
    NoGradGuard no_grad;
    const auto img = sd::uniform_tensor<float>({3, 224, 224}, rng, 0.0, 1.0);
    const auto r = forward_with_traces(m, img, img, false);
    bool ok = r.stage_shapes.size() == 4 && r.logits.numel() == 4;
    std::ostringstream os;
    for (std::size_t s = 0; ok && s < 4; ++s) {
      const auto& sh = r.stage_shapes[s];
      const std::size_t width = C << s;
      ok = sh.rows * sh.cols == tokens[s] && sh.width == width && r.cls_widths[s] == width;
      os << "(" << sh.rows * sh.cols << "," << sh.width << ") ";
    }
    return std::pair{ok, os.str()};
  });

  run("fusion leaves patch tokens unchanged", [&] {
    std::mt19937_64 rng(21);
    const auto pest_p = FusionParams<double>::create(8, 2, 1, "p");
    const auto roi_p = FusionParams<double>::create(8, 2, 2, "r");
    for (int trial = 0; trial < 100; ++trial) {
      TokenSequence<double> a{sd::uniform_tensor<double>({1, 8}, rng, -2, 2),
                              sd::uniform_tensor<double>({16, 8}, rng, -2, 2), 4, 4};
      TokenSequence<double> b{sd::uniform_tensor<double>({1, 8}, rng, -2, 2),
                              sd::uniform_tensor<double>({16, 8}, rng, -2, 2), 4, 4};
      const std::vector<double> pa(a.patches.data().begin(), a.patches.data().end());
      const std::vector<double> pb(b.patches.data().begin(), b.patches.data().end());
      const auto out = cross_attention_fuse(a, b, pest_p, roi_p);
      if (std::memcmp(out.pest.patches.data().data(), pa.data(), pa.size() * sizeof(double)) != 0 ||
          std::memcmp(out.roi.patches.data().data(), pb.data(), pb.size() * sizeof(double)) != 0) {
        return std::pair{false, "patch tokens changed on trial " + std::to_string(trial)};
      }
    }
    return std::pair{true, std::string("100 random inputs, both branches bitwise unchanged")};
  });

  run("metrics oracle", [&] {
    std::mt19937_64 rng(6);
    std::uniform_int_distribution<std::size_t> kd(1, 20), nd(1, 2000);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t k = kd(rng), n = nd(rng);
      std::uniform_int_distribution<std::size_t> cls(0, k - 1);
      std::vector<std::pair<std::size_t, std::size_t>> samples;
      ConfusionMatrix cm(k);
      for (std::size_t i = 0; i < n; ++i) {
        samples.emplace_back(cls(rng), cls(rng));
        cm.accumulate(samples.back().first, samples.back().second);
      }
      const auto r = roivit::report(cm);
      for (std::size_t c = 0; c < k; ++c) {
        std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
        for (const auto& [a, p] : samples) {
          tp += a == c && p == c;
          fp += a != c && p == c;
          fn += a == c && p != c;
          tn += a != c && p != c;
        }
        const auto& got = r.per_class[c].counts;
        if (got.tp != tp || got.fp != fp || got.fn != fn || got.tn != tn) {
          return std::pair{false, "count mismatch on trial " + std::to_string(trial)};
        }
      }
    }
    const auto fx = roivit::report(ConfusionMatrix(2, {5, 1, 2, 4}));
    const auto& c0 = fx.per_class[0];
    const bool ok = std::abs(c0.precision - 0.7143) < 1e-4 && std::abs(c0.recall - 0.8333) < 1e-4 &&
                    std::abs(c0.f1 - 0.7692) < 1e-4;
    std::ostringstream os;
    os << "200 random matrices exact; fixture P=" << std::fixed << std::setprecision(4) << c0.precision
       << " R=" << c0.recall << " F1=" << c0.f1;
    return std::pair{ok, os.str()};
  });

  run("score-cam weights", [&] {
    ImageTensor img(3, 4, 4);
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 2; x < 4; ++x) img.at(0, y, x) = static_cast<float>(2.0 * std::log(3.0));
    }
    ScoreCamState st;
    score_cam(img, sd::TwoRegionStub{}, 0, &st);
    bool ok = st.weights.size() == 2 && std::abs(st.weights[0] - 0.25) < 1e-6 && std::abs(st.weights[1] - 0.75) < 1e-6;
    std::mt19937_64 rng(8);
    double worst = 0.0;
    for (int trial = 0; trial < 20 && ok; ++trial) {
      ImageTensor r(3, 8, 8);
      std::uniform_real_distribution<float> u(0.0f, 1.0f);
      for (auto& v : r.values) v = u(rng);
      ScoreCamState s2;
      const auto roi =
          score_cam(r, sd::RandomStub(sd::uniform_tensor<double>({6, 3, 3}, rng, -1, 1)), std::nullopt, &s2);
      double sum = 0.0;
      for (double w : s2.weights) sum += w;
      worst = std::max(worst, std::abs(sum - 1.0));
      for (float v : roi.values.data()) ok = ok && v >= 0.0f && v <= 1.0f;
    }
    std::ostringstream os;
    os << "two-map weights [" << st.weights.at(0) << ", " << st.weights.at(1) << "], worst |sum - 1| "
       << std::scientific << std::setprecision(2) << worst;
    return std::pair{ok && worst <= 1e-6, os.str()};
  });

  testing_hooks::negate_gelu_grad = false;
  return report;
}

}  // namespace roivit
