#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "roivit/checkpoint.hpp"
#include "roivit/hash.hpp"
#include "roivit/image.hpp"
#include "roivit/init.hpp"
#include "roivit/ops.hpp"
#include "roivit/optim.hpp"

namespace roivit {

// A classifier that exposes its class scores and the activation stack
// [K_maps, h, w] of one internal spatial layer.
class AuxiliaryClassifier {
 public:
  virtual ~AuxiliaryClassifier() = default;
  virtual std::size_t num_classes() const = 0;
  virtual std::vector<double> scores(const ImageTensor& img) const = 0;
  virtual Tensor<double> activations(const ImageTensor& img) const = 0;
};

// Intermediate quantities of one Score-CAM evaluation.
struct ScoreCamState {
  std::size_t target = 0;
  std::vector<Tensor<double>> masks;  // [H, W] each, values in [0, 1]
  std::vector<double> scores;         // target-class score of each masked image
  std::vector<double> weights;        // softmax of scores, sums to 1
};

namespace detail {

inline std::size_t argmax_of(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

inline std::vector<double> softmax_of(const std::vector<double>& s) {
  const double mx = *std::max_element(s.begin(), s.end());
  std::vector<double> out(s.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    out[i] = std::exp(s[i] - mx);
    denom += out[i];
  }
  for (auto& v : out) v /= denom;
  return out;
}

inline RoiMap to_roi_map(const Tensor<double>& values, RoiSource source) {
  std::vector<float> out(values.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(static_cast<float>(values[i]), 0.0f, 1.0f);
  return {Tensor<float>(values.shape(), std::move(out)), source};
}

}  // namespace detail

// Score-CAM: each upsampled activation map, min-max normalized, masks the
// image; the softmax of the masked images' target scores weights the maps.
// The result is min-max normalized ReLU of the weighted sum. Without a target
// the classifier's own argmax on the image is used.
inline RoiMap score_cam(const ImageTensor& img, const AuxiliaryClassifier& model,
                        std::optional<std::size_t> target = std::nullopt, ScoreCamState* state = nullptr) {
  NoGradGuard no_grad;
  const auto acts = model.activations(img);
  if (acts.rank() != 3 || acts.numel() == 0) {
    throw GeneratorError("score_cam: classifier returned an empty activation stack " + shape_str(acts.shape()));
  }
  const std::size_t c = target ? *target : detail::argmax_of(model.scores(img));
  if (c >= model.num_classes()) {
    throw UsageError("score_cam: target class " + std::to_string(c) + " out of range for " +
                     std::to_string(model.num_classes()) + " classes");
  }
  const std::size_t kmaps = acts.dim(0), h = img.height, w = img.width, hw = h * w;
  const auto up = upsample_bilinear(acts, h, w);
  const auto upd = up.data();
  ScoreCamState local;
  ScoreCamState& st = state ? *state : local;
  st = {};
  st.target = c;
  for (std::size_t k = 0; k < kmaps; ++k) {
    Tensor<double> map({h, w}, std::vector<double>(upd.begin() + k * hw, upd.begin() + (k + 1) * hw));
    auto mask = minmax_normalize(map);
    ImageTensor masked = img;
    for (std::size_t ch = 0; ch < img.channels; ++ch) {
      for (std::size_t i = 0; i < hw; ++i) {
        masked.values[ch * hw + i] = static_cast<float>(img.values[ch * hw + i] * mask[i]);
      }
    }
    const auto s = model.scores(masked);
    st.scores.push_back(s.at(c));
    st.masks.push_back(std::move(mask));
  }
  st.weights = detail::softmax_of(st.scores);
  std::vector<double> cam(hw, 0.0);
  for (std::size_t k = 0; k < kmaps; ++k) {
    for (std::size_t i = 0; i < hw; ++i) cam[i] += st.weights[k] * upd[k * hw + i];
  }
  for (auto& v : cam) v = std::max(v, 0.0);
  return detail::to_roi_map(minmax_normalize(Tensor<double>({h, w}, std::move(cam))), RoiSource::cam);
}

// Soft segmentation model: image -> [H, W] foreground map.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual Tensor<float> segment_map(const ImageTensor& img) const = 0;
};

inline RoiMap segment(const ImageTensor& img, const Segmenter& seg) {
  auto map = seg.segment_map(img);
  if (map.rank() != 2 || map.dim(0) != img.height || map.dim(1) != img.width) {
    throw GeneratorError("segment: segmenter returned " + shape_str(map.shape()) + " for a " +
                         std::to_string(img.height) + "x" + std::to_string(img.width) + " image");
  }
  std::vector<float> out(map.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(map[i], 0.0f, 1.0f);
  return {Tensor<float>(map.shape(), std::move(out)), RoiSource::seg};
}

// Global-threshold foreground mask. d(p) = |luminance(p) - mean luminance of
// the border pixels|; foreground iff d(p) > mean(d) + 0.5 * stddev(d).
class ThresholdSegmenter : public Segmenter {
 public:
  Tensor<float> segment_map(const ImageTensor& img) const override {
    const std::size_t h = img.height, w = img.width;
    if (h == 0 || w == 0) throw GeneratorError("threshold segmenter: empty image");
    double border = 0.0;
    std::size_t count = 0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) {
          border += luminance(img, y, x);
          ++count;
        }
      }
    }
    border /= static_cast<double>(count);
    std::vector<double> d(h * w);
    double mean = 0.0;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        d[y * w + x] = std::abs(static_cast<double>(luminance(img, y, x)) - border);
        mean += d[y * w + x];
      }
    }
    mean /= static_cast<double>(d.size());
    double var = 0.0;
    for (double v : d) var += (v - mean) * (v - mean);
    const double threshold = mean + 0.5 * std::sqrt(var / static_cast<double>(d.size()));
    std::vector<float> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] > threshold ? 1.0f : 0.0f;
    return Tensor<float>({h, w}, std::move(out));
  }
};

// ---------------------------------------------------------------------------
// Built-in auxiliary classifier: conv3x3-relu-maxpool2, conv3x3-relu-maxpool2,
// conv3x3, global average pool, affine. The third convolution's output is the
// activation stack.

struct AuxLogitsAndMaps {
  Tensor<float> logits;  // [K]
  Tensor<float> maps;    // [16, H/4, W/4]
};

class AuxCnn : public AuxiliaryClassifier {
 public:
  static constexpr std::size_t kWidth1 = 8, kWidth2 = 16, kWidth3 = 16;

  AuxCnn() = default;
  AuxCnn(std::size_t channels, std::size_t classes, std::uint64_t seed) {
    auto conv = [&](std::size_t out, std::size_t in, const char* name) {
      return truncated_normal<float>({out, in, 3, 3}, std::sqrt(2.0 / static_cast<double>(in * 9)), seed, name);
    };
    conv1_w = conv(kWidth1, channels, "aux.conv1.w");
    conv2_w = conv(kWidth2, kWidth1, "aux.conv2.w");
    conv3_w = conv(kWidth3, kWidth2, "aux.conv3.w");
    conv1_b = parameter_full<float>({kWidth1}, 0.0f);
    conv2_b = parameter_full<float>({kWidth2}, 0.0f);
    conv3_b = parameter_full<float>({kWidth3}, 0.0f);
    fc_w = truncated_normal<float>({kWidth3, classes}, std::sqrt(1.0 / static_cast<double>(kWidth3)), seed,
                                   "aux.fc.w");
    fc_b = parameter_full<float>({classes}, 0.0f);
  }

  Tensor<float> conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b, fc_w, fc_b;

  NamedTensors<float> named_parameters() const {
    return {{"aux.conv1.w", conv1_w}, {"aux.conv1.b", conv1_b}, {"aux.conv2.w", conv2_w},
            {"aux.conv2.b", conv2_b}, {"aux.conv3.w", conv3_w}, {"aux.conv3.b", conv3_b},
            {"aux.fc.w", fc_w},       {"aux.fc.b", fc_b}};
  }

  std::size_t channels() const { return conv1_w.dim(1); }
  std::size_t num_classes() const override { return fc_w.dim(1); }

  AuxLogitsAndMaps run(const Tensor<float>& image) const {
    if (image.rank() != 3 || image.dim(0) != channels() || image.dim(1) < 4 || image.dim(2) < 4) {
      throw ShapeError("aux classifier: input " + shape_str(image.shape()) + " needs " + std::to_string(channels()) +
                       " channels and at least 4x4 pixels");
    }
    auto x = max_pool2d(relu(strided_conv2d(image, conv1_w, conv1_b, 1, 1)), 2, 2);
    x = max_pool2d(relu(strided_conv2d(x, conv2_w, conv2_b, 1, 1)), 2, 2);
    auto maps = strided_conv2d(x, conv3_w, conv3_b, 1, 1);
    auto logits = reshape(linear(reshape(global_avg_pool(maps), {1, kWidth3}), fc_w, fc_b), {num_classes()});
    return {logits, maps};
  }

  std::vector<double> scores(const ImageTensor& img) const override {
    NoGradGuard no_grad;
    auto logits = run(img.to_tensor<float>()).logits;
    return {logits.data().begin(), logits.data().end()};
  }

  Tensor<double> activations(const ImageTensor& img) const override {
    NoGradGuard no_grad;
    return run(img.to_tensor<float>()).maps.cast<double>();
  }

  void append_to(TensorArchive& archive) const {
    for (const auto& [name, t] : named_parameters()) archive.tensors.emplace_back(name, t.detach());
  }

  static AuxCnn from_archive(const TensorArchive& archive) {
    AuxCnn m;
    auto take = [&](const char* name) {
      auto t = archive.tensor(name).detach();
      t.set_requires_grad(true);
      return t;
    };
    m.conv1_w = take("aux.conv1.w");
    m.conv1_b = take("aux.conv1.b");
    m.conv2_w = take("aux.conv2.w");
    m.conv2_b = take("aux.conv2.b");
    m.conv3_w = take("aux.conv3.w");
    m.conv3_b = take("aux.conv3.b");
    m.fc_w = take("aux.fc.w");
    m.fc_b = take("aux.fc.b");
    if (m.conv1_w.rank() != 4 || m.conv2_w.dim(1) != kWidth1 || m.conv3_w.dim(1) != kWidth2 ||
        m.fc_w.rank() != 2 || m.fc_w.dim(0) != kWidth3 || m.fc_b.numel() != m.fc_w.dim(1)) {
      throw FormatError("archive holds an auxiliary classifier of unexpected shape");
    }
    return m;
  }

  // Digest of the parameter values; identifies this generator in cache keys.
  std::string digest() const {
    Fnv1a h;
    for (const auto& [name, t] : named_parameters()) {
      h.update(name);
      auto d = t.data();
      h.update(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(d.data()), d.size_bytes()));
    }
    return h.hex();
  }
};

struct AuxTrainSettings {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

// Minibatch Adam on softmax cross-entropy. Returns the mean loss of the last epoch.
inline double train_aux(AuxCnn& model, const std::vector<ImageTensor>& images, const std::vector<std::size_t>& labels,
                        const AuxTrainSettings& s) {
  if (images.size() != labels.size() || images.empty()) {
    throw UsageError("train_aux: need one label per image and at least one image");
  }
  if (s.batch_size == 0) throw ConfigError("aux batch size must be positive");
  Adam<float> opt(model.named_parameters(), AdamSettings{s.lr});
  std::mt19937_64 rng(s.seed ^ 0x61757863ULL);
  std::vector<std::size_t> order(images.size());
  double last = 0.0;
  std::vector<Tensor<float>> inputs;
  for (const auto& img : images) inputs.push_back(img.to_tensor<float>());
  for (std::size_t e = 0; e < s.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += s.batch_size) {
      const std::size_t end = std::min(order.size(), start + s.batch_size);
      const float inv = 1.0f / static_cast<float>(end - start);
      opt.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        auto loss = cross_entropy(model.run(inputs[order[i]]).logits, labels[order[i]]);
        total += loss.item();
        if (!std::isfinite(loss.item())) throw NumericalError("auxiliary classifier loss is not finite");
        backward(scale(loss, inv));
      }
      opt.step();
    }
    last = total / static_cast<double>(order.size());
  }
  return last;
}

// ---------------------------------------------------------------------------
// Content-addressed ROI cache

// One image whose ROI is requested. rel_path identifies it in the cache key.
struct RoiJob {
  std::string rel_path;
  const ImageTensor* image = nullptr;
  std::size_t label = 0;
};

struct RoiCacheStats {
  std::size_t hits = 0;
  std::size_t misses = 0;
};

using RoiGeneratorFn = std::function<RoiMap(const ImageTensor& image, std::size_t label)>;

inline std::string roi_cache_key(const std::string& rel_path, RoiSource mode, const std::string& generator_hash) {
  return Fnv1a().update(rel_path).update("\n").update(to_string(mode)).update("\n").update(generator_hash).hex();
}

inline std::filesystem::path roi_cache_file(const std::filesystem::path& cache_dir, const std::string& rel_path,
                                            RoiSource mode, const std::string& generator_hash) {
  return cache_dir / (roi_cache_key(rel_path, mode, generator_hash) + ".manifest");
}

inline void save_roi(const std::filesystem::path& manifest, const RoiMap& roi, const std::string& rel_path) {
  TensorArchive a;
  a.meta["mode"] = to_string(roi.source);
  a.meta["image"] = rel_path;
  a.tensors.emplace_back("roi", roi.values.detach());
  save_archive(manifest, a);
}

inline RoiMap load_roi(const std::filesystem::path& manifest) {
  const auto a = load_archive(manifest);
  const auto& t = a.tensor("roi");
  if (t.rank() != 2) throw FormatError(manifest.string() + ": roi map must be two-dimensional");
  return {t.detach(), parse_roi_source(a.meta_value("mode"))};
}

// Returns one map per job, generating and storing only those not yet cached.
inline std::vector<RoiMap> precompute_rois(const std::vector<RoiJob>& jobs, RoiSource mode,
                                           const std::string& generator_hash, const RoiGeneratorFn& generate,
                                           const std::filesystem::path& cache_dir, RoiCacheStats* stats = nullptr) {
  std::error_code ec;
  std::filesystem::create_directories(cache_dir, ec);
  if (ec) throw FormatError(cache_dir.string() + ": cannot create cache directory: " + ec.message());
  RoiCacheStats local;
  RoiCacheStats& st = stats ? *stats : local;
  std::vector<RoiMap> out;
  out.reserve(jobs.size());
  for (const auto& job : jobs) {
    const auto file = roi_cache_file(cache_dir, job.rel_path, mode, generator_hash);
    if (std::filesystem::exists(file) && std::filesystem::exists(blob_path_for(file))) {
      auto roi = load_roi(file);
      if (roi.height() != job.image->height || roi.width() != job.image->width || roi.source != mode) {
        throw FormatError(file.string() + ": cached map does not match " + job.rel_path);
      }
      out.push_back(std::move(roi));
      ++st.hits;
      continue;
    }
    auto roi = generate(*job.image, job.label);
    save_roi(file, roi, job.rel_path);
    out.push_back(std::move(roi));
    ++st.misses;
  }
  return out;
}

}  // namespace roivit
