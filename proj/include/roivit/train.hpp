#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "roivit/backbone.hpp"
#include "roivit/checkpoint.hpp"
#include "roivit/dataset.hpp"
#include "roivit/metrics.hpp"
#include "roivit/optim.hpp"
#include "roivit/roi_gen.hpp"

namespace roivit {

// Class used as the Score-CAM target while building ROI maps: the sample's
// own label, or the auxiliary classifier's prediction.
enum class RoiTarget { truth, predicted };

inline std::string to_string(RoiTarget t) { return t == RoiTarget::truth ? "truth" : "predicted"; }
inline RoiTarget parse_roi_target(const std::string& s) {
  if (s == "truth") return RoiTarget::truth;
  if (s == "predicted") return RoiTarget::predicted;
  throw ConfigError("roi_target must be 'truth' or 'predicted', got '" + s + "'");
}

struct TrainConfig {
  ModelConfig model = ModelConfig::toy();
  double lr = 1e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  std::size_t max_steps = 0;  // 0 means no limit
  RoiSource roi_mode = RoiSource::cam;
  RoiTarget roi_target = RoiTarget::truth;
  std::size_t aux_epochs = 30;
  double aux_lr = 1e-3;
  std::filesystem::path cache_dir;       // empty: <out>/roi_cache
  std::filesystem::path checkpoint_dir;  // empty: the output directory

  // Desk-scale defaults.
  static TrainConfig toy() { return TrainConfig{}; }

  // Full-size defaults: 224 pixels, C = 64, batch 10, 80 epochs.
  static TrainConfig full() {
    TrainConfig c;
    c.model = ModelConfig{};
    c.batch_size = 10;
    c.epochs = 80;
    return c;
  }

  void validate() const {
    model.validate();
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (!(aux_lr > 0.0) || !std::isfinite(aux_lr)) throw ConfigError("aux_lr must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (roi_mode == RoiSource::cam && aux_epochs == 0) throw ConfigError("aux_epochs must be at least 1 for cam ROIs");
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    auto kv = model.to_kv();
    kv.erase("num_classes");
    kv.erase("image_channels");
    for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
    os << "lr = " << lr << '\n'
       << "batch_size = " << batch_size << '\n'
       << "epochs = " << epochs << '\n'
       << "max_steps = " << max_steps << '\n'
       << "roi_mode = " << to_string(roi_mode) << '\n'
       << "roi_target = " << to_string(roi_target) << '\n'
       << "aux_epochs = " << aux_epochs << '\n'
       << "aux_lr = " << aux_lr << '\n';
    if (!cache_dir.empty()) os << "cache_dir = " << cache_dir.string() << '\n';
    if (!checkpoint_dir.empty()) os << "checkpoint_dir = " << checkpoint_dir.string() << '\n';
    return os.str();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::uint64_t parse_unsigned(const std::string& v, const std::string& where) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos || v.size() > 19) {
    throw ConfigError(where + ": expected a non-negative integer, got '" + v + "'");
  }
  return std::stoull(v);
}

inline double parse_real(const std::string& v, const std::string& where) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected a number, got '" + v + "'");
  }
}

inline bool parse_flag(const std::string& v, const std::string& where) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError(where + ": expected 0, 1, true or false, got '" + v + "'");
}

}  // namespace detail

// Line-oriented `key = value`; '#' starts a comment. `profile = toy|full`
// may only appear before every other key. Unknown or repeated keys are errors.
inline TrainConfig parse_train_config(std::istream& in, const std::string& source) {
  TrainConfig c;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError(where + ": expected 'key = value'");
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    const std::string at = where + " (" + key + ")";
    if (key == "profile") {
      if (seen.size() != 1) throw ConfigError(where + ": 'profile' must precede every other key");
      if (value == "toy") {
        c = TrainConfig::toy();
      } else if (value == "full") {
        c = TrainConfig::full();
      } else {
        throw ConfigError(at + ": unknown profile '" + value + "'");
      }
    } else if (key == "image_size") {
      c.model.image_size = detail::parse_unsigned(value, at);
    } else if (key == "patch_size") {
      c.model.patch_size = detail::parse_unsigned(value, at);
    } else if (key == "base_width") {
      c.model.base_width = detail::parse_unsigned(value, at);
    } else if (key == "base_heads") {
      c.model.base_heads = detail::parse_unsigned(value, at);
    } else if (key == "stage_tb_counts") {
      c.model.stage_tb_counts = parse_stage_counts(value, at);
    } else if (key == "stage_db_counts") {
      c.model.stage_db_counts = parse_stage_counts(value, at);
    } else if (key == "seed") {
      c.model.seed = detail::parse_unsigned(value, at);
    } else if (key == "pest_only") {
      c.model.pest_only = detail::parse_flag(value, at);
    } else if (key == "zero_fusion_values") {
      c.model.zero_fusion_values = detail::parse_flag(value, at);
    } else if (key == "lr") {
      c.lr = detail::parse_real(value, at);
    } else if (key == "batch_size") {
      c.batch_size = detail::parse_unsigned(value, at);
    } else if (key == "epochs") {
      c.epochs = detail::parse_unsigned(value, at);
    } else if (key == "max_steps") {
      c.max_steps = detail::parse_unsigned(value, at);
    } else if (key == "roi_mode") {
      c.roi_mode = parse_roi_source(value);
    } else if (key == "roi_target") {
      c.roi_target = parse_roi_target(value);
    } else if (key == "aux_epochs") {
      c.aux_epochs = detail::parse_unsigned(value, at);
    } else if (key == "aux_lr") {
      c.aux_lr = detail::parse_real(value, at);
    } else if (key == "cache_dir") {
      c.cache_dir = value;
    } else if (key == "checkpoint_dir") {
      c.checkpoint_dir = value;
    } else {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  return parse_train_config(in, path.string());
}

// ---------------------------------------------------------------------------
// Training

// One model input: the Pest image, the rendered ROI-branch input and the label.
template <class T>
struct TrainSample {
  Tensor<T> pest;
  Tensor<T> roi;
  std::size_t label = 0;
};

template <class T>
std::vector<TrainSample<T>> make_samples(const RoiVit<T>& m, const std::vector<ImageTensor>& images,
                                         const std::vector<RoiMap>& rois, const std::vector<std::size_t>& labels,
                                         RoiSource mode) {
  if (images.size() != rois.size() || images.size() != labels.size()) {
    throw UsageError("make_samples: images, rois and labels differ in count");
  }
  std::vector<TrainSample<T>> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] >= m.config.num_classes) {
      throw DatasetError("label " + std::to_string(labels[i]) + " out of range for " +
                         std::to_string(m.config.num_classes) + " classes");
    }
    out.push_back({model_input<T>(images[i]), roi_branch_input(m, images[i], rois[i], mode), labels[i]});
  }
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;  // optimizer steps completed so far
  double mean_loss = 0.0;
  double train_accuracy = 0.0;  // running accuracy over the epoch's forwards
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;  // mean loss of each optimizer step's batch
  std::size_t steps = 0;
  bool loss_flagged = false;
  std::string loss_flag_detail;
};

// Means of consecutive non-overlapping windows of step losses must not
// increase. Returns a description of the first violation.
inline std::optional<std::string> loss_window_violation(const std::vector<double>& step_losses,
                                                        std::size_t window = 20) {
  std::vector<double> means;
  for (std::size_t start = 0; start + window <= step_losses.size(); start += window) {
    means.push_back(std::accumulate(step_losses.begin() + static_cast<std::ptrdiff_t>(start),
                                    step_losses.begin() + static_cast<std::ptrdiff_t>(start + window), 0.0) /
                    static_cast<double>(window));
  }
  for (std::size_t i = 1; i < means.size(); ++i) {
    if (means[i] > means[i - 1]) {
      std::ostringstream os;
      os << "mean loss of steps " << i * window << ".." << (i + 1) * window - 1 << " (" << means[i]
         << ") exceeds that of steps " << (i - 1) * window << ".." << i * window - 1 << " (" << means[i - 1] << ")";
      return os.str();
    }
  }
  return std::nullopt;
}

namespace detail {

template <class T>
std::string nan_diagnostics(const RoiVit<T>& m, std::size_t epoch, std::size_t step, std::size_t sample, double loss) {
  std::ostringstream os;
  os << "non-finite loss " << loss << " at epoch " << epoch << ", step " << step << ", sample " << sample << '\n';
  for (const auto& [name, p] : m.named_parameters()) {
    double sq = 0.0;
    std::size_t bad = 0;
    for (T v : p.data()) {
      if (!std::isfinite(static_cast<double>(v))) {
        ++bad;
      } else {
        sq += static_cast<double>(v) * static_cast<double>(v);
      }
    }
    os << "  " << name << " norm=" << std::sqrt(sq) << " non_finite=" << bad << '\n';
  }
  return os.str();
}

}  // namespace detail

// Minibatch Adam on softmax cross-entropy of the Pest-head logits. Each
// sample's loss, scaled by 1/batch, is backpropagated in turn so gradients
// accumulate to the batch mean. lr may be 0 here, leaving parameters unchanged.
template <class T>
TrainResult train_model(RoiVit<T>& m, const TrainConfig& cfg, const std::vector<TrainSample<T>>& data,
                        const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (data.empty()) throw DatasetError("no training samples");
  if (!(cfg.lr >= 0.0) || cfg.batch_size == 0) throw ConfigError("training needs lr >= 0 and batch_size >= 1");
  Adam<T> opt(m.trainable_parameters(), AdamSettings{cfg.lr});
  std::mt19937_64 rng(cfg.model.seed ^ 0x7472616eULL);
  std::vector<std::size_t> order(data.size());
  TrainResult r;
  bool stop = false;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_steps != 0 && r.steps >= cfg.max_steps) {
        stop = true;
        break;
      }
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const T inv = T(1) / static_cast<T>(end - start);
      opt.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = data[order[i]];
        auto logits = forward(m, s.pest, s.roi);
        auto loss = cross_entropy(logits, s.label);
        const double l = static_cast<double>(loss.item());
        if (!std::isfinite(l)) {
          throw NumericalError(detail::nan_diagnostics(m, epoch, r.steps, order[i], l));
        }
        batch_loss += l;
        correct += argmax(logits) == s.label ? 1 : 0;
        ++seen;
        backward(scale(loss, inv));
      }
      opt.step();
      ++r.steps;
      loss_sum += batch_loss;
      r.step_losses.push_back(batch_loss / static_cast<double>(end - start));
    }
    if (seen == 0) break;
    EpochRecord rec{epoch, r.steps, loss_sum / static_cast<double>(seen),
                    static_cast<double>(correct) / static_cast<double>(seen)};
    r.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (auto v = loss_window_violation(r.step_losses)) {
    r.loss_flagged = true;
    r.loss_flag_detail = *v;
  }
  return r;
}

struct EvalResult {
  ConfusionMatrix cm{1};
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (actual, predicted) per sample
  MetricReport report;
};

template <class T>
EvalResult evaluate_model(const RoiVit<T>& m, const std::vector<TrainSample<T>>& data) {
  NoGradGuard no_grad;
  EvalResult r;
  r.cm = ConfusionMatrix(m.config.num_classes);
  for (const auto& s : data) {
    const std::size_t pred = argmax(forward(m, s.pest, s.roi));
    r.cm.accumulate(s.label, pred);
    r.pairs.emplace_back(s.label, pred);
  }
  r.report = report(r.cm);
  return r;
}

// ---------------------------------------------------------------------------
// ROI providers

struct RoiProvider {
  RoiSource mode = RoiSource::seg;
  std::string hash;  // identifies generator and target policy
  RoiGeneratorFn generate;
};

// cam: Score-CAM over `aux` targeting the label or the prediction.
// seg: the threshold segmenter.
inline RoiProvider make_roi_provider(RoiSource mode, RoiTarget target, const AuxCnn* aux) {
  if (mode == RoiSource::seg) {
    return {mode, "threshold-segmenter-1",
            [](const ImageTensor& img, std::size_t) { return segment(img, ThresholdSegmenter{}); }};
  }
  if (!aux) throw GeneratorError("cam ROIs need an auxiliary classifier");
  return {mode, "score-cam-1:" + aux->digest() + ":" + to_string(target),
          [aux, target](const ImageTensor& img, std::size_t label) {
            return score_cam(img, *aux, target == RoiTarget::truth ? std::optional<std::size_t>(label) : std::nullopt);
          }};
}

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointInfo {
  std::vector<std::string> class_names;
  RoiSource roi_mode = RoiSource::cam;
  std::size_t epoch = 0;
};

struct LoadedCheckpoint {
  RoiVit<float> model;
  CheckpointInfo info;
  std::optional<AuxCnn> aux;
  std::string config_hash;
};

inline ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv, const std::string& where) {
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError(where + ": missing model setting '" + k + "'");
    return it->second;
  };
  try {
    ModelConfig c;
    c.image_size = detail::parse_unsigned(get("image_size"), where);
    c.patch_size = detail::parse_unsigned(get("patch_size"), where);
    c.base_width = detail::parse_unsigned(get("base_width"), where);
    c.base_heads = detail::parse_unsigned(get("base_heads"), where);
    c.stage_tb_counts = parse_stage_counts(get("stage_tb_counts"), where);
    c.stage_db_counts = parse_stage_counts(get("stage_db_counts"), where);
    c.num_classes = detail::parse_unsigned(get("num_classes"), where);
    c.seed = detail::parse_unsigned(get("seed"), where);
    c.image_channels = detail::parse_unsigned(get("image_channels"), where);
    c.pest_only = detail::parse_flag(get("pest_only"), where);
    c.zero_fusion_values = detail::parse_flag(get("zero_fusion_values"), where);
    c.validate();
    return c;
  } catch (const ConfigError& e) {
    throw FormatError(std::string(e.what()));
  }
}

inline std::string join_names(const std::vector<std::string>& names) {
  std::string s;
  for (std::size_t i = 0; i < names.size(); ++i) s += (i ? "," : "") + names[i];
  return s;
}

inline void save_checkpoint(const std::filesystem::path& manifest, const RoiVit<float>& m, const CheckpointInfo& info,
                            const AuxCnn* aux) {
  if (info.class_names.size() != m.config.num_classes) {
    throw UsageError("checkpoint needs one class name per model class");
  }
  TensorArchive a;
  a.meta["format"] = "roivit-checkpoint-1";
  a.meta["config_hash"] = m.config.hash();
  for (const auto& [k, v] : m.config.to_kv()) a.meta["config." + k] = v;
  a.meta["class_names"] = join_names(info.class_names);
  a.meta["roi_mode"] = to_string(info.roi_mode);
  a.meta["epoch"] = std::to_string(info.epoch);
  for (const auto& [name, t] : m.named_parameters()) a.tensors.emplace_back(name, t.detach());
  if (aux) aux->append_to(a);
  save_archive(manifest, a);
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& manifest) {
  const auto a = load_archive(manifest);
  const std::string where = manifest.string();
  if (auto it = a.meta.find("format"); it == a.meta.end() || it->second != "roivit-checkpoint-1") {
    throw FormatError(where + ": not a roivit checkpoint");
  }
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : a.meta) {
    if (k.rfind("config.", 0) == 0) kv[k.substr(7)] = v;
  }
  LoadedCheckpoint ck;
  const auto cfg = model_config_from_kv(kv, where);
  ck.config_hash = a.meta_value("config_hash");
  if (cfg.hash() != ck.config_hash) throw FormatError(where + ": config hash does not match the stored settings");
  ck.model = build<float>(cfg);
  std::set<std::string> model_names;
  for (auto& [name, p] : ck.model.named_parameters()) {
    model_names.insert(name);
    const auto& stored = a.tensor(name);
    if (stored.shape() != p.shape()) {
      throw FormatError(where + ": tensor '" + name + "' has shape " + shape_str(stored.shape()) + ", model expects " +
                        shape_str(p.shape()));
    }
    std::copy(stored.data().begin(), stored.data().end(), p.mutable_data().begin());
  }
  bool has_aux = false;
  for (const auto& [name, t] : a.tensors) {
    if (name.rfind("aux.", 0) == 0) {
      has_aux = true;
    } else if (!model_names.count(name)) {
      throw FormatError(where + ": unexpected tensor '" + name + "'");
    }
  }
  if (has_aux) ck.aux = AuxCnn::from_archive(a);
  std::stringstream names(a.meta_value("class_names"));
  for (std::string n; std::getline(names, n, ',');) ck.info.class_names.push_back(n);
  if (ck.info.class_names.size() != cfg.num_classes) {
    throw FormatError(where + ": " + std::to_string(ck.info.class_names.size()) + " class names for " +
                      std::to_string(cfg.num_classes) + " classes");
  }
  try {
    ck.info.roi_mode = parse_roi_source(a.meta_value("roi_mode"));
  } catch (const ConfigError& e) {
    throw FormatError(where + ": " + e.what());
  }
  ck.info.epoch = detail::parse_unsigned(a.meta_value("epoch"), where);
  return ck;
}

// ---------------------------------------------------------------------------
// Saliency

// A trained model seen as an auxiliary classifier: scores are its logits and
// the activation stack is the final Pest patch grid [8C, rows, cols]. The ROI
// branch input stays fixed while the Pest image varies.
class RoiVitScorer : public AuxiliaryClassifier {
 public:
  RoiVitScorer(const RoiVit<float>& m, Tensor<float> roi_input) : m_(m), roi_(std::move(roi_input)) {}

  std::size_t num_classes() const override { return m_.config.num_classes; }

  std::vector<double> scores(const ImageTensor& img) const override {
    NoGradGuard no_grad;
    const auto logits = forward(m_, model_input<float>(img), roi_);
    return {logits.data().begin(), logits.data().end()};
  }

  Tensor<double> activations(const ImageTensor& img) const override {
    NoGradGuard no_grad;
    const auto r = forward_with_traces(m_, model_input<float>(img), roi_, false);
    const auto& fin = r.pest_final;
    return reshape(transpose_last2(fin.patches), {fin.width(), fin.rows, fin.cols}).cast<double>();
  }

 private:
  const RoiVit<float>& m_;
  Tensor<float> roi_;
};

// ROI map of one image at inference: cam uses the predicted class.
inline RoiMap inference_roi(const LoadedCheckpoint& ck, const ImageTensor& img, RoiSource mode) {
  if (mode == RoiSource::cam && !ck.aux) throw FormatError("checkpoint holds no auxiliary classifier for cam ROIs");
  return make_roi_provider(mode, RoiTarget::predicted, ck.aux ? &*ck.aux : nullptr).generate(img, 0);
}

// Score-CAM of the trained model over `original`, blended onto it at its own size.
inline ImageTensor saliency_image(const LoadedCheckpoint& ck, const ImageTensor& original,
                                  ScoreCamState* state = nullptr) {
  const std::size_t size = ck.model.config.image_size;
  const auto img = resize_nearest(original, size, size);
  const auto roi = inference_roi(ck, img, ck.info.roi_mode);
  const RoiVitScorer scorer(ck.model, roi_branch_input(ck.model, img, roi, ck.info.roi_mode));
  auto cam = score_cam(img, scorer, std::nullopt, state);
  NoGradGuard no_grad;
  auto full = upsample_bilinear(cam.values, original.height, original.width);
  return render_roi_input(RoiMap{full, RoiSource::cam}, original, RoiSource::cam);
}

inline void export_saliency(const std::filesystem::path& ckpt, const std::filesystem::path& image,
                            const std::filesystem::path& out) {
  const auto ck = load_checkpoint(ckpt);
  auto original = read_ppm(image);
  original.clamp();
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  write_ppm(out, saliency_image(ck, original));
}

// ---------------------------------------------------------------------------
// End-to-end runs

struct TrainRun {
  TrainResult result;
  RoiCacheStats cache;
  std::filesystem::path checkpoint;
  std::size_t samples = 0;
};

inline std::vector<RoiJob> roi_jobs(const DatasetIndex& index, const std::vector<ImageTensor>& images) {
  std::vector<RoiJob> jobs;
  for (std::size_t i = 0; i < index.size(); ++i) {
    jobs.push_back({index.entries[i].rel_path, &images[i], index.entries[i].label});
  }
  return jobs;
}

inline std::vector<std::size_t> dataset_labels(const DatasetIndex& index) {
  std::vector<std::size_t> labels;
  for (const auto& e : index.entries) labels.push_back(e.label);
  return labels;
}

// Loads the data, builds (or reuses) the ROI cache, trains, and writes
// model.manifest/model.bin after every epoch plus train_log.txt.
inline TrainRun run_training(const TrainConfig& cfg_in, const std::filesystem::path& data_dir,
                             const std::filesystem::path& out_dir, std::ostream& progress) {
  TrainConfig cfg = cfg_in;
  const auto index = load_dataset(data_dir);
  cfg.model.num_classes = index.class_names.size();
  cfg.validate();
  const auto ckpt_dir = cfg.checkpoint_dir.empty() ? out_dir : cfg.checkpoint_dir;
  const auto cache_dir = cfg.cache_dir.empty() ? out_dir / "roi_cache" : cfg.cache_dir;
  std::filesystem::create_directories(ckpt_dir);
  const auto images = load_images(index, cfg.model.image_size);
  const auto labels = dataset_labels(index);

  std::optional<AuxCnn> aux;
  if (cfg.roi_mode == RoiSource::cam) {
    aux = AuxCnn(3, cfg.model.num_classes, cfg.model.seed);
    const double aux_loss = train_aux(*aux, images, labels,
                                      AuxTrainSettings{cfg.aux_epochs, cfg.batch_size, cfg.aux_lr, cfg.model.seed});
    progress << "auxiliary classifier trained: final loss " << aux_loss << '\n';
  }
  const auto provider = make_roi_provider(cfg.roi_mode, cfg.roi_target, aux ? &*aux : nullptr);
  TrainRun run;
  const auto rois = precompute_rois(roi_jobs(index, images), cfg.roi_mode, provider.hash, provider.generate, cache_dir,
                                    &run.cache);
  progress << "roi cache: " << run.cache.hits << " hits, " << run.cache.misses << " generated\n";

  auto model = build<float>(cfg.model);
  const auto samples = make_samples(model, images, rois, labels, cfg.roi_mode);
  run.samples = samples.size();
  run.checkpoint = ckpt_dir / "model.manifest";
  std::ofstream log(ckpt_dir / "train_log.txt");
  if (!log) throw FormatError((ckpt_dir / "train_log.txt").string() + ": cannot open for writing");
  log << std::setprecision(10);
  log << "# config hash " << cfg.model.hash() << '\n' << cfg.to_text();
  try {
    run.result = train_model(model, cfg, samples, [&](const EpochRecord& e) {
      save_checkpoint(run.checkpoint, model, {index.class_names, cfg.roi_mode, e.epoch}, aux ? &*aux : nullptr);
      log << "epoch=" << e.epoch << " steps=" << e.steps << " mean_loss=" << e.mean_loss
          << " train_accuracy=" << e.train_accuracy << '\n';
      log.flush();
      progress << "epoch " << e.epoch << "  steps " << e.steps << "  loss " << e.mean_loss << "  train acc "
               << e.train_accuracy << '\n';
    });
  } catch (const NumericalError& e) {
    std::ofstream diag(ckpt_dir / "nan_diagnostics.txt");
    diag << e.what();
    throw;
  }
  if (run.result.loss_flagged) {
    log << "flag: loss not monotone over 20-step windows: " << run.result.loss_flag_detail << '\n';
    progress << "flag: loss not monotone over 20-step windows: " << run.result.loss_flag_detail << '\n';
  } else {
    log << "loss windows monotone\n";
  }
  return run;
}

struct EvalRun {
  EvalResult eval;
  std::vector<std::string> class_names;
};

// Evaluates a checkpoint on a dataset with freshly generated inference ROIs.
inline EvalRun run_evaluation(const std::filesystem::path& ckpt, const std::filesystem::path& data_dir,
                              RoiSource mode) {
  const auto ck = load_checkpoint(ckpt);
  const auto index = load_dataset(data_dir);
  if (index.class_names != ck.info.class_names) {
    throw DatasetError(data_dir.string() + ": classes {" + join_names(index.class_names) +
                       "} differ from the checkpoint's {" + join_names(ck.info.class_names) + "}");
  }
  const auto images = load_images(index, ck.model.config.image_size);
  std::vector<RoiMap> rois;
  for (const auto& img : images) rois.push_back(inference_roi(ck, img, mode));
  const auto samples = make_samples(ck.model, images, rois, dataset_labels(index), mode);
  return {evaluate_model(ck.model, samples), ck.info.class_names};
}

}  // namespace roivit
