#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "roivit/attention.hpp"
#include "roivit/hash.hpp"
#include "roivit/image.hpp"
#include "roivit/patch_embed.hpp"

namespace roivit {

inline constexpr std::size_t kStages = 4;

// Token grid and width of one stage's output.
struct StageShape {
  std::size_t rows = 0, cols = 0;
  std::size_t width = 0;
  std::size_t heads = 0;
  std::size_t tokens() const { return rows * cols; }
  friend bool operator==(const StageShape&, const StageShape&) = default;
};

struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 4;
  std::size_t base_width = 64;
  std::size_t base_heads = 1;
  std::array<std::size_t, kStages> stage_tb_counts{1, 2, 10, 1};
  std::array<std::size_t, kStages> stage_db_counts{1, 1, 1, 1};
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;
  std::size_t image_channels = 3;
  // Single-branch control: ROI branch and fusions are skipped entirely.
  bool pest_only = false;
  // Freezes every fusion value projection at zero, cutting the only path by
  // which the ROI branch can influence the Pest branch.
  bool zero_fusion_values = false;

  static ModelConfig toy() {
    ModelConfig c;
    c.image_size = 32;
    c.base_width = 16;
    c.stage_tb_counts = {1, 1, 2, 1};
    return c;
  }

  std::vector<StageShape> schedule() const {
    validate();
    std::vector<StageShape> out;
    std::size_t grid = image_size / patch_size;
    for (std::size_t s = 0; s < kStages; ++s) {
      if (s > 0) grid = conv_out_extent(grid, PoolingSpec::kernel, 2, PoolingSpec::padding);
      out.push_back({grid, grid, base_width << s, base_heads << s});
    }
    return out;
  }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                        std::to_string(patch_size));
    }
    // each downsampling must halve the grid exactly (or keep a 1x1 grid)
    std::size_t grid = image_size / patch_size;
    for (std::size_t s = 1; s < kStages; ++s) {
      if (grid > 1 && grid % 2 != 0) {
        throw ConfigError("image_size " + std::to_string(image_size) + ": stage-" + std::to_string(s) + " grid " +
                          std::to_string(grid) + " cannot be halved");
      }
      grid = grid > 1 ? grid / 2 : 1;
    }
    if (base_width == 0 || base_heads == 0 || base_width % base_heads != 0) {
      throw ConfigError("base_width must be a positive multiple of base_heads");
    }
    if (num_classes == 0) throw ConfigError("num_classes must be positive");
    if (image_channels != 1 && image_channels != 3) throw ConfigError("image_channels must be 1 or 3");
    for (std::size_t s = 0; s < kStages; ++s) {
      if (stage_tb_counts[s] + stage_db_counts[s] == 0) {
        throw ConfigError("stage " + std::to_string(s + 1) + " has no blocks");
      }
    }
  }

  std::map<std::string, std::string> to_kv() const {
    auto list = [](const std::array<std::size_t, kStages>& a) {
      std::string s;
      for (std::size_t i = 0; i < a.size(); ++i) s += (i ? "," : "") + std::to_string(a[i]);
      return s;
    };
    return {{"image_size", std::to_string(image_size)},
            {"patch_size", std::to_string(patch_size)},
            {"base_width", std::to_string(base_width)},
            {"base_heads", std::to_string(base_heads)},
            {"stage_tb_counts", list(stage_tb_counts)},
            {"stage_db_counts", list(stage_db_counts)},
            {"num_classes", std::to_string(num_classes)},
            {"seed", std::to_string(seed)},
            {"image_channels", std::to_string(image_channels)},
            {"pest_only", pest_only ? "1" : "0"},
            {"zero_fusion_values", zero_fusion_values ? "1" : "0"}};
  }

  std::string hash() const {
    Fnv1a h;
    for (const auto& [k, v] : to_kv()) h.update(k).update("=").update(v).update("\n");
    return h.hex();
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline std::array<std::size_t, kStages> parse_stage_counts(const std::string& text, const std::string& key) {
  std::array<std::size_t, kStages> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= kStages) throw ConfigError(key + ": expected " + std::to_string(kStages) + " comma-separated counts");
    try {
      std::size_t used = 0;
      const auto v = std::stoul(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out[i++] = v;
    } catch (const std::exception&) {
      throw ConfigError(key + ": bad count '" + item + "'");
    }
  }
  if (i != kStages) throw ConfigError(key + ": expected " + std::to_string(kStages) + " comma-separated counts");
  return out;
}

// Per-DB record of the two cross-attention calls.
template <class T>
struct FusionTrace {
  std::size_t stage = 0;
  AttentionTrace<T> pest;
  AttentionTrace<T> roi;
};

template <class T>
struct ForwardResult {
  Tensor<T> logits;                        // [K]
  std::vector<StageShape> stage_shapes;    // observed after each stage
  std::vector<std::size_t> cls_widths;     // observed CLS width after each stage
  TokenSequence<T> pest_final;
  std::vector<AttentionTrace<T>> block_traces;  // every MHPA call, both branches
  std::vector<FusionTrace<T>> fusion_traces;
};

template <class T>
struct RoiVit {
  ModelConfig config;
  PatchEmbedding<T> pest_embed, roi_embed;
  std::array<std::vector<BlockParams<T>>, kStages> pest_blocks, roi_blocks;
  std::array<std::vector<FusionParams<T>>, kStages> pest_fusion, roi_fusion;
  Tensor<T> head_w;  // [8C, K]
  Tensor<T> head_b;  // [K]

  NamedTensors<T> named_parameters() const {
    NamedTensors<T> out;
    for (auto& p : pest_embed.parameters("pest.embed")) out.push_back(p);
    for (std::size_t s = 0; s < kStages; ++s) {
      for (std::size_t b = 0; b < pest_blocks[s].size(); ++b) {
        pest_blocks[s][b].append_to(out, block_name("pest", s, b));
      }
    }
    for (auto& p : roi_embed.parameters("roi.embed")) out.push_back(p);
    for (std::size_t s = 0; s < kStages; ++s) {
      for (std::size_t b = 0; b < roi_blocks[s].size(); ++b) roi_blocks[s][b].append_to(out, block_name("roi", s, b));
    }
    for (std::size_t s = 0; s < kStages; ++s) {
      for (std::size_t j = 0; j < pest_fusion[s].size(); ++j) {
        pest_fusion[s][j].append_to(out, fusion_name("pest", s, j));
        roi_fusion[s][j].append_to(out, fusion_name("roi", s, j));
      }
    }
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    return out;
  }

  // Parameters the optimizer updates (frozen tensors excluded).
  NamedTensors<T> trainable_parameters() const {
    NamedTensors<T> out;
    for (auto& p : named_parameters()) {
      if (p.second.requires_grad()) out.push_back(p);
    }
    return out;
  }

  static std::string block_name(const std::string& branch, std::size_t s, std::size_t b) {
    return branch + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
  }
  static std::string fusion_name(const std::string& branch, std::size_t s, std::size_t j) {
    return "fusion.stage" + std::to_string(s + 1) + ".db" + std::to_string(j) + "." + branch;
  }
};

// Deterministic construction: every tensor is drawn from a generator keyed by
// (seed, tensor name).
template <class T>
RoiVit<T> build(const ModelConfig& config) {
  const auto plan = config.schedule();
  RoiVit<T> m;
  m.config = config;
  const std::uint64_t seed = config.seed;
  m.pest_embed = PatchEmbedding<T>::create(config.image_channels, config.base_width, config.patch_size,
                                           config.image_size, seed, "pest.embed");
  m.roi_embed = PatchEmbedding<T>::create(3, config.base_width, config.patch_size, config.image_size, seed, "roi.embed");
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::size_t blocks = config.stage_tb_counts[s] + config.stage_db_counts[s];
    for (std::size_t b = 0; b < blocks; ++b) {
      const bool transition = s > 0 && b == 0;
      const std::size_t c_in = transition ? plan[s - 1].width : plan[s].width;
      const PoolingSpec pooling{transition ? 2u : 1u, transition ? 2u : 1u};
      m.pest_blocks[s].push_back(BlockParams<T>::create(c_in, plan[s].width, plan[s].heads, pooling, seed,
                                                        RoiVit<T>::block_name("pest", s, b)));
      m.roi_blocks[s].push_back(BlockParams<T>::create(c_in, plan[s].width, plan[s].heads, pooling, seed,
                                                       RoiVit<T>::block_name("roi", s, b)));
    }
    for (std::size_t j = 0; j < config.stage_db_counts[s]; ++j) {
      m.pest_fusion[s].push_back(
          FusionParams<T>::create(plan[s].width, plan[s].heads, seed, RoiVit<T>::fusion_name("pest", s, j)));
      m.roi_fusion[s].push_back(
          FusionParams<T>::create(plan[s].width, plan[s].heads, seed, RoiVit<T>::fusion_name("roi", s, j)));
      if (config.zero_fusion_values) {
        for (auto* f : {&m.pest_fusion[s].back(), &m.roi_fusion[s].back()}) {
          f->w_v = Tensor<T>::zeros(f->w_v.shape());
        }
      }
    }
  }
  m.head_w = truncated_normal<T>({plan.back().width, config.num_classes}, 0.02, seed, "head.w");
  m.head_b = parameter_full<T>({config.num_classes}, T(0));
  return m;
}

template <class T>
ForwardResult<T> forward_with_traces(const RoiVit<T>& m, const Tensor<T>& pest_image, const Tensor<T>& roi_image,
                                     bool keep_traces = true) {
  const auto& cfg = m.config;
  const bool dual = !cfg.pest_only;
  ForwardResult<T> r;
  auto pest = tokenize(pest_image, m.pest_embed);
  TokenSequence<T> roi;
  if (dual) {
    if (roi_image.rank() != 3 || roi_image.dim(1) != pest_image.dim(1) || roi_image.dim(2) != pest_image.dim(2)) {
      throw ShapeError("forward: roi input " + shape_str(roi_image.shape()) + " vs pest input " +
                       shape_str(pest_image.shape()));
    }
    roi = tokenize(roi_image, m.roi_embed);
  }
  auto block_trace = [&]() -> AttentionTrace<T>* {
    if (!keep_traces) return nullptr;
    r.block_traces.emplace_back();
    return &r.block_traces.back();
  };
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::size_t tb = cfg.stage_tb_counts[s];
    const std::size_t total = tb + cfg.stage_db_counts[s];
    for (std::size_t b = 0; b < total; ++b) {
      pest = transformer_block(pest, m.pest_blocks[s][b], block_trace());
      if (!dual) continue;
      roi = transformer_block(roi, m.roi_blocks[s][b], block_trace());
      if (b >= tb) {
        const std::size_t j = b - tb;
        FusionTrace<T> ft;
        ft.stage = s;
        auto fused = cross_attention_fuse(pest, roi, m.pest_fusion[s][j], m.roi_fusion[s][j],
                                          keep_traces ? &ft.pest : nullptr, keep_traces ? &ft.roi : nullptr);
        pest = std::move(fused.pest);
        roi = std::move(fused.roi);
        if (keep_traces) r.fusion_traces.push_back(std::move(ft));
      }
    }
    r.stage_shapes.push_back({pest.rows, pest.cols, pest.width(), m.pest_blocks[s].front().attn.heads});
    r.cls_widths.push_back(pest.cls.dim(1));
  }
  r.logits = reshape(linear(pest.cls, m.head_w, m.head_b), {cfg.num_classes});
  r.pest_final = std::move(pest);
  return r;
}

template <class T>
Tensor<T> forward(const RoiVit<T>& m, const Tensor<T>& pest_image, const Tensor<T>& roi_image) {
  return forward_with_traces(m, pest_image, roi_image, false).logits;
}

// Network input for an image in [0,1]: values mapped affinely onto [-1,1].
template <class T>
Tensor<T> model_input(const ImageTensor& img) {
  auto t = img.to_tensor<T>();
  for (auto& v : t.mutable_data()) v = (v - T(0.5)) * T(2);
  return t;
}

// ROI-branch input for a given map: cam blends with the image, seg
// replicates the map across the branch's input channels. Mapped like model_input.
template <class T>
Tensor<T> roi_branch_input(const RoiVit<T>& m, const ImageTensor& pest, const RoiMap& roi, RoiSource mode) {
  return model_input<T>(render_roi_input(roi, pest, mode, m.roi_embed.channels()));
}

template <class T>
Tensor<T> forward(const RoiVit<T>& m, const ImageTensor& pest, const RoiMap& roi, RoiSource mode) {
  return forward(m, pest.to_tensor<T>(), roi_branch_input(m, pest, roi, mode));
}

template <class T>
ForwardResult<T> forward_with_traces(const RoiVit<T>& m, const ImageTensor& pest, const RoiMap& roi, RoiSource mode) {
  return forward_with_traces(m, pest.to_tensor<T>(), roi_branch_input(m, pest, roi, mode), true);
}

// Index of the largest logit; the lowest index wins ties.
template <class T>
std::size_t argmax(const Tensor<T>& logits) {
  std::size_t best = 0;
  auto d = logits.data();
  for (std::size_t i = 1; i < d.size(); ++i) {
    if (d[i] > d[best]) best = i;
  }
  return best;
}

}  // namespace roivit
