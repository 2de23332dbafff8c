#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "roivit/errors.hpp"
#include "roivit/image.hpp"

namespace roivit {

// easy: large class-coloured shapes over mildly textured noise.
// cluttered: small shapes of random colour, area bounded by
// max_area_fraction, over strong noise and random distractor strokes.
enum class SyntheticVariant { easy, cluttered };

struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t per_class = 10;
  std::size_t image_size = 32;
  SyntheticVariant variant = SyntheticVariant::easy;
  double max_area_fraction = 0.10;
  std::uint64_t seed = 0;
};

struct SyntheticSample {
  ImageTensor image;
  Tensor<float> mask;  // [H, W], 1 on shape pixels
  std::size_t label = 0;
  std::string class_name;
  std::string file_name;
};

inline constexpr std::array<const char*, 6> kSyntheticShapes{"circle", "square", "triangle", "cross", "ring", "diamond"};

// Directory names sort in label order.
inline std::string synthetic_class_name(std::size_t label) {
  return std::to_string(label) + "_" + kSyntheticShapes.at(label);
}

namespace detail {

// Membership of (dx, dy), offsets from the shape centre, in shape `label` of radius r.
inline bool inside_shape(std::size_t label, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (label) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return ax <= 0.8 * r && ay <= 0.8 * r;
    case 2: {
      // apex up at (0, -r), base from (-r, 0.8r) to (r, 0.8r)
      if (dy < -r || dy > 0.8 * r) return false;
      return ax <= (dy + r) / 1.8;
    }
    case 3:
      return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);
    case 4: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    default:
      return ax + ay <= r;
  }
}

inline std::array<float, 3> class_color(std::size_t label) {
  static constexpr std::array<std::array<float, 3>, 6> palette{{{0.9f, 0.15f, 0.1f},
                                                                 {0.1f, 0.8f, 0.2f},
                                                                 {0.15f, 0.25f, 0.95f},
                                                                 {0.95f, 0.9f, 0.1f},
                                                                 {0.85f, 0.2f, 0.85f},
                                                                 {0.1f, 0.85f, 0.85f}}};
  return palette.at(label);
}

inline void textured_background(ImageTensor& img, std::mt19937_64& rng, double noise, double stripe) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, noise);
  const double base = 0.3 + 0.3 * u(rng);
  const double theta = std::numbers::pi * u(rng), wavelength = 3.0 + 5.0 * u(rng);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = 0.1 * (u(rng) - 0.5);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double s = stripe * std::sin(2.0 * std::numbers::pi *
                                         (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) /
                                         wavelength);
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(base + tint[c] + s + n(rng));
    }
  }
}

// Random-colour strokes and blobs that are not any class shape.
inline void draw_clutter(ImageTensor& img, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double size = static_cast<double>(img.width);
  const int strokes = 6 + static_cast<int>(u(rng) * 6);
  for (int s = 0; s < strokes; ++s) {
    const std::array<float, 3> col{static_cast<float>(u(rng)), static_cast<float>(u(rng)), static_cast<float>(u(rng))};
    const double x0 = u(rng) * size, y0 = u(rng) * size;
    const double angle = 2.0 * std::numbers::pi * u(rng), len = 0.15 * size + 0.25 * size * u(rng);
    if (u(rng) < 0.5) {
      // thin line segment
      for (double t = 0; t <= len; t += 0.5) {
        const auto x = static_cast<long>(x0 + t * std::cos(angle)), y = static_cast<long>(y0 + t * std::sin(angle));
        if (x < 0 || y < 0 || x >= static_cast<long>(img.width) || y >= static_cast<long>(img.height)) continue;
        for (std::size_t c = 0; c < 3; ++c) img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = col[c];
      }
    } else {
      // speckle blob: scattered pixels around a centre
      const int dots = 8 + static_cast<int>(u(rng) * 12);
      std::normal_distribution<double> spread(0.0, 0.05 * size);
      for (int d = 0; d < dots; ++d) {
        const auto x = static_cast<long>(x0 + spread(rng)), y = static_cast<long>(y0 + spread(rng));
        if (x < 0 || y < 0 || x >= static_cast<long>(img.width) || y >= static_cast<long>(img.height)) continue;
        for (std::size_t c = 0; c < 3; ++c) img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = col[c];
      }
    }
  }
}

inline std::vector<float> shape_mask(std::size_t label, double cx, double cy, double r, std::size_t size) {
  std::vector<float> mask(size * size, 0.0f);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
      if (inside_shape(label, dx, dy, r)) mask[y * size + x] = 1.0f;
    }
  }
  return mask;
}

}  // namespace detail

// Deterministic for a given spec on a given platform. Samples are ordered by
// class, then index.
inline std::vector<SyntheticSample> generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.classes > kSyntheticShapes.size()) {
    throw ConfigError("synthetic data supports 1 to " + std::to_string(kSyntheticShapes.size()) + " classes");
  }
  if (spec.image_size < 8) throw ConfigError("synthetic images must be at least 8 pixels wide");
  if (spec.max_area_fraction <= 0.0 || spec.max_area_fraction > 1.0) {
    throw ConfigError("max_area_fraction must lie in (0, 1]");
  }
  const bool clutter = spec.variant == SyntheticVariant::cluttered;
  const double size = static_cast<double>(spec.image_size);
  std::mt19937_64 rng(spec.seed ^ 0x73796e74ULL);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SyntheticSample> out;
  for (std::size_t label = 0; label < spec.classes; ++label) {
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      SyntheticSample s;
      s.label = label;
      s.class_name = synthetic_class_name(label);
      char name[32];
      std::snprintf(name, sizeof name, "img_%04zu.ppm", i);
      s.file_name = name;
      s.image = ImageTensor(3, spec.image_size, spec.image_size);
      detail::textured_background(s.image, rng, clutter ? 0.12 : 0.05, clutter ? 0.12 : 0.06);
      if (clutter) detail::draw_clutter(s.image, rng);
      double r = size * (clutter ? 0.15 + 0.04 * u(rng) : 0.25 + 0.1 * u(rng));
      const double margin = r + 1.0;
      const double cx = margin + (size - 2.0 * margin) * u(rng), cy = margin + (size - 2.0 * margin) * u(rng);
      std::vector<float> mask = detail::shape_mask(label, cx, cy, r, spec.image_size);
      auto area = [&] { return static_cast<double>(std::count(mask.begin(), mask.end(), 1.0f)); };
      while (clutter && area() > spec.max_area_fraction * size * size) {
        r *= 0.9;
        mask = detail::shape_mask(label, cx, cy, r, spec.image_size);
      }
      std::array<float, 3> color = detail::class_color(label);
      if (clutter) {
        for (auto& c : color) c = static_cast<float>(u(rng));
      } else {
        for (auto& c : color) c = std::clamp(c + static_cast<float>(0.1 * (u(rng) - 0.5)), 0.0f, 1.0f);
      }
      for (std::size_t p = 0; p < mask.size(); ++p) {
        if (mask[p] == 0.0f) continue;
        for (std::size_t c = 0; c < 3; ++c) s.image.values[c * mask.size() + p] = color[c];
      }
      s.image.clamp();
      s.mask = Tensor<float>({spec.image_size, spec.image_size}, std::move(mask));
      out.push_back(std::move(s));
    }
  }
  return out;
}

// dir/<class>/<file>.ppm for every sample.
inline void write_synthetic(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples) {
  for (const auto& s : samples) {
    std::filesystem::create_directories(dir / s.class_name);
    write_ppm(dir / s.class_name / s.file_name, s.image);
  }
}

}  // namespace roivit
