#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "roivit/errors.hpp"
#include "roivit/tensor.hpp"

namespace roivit {

// Planar [channels, height, width] image with values in [0, 1].
struct ImageTensor {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;

  ImageTensor() = default;
  ImageTensor(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), values(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }

  void clamp() {
    for (auto& v : values) v = std::clamp(v, 0.0f, 1.0f);
  }

  template <class T>
  Tensor<T> to_tensor() const {
    return Tensor<T>({channels, height, width}, std::vector<T>(values.begin(), values.end()));
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

enum class RoiSource { cam, seg };

inline std::string to_string(RoiSource s) { return s == RoiSource::cam ? "cam" : "seg"; }

inline RoiSource parse_roi_source(const std::string& s) {
  if (s == "cam") return RoiSource::cam;
  if (s == "seg") return RoiSource::seg;
  throw ConfigError("roi mode must be 'cam' or 'seg', got '" + s + "'");
}

// Single-channel spatial attention map over the image plane, values in [0, 1].
struct RoiMap {
  Tensor<float> values;  // [H, W]
  RoiSource source = RoiSource::seg;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  float at(std::size_t y, std::size_t x) const { return values[y * width() + x]; }
};

inline float luminance(const ImageTensor& img, std::size_t y, std::size_t x) {
  if (img.channels >= 3) {
    return 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
  }
  return img.at(0, y, x);
}

// Blue -> cyan -> green -> yellow -> red, piecewise linear in v.
inline std::array<float, 3> jet_color(float v) {
  v = std::clamp(v, 0.0f, 1.0f);
  const float r = std::clamp(4.0f * v - 2.0f, 0.0f, 1.0f);
  const float g = v < 0.5f ? std::clamp(4.0f * v, 0.0f, 1.0f) : std::clamp(4.0f - 4.0f * v, 0.0f, 1.0f);
  const float b = std::clamp(2.0f - 4.0f * v, 0.0f, 1.0f);
  return {r, g, b};
}

// Builds the ROI-branch input. cam: 0.5 * image + 0.5 * jet(roi), 3 channels.
// seg: the map itself replicated to seg_channels.
inline ImageTensor render_roi_input(const RoiMap& roi, const ImageTensor& img, RoiSource mode,
                                    std::size_t seg_channels = 1) {
  if (roi.values.rank() != 2 || roi.height() != img.height || roi.width() != img.width) {
    throw ShapeError("render_roi_input: roi " + shape_str(roi.values.shape()) + " vs image " +
                     std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  const std::size_t h = img.height, w = img.width;
  if (mode == RoiSource::seg) {
    ImageTensor out(seg_channels, h, w);
    for (std::size_t c = 0; c < seg_channels; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = std::clamp(roi.at(y, x), 0.0f, 1.0f);
      }
    }
    return out;
  }
  ImageTensor out(3, h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto color = jet_color(roi.at(y, x));
      for (std::size_t c = 0; c < 3; ++c) {
        const float base = img.at(std::min(c, img.channels - 1), y, x);
        out.at(c, y, x) = std::clamp(0.5f * base + 0.5f * color[c], 0.0f, 1.0f);
      }
    }
  }
  return out;
}

inline ImageTensor resize_nearest(const ImageTensor& img, std::size_t out_h, std::size_t out_w) {
  if (img.height == out_h && img.width == out_w) return img;
  ImageTensor out(img.channels, out_h, out_w);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const std::size_t sy = y * img.height / out_h;
      for (std::size_t x = 0; x < out_w; ++x) out.at(c, y, x) = img.at(c, sy, x * img.width / out_w);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary PPM (P6, maxval 255)

namespace detail {

inline std::string ppm_token(std::istream& in, const std::string& where) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw FormatError(where + ": truncated PPM header");
  return tok;
}

inline std::size_t ppm_number(std::istream& in, const std::string& where, const char* what) {
  const std::string tok = ppm_token(in, where);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(c); }) ||
      tok.size() > 9) {
    throw FormatError(where + ": bad PPM " + what + " '" + tok + "'");
  }
  return std::stoul(tok);
}

}  // namespace detail

inline ImageTensor decode_ppm(std::istream& in, const std::string& where) {
  if (detail::ppm_token(in, where) != "P6") throw FormatError(where + ": not a binary PPM (P6)");
  const std::size_t w = detail::ppm_number(in, where, "width");
  const std::size_t h = detail::ppm_number(in, where, "height");
  const std::size_t maxval = detail::ppm_number(in, where, "maxval");
  if (w == 0 || h == 0) throw FormatError(where + ": zero image dimension");
  if (maxval != 255) throw FormatError(where + ": unsupported maxval " + std::to_string(maxval));
  // ppm_token consumed exactly one whitespace byte after maxval
  std::vector<unsigned char> bytes(w * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw FormatError(where + ": truncated PPM pixel data");
  ImageTensor img(3, h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(bytes[(y * w + x) * 3 + c]) / 255.0f;
    }
  }
  return img;
}

inline ImageTensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  return decode_ppm(in, path.string());
}

inline unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void write_ppm(const std::filesystem::path& path, const ImageTensor& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.width * img.height * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        bytes[(y * img.width + x) * 3 + c] = to_byte(img.at(std::min(c, img.channels - 1), y, x));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(path.string() + ": write failed");
}

}  // namespace roivit
