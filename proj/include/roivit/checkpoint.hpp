#pragma once

#include <bit>
#include <span>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "roivit/errors.hpp"
#include "roivit/hash.hpp"
#include "roivit/tensor.hpp"

namespace roivit {

// A set of named f32 tensors stored as a text manifest plus one raw
// little-endian blob. Manifest lines:
//   roivit-manifest 1
//   blob <file name, relative to the manifest>
//   meta <key> <value to end of line>
//   tensor <name> f32 <d0>x<d1>x... <byte offset>
struct TensorArchive {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw FormatError("archive has no tensor '" + name + "'");
  }
  const std::string& meta_value(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("archive has no meta entry '" + key + "'");
    return it->second;
  }
};

namespace detail {

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape_token(const std::string& tok, const std::string& where) {
  Shape s;
  std::stringstream ss(tok);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw FormatError(where + ": bad shape '" + tok + "'");
    }
    s.push_back(std::stoull(part));
  }
  if (s.empty()) throw FormatError(where + ": empty shape");
  return s;
}

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

}  // namespace detail

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

inline void save_archive(const std::filesystem::path& manifest, const TensorArchive& archive) {
  const auto blob = blob_path_for(manifest);
  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  std::ofstream bin(blob, std::ios::binary);
  if (!bin) throw FormatError(blob.string() + ": cannot open for writing");
  std::ostringstream text;
  text << "roivit-manifest 1\n";
  text << "blob " << blob.filename().string() << '\n';
  for (const auto& [k, v] : archive.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError("meta entry '" + k + "' contains whitespace or newline");
    }
    text << "meta " << k << ' ' << v << '\n';
  }
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    if (name.find_first_of(" \n") != std::string::npos) throw FormatError("tensor name '" + name + "' has whitespace");
    text << "tensor " << name << " f32 " << detail::shape_token(t.shape()) << ' ' << offset << '\n';
    std::vector<std::uint32_t> words(t.numel());
    for (std::size_t i = 0; i < words.size(); ++i) {
      std::uint32_t w;
      const float v = t.data()[i];
      std::memcpy(&w, &v, sizeof w);
      words[i] = detail::to_little_endian(w);
    }
    bin.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
    offset += words.size() * 4;
  }
  if (!bin) throw FormatError(blob.string() + ": write failed");
  std::ofstream man(manifest);
  if (!man) throw FormatError(manifest.string() + ": cannot open for writing");
  man << text.str();
  if (!man) throw FormatError(manifest.string() + ": write failed");
}

inline TensorArchive load_archive(const std::filesystem::path& manifest) {
  std::ifstream man(manifest);
  if (!man) throw FormatError(manifest.string() + ": cannot open");
  const std::string where = manifest.string();
  std::string line;
  if (!std::getline(man, line) || line != "roivit-manifest 1") throw FormatError(where + ": not a roivit manifest");
  TensorArchive archive;
  std::filesystem::path blob;
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  std::size_t lineno = 1;
  while (std::getline(man, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    const std::string at = where + ":" + std::to_string(lineno);
    if (kind == "blob") {
      std::string name;
      ls >> name;
      blob = manifest.parent_path() / name;
    } else if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      archive.meta[key] = value;
    } else if (kind == "tensor") {
      std::string name, dtype, shape;
      std::uint64_t offset = 0;
      if (!(ls >> name >> dtype >> shape >> offset)) throw FormatError(at + ": malformed tensor line");
      if (dtype != "f32") throw FormatError(at + ": unsupported dtype '" + dtype + "'");
      entries.push_back({name, detail::parse_shape_token(shape, at), offset});
    } else {
      throw FormatError(at + ": unknown record '" + kind + "'");
    }
  }
  if (blob.empty()) throw FormatError(where + ": no blob record");
  std::ifstream bin(blob, std::ios::binary | std::ios::ate);
  if (!bin) throw FormatError(blob.string() + ": cannot open");
  const auto blob_size = static_cast<std::uint64_t>(bin.tellg());
  for (const auto& e : entries) {
    const std::uint64_t bytes = numel_of(e.shape) * 4;
    if (e.offset + bytes > blob_size) throw FormatError(blob.string() + ": tensor '" + e.name + "' exceeds blob");
    std::vector<std::uint32_t> words(numel_of(e.shape));
    bin.seekg(static_cast<std::streamoff>(e.offset));
    bin.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
    if (!bin) throw FormatError(blob.string() + ": read failed for '" + e.name + "'");
    std::vector<float> values(words.size());
    for (std::size_t i = 0; i < words.size(); ++i) {
      const std::uint32_t w = detail::to_little_endian(words[i]);
      std::memcpy(&values[i], &w, sizeof w);
    }
    archive.tensors.emplace_back(e.name, Tensor<float>(e.shape, std::move(values)));
  }
  return archive;
}

// Digest of the blob contents; identifies a trained generator.
inline std::string archive_digest(const std::filesystem::path& manifest) {
  std::ifstream bin(blob_path_for(manifest), std::ios::binary);
  if (!bin) throw FormatError(blob_path_for(manifest).string() + ": cannot open");
  Fnv1a h;
  std::vector<char> buf(1 << 16);
  while (bin) {
    bin.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(buf.data()),
                                            static_cast<std::size_t>(bin.gcount())));
  }
  return h.hex();
}

}  // namespace roivit
