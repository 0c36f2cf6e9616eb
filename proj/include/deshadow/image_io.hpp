#pragma once

// 8-bit binary PPM (P6) images and the dataset manifest
// ("id clean_path shadowed_path split" per line).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "deshadow/rtn.hpp"

namespace deshadow {

namespace detail {

inline std::string ppm_token(std::istream& is) {
  std::string tok;
  while (true) {
    int c = is.peek();
    if (c == EOF) break;
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
  while (is.peek() != EOF && !std::isspace(is.peek())) tok.push_back(static_cast<char>(is.get()));
  return tok;
}

}  // namespace detail

/// Reads a P6 image as [3,H,W] with value = byte / 255.
inline Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  if (detail::ppm_token(is) != "P6") throw IoError(path.string() + ": not a P6 PPM");
  std::size_t W = 0, H = 0, maxv = 0;
  try {
    W = std::stoul(detail::ppm_token(is));
    H = std::stoul(detail::ppm_token(is));
    maxv = std::stoul(detail::ppm_token(is));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed PPM header");
  }
  if (maxv != 255) throw IoError(path.string() + ": only 8-bit PPM is supported");
  is.get();
  std::vector<unsigned char> bytes(3 * W * H);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw IoError(path.string() + ": truncated pixel data");
  }
  const std::size_t n = W * H;
  std::vector<double> data(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) data[c * n + i] = bytes[3 * i + c] / 255.0;
  }
  return Tensor(Shape{3, H, W}, std::move(data));
}

/// Writes [3,H,W] as P6 with byte = round(clamp(value, 0, 1) * 255).
inline void write_ppm(const std::filesystem::path& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw ShapeError("write_ppm: expected [3,H,W], got " + shape_str(img.shape()));
  }
  const std::size_t H = img.dim(1), W = img.dim(2), n = H * W;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P6\n" << W << ' ' << H << "\n255\n";
  std::vector<unsigned char> bytes(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(img[c * n + i], 0.0, 1.0);
      bytes[3 * i + c] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

/// Loads .ppm or .rtn by extension.
inline Tensor read_image(const std::filesystem::path& path) {
  if (path.extension() == ".rtn") return load_rtn(path);
  return read_ppm(path);
}

struct ManifestEntry {
  std::string id;
  std::filesystem::path clean;
  std::filesystem::path shadowed;
  std::string split;
};

/// Relative paths are resolved against the manifest's directory.
inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  const auto base = path.parent_path();
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string clean, shadowed;
    if (!(ls >> e.id >> clean >> shadowed >> e.split)) {
      throw IoError(path.string() + ":" + std::to_string(lineno) +
                    ": expected 'id clean_path shadowed_path split'");
    }
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path fp(p);
      return fp.is_absolute() ? fp : base / fp;
    };
    e.clean = resolve(clean);
    e.shadowed = resolve(shadowed);
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest " + path.string());
  for (const auto& e : entries) {
    os << e.id << '\t' << e.clean.generic_string() << '\t'
       << e.shadowed.generic_string() << '\t' << e.split << '\n';
  }
}

}  // namespace deshadow
