#pragma once

#include "uvsplat/image.hpp"
#include "uvsplat/io/atomic.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace uvsplat::io {

// PFM: "PF" (RGB) or "Pf" (gray), little-endian scale -1, rows bottom to top.
// PPM/PGM: binary P6/P5 with maxval 255.

inline void write_pfm(std::ostream& os, const Image<float>& img) {
  if (img.channels != 1 && img.channels != 3) throw DataError("PFM supports 1 or 3 channels");
  os << (img.channels == 3 ? "PF" : "Pf") << "\n" << img.width << " " << img.height << "\n-1.0\n";
  const size_t row = static_cast<size_t>(img.width) * img.channels;
  for (int y = img.height - 1; y >= 0; --y)
    os.write(reinterpret_cast<const char*>(&img.data[static_cast<size_t>(y) * row]),
             static_cast<std::streamsize>(row * sizeof(float)));
}

namespace detail {

inline std::string next_token(std::istream& is, const std::string& path) {
  std::string tok;
  int c;
  while ((c = is.peek()) != EOF) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
  while ((c = is.peek()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(is.get()));
  if (tok.empty()) throw DataError(path + ": truncated image header");
  return tok;
}

inline int parse_int(const std::string& s, const std::string& path) {
  try {
    size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(path + ": bad number '" + s + "' in image header");
  }
}

inline std::string lower_ext(const std::string& path) {
  std::string ext = std::filesystem::path(path).extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext;
}

}  // namespace detail

inline Image<float> read_pfm(std::istream& is, const std::string& path) {
  const std::string magic = detail::next_token(is, path);
  int channels;
  if (magic == "PF")
    channels = 3;
  else if (magic == "Pf")
    channels = 1;
  else
    throw DataError(path + ": not a PFM file");
  const int w = detail::parse_int(detail::next_token(is, path), path);
  const int h = detail::parse_int(detail::next_token(is, path), path);
  const std::string scale_tok = detail::next_token(is, path);
  double scale;
  try {
    scale = std::stod(scale_tok);
  } catch (const std::exception&) {
    throw DataError(path + ": bad PFM scale");
  }
  if (w <= 0 || h <= 0) throw DataError(path + ": bad PFM size");
  if (scale > 0) throw DataError(path + ": big-endian PFM is not supported");
  is.get();  // single whitespace before the raster
  Image<float> img(w, h, channels);
  const size_t row = static_cast<size_t>(w) * channels;
  for (int y = h - 1; y >= 0; --y)
    if (!is.read(reinterpret_cast<char*>(&img.data[static_cast<size_t>(y) * row]),
                 static_cast<std::streamsize>(row * sizeof(float))))
      throw DataError(path + ": truncated PFM raster");
  return img;
}

/// 8-bit P5/P6. With `srgb` the stored values are decoded through the sRGB
/// transfer function, otherwise mapped linearly to [0,1].
inline Image<float> read_pnm(std::istream& is, const std::string& path, bool srgb) {
  const std::string magic = detail::next_token(is, path);
  int channels;
  if (magic == "P6")
    channels = 3;
  else if (magic == "P5")
    channels = 1;
  else
    throw DataError(path + ": only binary P5/P6 images are supported");
  const int w = detail::parse_int(detail::next_token(is, path), path);
  const int h = detail::parse_int(detail::next_token(is, path), path);
  const int maxval = detail::parse_int(detail::next_token(is, path), path);
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError(path + ": unsupported PNM header (need maxval 255)");
  is.get();
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * channels);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw DataError(path + ": truncated PNM raster");
  Image<float> img(w, h, channels);
  for (size_t i = 0; i < raw.size(); ++i) {
    const float v = raw[i] / 255.0f;
    img.data[i] = srgb ? srgb_decode(v) : v;
  }
  return img;
}

inline void write_pnm(std::ostream& os, const Image<float>& img, bool srgb) {
  if (img.channels != 1 && img.channels != 3) throw DataError("PNM supports 1 or 3 channels");
  os << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.data.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    const float v = clamp01(img.data[i]);
    raw[i] = static_cast<unsigned char>(std::lround((srgb ? srgb_encode(v) : v) * 255.0f));
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

/// Loads .pfm (float, as stored) or .ppm/.pgm (8-bit; sRGB-decoded when `srgb`).
inline Image<float> load_image(const std::string& path, bool srgb = true) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image '" + path + "'");
  const std::string ext = detail::lower_ext(path);
  if (ext == ".pfm") return read_pfm(is, path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return read_pnm(is, path, srgb);
  throw DataError(path + ": unsupported image format '" + ext + "' (use .pfm, .ppm or .pgm)");
}

inline void save_image(const std::string& path, const Image<float>& img, bool srgb = true) {
  const std::string ext = detail::lower_ext(path);
  if (ext == ".pfm")
    write_atomically(path, [&](std::ostream& os) { write_pfm(os, img); });
  else if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm")
    write_atomically(path, [&](std::ostream& os) { write_pnm(os, img, srgb); });
  else
    throw DataError(path + ": unsupported image format '" + ext + "'");
}

}  // namespace uvsplat::io
