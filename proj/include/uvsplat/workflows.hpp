#pragma once

// Checkpoint-level operations shared by the command-line tool and the tests:
// rendering saved scenes, texture export/edit, test-time downscaling, relighting.

#include "uvsplat/config.hpp"
#include "uvsplat/io/checkpoint.hpp"
#include "uvsplat/io/dataset.hpp"
#include "uvsplat/io/image_io.hpp"
#include "uvsplat/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>

namespace uvsplat {

/// The training config stored in a checkpoint, or defaults when it has none.
template <typename T> TrainConfig stored_config(const io::Checkpoint<T>& ck) {
  if (ck.config_json.empty()) return TrainConfig{};
  try {
    return config_from_json(nlohmann::json::parse(ck.config_json));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
}

template <typename T>
PipelineContext<T> context_for(const io::Checkpoint<T>& ck, const BrdfLut& lut, ThreadPool* pool) {
  return PipelineContext<T>::make(stored_config(ck), ck.model.rig, ck.model.atlas.resolution, lut, pool);
}

/// Renders saved frame `i` with its stored camera, pose and optimized expression.
template <typename T>
FrameState<T> render_frame(const io::Checkpoint<T>& ck, int i, const PipelineContext<T>& ctx) {
  if (i < 0 || static_cast<size_t>(i) >= ck.cameras.size())
    throw DataError("frame " + std::to_string(i) + " out of range (checkpoint has " +
                    std::to_string(ck.cameras.size()) + " frames)");
  const auto params = ck.model.frame_params(io::cast_params<T>(ck.params[static_cast<size_t>(i)]), i);
  return forward(ck.model, ck.cameras[static_cast<size_t>(i)].template cast<T>(), params, ctx);
}

// ---------------------------------------------------------------------------
// Texture interchange. Images use the atlas layout: image row y holds texel row y.

enum class TextureChannel { kAlbedo, kRoughness, kF0, kNormal };

inline TextureChannel parse_texture_channel(const std::string& s) {
  if (s == "albedo") return TextureChannel::kAlbedo;
  if (s == "roughness") return TextureChannel::kRoughness;
  if (s == "f0") return TextureChannel::kF0;
  if (s == "normal") return TextureChannel::kNormal;
  throw DataError("unknown texture channel '" + s + "'");
}

inline const char* texture_channel_name(TextureChannel c) {
  switch (c) {
    case TextureChannel::kAlbedo: return "albedo";
    case TextureChannel::kRoughness: return "roughness";
    case TextureChannel::kF0: return "f0";
    case TextureChannel::kNormal: return "normal";
  }
  return "";
}

namespace detail {
// (first material channel, count); normals live in their own texture.
inline std::pair<int, int> material_span(TextureChannel c) {
  switch (c) {
    case TextureChannel::kAlbedo: return {0, 3};
    case TextureChannel::kRoughness: return {3, 1};
    case TextureChannel::kF0: return {4, 1};
    case TextureChannel::kNormal: break;
  }
  return {0, 0};
}
}  // namespace detail

/// One texture as an image. Normals come out as (nx, ny, 0); with `encode_normals`
/// they use the usual [0,1] encoding (n + 1) / 2 for 8-bit files.
template <typename T>
Image<float> export_texture(const TextureAtlas<T>& atlas, TextureChannel c, bool encode_normals = false) {
  const int res = atlas.resolution;
  if (c == TextureChannel::kNormal) {
    Image<float> img(res, res, 3, 0.0f);
    for (size_t t = 0; t < atlas.texels(); ++t)
      for (int k = 0; k < 2; ++k) {
        const float n = static_cast<float>(atlas.normal[t * kNormalChannels + k]);
        img.data[t * 3 + k] = encode_normals ? (n + 1.0f) * 0.5f : n;
      }
    if (encode_normals)
      for (size_t t = 0; t < atlas.texels(); ++t) img.data[t * 3 + 2] = 1.0f;
    return img;
  }
  const auto [first, count] = detail::material_span(c);
  Image<float> img(res, res, count, 0.0f);
  for (size_t t = 0; t < atlas.texels(); ++t)
    for (int k = 0; k < count; ++k)
      img.data[t * count + k] = static_cast<float>(atlas.material[t * kMaterialChannels + first + k]);
  return img;
}

/// Replaces one texture with an edited image. Single-channel textures take the
/// first image channel; `decode_normals` undoes the [0,1] normal encoding.
template <typename T>
void import_texture(TextureAtlas<T>& atlas, TextureChannel c, const Image<float>& img, bool decode_normals = false) {
  const int res = atlas.resolution;
  const std::string name = texture_channel_name(c);
  if (img.width != res || img.height != res)
    throw DataError(name + " image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                    " but the atlas is " + std::to_string(res) + "x" + std::to_string(res));
  for (float v : img.data)
    if (!std::isfinite(v)) throw DataError(name + " image has non-finite values");
  if (c == TextureChannel::kNormal) {
    if (img.channels < 2) throw DataError("normal image needs at least 2 channels");
    for (size_t t = 0; t < atlas.texels(); ++t)
      for (int k = 0; k < 2; ++k) {
        const float v = img.data[t * img.channels + k];
        atlas.normal[t * kNormalChannels + k] = static_cast<T>(decode_normals ? v * 2.0f - 1.0f : v);
      }
    return;
  }
  const auto [first, count] = detail::material_span(c);
  if (count == 3 && img.channels < 3) throw DataError("albedo image needs 3 channels");
  for (size_t t = 0; t < atlas.texels(); ++t)
    for (int k = 0; k < count; ++k)
      atlas.material[t * kMaterialChannels + first + k] = static_cast<T>(img.data[t * img.channels + k]);
}

/// Loads an edit image: 8-bit albedo is sRGB-decoded, 8-bit normals are [0,1]-decoded,
/// float files are taken as stored.
template <typename T> void import_texture_file(TextureAtlas<T>& atlas, TextureChannel c, const std::string& path) {
  const bool is_float = io::detail::lower_ext(path) == ".pfm";
  const auto img = io::load_image(path, !is_float && c == TextureChannel::kAlbedo);
  import_texture(atlas, c, img, !is_float && c == TextureChannel::kNormal);
}

template <typename T>
void export_texture_file(const TextureAtlas<T>& atlas, TextureChannel c, const std::string& path) {
  const bool is_float = io::detail::lower_ext(path) == ".pfm";
  io::save_image(path, export_texture(atlas, c, !is_float), c == TextureChannel::kAlbedo);
}

/// Texture edits invalidate nothing but the textures' optimizer moments.
template <typename T> void drop_texture_optimizer_state(io::Checkpoint<T>& ck) {
  ck.adam.erase("material");
  ck.adam.erase("normal");
}

/// Box-filters the textures to `size` texels per side (test-time downscaling).
template <typename T> void downscale_checkpoint(io::Checkpoint<T>& ck, int size) {
  const int res = ck.model.atlas.resolution;
  if (size < 2 || size > res || (size & (size - 1)) != 0)
    throw DataError("downscale size must be a power of two in [2, " + std::to_string(res) + "]");
  ck.model.atlas = downscale_atlas(ck.model.atlas, size);
  drop_texture_optimizer_state(ck);
  if (!ck.config_json.empty()) {
    auto cfg = stored_config(ck);
    cfg.atlas_resolution = size;
    auto cj = to_json(cfg);
    cj.erase("threads");
    ck.config_json = cj.dump();
    ck.config_hash = config_hash(cfg);
  }
}

/// Swaps in an equirectangular HDR environment.
template <typename T> void relight_checkpoint(io::Checkpoint<T>& ck, const Image<float>& equirect) {
  if (equirect.channels != 3) throw DataError("environment must be an RGB image");
  for (float v : equirect.data)
    if (!std::isfinite(v) || v < 0) throw DataError("environment must be finite and non-negative");
  ck.model.env = EnvironmentLight<T>::from_radiance(equirect_to_cubemap(equirect.cast<T>(), ck.model.env.raw.size));
  ck.adam.erase("env");
}

// ---------------------------------------------------------------------------
// Debug emitters.

/// Six faces side by side: +X, -X, +Y, -Y, +Z, -Z.
template <typename T> Image<float> cube_strip(const CubeMap<T>& cube) {
  const int s = cube.size;
  Image<float> img(s * kCubeFaces, s, 3, 0.0f);
  for (int f = 0; f < kCubeFaces; ++f)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        for (int c = 0; c < 3; ++c)
          img(f * s + x, y, c) = static_cast<float>(cube.data[((static_cast<size_t>(f) * s + y) * s + x) * 3 + c]);
  return img;
}

/// Writes the prefiltered chain as mip_<k>.pfm plus irradiance.pfm.
template <typename T> void write_env_chain(const EnvChain<T>& chain, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (int k = 0; k < chain.count(); ++k)
    io::save_image((fs::path(dir) / ("mip_" + std::to_string(k) + ".pfm")).string(), cube_strip(chain.mips[k]));
  io::save_image((fs::path(dir) / "irradiance.pfm").string(), cube_strip(chain.irradiance));
}

/// One float image per G-buffer attribute.
template <typename T> void dump_gbuffers(const GBuffers<T>& gb, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::pair<const char*, std::pair<int, int>> groups[] = {
      {"albedo", {kAlbedoR, 3}}, {"roughness", {kRoughness, 1}}, {"f0", {kF0, 1}},
      {"normal", {kNormalX, 3}}, {"depth", {kDepth, 1}},         {"alpha", {kAlpha, 1}},
      {"uv", {kUvU, 3}},         {"geo_normal", {kGeoNormalX, 3}}};
  for (const auto& [name, span] : groups)
    io::save_image((fs::path(dir) / (std::string(name) + ".pfm")).string(),
                   gbuffer_image(gb, span.first, span.second).template cast<float>(), false);
}

/// CSV with one row per splat: splat, triangle, u0, v0, j00, j01, j10, j11.
template <typename T>
void write_uv_transforms_csv(const std::string& path, const SplatUVTransform<T>& xf, const SplatSet<T>& splats) {
  io::write_atomically(path, [&](std::ostream& os) {
    os.precision(9);
    os << "splat,triangle,u0,v0,j00,j01,j10,j11\n";
    for (size_t i = 0; i < xf.size(); ++i) {
      const auto& j = xf.jac[i];
      os << i << ',' << splats.parent[i] << ',' << double(xf.uv0[i][0]) << ',' << double(xf.uv0[i][1]) << ','
         << double(j(0, 0)) << ',' << double(j(0, 1)) << ',' << double(j(1, 0)) << ',' << double(j(1, 1)) << '\n';
    }
  });
}

}  // namespace uvsplat
