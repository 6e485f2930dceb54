#pragma once

#include "uvsplat/camera.hpp"
#include "uvsplat/image.hpp"
#include "uvsplat/io/atomic.hpp"
#include "uvsplat/io/image_io.hpp"
#include "uvsplat/rig.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace uvsplat::io {

// Dataset directory layout (see docs/formats.md):
//   manifest.json  {"version": 1, "rig": "rig.uvsr", "width": W, "height": H,
//                   "frames": [{"image": ..., "mask": ..., "prior": ... (optional), "params": {...}}]}
//   cameras.json   {"cameras": [camera per frame, same order]}

inline constexpr int kDatasetVersion = 1;

struct FrameEntry {
  std::string image, mask, prior;  // paths relative to the dataset root; prior may be empty
  Camera<double> camera;
  RigParams<double> params;
};

struct SceneDataset {
  std::string root;
  std::string rig;  // relative path
  int width = 0, height = 0;
  std::vector<FrameEntry> frames;

  std::string path(const std::string& rel) const { return (std::filesystem::path(root) / rel).string(); }
};

inline nlohmann::json camera_to_json(const Camera<double>& c) {
  nlohmann::json r = nlohmann::json::array();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r.push_back(c.rotation(i, k));
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height},
          {"rotation", r}, {"position", {c.position[0], c.position[1], c.position[2]}}};
}

inline Camera<double> camera_from_json(const nlohmann::json& j, const std::string& where) {
  try {
    Camera<double> c;
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    const auto r = j.at("rotation").get<std::vector<double>>();
    const auto p = j.at("position").get<std::vector<double>>();
    if (r.size() != 9 || p.size() != 3) throw DataError(where + ": rotation needs 9 and position 3 values");
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) c.rotation(i, k) = r[i * 3 + k];
    c.position = Vec3<double>(p[0], p[1], p[2]);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(where + ": " + e.what());
  }
}

inline nlohmann::json params_to_json(const RigParams<double>& p) {
  nlohmann::json rots = nlohmann::json::array();
  for (const auto& q : p.joint_rotations) rots.push_back({q[0], q[1], q[2], q[3]});
  return {{"expression", p.expression},
          {"joint_rotations", rots},
          {"root_translation", {p.root_translation[0], p.root_translation[1], p.root_translation[2]}}};
}

inline RigParams<double> params_from_json(const nlohmann::json& j, const std::string& where) {
  try {
    RigParams<double> p;
    p.expression = j.at("expression").get<std::vector<double>>();
    for (const auto& q : j.at("joint_rotations")) {
      const auto v = q.get<std::vector<double>>();
      if (v.size() != 4) throw DataError(where + ": joint rotation needs 4 values (w, x, y, z)");
      const Vec4<double> qv(v[0], v[1], v[2], v[3]);
      if (!(qv.norm() > 1e-12)) throw DataError(where + ": zero joint rotation quaternion");
      p.joint_rotations.push_back(qv);
    }
    const auto t = j.at("root_translation").get<std::vector<double>>();
    if (t.size() != 3) throw DataError(where + ": root_translation needs 3 values");
    p.root_translation = Vec3<double>(t[0], t[1], t[2]);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  write_atomically(path, [&](std::ostream& os) { os << j.dump(2) << "\n"; });
}

/// Parses the manifest and cameras file and checks that every referenced file exists.
inline SceneDataset load_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  SceneDataset ds;
  ds.root = root;
  const std::string mpath = (fs::path(root) / "manifest.json").string();
  const auto m = read_json(mpath);
  const auto cams = read_json((fs::path(root) / "cameras.json").string());
  try {
    if (m.at("version").get<int>() != kDatasetVersion)
      throw DataError(mpath + ": unsupported dataset version");
    ds.rig = m.at("rig").get<std::string>();
    ds.width = m.at("width").get<int>();
    ds.height = m.at("height").get<int>();
    const auto& frames = m.at("frames");
    const auto& cam_list = cams.at("cameras");
    if (frames.size() != cam_list.size())
      throw DataError(mpath + ": " + std::to_string(frames.size()) + " frames but " + std::to_string(cam_list.size()) +
                      " cameras");
    for (size_t i = 0; i < frames.size(); ++i) {
      const std::string where = mpath + ": frames[" + std::to_string(i) + "]";
      const auto& f = frames[i];
      FrameEntry e;
      e.image = f.at("image").get<std::string>();
      e.mask = f.at("mask").get<std::string>();
      if (f.contains("prior")) e.prior = f.at("prior").get<std::string>();
      e.params = params_from_json(f.at("params"), where);
      e.camera = camera_from_json(cam_list[i], "cameras.json: cameras[" + std::to_string(i) + "]");
      if (e.camera.width != ds.width || e.camera.height != ds.height)
        throw DataError(where + ": camera size differs from the dataset size");
      for (const auto* rel : {&e.image, &e.mask, &e.prior})
        if (!rel->empty() && !fs::exists(ds.path(*rel))) throw DataError(where + ": missing file '" + *rel + "'");
      ds.frames.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(mpath + ": " + e.what());
  }
  if (ds.frames.empty()) throw DataError(mpath + ": no frames");
  if (!fs::exists(ds.path(ds.rig))) throw DataError(mpath + ": missing rig file '" + ds.rig + "'");
  return ds;
}

inline void save_dataset(const SceneDataset& ds) {
  nlohmann::json frames = nlohmann::json::array(), cams = nlohmann::json::array();
  for (const auto& f : ds.frames) {
    nlohmann::json e = {{"image", f.image}, {"mask", f.mask}, {"params", params_to_json(f.params)}};
    if (!f.prior.empty()) e["prior"] = f.prior;
    frames.push_back(e);
    cams.push_back(camera_to_json(f.camera));
  }
  namespace fs = std::filesystem;
  write_json((fs::path(ds.root) / "cameras.json").string(), {{"cameras", cams}});
  write_json((fs::path(ds.root) / "manifest.json").string(),
             {{"version", kDatasetVersion}, {"rig", ds.rig}, {"width", ds.width}, {"height", ds.height},
              {"frames", frames}});
}

/// Loaded pixels of one frame.
template <typename T> struct FrameData {
  int index = 0;
  Camera<T> camera;
  RigParams<T> params;
  Image<T> image;  // linear RGB
  Image<T> mask;   // one channel, soft values in [0, 1]
  std::optional<Image<T>> prior;
};

template <typename T> RigParams<T> cast_params(const RigParams<double>& p) {
  RigParams<T> o;
  o.expression.assign(p.expression.begin(), p.expression.end());
  for (const auto& q : p.joint_rotations) o.joint_rotations.push_back(q.cast<T>());
  o.root_translation = p.root_translation.cast<T>();
  return o;
}

template <typename T> FrameData<T> load_frame(const SceneDataset& ds, int i) {
  const auto& e = ds.frames.at(static_cast<size_t>(i));
  FrameData<T> f;
  f.index = i;
  f.camera = e.camera.template cast<T>();
  f.params = cast_params<T>(e.params);
  const auto img = load_image(ds.path(e.image), true);
  if (img.channels != 3 || img.width != ds.width || img.height != ds.height)
    throw DataError(e.image + ": expected a " + std::to_string(ds.width) + "x" + std::to_string(ds.height) + " RGB image");
  auto mask = load_image(ds.path(e.mask), false);
  if (mask.channels != 1 || mask.width != ds.width || mask.height != ds.height)
    throw DataError(e.mask + ": expected a single-channel mask of the image size");
  for (float& v : mask.data) {
    if (!(v >= -1e-6f && v <= 1 + 1e-6f)) throw DataError(e.mask + ": mask values must lie in [0, 1]");
    v = std::clamp(v, 0.0f, 1.0f);
  }
  f.image = img.template cast<T>();
  f.mask = mask.template cast<T>();
  if (!e.prior.empty()) {
    const auto pr = load_image(ds.path(e.prior), true);
    if (!pr.same_shape(img)) throw DataError(e.prior + ": prior must match the image size");
    f.prior = pr.template cast<T>();
  }
  return f;
}

}  // namespace uvsplat::io
