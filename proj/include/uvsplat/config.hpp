#pragma once

#include "uvsplat/losses.hpp"
#include "uvsplat/optim.hpp"
#include "uvsplat/raster.hpp"
#include "uvsplat/splat.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <string>
#include <vector>

namespace uvsplat {

/// Per-group Adam learning rates.
struct LearningRates {
  double bary = 1e-3;
  double rotation = 1e-3;
  double scale = 5e-3;
  double displacement = 2e-5;
  double opacity = 5e-2;
  double material = 5e-3;
  double normal = 1e-3;
  double env = 2e-2;
  double vertices = 1e-5;
  double skin = 1e-4;
  double blendshapes = 1e-6;
  double stat = 5e-2;
  double expression = 5e-5;  // per-frame expression coefficients

  void scale_all(double f) {
    for (double* v : {&bary, &rotation, &scale, &displacement, &opacity, &material, &normal, &env, &vertices, &skin,
                      &blendshapes, &stat, &expression})
      *v *= f;
  }
};

/// Names of the optimizer parameter groups.
inline const std::vector<std::string>& parameter_groups() {
  static const std::vector<std::string> g = {"bary",   "rotation", "scale",    "displacement", "opacity",
                                             "material", "normal", "env",      "vertices",     "skin",
                                             "blendshapes", "stat", "expression"};
  return g;
}

/// Groups that move the geometry (everything except textures, env and the stat coefficients).
inline const std::vector<std::string>& geometry_groups() {
  static const std::vector<std::string> g = {"bary",     "rotation", "scale",       "displacement", "opacity",
                                             "vertices", "skin",     "blendshapes", "expression"};
  return g;
}

struct TrainConfig {
  std::string data;                 // dataset directory
  std::string init_checkpoint;      // optional: start from (or resume) this checkpoint
  int epochs = 15;
  int max_iterations = 0;           // 0: epochs x training frames
  uint64_t seed = 0;
  int atlas_resolution = 1024;
  int splats_per_triangle = 2;
  double env_init = 0.5;            // initial constant radiance
  int holdout_every = 8;            // frame i is held out when i % holdout_every == holdout_every - 1
  bool zero_jacobian = false;       // constant-UV-per-splat ablation
  std::vector<std::string> freeze;  // parameter groups kept fixed
  LossWeights weights;
  LossGroups groups;
  LearningRates lr;
  DensifyOptions densify;
  RenderSettings render;
  AdamOptions adam;
  int lut_resolution = 64;
  int lut_samples = 1024;
  int log_every = 1;
  int checkpoint_every = 0;         // 0: only at the end
  int threads = 0;                  // 0: hardware concurrency
  double divergence_factor = 100.0;
  int divergence_window = 100;

  bool frozen(const std::string& group) const {
    return std::find(freeze.begin(), freeze.end(), group) != freeze.end();
  }

  void validate() const {
    if (epochs < 1) throw DataError("config: epochs must be >= 1");
    if (max_iterations < 0) throw DataError("config: max_iterations must be >= 0");
    if (atlas_resolution < 2 || (atlas_resolution & (atlas_resolution - 1)) != 0)
      throw DataError("config: atlas_resolution must be a power of two >= 2");
    if (splats_per_triangle < 1) throw DataError("config: splats_per_triangle must be >= 1");
    if (!(env_init > 0)) throw DataError("config: env_init must be positive");
    if (holdout_every < 0 || holdout_every == 1) throw DataError("config: holdout_every must be 0 or >= 2");
    const auto& names = parameter_groups();
    for (const auto& f : freeze)
      if (std::find(names.begin(), names.end(), f) == names.end())
        throw DataError("config: unknown parameter group '" + f + "' in freeze");
    weights.validate();
    render.validate();
    if (lut_resolution < 16 || lut_samples < 256) throw DataError("config: LUT needs resolution >= 16, samples >= 256");
    if (divergence_factor <= 1 || divergence_window < 1) throw DataError("config: bad divergence guard settings");
  }
};

namespace detail {

using nlohmann::json;

// Reads `key` into `v` when present; rejects keys not listed in `known`.
class JsonReader {
 public:
  JsonReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw DataError(where_ + ": expected an object");
  }
  template <typename V> void get(const char* key, V& v) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      v = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw DataError(where_ + "." + key + ": " + e.what());
    }
  }
  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw DataError(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const TrainConfig& c) {
  using nlohmann::json;
  const auto& w = c.weights;
  const auto& l = c.lr;
  const auto& d = c.densify;
  const auto& r = c.render;
  return json{
      {"data", c.data},
      {"init_checkpoint", c.init_checkpoint},
      {"epochs", c.epochs},
      {"max_iterations", c.max_iterations},
      {"seed", c.seed},
      {"atlas_resolution", c.atlas_resolution},
      {"splats_per_triangle", c.splats_per_triangle},
      {"env_init", c.env_init},
      {"holdout_every", c.holdout_every},
      {"zero_jacobian", c.zero_jacobian},
      {"freeze", c.freeze},
      {"weights",
       {{"l1", w.l1}, {"ssim", w.ssim}, {"mask", w.mask}, {"diff_albedo", w.diff_albedo},
        {"stat_albedo", w.stat_albedo}, {"expr", w.expr}, {"smooth", w.smooth}, {"normal_reg", w.normal_reg},
        {"normal_consist", w.normal_consist}, {"uv_dist", w.uv_dist}, {"boundary", w.boundary}, {"bary", w.bary},
        {"lap", w.lap}, {"flame", w.flame}}},
      {"groups", {{"photo", c.groups.photo}, {"pbr", c.groups.pbr}, {"uv", c.groups.uv}, {"geom", c.groups.geom}}},
      {"lr",
       {{"bary", l.bary}, {"rotation", l.rotation}, {"scale", l.scale}, {"displacement", l.displacement},
        {"opacity", l.opacity}, {"material", l.material}, {"normal", l.normal}, {"env", l.env},
        {"vertices", l.vertices}, {"skin", l.skin}, {"blendshapes", l.blendshapes}, {"stat", l.stat},
        {"expression", l.expression}}},
      {"densify",
       {{"enabled", d.enabled}, {"grad_threshold", d.grad_threshold}, {"prune_opacity", d.prune_opacity},
        {"split_factor", d.split_factor}, {"large_scale_ratio", d.large_scale_ratio}, {"interval", d.interval},
        {"start_iteration", d.start_iteration}, {"stop_iteration", d.stop_iteration}}},
      {"render",
       {{"cutoff", r.cutoff}, {"screen_sigma", r.screen_sigma}, {"screen_lowpass", r.screen_lowpass},
        {"min_transmittance", r.min_transmittance}, {"tile_size", r.tile_size}, {"near", r.near}}},
      {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
      {"lut_resolution", c.lut_resolution},
      {"lut_samples", c.lut_samples},
      {"log_every", c.log_every},
      {"checkpoint_every", c.checkpoint_every},
      {"threads", c.threads},
      {"divergence_factor", c.divergence_factor},
      {"divergence_window", c.divergence_window},
  };
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  detail::JsonReader rd(j, "config");
  rd.get("data", c.data);
  rd.get("init_checkpoint", c.init_checkpoint);
  rd.get("epochs", c.epochs);
  rd.get("max_iterations", c.max_iterations);
  rd.get("seed", c.seed);
  rd.get("atlas_resolution", c.atlas_resolution);
  rd.get("splats_per_triangle", c.splats_per_triangle);
  rd.get("env_init", c.env_init);
  rd.get("holdout_every", c.holdout_every);
  rd.get("zero_jacobian", c.zero_jacobian);
  rd.get("freeze", c.freeze);
  if (const auto* s = rd.sub("weights")) {
    detail::JsonReader w(*s, "config.weights");
    auto& x = c.weights;
    w.get("l1", x.l1);
    w.get("ssim", x.ssim);
    w.get("mask", x.mask);
    w.get("diff_albedo", x.diff_albedo);
    w.get("stat_albedo", x.stat_albedo);
    w.get("expr", x.expr);
    w.get("smooth", x.smooth);
    w.get("normal_reg", x.normal_reg);
    w.get("normal_consist", x.normal_consist);
    w.get("uv_dist", x.uv_dist);
    w.get("boundary", x.boundary);
    w.get("bary", x.bary);
    w.get("lap", x.lap);
    w.get("flame", x.flame);
    w.finish();
  }
  if (const auto* s = rd.sub("groups")) {
    detail::JsonReader g(*s, "config.groups");
    g.get("photo", c.groups.photo);
    g.get("pbr", c.groups.pbr);
    g.get("uv", c.groups.uv);
    g.get("geom", c.groups.geom);
    g.finish();
  }
  if (const auto* s = rd.sub("lr")) {
    detail::JsonReader l(*s, "config.lr");
    auto& x = c.lr;
    l.get("bary", x.bary);
    l.get("rotation", x.rotation);
    l.get("scale", x.scale);
    l.get("displacement", x.displacement);
    l.get("opacity", x.opacity);
    l.get("material", x.material);
    l.get("normal", x.normal);
    l.get("env", x.env);
    l.get("vertices", x.vertices);
    l.get("skin", x.skin);
    l.get("blendshapes", x.blendshapes);
    l.get("stat", x.stat);
    l.get("expression", x.expression);
    l.finish();
  }
  if (const auto* s = rd.sub("densify")) {
    detail::JsonReader d(*s, "config.densify");
    auto& x = c.densify;
    d.get("enabled", x.enabled);
    d.get("grad_threshold", x.grad_threshold);
    d.get("prune_opacity", x.prune_opacity);
    d.get("split_factor", x.split_factor);
    d.get("large_scale_ratio", x.large_scale_ratio);
    d.get("interval", x.interval);
    d.get("start_iteration", x.start_iteration);
    d.get("stop_iteration", x.stop_iteration);
    d.finish();
  }
  if (const auto* s = rd.sub("render")) {
    detail::JsonReader r(*s, "config.render");
    auto& x = c.render;
    r.get("cutoff", x.cutoff);
    r.get("screen_sigma", x.screen_sigma);
    r.get("screen_lowpass", x.screen_lowpass);
    r.get("min_transmittance", x.min_transmittance);
    r.get("tile_size", x.tile_size);
    r.get("near", x.near);
    r.finish();
  }
  if (const auto* s = rd.sub("adam")) {
    detail::JsonReader a(*s, "config.adam");
    a.get("beta1", c.adam.beta1);
    a.get("beta2", c.adam.beta2);
    a.get("eps", c.adam.eps);
    a.finish();
  }
  rd.get("lut_resolution", c.lut_resolution);
  rd.get("lut_samples", c.lut_samples);
  rd.get("log_every", c.log_every);
  rd.get("checkpoint_every", c.checkpoint_every);
  rd.get("threads", c.threads);
  rd.get("divergence_factor", c.divergence_factor);
  rd.get("divergence_window", c.divergence_window);
  rd.finish();
  c.densify.seed = c.seed;
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return config_from_json(j);
}

/// Hash of the settings that shape the optimization. Paths, thread count and
/// logging cadence are excluded so a resumed or relocated run matches.
inline uint64_t config_hash(const TrainConfig& c) {
  auto j = to_json(c);
  for (const char* k : {"data", "init_checkpoint", "threads", "log_every", "checkpoint_every", "max_iterations", "epochs"})
    j.erase(k);
  return fnv1a(j.dump());
}

}  // namespace uvsplat
