#pragma once

#include "uvsplat/config.hpp"
#include "uvsplat/io/checkpoint.hpp"
#include "uvsplat/io/dataset.hpp"
#include "uvsplat/optim.hpp"
#include "uvsplat/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>

namespace uvsplat {

// ---------------------------------------------------------------------------
// Metrics on the masked region of display-encoded images.

/// PSNR over mask-weighted pixels of [0,1] images; +inf when the images agree.
template <typename T> double masked_psnr(const Image<T>& a, const Image<T>& b, const Image<T>& mask) {
  if (!a.same_shape(b) || mask.width != a.width || mask.height != a.height)
    throw DataError("psnr: image shapes differ");
  double se = 0, wsum = 0;
  for (size_t p = 0; p < a.pixels(); ++p) {
    const double m = static_cast<double>(mask.data[p]);
    if (m <= 0) continue;
    wsum += m;
    for (int c = 0; c < a.channels; ++c) {
      const double d = static_cast<double>(a.data[p * a.channels + c]) - static_cast<double>(b.data[p * a.channels + c]);
      se += m * d * d;
    }
  }
  if (wsum <= 0) throw DataError("psnr: empty mask");
  const double mse = se / (wsum * a.channels);
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

/// Mask-weighted mean of the SSIM map.
template <typename T> double masked_ssim(const Image<T>& a, const Image<T>& b, const Image<T>& mask) {
  const auto map = ssim_map(a.template cast<double>(), b.template cast<double>());
  double s = 0, wsum = 0;
  for (size_t p = 0; p < map.size(); ++p) {
    const double m = static_cast<double>(mask.data[p]);
    s += m * map[p];
    wsum += m;
  }
  if (wsum <= 0) throw DataError("ssim: empty mask");
  return s / wsum;
}

struct FrameMetrics {
  int frame = 0;
  double psnr = 0, ssim = 0;
};

struct EvalReport {
  std::vector<FrameMetrics> frames;
  double mean_psnr = 0, mean_ssim = 0;

  nlohmann::json to_json() const {
    auto num = [](double v) -> nlohmann::json {
      if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
      return v;
    };
    nlohmann::json fr = nlohmann::json::array();
    for (const auto& f : frames) fr.push_back({{"frame", f.frame}, {"psnr", num(f.psnr)}, {"ssim", f.ssim}});
    return {{"frames", fr}, {"mean_psnr", num(mean_psnr)}, {"mean_ssim", mean_ssim}};
  }
};

enum class Split { kTrain, kHeldout, kAll };

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "heldout") return Split::kHeldout;
  if (s == "all") return Split::kAll;
  throw DataError("unknown split '" + s + "' (train, heldout, all)");
}

inline bool is_heldout(int frame, int holdout_every) {
  return holdout_every > 0 && frame % holdout_every == holdout_every - 1;
}

inline std::vector<int> split_frames(int count, Split split, int holdout_every) {
  std::vector<int> out;
  for (int i = 0; i < count; ++i) {
    const bool h = is_heldout(i, holdout_every);
    if (split == Split::kAll || (split == Split::kHeldout) == h) out.push_back(i);
  }
  return out;
}

/// Renders each listed frame and scores it against its ground truth.
template <typename T>
EvalReport evaluate(const Model<T>& model, const io::SceneDataset& ds, const std::vector<int>& frames,
                    const PipelineContext<T>& ctx) {
  if (frames.empty()) throw DataError("evaluate: no frames selected");
  EvalReport r;
  const EnvChain<T> chain = prefilter_env(model.env.radiance());
  for (int i : frames) {
    const auto f = io::load_frame<T>(ds, i);
    const auto s = forward(model, f.camera, model.frame_params(f.params, i), ctx, &chain);
    FrameMetrics m;
    m.frame = i;
    const auto a = to_display(f.image), b = to_display(s.linear);
    m.psnr = masked_psnr(a, b, f.mask);
    m.ssim = masked_ssim(a, b, f.mask);
    r.frames.push_back(m);
    r.mean_psnr += m.psnr;
    r.mean_ssim += m.ssim;
  }
  r.mean_psnr /= static_cast<double>(r.frames.size());
  r.mean_ssim /= static_cast<double>(r.frames.size());
  return r;
}

// ---------------------------------------------------------------------------
// Training.

template <typename T> struct FitHooks {
  // Called after the gradient of each iteration, before the update.
  std::function<void(int64_t iteration, int frame, const ModelGrads<T>&)> on_grads;
  // Called after each update with the per-term losses of that iteration.
  std::function<void(int64_t iteration, int frame, const LossTerms&)> on_iteration;
};

struct FitResult {
  int64_t iterations = 0;           // total iterations completed (including resumed ones)
  std::vector<double> losses;       // total loss of each iteration run in this call
  std::vector<int> frame_visits;    // gradient contributions per dataset frame
  int splats = 0;
};

/// Per-epoch permutation of the training frames, independent of the library's shuffle.
inline std::vector<int> epoch_order(const std::vector<int>& train, uint64_t seed, int64_t epoch) {
  std::vector<int> order = train;
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(epoch) + 1);
  for (size_t i = order.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

namespace detail {

template <typename V> auto* flat(std::vector<V>& v) {
  if constexpr (std::is_arithmetic_v<V>)
    return v.data();
  else
    return v.data()->data();
}

template <typename V> size_t flat_size(const std::vector<V>& v) {
  if constexpr (std::is_arithmetic_v<V>)
    return v.size();
  else
    return v.size() * V::SizeAtCompileTime;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// The optimization loop over one dataset. Owns the model, optimizer and schedule.
template <typename T> class Trainer {
 public:
  Trainer(TrainConfig cfg, std::string out_path)
      : cfg_(std::move(cfg)), out_(std::move(out_path)), pool_(static_cast<unsigned>(std::max(0, cfg_.threads))),
        adam_(cfg_.adam) {
    cfg_.validate();
    cfg_.densify.seed = cfg_.seed;
    ds_ = io::load_dataset(cfg_.data);
    const auto rig = load_rig<T>(ds_.path(ds_.rig));
    std::vector<RigParams<T>> params;
    for (const auto& f : ds_.frames) params.push_back(io::cast_params<T>(f.params));
    const int n = static_cast<int>(ds_.frames.size());
    for (int i = 0; i < n; ++i) frames_.push_back(io::load_frame<T>(ds_, i));
    train_ = split_frames(n, Split::kTrain, cfg_.holdout_every);
    if (train_.empty()) throw DataError("fit: every frame is held out");

    bool resumed = false;
    if (!cfg_.init_checkpoint.empty()) {
      auto ck = io::load_checkpoint<T>(cfg_.init_checkpoint);
      if (ck.model.expressions.size() != frames_.size())
        throw DataError(cfg_.init_checkpoint + ": checkpoint frame count does not match the dataset");
      model_ = std::move(ck.model);
      if (ck.config_hash == config_hash(cfg_)) {
        // Same optimization settings: continue the run exactly where it stopped.
        resumed = true;
        adam_.groups() = std::move(ck.adam);
        iteration_ = ck.iteration;
        stats_ = std::move(ck.densify);
        history_.assign(ck.loss_history.begin(), ck.loss_history.end());
      }
    } else {
      model_ = Model<T>::initial(rig, params, cfg_.atlas_resolution, cfg_.splats_per_triangle, cfg_.seed, cfg_.env_init);
    }
    if (!resumed) stats_.reset(model_.splats.size());
    ctx_ = PipelineContext<T>::make(cfg_, model_.rig, model_.atlas.resolution,
                                    bake_brdf_lut(cfg_.lut_resolution, cfg_.lut_samples), &pool_);
    if (resumed) load_log_prefix();
  }

  int64_t total_iterations() const {
    return cfg_.max_iterations > 0 ? cfg_.max_iterations
                                   : static_cast<int64_t>(cfg_.epochs) * static_cast<int64_t>(train_.size());
  }

  /// Runs until `total_iterations()` (or `stop_at` if positive and smaller) and writes the checkpoint.
  FitResult run(const FitHooks<T>& hooks = {}, int64_t stop_at = 0) {
    FitResult res;
    res.frame_visits.assign(frames_.size(), 0);
    int64_t end = total_iterations();
    if (stop_at > 0) end = std::min(end, stop_at);
    snapshot_ = io::checkpoint_tensors(checkpoint());
    const int snapshot_every = cfg_.checkpoint_every > 0 ? cfg_.checkpoint_every : 100;
    std::vector<int> order;
    int64_t order_epoch = -1;
    while (iteration_ < end) {
      const int64_t epoch = iteration_ / static_cast<int64_t>(train_.size());
      if (epoch != order_epoch) {
        order = epoch_order(train_, cfg_.seed, epoch);
        order_epoch = epoch;
      }
      const int fi = order[static_cast<size_t>(iteration_ % static_cast<int64_t>(train_.size()))];
      const auto t0 = std::chrono::steady_clock::now();
      const auto& frame = frames_[static_cast<size_t>(fi)];
      const auto state = forward(model_, frame.camera, model_.frame_params(frame.params, fi), ctx_);
      auto grads = ModelGrads<T>::zeros(model_);
      const LossTerms terms = frame_loss(model_, state, frame, ctx_, &grads);
      const double loss = sum_terms(terms);
      guard(loss);
      if (hooks.on_grads) hooks.on_grads(iteration_, fi, grads);
      ++res.frame_visits[static_cast<size_t>(fi)];
      accumulate_densify_stats(state, grads);
      try {
        apply_updates(grads, fi);
      } catch (const NumericalError& e) {
        abort_with_snapshot(std::string(e.what()));
      }
      ++iteration_;
      maybe_densify();
      history_.push_back(loss);
      while (history_.size() > static_cast<size_t>(cfg_.divergence_window)) history_.pop_front();
      res.losses.push_back(loss);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (cfg_.log_every > 0 && (iteration_ - 1) % cfg_.log_every == 0) log_line(iteration_ - 1, fi, loss, terms, ms);
      if (hooks.on_iteration) hooks.on_iteration(iteration_ - 1, fi, terms);
      if (iteration_ % snapshot_every == 0) {
        snapshot_ = io::checkpoint_tensors(checkpoint());
        if (cfg_.checkpoint_every > 0) save();
      }
    }
    save();
    res.iterations = iteration_;
    res.splats = static_cast<int>(model_.splats.size());
    return res;
  }

  io::Checkpoint<T> checkpoint() const {
    io::Checkpoint<T> ck;
    ck.model = model_;
    for (const auto& f : ds_.frames) {
      ck.cameras.push_back(f.camera);
      ck.params.push_back(f.params);
    }
    ck.adam = adam_.groups();
    ck.iteration = iteration_;
    ck.densify = stats_;
    ck.loss_history.assign(history_.begin(), history_.end());
    ck.config_hash = config_hash(cfg_);
    // The worker count is a property of the run, not of the result.
    auto cj = to_json(cfg_);
    cj.erase("threads");
    ck.config_json = cj.dump();
    return ck;
  }

  void save() const {
    io::save_checkpoint(out_, checkpoint());
    write_log();
  }

  const Model<T>& model() const { return model_; }
  Model<T>& model() { return model_; }
  const PipelineContext<T>& context() const { return ctx_; }
  const io::SceneDataset& dataset() const { return ds_; }
  const std::vector<io::FrameData<T>>& frames() const { return frames_; }
  const std::vector<int>& train_frames() const { return train_; }
  int64_t iteration() const { return iteration_; }
  std::string log_path() const { return out_ + ".log"; }

 private:
  void guard(double loss) {
    if (!std::isfinite(loss)) abort_with_snapshot("loss is not finite");
    if (history_.size() >= static_cast<size_t>(cfg_.divergence_window)) {
      const double med = detail::median(std::vector<double>(history_.begin(), history_.end()));
      if (loss > cfg_.divergence_factor * med)
        abort_with_snapshot("loss " + std::to_string(loss) + " exceeds " + std::to_string(cfg_.divergence_factor) +
                            "x the recent median " + std::to_string(med));
    }
  }

  [[noreturn]] void abort_with_snapshot(const std::string& why) {
    snapshot_.save(out_, io::kCheckpointMagic, io::kCheckpointVersion);
    write_log();
    throw NumericalError("training diverged at iteration " + std::to_string(iteration_) + ": " + why +
                         "; last good state written to '" + out_ + "'");
  }

  template <typename V> void step(const std::string& group, double lr, std::vector<V>& params, std::vector<V>& grads) {
    const std::string base = group.substr(0, group.find('.'));
    if (cfg_.frozen(base)) return;
    adam_.step(group, lr, detail::flat(params), detail::flat(grads), detail::flat_size(params));
  }

  void apply_updates(ModelGrads<T>& g, int fi) {
    const auto& lr = cfg_.lr;
    auto& s = model_.splats;
    step("bary", lr.bary, s.bary_logits, g.splats.bary_logits);
    step("rotation", lr.rotation, s.rotation, g.splats.rotation);
    step("scale", lr.scale, s.log_scales, g.splats.log_scales);
    step("displacement", lr.displacement, s.displacement, g.splats.displacement);
    step("opacity", lr.opacity, s.opacity_logit, g.splats.opacity_logit);
    step("material", lr.material, model_.atlas.material, g.atlas.material);
    step("normal", lr.normal, model_.atlas.normal, g.atlas.normal);
    step("env", lr.env, model_.env.raw.data, g.env.data);
    step("vertices", lr.vertices, model_.rig.vertices, g.rig.vertices);
    step("skin", lr.skin, model_.rig.skin_weights, g.rig.skin_weights);
    step("blendshapes", lr.blendshapes, model_.rig.blendshapes, g.rig.blendshapes);
    step("stat", lr.stat, model_.stat_coeffs, g.stat);
    if (!model_.expressions[fi].empty())
      step("expression." + std::to_string(fi), lr.expression, model_.expressions[fi], g.rig.expression);

    if (!cfg_.frozen("rotation") && lr.rotation > 0)
      for (auto& q : s.rotation) {
        const T len = q.norm();
        q = len > T(0) ? Vec4<T>(q / len) : quat_identity<T>();
      }
    if (!cfg_.frozen("skin") && lr.skin > 0) {
      const size_t nj = model_.rig.joints.size();
      for (size_t v = 0; v < model_.rig.vertices.size(); ++v) {
        T* w = &model_.rig.skin_weights[v * nj];
        T sum = T(0);
        for (size_t j = 0; j < nj; ++j) sum += w[j] = std::max(w[j], T(0));
        if (sum > T(0))
          for (size_t j = 0; j < nj; ++j) w[j] /= sum;
        else
          w[0] = T(1);
      }
    }
  }

  bool splats_learnable() const {
    for (const char* g : {"bary", "rotation", "scale", "displacement", "opacity"})
      if (cfg_.frozen(g)) return false;
    return true;
  }

  // Screen-space magnitude of the positional gradient, in NDC units.
  void accumulate_densify_stats(const FrameState<T>& s, const ModelGrads<T>& g) {
    const auto& cam = s.camera;
    for (size_t i = 0; i < g.world_center.size() && i < stats_.accum.size(); ++i) {
      const Vec3<T>& gw = g.world_center[i];
      if (gw.isZero(0)) continue;
      const Vec3<T> gc = cam.rotation.transpose() * gw;
      const T z = std::max(cam.to_camera(s.world.center[i])[2], T(1e-6));
      const T gx = gc[0] * z / cam.fx * T(cam.width) / T(2);
      const T gy = gc[1] * z / cam.fy * T(cam.height) / T(2);
      stats_.accum[i] += std::sqrt(gx * gx + gy * gy);
      ++stats_.count[i];
    }
  }

  void maybe_densify() {
    const auto& d = cfg_.densify;
    if (!d.enabled || !splats_learnable() || d.interval <= 0) return;
    if (iteration_ < d.start_iteration || iteration_ > d.stop_iteration || iteration_ % d.interval != 0) return;
    DensifyOptions opts = d;
    opts.seed = cfg_.seed ^ (static_cast<uint64_t>(iteration_) * 0x100000001B3ULL);
    auto r = densify_prune(model_.splats, model_.rig, stats_, opts);
    if (r.splats.size() == 0) return;  // never prune everything
    model_.splats = std::move(r.splats);
    adam_.remap("bary", r.origin, r.fresh, 3);
    adam_.remap("rotation", r.origin, r.fresh, 4);
    adam_.remap("scale", r.origin, r.fresh, 2);
    adam_.remap("displacement", r.origin, r.fresh, 1);
    adam_.remap("opacity", r.origin, r.fresh, 1);
    stats_.reset(model_.splats.size());
  }

  void log_line(int64_t it, int frame, double loss, const LossTerms& terms, double ms) {
    nlohmann::json j = {{"iter", it}, {"frame", frame}, {"loss", loss}, {"splats", model_.splats.size()}, {"ms", ms}};
    for (const auto& [k, v] : terms) j["terms"][k] = v;
    log_ << j.dump() << "\n";
  }

  void write_log() const {
    io::write_atomically(log_path(), [&](std::ostream& os) { os << log_.str(); });
  }

  // On resume, keep the log records of the iterations already done. They live
  // next to the checkpoint being resumed, which need not be the output path.
  void load_log_prefix() {
    std::ifstream is(cfg_.init_checkpoint + ".log");
    std::string line;
    while (std::getline(is, line)) {
      try {
        const auto j = nlohmann::json::parse(line);
        if (j.at("iter").get<int64_t>() < iteration_) log_ << line << "\n";
      } catch (const nlohmann::json::exception&) {
        break;
      }
    }
  }

  TrainConfig cfg_;
  std::string out_;
  ThreadPool pool_;
  io::SceneDataset ds_;
  std::vector<io::FrameData<T>> frames_;
  std::vector<int> train_;
  Model<T> model_;
  PipelineContext<T> ctx_;
  Adam<T> adam_;
  DensifyStats<T> stats_;
  int64_t iteration_ = 0;
  std::deque<double> history_;
  io::TensorFile snapshot_;
  std::ostringstream log_;
};

/// trainer.fit: trains per `cfg` and writes the checkpoint (and `<out>.log`).
template <typename T = float> FitResult fit(const TrainConfig& cfg, const std::string& out, const FitHooks<T>& hooks = {}) {
  Trainer<T> t(cfg, out);
  return t.run(hooks);
}

}  // namespace uvsplat
