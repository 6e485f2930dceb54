// uvsplat command-line tool. Exit codes: 0 ok, 2 usage, 3 data, 4 numerical divergence.

#include "uvsplat/synth.hpp"
#include "uvsplat/trainer.hpp"
#include "uvsplat/workflows.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace uvsplat;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kDiverged = 4 };

void report(const char* kind, const std::string& msg) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", msg}}.dump() << "\n";
}

std::string frame_name(const std::string& dir, int i, const std::string& ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d", i);
  return (fs::path(dir) / (std::string(buf) + ext)).string();
}

// Renders a loaded checkpoint; keeps the LUT and worker pool alive together.
struct Scene {
  io::Checkpoint<float> ck;
  ThreadPool pool;
  PipelineContext<float> ctx;

  Scene(const std::string& path, int threads)
      : ck(io::load_checkpoint<float>(path)), pool(static_cast<unsigned>(std::max(0, threads))) {
    ctx = context_for(ck, bake_brdf_lut(), &pool);
  }
};

struct Common {
  int threads = 0;
};

void add_threads(CLI::App* c, Common& o) {
  c->add_option("--threads", o.threads, "worker threads (0: all cores)")->check(CLI::NonNegativeNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uvsplat: UV-parameterized Gaussian splat avatars"};
  app.require_subcommand(1);
  Common common;

  // synth
  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "render a ground-truth dataset from known textures and lighting");
  synth->add_option("--rig", so.rig_path, "template rig file (default: built-in ellipsoid head)");
  synth->add_option("--frames", so.frames, "number of frames")->check(CLI::PositiveNumber);
  synth->add_option("--env", so.env_path, "equirectangular .pfm environment (default: procedural)");
  synth->add_option("--seed", so.seed, "texture and splat seed");
  synth->add_option("--size", so.image_size, "image width and height")->check(CLI::Range(8, 8192));
  synth->add_option("--focal", so.focal, "focal length in pixels")->check(CLI::PositiveNumber);
  synth->add_option("--atlas", so.atlas_resolution, "ground-truth texture resolution")->check(CLI::PositiveNumber);
  synth->add_option("--splats-per-triangle", so.splats_per_triangle)->check(CLI::PositiveNumber);
  synth->add_option("--prior-every", so.prior_every, "write a prior albedo every k-th frame (0: none)")
      ->check(CLI::NonNegativeNumber);
  synth->add_option("--out", so.out, "output dataset directory")->required();
  synth->add_option("--threads", so.threads)->check(CLI::NonNegativeNumber);

  // fit
  std::string fit_data, fit_config, fit_out, fit_init;
  std::optional<uint64_t> fit_seed;
  std::optional<int> fit_iters;
  bool fit_quiet = false;
  auto* fitc = app.add_subcommand("fit", "optimize a scene from a dataset");
  fitc->add_option("--data", fit_data, "dataset directory")->required();
  fitc->add_option("--config", fit_config, "JSON training config (defaults when omitted)");
  fitc->add_option("--out", fit_out, "output checkpoint")->required();
  fitc->add_option("--init", fit_init, "start from or resume this checkpoint");
  fitc->add_option("--seed", fit_seed);
  fitc->add_option("--max-iterations", fit_iters)->check(CLI::NonNegativeNumber);
  fitc->add_flag("--quiet", fit_quiet, "no progress output");
  add_threads(fitc, common);

  // render
  std::string r_ckpt, r_params, r_camera, r_out, r_gb, r_xf;
  std::optional<int> r_frame;
  auto* render_c = app.add_subcommand("render", "render and shade one view of a checkpoint");
  render_c->add_option("--ckpt", r_ckpt)->required();
  auto* r_frame_opt = render_c->add_option("--frame", r_frame, "stored frame index");
  auto* r_params_opt = render_c->add_option("--params", r_params, "rig parameters JSON");
  auto* r_camera_opt = render_c->add_option("--camera", r_camera, "camera JSON");
  r_frame_opt->excludes(r_params_opt)->excludes(r_camera_opt);
  render_c->add_option("--out", r_out, "output image (.pfm linear, .ppm display)")->required();
  render_c->add_option("--dump-gbuffers", r_gb, "directory for per-attribute G-buffer images");
  render_c->add_option("--dump-uv-transforms", r_xf, "CSV file of per-splat UV transforms");
  add_threads(render_c, common);

  // relight
  std::string rl_ckpt, rl_env, rl_out, rl_ext = ".pfm";
  auto* relight = app.add_subcommand("relight", "swap the environment and render every stored frame");
  relight->add_option("--ckpt", rl_ckpt)->required();
  relight->add_option("--env", rl_env, "equirectangular .pfm environment")->required();
  relight->add_option("--out", rl_out, "output directory")->required();
  relight->add_option("--format", rl_ext, "image extension")->check(CLI::IsMember({".pfm", ".ppm"}));
  add_threads(relight, common);

  // animate
  std::string an_ckpt, an_params, an_out, an_ext = ".pfm";
  auto* animate = app.add_subcommand("animate", "render a sequence of new poses and expressions");
  animate->add_option("--ckpt", an_ckpt)->required();
  animate->add_option("--params-file", an_params, "JSON {\"frames\": [{\"params\": ..., \"camera\": ...}]}")
      ->required();
  animate->add_option("--out", an_out, "output directory")->required();
  animate->add_option("--format", an_ext, "image extension")->check(CLI::IsMember({".pfm", ".ppm"}));
  add_threads(animate, common);

  // edit-apply / export-textures
  std::string ea_ckpt, ea_out;
  std::map<std::string, std::string> ea_files;
  auto* edit = app.add_subcommand("edit-apply", "replace textures with edited images");
  edit->add_option("--ckpt", ea_ckpt)->required();
  for (const char* ch : {"albedo", "roughness", "f0", "normal"})
    edit->add_option(std::string("--") + ch, ea_files[ch], std::string(ch) + " image in the atlas layout");
  edit->add_option("--out", ea_out, "output checkpoint")->required();

  std::string ex_ckpt, ex_out, ex_ext = ".pfm";
  auto* exportc = app.add_subcommand("export-textures", "write the textures as editable images");
  exportc->add_option("--ckpt", ex_ckpt)->required();
  exportc->add_option("--out", ex_out, "output directory")->required();
  exportc->add_option("--format", ex_ext, "image extension")->check(CLI::IsMember({".pfm", ".ppm"}));

  // downscale-texture
  std::string ds_ckpt, ds_out;
  int ds_size = 0;
  auto* down = app.add_subcommand("downscale-texture", "box-filter the textures to a smaller resolution");
  down->add_option("--ckpt", ds_ckpt)->required();
  down->add_option("--size", ds_size, "new resolution (power of two)")->required();
  down->add_option("--out", ds_out, "output checkpoint")->required();

  // prefilter-env / bake-lut
  std::string pe_env, pe_out;
  int pe_size = kEnvSize;
  auto* pre = app.add_subcommand("prefilter-env", "write the prefiltered cubemap chain of an environment");
  pre->add_option("--env", pe_env, "equirectangular .pfm environment")->required();
  pre->add_option("--out", pe_out, "output directory")->required();
  pre->add_option("--size", pe_size)->check(CLI::IsMember({kEnvSize}));

  std::string lut_out;
  int lut_res = 64, lut_samples = 1024;
  auto* lut = app.add_subcommand("bake-lut", "precompute the split-sum BRDF table");
  lut->add_option("--out", lut_out)->required();
  lut->add_option("--resolution", lut_res)->check(CLI::Range(16, 1024));
  lut->add_option("--samples", lut_samples)->check(CLI::Range(256, 1 << 20));

  // eval
  std::string ev_ckpt, ev_data, ev_split = "heldout", ev_out;
  auto* eval = app.add_subcommand("eval", "PSNR and SSIM on the masked region");
  eval->add_option("--ckpt", ev_ckpt)->required();
  eval->add_option("--data", ev_data)->required();
  eval->add_option("--split", ev_split)->check(CLI::IsMember({"train", "heldout", "all"}));
  eval->add_option("--out", ev_out, "metrics JSON file (stdout when omitted)");
  add_threads(eval, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report("usage", e.what());
    return kUsage;
  }

  try {
    if (*synth) {
      const auto truth = synthesize(so);
      std::cout << nlohmann::json{{"dataset", so.out}, {"truth", truth}}.dump() << "\n";
    } else if (*fitc) {
      TrainConfig cfg = fit_config.empty() ? TrainConfig{} : load_config(fit_config);
      cfg.data = fit_data;
      if (!fit_init.empty()) cfg.init_checkpoint = fit_init;
      if (fit_seed) cfg.seed = *fit_seed;
      if (fit_iters) cfg.max_iterations = *fit_iters;
      if (common.threads > 0) cfg.threads = common.threads;
      Trainer<float> trainer(cfg, fit_out);
      const int64_t total = trainer.total_iterations();
      FitHooks<float> hooks;
      if (!fit_quiet)
        hooks.on_iteration = [&](int64_t it, int, const LossTerms& terms) {
          if ((it + 1) % 50 == 0 || it + 1 == total)
            std::cerr << "iter " << (it + 1) << "/" << total << " loss " << sum_terms(terms) << "\n";
        };
      const auto res = trainer.run(hooks);
      std::cout << nlohmann::json{{"checkpoint", fit_out}, {"iterations", res.iterations}, {"splats", res.splats}}.dump()
                << "\n";
    } else if (*render_c) {
      Scene sc(r_ckpt, common.threads);
      FrameState<float> s;
      if (r_frame) {
        s = render_frame(sc.ck, *r_frame, sc.ctx);
      } else {
        if (r_params.empty() || r_camera.empty()) {
          report("usage", "render needs --frame or both --params and --camera");
          return kUsage;
        }
        const auto cam = io::camera_from_json(io::read_json(r_camera), r_camera).cast<float>();
        const auto params = io::cast_params<float>(io::params_from_json(io::read_json(r_params), r_params));
        if (params.expression.size() != static_cast<size_t>(sc.ck.model.rig.num_blendshapes) ||
            params.joint_rotations.size() != sc.ck.model.rig.joints.size())
          throw DataError(r_params + ": parameter counts do not match the rig");
        s = forward(sc.ck.model, cam, params, sc.ctx);
      }
      io::save_image(r_out, s.linear);
      if (!r_gb.empty()) dump_gbuffers(s.gbuffers, r_gb);
      if (!r_xf.empty()) write_uv_transforms_csv(r_xf, s.xf, sc.ck.model.splats);
    } else if (*relight) {
      Scene sc(rl_ckpt, common.threads);
      relight_checkpoint(sc.ck, io::load_image(rl_env, false));
      fs::create_directories(rl_out);
      for (int i = 0; i < static_cast<int>(sc.ck.cameras.size()); ++i)
        io::save_image(frame_name(rl_out, i, rl_ext), render_frame(sc.ck, i, sc.ctx).linear);
    } else if (*animate) {
      Scene sc(an_ckpt, common.threads);
      const auto j = io::read_json(an_params);
      if (!j.contains("frames") || !j["frames"].is_array()) throw DataError(an_params + ": needs a \"frames\" array");
      if (sc.ck.cameras.empty()) throw DataError(an_ckpt + ": checkpoint has no cameras");
      fs::create_directories(an_out);
      const EnvChain<float> chain = prefilter_env(sc.ck.model.env.radiance());
      int i = 0;
      for (const auto& f : j["frames"]) {
        const std::string where = an_params + ": frames[" + std::to_string(i) + "]";
        const auto cam = f.contains("camera") ? io::camera_from_json(f["camera"], where) : sc.ck.cameras[0];
        if (!f.contains("params")) throw DataError(where + ": missing params");
        const auto params = io::cast_params<float>(io::params_from_json(f["params"], where));
        if (params.expression.size() != static_cast<size_t>(sc.ck.model.rig.num_blendshapes) ||
            params.joint_rotations.size() != sc.ck.model.rig.joints.size())
          throw DataError(where + ": parameter counts do not match the rig");
        const auto s = forward(sc.ck.model, cam.cast<float>(), params, sc.ctx, &chain);
        io::save_image(frame_name(an_out, i++, an_ext), s.linear);
      }
    } else if (*edit) {
      auto ck = io::load_checkpoint<float>(ea_ckpt);
      bool any = false;
      for (const auto& [ch, path] : ea_files) {
        if (path.empty()) continue;
        import_texture_file(ck.model.atlas, parse_texture_channel(ch), path);
        any = true;
      }
      if (!any) {
        report("usage", "edit-apply needs at least one of --albedo, --roughness, --f0, --normal");
        return kUsage;
      }
      drop_texture_optimizer_state(ck);
      io::save_checkpoint(ea_out, ck);
    } else if (*exportc) {
      const auto ck = io::load_checkpoint<float>(ex_ckpt);
      fs::create_directories(ex_out);
      for (auto ch : {TextureChannel::kAlbedo, TextureChannel::kRoughness, TextureChannel::kF0, TextureChannel::kNormal})
        export_texture_file(ck.model.atlas, ch, (fs::path(ex_out) / (texture_channel_name(ch) + ex_ext)).string());
    } else if (*down) {
      auto ck = io::load_checkpoint<float>(ds_ckpt);
      downscale_checkpoint(ck, ds_size);
      io::save_checkpoint(ds_out, ck);
    } else if (*pre) {
      const auto env = equirect_to_cubemap(io::load_image(pe_env, false), pe_size);
      write_env_chain(prefilter_env(env), pe_out);
    } else if (*lut) {
      save_brdf_lut(lut_out, bake_brdf_lut(lut_res, lut_samples));
    } else if (*eval) {
      Scene sc(ev_ckpt, common.threads);
      const auto ds = io::load_dataset(ev_data);
      if (ds.frames.size() != sc.ck.model.expressions.size())
        throw DataError(ev_data + ": frame count does not match the checkpoint");
      const int holdout = stored_config(sc.ck).holdout_every;
      const auto frames = split_frames(static_cast<int>(ds.frames.size()), parse_split(ev_split), holdout);
      auto report_json = evaluate(sc.ck.model, ds, frames, sc.ctx).to_json();
      report_json["split"] = ev_split;
      if (ev_out.empty())
        std::cout << report_json.dump(2) << "\n";
      else
        io::write_json(ev_out, report_json);
    }
  } catch (const NumericalError& e) {
    report("numerical", e.what());
    return kDiverged;
  } catch (const DataError& e) {
    report("data", e.what());
    return kData;
  } catch (const fs::filesystem_error& e) {
    report("data", e.what());
    return kData;
  } catch (const std::exception& e) {
    report("internal", e.what());
    return 1;
  }
  return kOk;
}
