// tvf: multi-view latent fusion for novel view synthesis.
// Subcommands: gen-data, train, sample, eval.
// Exit codes: 0 ok, 2 usage/config error, 3 missing prerequisite, 4 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "tvf/archive.hpp"
#include "tvf/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tvf;

namespace {

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> overrides;
  int64_t seed = -1;
  int threads = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_file, "key = value config file");
  cmd->add_option("--set", opts.overrides, "config override key=value (repeatable)");
  cmd->add_option("--seed", opts.seed, "run seed (overrides config)");
  cmd->add_option("--threads", opts.threads, "worker cap (0 = auto)");
}

RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig cfg;
  if (!opts.config_file.empty()) load_config_file(cfg, opts.config_file);
  for (const std::string& kv : opts.overrides) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + kv);
    config_set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opts.seed >= 0) cfg.seed = uint64_t(opts.seed);
  if (opts.threads >= 0) cfg.threads = opts.threads;
  return cfg;
}

std::vector<double> parse_degree_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError("bad angle list entry: " + tok);
    }
  }
  if (out.empty()) throw ConfigError("empty angle list: " + s);
  return out;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  for (double d : parse_degree_list(s)) out.push_back(int(d));
  return out;
}

void write_pgm(const std::string& path, const Tensor& img, int channel) {
  int h = img.dim(1), w = img.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  long hw = long(h) * w;
  for (long i = 0; i < hw; ++i) {
    double v = (double(img[channel * hw + i]) + 1.0) * 0.5;  // [-1,1] -> [0,1]
    int b = int(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    out.put(char(b));
  }
}

ParamSet load_model(const std::string& ckpt_dir) {
  StagePaths p0 = stage_paths(ckpt_dir, 0);
  StagePaths p2 = stage_paths(ckpt_dir, 2);
  if (!file_exists(p0.ckpt))
    throw PrereqError("missing prerequisite checkpoint " + p0.ckpt + " (backbone. archive from train --stage 0)");
  if (!file_exists(p2.ckpt))
    throw PrereqError("missing prerequisite checkpoint " + p2.ckpt +
                      " (lift./fuse./inject. archive from train --stage 2)");
  ParamSet full = load_archive(p0.ckpt, "paramset").params;
  full.set_trainable("backbone.", false);
  full.absorb(load_archive(p2.ckpt, "paramset").params);
  return full;
}

int cmd_gen_data(const CommonOpts& common, int objects, int eval_objects, int views,
                 const std::string& out_dir) {
  RunConfig cfg = resolve_config(common);
  if (objects > 0) cfg.data_train_objects = objects;
  if (eval_objects >= 0) cfg.data_eval_objects = eval_objects;
  if (views > 0) cfg.data_views = views;
  fs::create_directories(out_dir);
  Dataset train = build_dataset(mix_seed(cfg.seed, 0x7441u), cfg.data_train_objects, cfg.data_views,
                                cfg.latent_size, cfg.camera_fov_deg, cfg.camera_radius, cfg.threads);
  save_dataset(out_dir + "/train.tvfd", train);
  if (cfg.data_eval_objects > 0) {
    Dataset eval = build_dataset(mix_seed(cfg.seed, 0xE7A1u), cfg.data_eval_objects, cfg.data_views,
                                 cfg.latent_size, cfg.camera_fov_deg, cfg.camera_radius, cfg.threads);
    save_dataset(out_dir + "/eval.tvfd", eval);
  }
  write_config_echo(cfg, out_dir + "/gen-data.config");
  std::cout << "wrote " << out_dir << "/train.tvfd (" << cfg.data_train_objects << " objects, "
            << cfg.data_views << " views each)";
  if (cfg.data_eval_objects > 0) std::cout << " and eval.tvfd (" << cfg.data_eval_objects << " objects)";
  std::cout << "\n";
  return 0;
}

int cmd_train(const CommonOpts& common, int stage, const std::string& data_dir, const std::string& out_dir,
              bool resume, int epochs_override) {
  RunConfig cfg = resolve_config(common);
  if (epochs_override > 0) {
    if (stage == 0) cfg.stage0_epochs = epochs_override;
    if (stage == 1) cfg.stage1_epochs = epochs_override;
    if (stage == 2) cfg.stage2_epochs = epochs_override;
  }
  std::string train_path = data_dir + "/train.tvfd";
  if (!file_exists(train_path)) throw PrereqError("missing dataset " + train_path + " (run gen-data first)");
  Dataset ds = load_dataset(train_path);
  fs::create_directories(out_dir);
  StageResult r = train_stage(cfg, stage, ds, out_dir, resume);
  std::cout << "stage " << stage << ": " << r.steps << " steps, loss " << format_number(r.first_window_loss)
            << " -> " << format_number(r.last_window_loss) << "\n";
  std::cout << "wrote " << r.ckpt_path << " and " << r.loss_csv_path << "\n";
  if (stage == 2)
    std::cout << "backbone freeze check: " << (r.backbone_frozen_ok ? "ok (bitwise identical)" : "FAILED")
              << "\n";
  return r.backbone_frozen_ok ? 0 : 1;
}

int cmd_sample(const CommonOpts& common, const std::string& views_arg, const std::string& targets_arg,
               int64_t object_seed, const std::string& ckpt_dir, const std::string& out_dir, bool pgm,
               const std::string& dump_fused_dir, bool verbose) {
  RunConfig cfg = resolve_config(common);
  std::vector<double> view_az = parse_degree_list(views_arg);
  std::vector<double> target_az = parse_degree_list(targets_arg);
  ParamSet full = load_model(ckpt_dir);
  fs::create_directories(out_dir);

  SyntheticObject obj = gen_object(uint64_t(object_seed));
  std::vector<LatentImage> inputs;
  for (double az : view_az)
    inputs.push_back(render_latent(obj, pose_from_degrees(az, 0.0, cfg.camera_radius), cfg.latent_size,
                                   cfg.camera_fov_deg));

  ParamSet dump;
  ParamSet fused_dump;
  for (size_t ti = 0; ti < target_az.size(); ++ti) {
    CameraPose target = pose_from_degrees(target_az[ti], 0.0, cfg.camera_radius);
    Tensor fused, opacity;
    Tensor sample = sample_with_injection(cfg, full, inputs, target, mix_seed(cfg.seed, 0x5A3Fu, ti),
                                          verbose, &fused, &opacity);
    char name[48];
    std::snprintf(name, sizeof(name), "sample_%03d", int(ti));
    if (pgm)
      for (int c = 0; c < 4; ++c)
        write_pgm(out_dir + "/" + name + "_c" + std::to_string(c) + ".pgm", sample, c);
    dump.add(name, std::move(sample), false);
    if (!dump_fused_dir.empty()) {
      std::snprintf(name, sizeof(name), "fused_%03d", int(ti));
      fused_dump.add(name, std::move(fused), false);
      std::snprintf(name, sizeof(name), "opacity_%03d", int(ti));
      fused_dump.add(name, std::move(opacity), false);
    }
  }
  nlohmann::json extra;
  extra["config_hash"] = config_hash(cfg);
  save_archive(out_dir + "/samples.tvfd", dump, "latentdump", extra);
  if (!dump_fused_dir.empty()) {
    fs::create_directories(dump_fused_dir);
    save_archive(dump_fused_dir + "/fused.tvfd", fused_dump, "latentdump", extra);
  }
  write_config_echo(cfg, out_dir + "/sample.config");
  std::cout << "wrote " << out_dir << "/samples.tvfd (" << target_az.size() << " target latents)\n";
  return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& counts_arg, const std::string& data_dir,
             const std::string& ckpt_dir, const std::string& out_file, const std::string& gating_csv) {
  RunConfig cfg = resolve_config(common);
  std::vector<int> counts = parse_int_list(counts_arg);
  std::string eval_path = data_dir + "/eval.tvfd";
  if (!file_exists(eval_path)) throw PrereqError("missing dataset " + eval_path + " (run gen-data first)");
  Dataset ds = load_dataset(eval_path);
  if (ds.object_seeds.empty()) throw ConfigError("eval: dataset has no objects");
  ParamSet full = load_model(ckpt_dir);
  EvalReport report = evaluate(cfg, ds, full, counts);
  write_eval_csv(report, out_file);
  for (size_t i = 0; i < counts.size(); ++i)
    std::cout << "mean PSNR @" << counts[i] << " views: " << format_number(report.mean_psnr[i]) << " dB\n";
  std::cout << "mean PSNR backbone baseline: " << format_number(report.baseline_mean_psnr) << " dB\n";
  std::cout << "wrote " << out_file << "\n";

  if (!gating_csv.empty()) {
    SyntheticObject obj = gen_object(ds.object_seeds[0]);
    EvalViews ev = eval_views(obj, 4, cfg.latent_size, cfg.camera_fov_deg, cfg.camera_radius);
    Tensor f_t = render_fused_latent(cfg, full, ev.inputs, ev.targets[0].pose);
    Rng rng(mix_seed(cfg.seed, 0x6A7Eu));
    Tensor x_t({4, cfg.latent_size, cfg.latent_size});
    for (long i = 0; i < x_t.numel(); ++i) x_t[i] = float(rng.normal());
    std::vector<double> degs = {0, 30, 60, 90, 120, 150, 180};
    auto mags = gating_probe(injection_config(cfg), full.subset("inject."), f_t, x_t,
                             std::max(1, cfg.schedule_steps / 2), degs);
    std::ofstream gout(gating_csv);
    if (!gout) throw Error("cannot write " + gating_csv);
    gout << "delta_deg,mean_residual_norm\n";
    for (size_t i = 0; i < degs.size(); ++i)
      gout << format_number(degs[i]) << "," << format_number(mags[i]) << "\n";
    std::cout << "wrote " << gating_csv << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tvf: multi-view latent fusion for controllable novel view synthesis"};
  app.require_subcommand(1);

  CommonOpts c_gen, c_train, c_sample, c_eval;

  auto* gen = app.add_subcommand("gen-data", "generate the procedural multi-view latent dataset");
  int gen_objects = -1, gen_eval_objects = -1, gen_views = -1;
  std::string gen_out;
  gen->add_option("--objects", gen_objects, "number of training objects");
  gen->add_option("--eval-objects", gen_eval_objects, "number of held-out objects");
  gen->add_option("--views", gen_views, "stored views per object");
  gen->add_option("--out", gen_out, "output directory")->required();
  add_common(gen, c_gen);

  auto* train = app.add_subcommand("train", "run a training stage");
  int train_stage_id = -1, train_epochs = -1;
  std::string train_data, train_out;
  bool train_resume = false;
  train->add_option("--stage", train_stage_id, "0 = backbone, 1 = lifting, 2 = joint")->required();
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "checkpoint directory")->required();
  train->add_option("--epochs", train_epochs, "override the stage epoch budget");
  train->add_flag("--resume", train_resume, "resume from the stage checkpoint");
  add_common(train, c_train);

  auto* sample = app.add_subcommand("sample", "sample target-view latents from input views");
  std::string sample_views, sample_targets, sample_ckpt, sample_out, sample_dump_fused;
  int64_t sample_object_seed = 0;
  bool sample_pgm = false, sample_verbose = false;
  sample->add_option("--views", sample_views, "input view azimuths in degrees, comma separated")->required();
  sample->add_option("--target", sample_targets, "target azimuths in degrees, comma separated")->required();
  sample->add_option("--object-seed", sample_object_seed, "procedural object seed");
  sample->add_option("--ckpt-dir", sample_ckpt, "directory with stage0/stage2 checkpoints")->required();
  sample->add_option("--out", sample_out, "output directory")->required();
  sample->add_option("--dump-fused", sample_dump_fused, "also dump fused latent and opacity maps here");
  sample->add_flag("--pgm", sample_pgm, "write per-channel PGM previews");
  sample->add_flag("--verbose", sample_verbose, "per-step sampler diagnostics");
  add_common(sample, c_sample);

  auto* eval = app.add_subcommand("eval", "evaluate the trained model over view-count sweeps");
  std::string eval_counts = "1,2,3,4", eval_data, eval_ckpt, eval_out, eval_gating;
  eval->add_option("--view-counts", eval_counts, "input view counts, comma separated");
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--ckpt-dir", eval_ckpt, "directory with stage0/stage2 checkpoints")->required();
  eval->add_option("--out", eval_out, "report CSV path")->required();
  eval->add_option("--gating-csv", eval_gating, "also write the injection gating probe CSV");
  add_common(eval, c_eval);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(c_gen, gen_objects, gen_eval_objects, gen_views, gen_out);
    if (train->parsed()) return cmd_train(c_train, train_stage_id, train_data, train_out, train_resume,
                                          train_epochs);
    if (sample->parsed()) return cmd_sample(c_sample, sample_views, sample_targets, sample_object_seed,
                                            sample_ckpt, sample_out, sample_pgm, sample_dump_fused,
                                            sample_verbose);
    if (eval->parsed()) return cmd_eval(c_eval, eval_counts, eval_data, eval_ckpt, eval_out, eval_gating);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const PrereqError& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
