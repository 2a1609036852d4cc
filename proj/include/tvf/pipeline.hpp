#pragma once

// Training stages and evaluation: stage 0 pretrains the denoiser backbone,
// stage 1 pretrains lifting + fusion readout on sparse-view reconstruction,
// stage 2 jointly trains lifting + injection against the frozen backbone.

#include <string>
#include <vector>

#include "tvf/config.hpp"
#include "tvf/diffusion.hpp"
#include "tvf/fusion.hpp"
#include "tvf/injection.hpp"
#include "tvf/lifting.hpp"
#include "tvf/metrics.hpp"
#include "tvf/synthetic.hpp"

namespace tvf {

LiftingConfig lifting_config(const RunConfig& cfg);
BackboneConfig backbone_config(const RunConfig& cfg);
InjectionConfig injection_config(const RunConfig& cfg);
FusionConfig fusion_config(const RunConfig& cfg);
NoiseSchedule schedule_from(const RunConfig& cfg);
ParamSet init_fusion_readout(const RunConfig& cfg, Rng& rng);

struct StagePaths {
  std::string ckpt, state, loss_csv, config_echo;
};
StagePaths stage_paths(const std::string& out_dir, int stage);

struct StageResult {
  std::string ckpt_path;
  std::string loss_csv_path;
  double first_window_loss = 0;  // mean over the first (up to) 100 steps
  double last_window_loss = 0;   // mean over the last (up to) 100 steps
  double final_loss = 0;
  long steps = 0;
  bool backbone_frozen_ok = true;  // stage 2 only
};

StageResult train_stage(const RunConfig& cfg, int stage, const Dataset& train_ds, const std::string& out_dir,
                        bool resume = false);

// Index of the input whose azimuth is closest to the target's (the main view).
int closest_view_index(const std::vector<CameraPose>& inputs, const CameraPose& target);

// Renders the fused target-view latent from input views (eval mode, no
// jitter). Optionally reports the opacity map.
Tensor render_fused_latent(const RunConfig& cfg, const ParamSet& lift_fuse,
                           const std::vector<LatentImage>& inputs, const CameraPose& target,
                           Tensor* opacity_out = nullptr);

// Full-model sampling: fused latent -> injector residuals -> DDPM.
Tensor sample_with_injection(const RunConfig& cfg, const ParamSet& full_params,
                             const std::vector<LatentImage>& inputs, const CameraPose& target,
                             uint64_t rng_seed, bool verbose = false, Tensor* fused_out = nullptr,
                             Tensor* opacity_out = nullptr);

// Backbone-only sampling from the main view (the single-view baseline).
Tensor sample_backbone_only(const RunConfig& cfg, const ParamSet& params,
                            const std::vector<LatentImage>& inputs, const CameraPose& target,
                            uint64_t rng_seed);

struct ReconEval {
  double mean_mse = 0;
  double zero_baseline_mse = 0;
};
// Held-out sparse-view reconstruction quality with n input views.
ReconEval eval_reconstruction(const RunConfig& cfg, const Dataset& eval_ds, const ParamSet& lift_fuse,
                              int n_views);

struct EvalRow {
  uint64_t object_seed = 0;
  int n_views = 0;
  double psnr = 0, ssim = 0, mse = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;           // one per (object, n)
  std::vector<EvalRow> baseline_rows;  // backbone-only, one per object
  std::vector<int> view_counts;
  std::vector<double> mean_psnr;  // aligned with view_counts
  double baseline_mean_psnr = 0;
  std::string config_hash;
  double runtime_sec = 0;
};

EvalReport evaluate(const RunConfig& cfg, const Dataset& eval_ds, const ParamSet& full_params,
                    const std::vector<int>& view_counts);
void write_eval_csv(const EvalReport& report, const std::string& path);

// Training losses as CSV rows "step,loss".
void write_loss_csv(const std::string& path, const std::vector<double>& losses, bool append, long first_step);

}  // namespace tvf
