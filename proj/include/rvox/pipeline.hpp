#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rvox/rubik.hpp"
#include "rvox/volume.hpp"

namespace rvox::pipeline {

// Deterministic stand-in for CT/MR volumes: smoothed blobs plus noise.
// Blob radius bands double as segmentation classes (band b -> label b+1).
struct SyntheticSpec {
  int count = 24;
  std::array<int, 3> dims{16, 16, 16};
  int channels = 1;
  std::array<int, 2> blob_count{2, 5};      // inclusive
  std::array<double, 2> blob_radius{2.0, 4.0};  // voxels
  double smoothness = 0.5;  // Gaussian profile width as a fraction of radius
  double noise_sd = 0.02;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  // data
  std::string data_source = "synthetic";  // synthetic | volumes_dir | pairs_dir
  std::string data_dir;
  SyntheticSpec synth;
  std::array<int, 3> crop{16, 16, 16};
  std::string normalize = "minmax01";  // minmax01 | zscore
  // disarrangement
  std::array<int, 3> side{4, 4, 4};
  int m = 2;
  // objective
  std::string recon_loss = "l1";  // l1 | l2
  bool adversarial = true;
  std::string adv_mode = "nonsaturating";
  double lambda = 10.0;
  // model
  int depth = 2;
  int base_channels = 8;
  // optimizer / schedule
  double pretrain_lr = 1e-3;
  double d_lr_scale = 0.25;   // discriminator lr = pretrain_lr * d_lr_scale
  double finetune_lr = 1e-4;  // kept low to preserve pre-trained features
  int batch_size = 2;
  int pretrain_steps = 500;
  int finetune_steps = 300;
  // fine-tuning
  double label_fraction = 1.0;  // in (0, 1]
  int num_classes = 3;
  int eval_count = 0;  // held-out volumes; 0 -> max(1, count/4)

  std::uint64_t seed = 1;
  std::string out_dir = "runs/out";
};

// Strict JSON round trip: unknown keys are rejected, every field typed.
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::string& path);
// Dotted-path override, e.g. "objective.lambda=5" or "data.crop=16,16,16".
void apply_override(ExperimentConfig& cfg, const std::string& assignment);
std::string config_digest(const ExperimentConfig& cfg);

struct LossRow {
  long step = 0;
  double l1 = 0, l2 = 0, adv_d = 0, adv_g = 0, joint = 0;
};

struct CeRow {
  long step = 0;
  double ce = 0;
};

struct MetricsReport {
  std::vector<LossRow> rows;     // pretext training
  std::vector<CeRow> ce_rows;    // fine-tune training
  double final_recon_mse = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> per_class_dice;
  double mean_dice = std::numeric_limits<double>::quiet_NaN();
  double wall_clock_s = 0;
  std::string config_digest;
  std::uint64_t seed = 0;
  std::string status = "ok";  // ok | diverged
};

std::vector<Volume> synth_volumes(const SyntheticSpec& spec);

struct LabeledVolumes {
  std::vector<Volume> volumes;
  std::vector<std::vector<std::int32_t>> labels;  // one int per voxel position
};
LabeledVolumes synth_labeled_volumes(const SyntheticSpec& spec, int num_classes);

struct PretextPair {
  std::string id;
  Volume x, y;
  rubik::DisarrangeRecord record;
};

// In-memory pretext pairs from the configured source (crop, normalize,
// disarrange; per-sample seeds split from cfg.seed).
std::vector<PretextPair> make_pretext_pairs(const ExperimentConfig& cfg);

// Writes pairs/<id>.{x.f32,y.f32,json,hdr.json} under out_dir.
int gen_pretext_dataset(const ExperimentConfig& cfg, const std::string& out_dir);
std::vector<PretextPair> load_pretext_pairs(const std::string& pairs_dir);

struct PretrainResult {
  std::string checkpoint_path;
  MetricsReport report;
};
PretrainResult pretrain(const ExperimentConfig& cfg);

// checkpoint_path empty -> train from scratch.
MetricsReport finetune(const ExperimentConfig& cfg,
                       const std::string& checkpoint_path);

struct SweepRow {
  int n = 0, m = 0;
  std::uint64_t seed = 0;
  double final_mse = 0, mean_dice = 0;
};
std::vector<SweepRow> difficulty_sweep(const ExperimentConfig& cfg,
                                       const std::vector<int>& n_values,
                                       const std::vector<int>& m_values);

struct EvalResult {
  double mse = 0;
  std::vector<std::pair<std::string, double>> per_sample;
};
EvalResult evaluate_restoration_with(
    const std::function<Volume(const Volume&)>& restorer,
    const std::vector<PretextPair>& pairs);
EvalResult evaluate_restoration(const std::string& checkpoint_path,
                                const std::string& pairs_dir,
                                const std::string& csv_path);

// Paired comparison of per-seed/per-fold dice lists; returns a JSON summary.
// A zero-variance difference is reported, not thrown.
std::string compare_runs(std::span<const double> dice_a,
                         std::span<const double> dice_b);

// Report writers (deterministic byte output; wall_clock_s is the only
// rerun-dependent field and lives in the JSON, not the CSVs).
void write_losses_csv(const MetricsReport& rep, const std::string& path);
void write_report_json(const MetricsReport& rep, const std::string& path);
void write_run_manifest(const ExperimentConfig& cfg, double wall_clock_s,
                        const std::string& path);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path);

}  // namespace rvox::pipeline
