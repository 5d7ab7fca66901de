#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "pointcmp/data.hpp"
#include "pointcmp/encoder.hpp"
#include "pointcmp/global_branch.hpp"
#include "pointcmp/local_branch.hpp"
#include "pointcmp/nn.hpp"

namespace pointcmp::train {

struct RunConfig {
  // data / clips
  int clip_frames = 16;
  int stride = 1;
  int points_per_frame = 256;
  int L = 4;
  double scale_lo = 0.9;
  double scale_hi = 1.1;
  double train_fraction = 0.7;
  // encoder
  int N = 32;
  int C = 128;
  double radius = 0.5;
  int k_ball = 9;
  int heads = 4;
  int d_proj = 128;
  // augmentation
  double dominant_fraction = 0.4;
  double mask_ratio = 0.25;  // segment ratio (L_m = round(ratio*L)) or token fraction
  double erase_fraction = 0.2;
  std::string mask_strategy = "similarity";   // similarity | random | off
  std::string mask_granularity = "segment";   // segment | token
  std::string erase_strategy = "similarity";  // similarity | random | off
  // branches
  bool local_branch = true;
  bool global_branch = true;
  bool matching_module = true;
  // optimizer / schedule
  double lr = 3e-4;
  double weight_decay = 1e-4;
  int warmup_epochs = 5;
  int epochs = 30;
  int batch_size = 8;
  double tau_local = 0.01;
  double tau_global = 0.1;
  // probe / finetune
  int probe_epochs = 200;
  double probe_lr = 0.05;
  int finetune_epochs = 10;
  double finetune_lr = 1e-3;
  uint64_t seed = 0;

  int masked_segment_count() const { return static_cast<int>(std::lround(mask_ratio * L)); }
  void validate() const;  // throws ConfigError

  std::string to_kv() const;
  void set_key(const std::string& key, const std::string& value);
  static RunConfig from_kv_text(const std::string& text);
  static RunConfig from_kv_file(const std::string& path);
};

struct Model {
  RunConfig cfg;
  enc::EncoderParams encoder;
  local::RegressorParams regressor;
  local::MatchingParams matching;
  global::ProjectionParams projection;

  explicit Model(const RunConfig& cfg);
  nn::ParamMap params() const;
  nn::ParamMap encoder_param_map() const;
};

// One CSV row per optimizer step.
struct StepMetrics {
  int64_t step = 0;
  int epoch = 0;
  double lr = 0;
  double loss_total = 0;
  double loss_local = 0;   // NaN when the branch is off
  double loss_global = 0;  // NaN when the branch is off
  double pos_rank_mean = 0;
  double sim_positive = 0;
  double sim_hard = 0;
};

std::string metrics_header();
std::string metrics_row(const StepMetrics& m);

// Graph outputs for one sample inside a batch.
struct SampleForward {
  enc::TokenGrid grid;
  enc::GlobalToken g;
  ad::Var regressor_out;  // all L*N positions; null when the local branch is off
  ad::Var hard_grid;      // channel-erased grid; null when erasing is off
  ad::Var local_loss;     // null when the local branch is off
  double pos_rank = 0;
  aug::MaskSpec mask;
  aug::EraseSpec erase;
};

SampleForward forward_sample(const Model& model, const data::SegmentedClip& clip, Rng& aug_rng,
                             bool force_erase_spec = false);

struct BatchResult {
  ad::Var total;
  double loss_local = 0;
  double loss_global = 0;
  double pos_rank_mean = 0;
  double sim_positive = 0;
  double sim_hard = 0;
  std::vector<SampleForward> samples;
};

BatchResult batch_forward(const Model& model, const std::vector<data::SegmentedClip>& clips,
                          std::vector<Rng>& aug_rngs);

struct PretrainResult {
  std::vector<StepMetrics> metrics;
  std::string checkpoint_path;
};

// Full pretraining loop; writes metrics.csv, augment_audit.txt and a rolling
// checkpoint.ckpt under out_dir. Deterministic for a fixed config.
PretrainResult pretrain(Model& model, const data::Dataset& ds, const std::string& out_dir);

// Deterministic per-video evaluation feature (no scaling, fixed clip stream).
Tensor eval_global_feature(const Model& model, const data::PointCloudVideo& video,
                           uint64_t video_tag);

// Softmax regression on fixed feature rows; returns test accuracy. The probe
// and fine-tune heads start from zeros, so zero training steps mean
// chance-level argmax.
double train_linear_classifier(const Tensor& train_features, const std::vector<int>& train_labels,
                               const Tensor& test_features, const std::vector<int>& test_labels,
                               int num_classes, int epochs, double lr);

// Frozen-encoder linear probe; returns held-out accuracy.
double linear_probe(const Model& model, const data::Dataset& ds, int epochs, double lr);

// End-to-end supervised fine-tuning of encoder + linear head.
double finetune(Model& model, const data::Dataset& ds, int epochs, double lr);

void export_embeddings(const Model& model, const data::Dataset& ds, const std::string& out_path);

struct SimilarityHistogram {
  double mean_positive = 0;
  double mean_batch_negative = 0;
  double mean_hard_negative = 0;
  int64_t rows = 0;
};

SimilarityHistogram similarity_histogram(const Model& model, const data::Dataset& ds,
                                         const std::string& out_path);

struct AblationSpec {
  std::string id;
  std::string description;
  RunConfig cfg;
};

// The config grid behind the ablation tables: A1-A4 architecture rows,
// B1-B4 x {0.25, 0.5, 0.75} masking rows, C1-C3 hard-negative rows, and
// D1-D4 matching-module rows, all sharing the base seed.
std::vector<AblationSpec> ablation_specs(const RunConfig& base);

struct AblationRow {
  std::string id;
  std::string description;
  double accuracy = 0;
};

std::vector<AblationRow> run_ablation_suite(const RunConfig& base, const data::Dataset& ds,
                                            const std::string& out_dir);

// Checkpoint container: config snapshot, named parameter tensors, optimizer
// moments, epoch, RNG tag; CRC-protected.
void save_checkpoint(const std::string& path, const Model& model, const nn::AdamW* opt, int epoch,
                     uint64_t rng_state);

struct LoadedCheckpoint {
  Model model;
  int epoch = 0;
  uint64_t rng_state = 0;
  bool has_optimizer = false;
  int64_t opt_t = 0;
  std::vector<Tensor> opt_m, opt_v;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace pointcmp::train
