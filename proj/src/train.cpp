#include "pointcmp/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace pointcmp::train {

using namespace pointcmp::ad;

namespace {

// Stream tags for derived RNGs; batch order never feeds any of them, so the
// pipeline stays deterministic even if batch assembly were parallelized.
constexpr uint64_t kTagInitEncoder = 0x01;
constexpr uint64_t kTagInitRegressor = 0x02;
constexpr uint64_t kTagInitMatching = 0x03;
constexpr uint64_t kTagInitProjection = 0x04;
constexpr uint64_t kTagShuffle = 0x10;
constexpr uint64_t kTagClip = 0x11;
constexpr uint64_t kTagAugment = 0x12;
constexpr uint64_t kTagEval = 0x7e7a1;  // eval clips fixed across seeds

double nan_value() { return std::numeric_limits<double>::quiet_NaN(); }

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void RunConfig::validate() const {
  if (clip_frames < 1 || stride < 1 || points_per_frame < 1) {
    throw ConfigError("config: clip_frames, stride, points_per_frame must be positive");
  }
  if (L < 1 || clip_frames % L != 0) throw ConfigError("config: L must divide clip_frames");
  if (N < 1 || C < 1) throw ConfigError("config: N and C must be positive");
  if (N > points_per_frame) throw ConfigError("config: N cannot exceed points_per_frame");
  if (radius <= 0 || k_ball < 1) throw ConfigError("config: bad ball query spec");
  if (heads < 1 || C % heads != 0) throw ConfigError("config: heads must divide C");
  if (d_proj < 1) throw ConfigError("config: d_proj must be positive");
  if (scale_lo <= 0 || scale_lo > scale_hi) throw ConfigError("config: bad scale range");
  if (train_fraction <= 0 || train_fraction >= 1) throw ConfigError("config: bad train_fraction");
  if (!(dominant_fraction > 0 && dominant_fraction < 1)) {
    throw ConfigError("config: dominant_fraction must be in (0,1)");
  }
  if (!(mask_ratio > 0 && mask_ratio < 1)) throw ConfigError("config: mask_ratio must be in (0,1)");
  if (!(erase_fraction > 0 && erase_fraction < 1)) {
    throw ConfigError("config: erase_fraction must be in (0,1)");
  }
  if (mask_strategy != "similarity" && mask_strategy != "random" && mask_strategy != "off") {
    throw ConfigError("config: mask_strategy must be similarity|random|off");
  }
  if (mask_granularity != "segment" && mask_granularity != "token") {
    throw ConfigError("config: mask_granularity must be segment|token");
  }
  if (erase_strategy != "similarity" && erase_strategy != "random" && erase_strategy != "off") {
    throw ConfigError("config: erase_strategy must be similarity|random|off");
  }
  if (!local_branch && !global_branch) throw ConfigError("config: enable at least one branch");
  if (local_branch) {
    if (mask_strategy == "off") throw ConfigError("config: local branch requires masking");
    if (mask_granularity == "segment") {
      const int lm = masked_segment_count();
      if (lm < 1) throw ConfigError("config: mask_ratio rounds to zero masked segments");
      if (lm >= L) throw ConfigError("config: mask_ratio leaves no visible segment");
      if (static_cast<int64_t>(lm) * N < 2) {
        throw ConfigError("config: need at least two masked tokens for the local loss");
      }
    } else {
      const int64_t count = static_cast<int64_t>(mask_ratio * static_cast<double>(L) * N);
      if (count < 2) throw ConfigError("config: token mask_ratio yields fewer than two tokens");
      if (count >= static_cast<int64_t>(L) * N) {
        throw ConfigError("config: token mask_ratio leaves no visible token");
      }
    }
  }
  if (global_branch && erase_strategy != "off") {
    if (static_cast<int>(erase_fraction * C) < 1) {
      throw ConfigError("config: erase_fraction erases zero channels");
    }
  }
  if (lr <= 0 || weight_decay < 0) throw ConfigError("config: bad optimizer spec");
  if (epochs < 1 || batch_size < 1 || warmup_epochs < 0) {
    throw ConfigError("config: bad schedule spec");
  }
  if (tau_local <= 0 || tau_global <= 0) throw ConfigError("config: temperatures must be positive");
  if (probe_epochs < 0 || probe_lr <= 0 || finetune_epochs < 0 || finetune_lr <= 0) {
    throw ConfigError("config: bad probe/finetune spec");
  }
}

namespace {

template <typename T>
std::string kv(const std::string& key, const T& value) {
  std::ostringstream os;
  os.precision(17);
  os << key << " = " << value << "\n";
  return os.str();
}

}  // namespace

std::string RunConfig::to_kv() const {
  std::string s;
  s += kv("clip_frames", clip_frames);
  s += kv("stride", stride);
  s += kv("points_per_frame", points_per_frame);
  s += kv("L", L);
  s += kv("scale_lo", scale_lo);
  s += kv("scale_hi", scale_hi);
  s += kv("train_fraction", train_fraction);
  s += kv("N", N);
  s += kv("C", C);
  s += kv("radius", radius);
  s += kv("k_ball", k_ball);
  s += kv("heads", heads);
  s += kv("d_proj", d_proj);
  s += kv("dominant_fraction", dominant_fraction);
  s += kv("mask_ratio", mask_ratio);
  s += kv("erase_fraction", erase_fraction);
  s += kv("mask_strategy", mask_strategy);
  s += kv("mask_granularity", mask_granularity);
  s += kv("erase_strategy", erase_strategy);
  s += kv("local_branch", local_branch ? 1 : 0);
  s += kv("global_branch", global_branch ? 1 : 0);
  s += kv("matching_module", matching_module ? 1 : 0);
  s += kv("lr", lr);
  s += kv("weight_decay", weight_decay);
  s += kv("warmup_epochs", warmup_epochs);
  s += kv("epochs", epochs);
  s += kv("batch_size", batch_size);
  s += kv("tau_local", tau_local);
  s += kv("tau_global", tau_global);
  s += kv("probe_epochs", probe_epochs);
  s += kv("probe_lr", probe_lr);
  s += kv("finetune_epochs", finetune_epochs);
  s += kv("finetune_lr", finetune_lr);
  s += kv("seed", seed);
  return s;
}

void RunConfig::set_key(const std::string& key, const std::string& value) {
  try {
    if (key == "clip_frames") clip_frames = std::stoi(value);
    else if (key == "stride") stride = std::stoi(value);
    else if (key == "points_per_frame") points_per_frame = std::stoi(value);
    else if (key == "L") L = std::stoi(value);
    else if (key == "scale_lo") scale_lo = std::stod(value);
    else if (key == "scale_hi") scale_hi = std::stod(value);
    else if (key == "train_fraction") train_fraction = std::stod(value);
    else if (key == "N") N = std::stoi(value);
    else if (key == "C") C = std::stoi(value);
    else if (key == "radius") radius = std::stod(value);
    else if (key == "k_ball") k_ball = std::stoi(value);
    else if (key == "heads") heads = std::stoi(value);
    else if (key == "d_proj") d_proj = std::stoi(value);
    else if (key == "dominant_fraction") dominant_fraction = std::stod(value);
    else if (key == "mask_ratio") mask_ratio = std::stod(value);
    else if (key == "erase_fraction") erase_fraction = std::stod(value);
    else if (key == "mask_strategy") mask_strategy = value;
    else if (key == "mask_granularity") mask_granularity = value;
    else if (key == "erase_strategy") erase_strategy = value;
    else if (key == "local_branch") local_branch = std::stoi(value) != 0;
    else if (key == "global_branch") global_branch = std::stoi(value) != 0;
    else if (key == "matching_module") matching_module = std::stoi(value) != 0;
    else if (key == "lr") lr = std::stod(value);
    else if (key == "weight_decay") weight_decay = std::stod(value);
    else if (key == "warmup_epochs") warmup_epochs = std::stoi(value);
    else if (key == "epochs") epochs = std::stoi(value);
    else if (key == "batch_size") batch_size = std::stoi(value);
    else if (key == "tau_local") tau_local = std::stod(value);
    else if (key == "tau_global") tau_global = std::stod(value);
    else if (key == "probe_epochs") probe_epochs = std::stoi(value);
    else if (key == "probe_lr") probe_lr = std::stod(value);
    else if (key == "finetune_epochs") finetune_epochs = std::stoi(value);
    else if (key == "finetune_lr") finetune_lr = std::stod(value);
    else if (key == "seed") seed = std::stoull(value);
    else throw ConfigError("config: unknown key '" + key + "'");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("config: bad value for key '" + key + "': " + value);
  }
}

RunConfig RunConfig::from_kv_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!key.empty()) cfg.set_key(key, value);
  }
  return cfg;
}

RunConfig RunConfig::from_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_kv_text(ss.str());
}

namespace {

enc::EncoderConfig encoder_config(const RunConfig& cfg) {
  enc::EncoderConfig ec;
  ec.N = cfg.N;
  ec.C = cfg.C;
  ec.radius = cfg.radius;
  ec.k_ball = cfg.k_ball;
  ec.frames_per_segment = cfg.clip_frames / cfg.L;
  return ec;
}

}  // namespace

Model::Model(const RunConfig& cfg_)
    : cfg(cfg_),
      encoder([&] {
        Rng rng(derive_seed(cfg_.seed, kTagInitEncoder));
        return enc::EncoderParams(encoder_config(cfg_), rng);
      }()),
      regressor([&] {
        Rng rng(derive_seed(cfg_.seed, kTagInitRegressor));
        return local::RegressorParams(cfg_.C, cfg_.heads, rng);
      }()),
      matching([&] {
        Rng rng(derive_seed(cfg_.seed, kTagInitMatching));
        return local::MatchingParams(cfg_.C, cfg_.N, rng);
      }()),
      projection([&] {
        Rng rng(derive_seed(cfg_.seed, kTagInitProjection));
        return global::ProjectionParams(cfg_.C, cfg_.d_proj, rng);
      }()) {}

nn::ParamMap Model::params() const {
  nn::ParamMap pm;
  encoder.collect(pm, "encoder");
  regressor.collect(pm, "regressor");
  matching.collect(pm, "matching");
  projection.collect(pm, "projection");
  return pm;
}

nn::ParamMap Model::encoder_param_map() const {
  nn::ParamMap pm;
  encoder.collect(pm, "encoder");
  return pm;
}

std::string metrics_header() {
  return "step,epoch,lr,loss_total,loss_local,loss_global,pos_rank_mean,sim_positive,sim_hard";
}

std::string metrics_row(const StepMetrics& m) {
  std::ostringstream os;
  os << m.step << "," << m.epoch << "," << fmt_double(m.lr) << "," << fmt_double(m.loss_total)
     << "," << fmt_double(m.loss_local) << "," << fmt_double(m.loss_global) << ","
     << fmt_double(m.pos_rank_mean) << "," << fmt_double(m.sim_positive) << ","
     << fmt_double(m.sim_hard);
  return os.str();
}

SampleForward forward_sample(const Model& model, const data::SegmentedClip& clip, Rng& aug_rng,
                             bool force_erase_spec) {
  const RunConfig& cfg = model.cfg;
  auto [grid, g] = enc::encode(clip, model.encoder);
  SampleForward out;
  out.grid = grid;
  out.g = g;

  if (cfg.local_branch) {
    if (cfg.mask_granularity == "segment") {
      const int lm = cfg.masked_segment_count();
      if (cfg.mask_strategy == "similarity") {
        out.mask = aug::build_mask_spec(grid.feat->val, g.feat->val, grid.L, grid.N,
                                        cfg.dominant_fraction, lm);
      } else {
        out.mask = aug::random_mask_segments(grid.L, grid.N, lm, aug_rng);
      }
    } else {
      if (cfg.mask_strategy == "similarity") {
        Tensor sim = aug::token_global_similarity(grid.feat->val, g.feat->val);
        out.mask = aug::similarity_mask_tokens(sim, grid.L, grid.N, cfg.mask_ratio);
      } else {
        out.mask = aug::random_mask_tokens(grid.L, grid.N, cfg.mask_ratio, aug_rng);
      }
    }
  }

  const bool want_erase = force_erase_spec || (cfg.global_branch && cfg.erase_strategy != "off");
  if (want_erase) {
    const std::string strategy =
        force_erase_spec && cfg.erase_strategy == "off" ? "similarity" : cfg.erase_strategy;
    if (strategy == "similarity") {
      Tensor corr = aug::channel_correlation(grid.feat->val, g.feat->val);
      Tensor rank_sum = aug::rank_sum_channels(corr);
      auto [erased_vals, spec] = aug::erase_principal_channels(grid.feat->val, rank_sum,
                                                               cfg.erase_fraction);
      (void)erased_vals;  // the graph applies the mask below
      out.erase = std::move(spec);
    } else {
      out.erase = aug::random_erase_spec(grid.C, cfg.erase_fraction, aug_rng);
    }
    Tensor channel_mask(1, grid.C, 1.0);
    for (int c : out.erase.erased_channels) channel_mask(0, c) = 0.0;
    out.hard_grid = mul_rowvec(grid.feat, constant(std::move(channel_mask)));
  }

  if (cfg.local_branch) {
    const auto layout = local::masked_layout(out.mask);
    out.regressor_out = local::regress_all(grid, out.mask, model.regressor);
    Var z_pre = gather_rows(out.regressor_out, layout.grid_rows);
    Var z_gt = gather_rows(grid.feat, layout.grid_rows);
    local::LocalLossReport rep;
    if (cfg.matching_module) {
      Var p_pre = local::matching_decode(z_pre, layout, model.matching);
      // Anchor targets in each segment's centered frame; the decoder predicts
      // offsets around zero, not absolute video coordinates.
      Tensor p_gt(layout.count(), 3);
      for (int64_t i = 0; i < layout.count(); ++i) {
        for (int d = 0; d < 3; ++d) p_gt(i, d) = grid.anchors(layout.grid_rows[static_cast<size_t>(i)], d);
      }
      for (const auto& [begin, end] : layout.segment_ranges) {
        double mean[3] = {0, 0, 0};
        for (int i = begin; i < end; ++i) {
          for (int d = 0; d < 3; ++d) mean[d] += p_gt(i, d) / static_cast<double>(end - begin);
        }
        for (int i = begin; i < end; ++i) {
          for (int d = 0; d < 3; ++d) p_gt(i, d) -= mean[d];
        }
      }
      rep = local::local_contrast(z_pre, p_pre, z_gt, p_gt, layout, cfg.tau_local);
    } else {
      rep = local::local_contrast_direct(z_pre, z_gt, cfg.tau_local);
    }
    out.local_loss = rep.loss;
    out.pos_rank = rep.mean_positive_rank;
  }
  return out;
}

BatchResult batch_forward(const Model& model, const std::vector<data::SegmentedClip>& clips,
                          std::vector<Rng>& aug_rngs) {
  const RunConfig& cfg = model.cfg;
  if (clips.empty()) throw ConfigError("batch_forward: empty batch");
  if (aug_rngs.size() != clips.size()) throw ConfigError("batch_forward: rng per sample required");

  BatchResult result;
  result.samples.reserve(clips.size());
  for (size_t i = 0; i < clips.size(); ++i) {
    result.samples.push_back(forward_sample(model, clips[i], aug_rngs[i]));
  }

  Var local_term, global_term;
  if (cfg.local_branch) {
    std::vector<Var> locals;
    double rank_sum = 0;
    for (auto& s : result.samples) {
      locals.push_back(s.local_loss);
      rank_sum += s.pos_rank;
    }
    local_term = mean_all(concat_rows(locals));
    result.loss_local = local_term->val[0];
    result.pos_rank_mean = rank_sum / static_cast<double>(result.samples.size());
  } else {
    result.loss_local = nan_value();
    result.pos_rank_mean = nan_value();
  }

  if (cfg.global_branch) {
    std::vector<global::GlobalSamples> gs;
    gs.reserve(result.samples.size());
    for (size_t i = 0; i < result.samples.size(); ++i) {
      // Batch negatives use the same token set as the positive (regressor
      // outputs when the regressor runs); pooling mismatched spaces lets the
      // projection separate positive from negatives without reading content.
      std::vector<Var> others;
      for (size_t j = 0; j < result.samples.size(); ++j) {
        if (j == i) continue;
        others.push_back(result.samples[j].regressor_out ? result.samples[j].regressor_out
                                                         : result.samples[j].grid.feat);
      }
      gs.push_back(global::build_global_samples(result.samples[i].grid.feat,
                                                result.samples[i].g.feat,
                                                result.samples[i].regressor_out,
                                                result.samples[i].hard_grid, others));
    }
    auto rep = global::global_contrast(gs, model.projection, cfg.tau_global);
    global_term = rep.loss;
    result.loss_global = rep.loss->val[0];
    result.sim_positive = rep.sim_positive;
    result.sim_hard = rep.sim_hard;
  } else {
    result.loss_global = nan_value();
    result.sim_positive = nan_value();
    result.sim_hard = nan_value();
  }

  if (local_term && global_term) {
    result.total = global::total_loss(local_term, global_term);
  } else if (local_term) {
    result.total = local_term;
  } else {
    result.total = global_term;
  }
  return result;
}

namespace {

std::vector<data::SegmentedClip> assemble_clips(const data::Dataset& ds,
                                                const std::vector<int>& video_indices,
                                                const RunConfig& cfg, int epoch) {
  std::vector<data::SegmentedClip> clips;
  clips.reserve(video_indices.size());
  for (int idx : video_indices) {
    Rng rng(derive_seed(cfg.seed, kTagClip, static_cast<uint64_t>(epoch),
                        static_cast<uint64_t>(idx)));
    data::Clip clip = data::sample_clip(ds.videos[static_cast<size_t>(idx)], cfg.clip_frames,
                                        cfg.stride, cfg.points_per_frame, rng);
    clip = data::random_scale(clip, cfg.scale_lo, cfg.scale_hi, rng);
    clips.push_back(data::segment_clip(clip, cfg.L));
  }
  return clips;
}

void validate_dataset(const data::Dataset& ds, const RunConfig& cfg) {
  if (ds.videos.empty()) throw DataError("dataset is empty");
  for (const auto& v : ds.videos) {
    if (v.label >= ds.num_classes) throw DataError("dataset label out of range");
    if (v.frames.empty()) throw DataError("dataset video has no frames");
  }
  (void)cfg;
}

}  // namespace

PretrainResult pretrain(Model& model, const data::Dataset& ds, const std::string& out_dir) {
  const RunConfig& cfg = model.cfg;
  cfg.validate();
  validate_dataset(ds, cfg);

  std::filesystem::create_directories(out_dir);
  std::ofstream metrics_file(out_dir + "/metrics.csv", std::ios::trunc);
  std::ofstream audit_file(out_dir + "/augment_audit.txt", std::ios::trunc);
  if (!metrics_file || !audit_file) throw DataError("pretrain: cannot write to " + out_dir);
  metrics_file << metrics_header() << "\n";

  std::vector<int> train_idx, test_idx;
  data::stratified_split(ds, cfg.train_fraction, cfg.seed, train_idx, test_idx);
  if (train_idx.size() < 2) throw DataError("pretrain: training split too small");

  auto pm = model.params();
  nn::AdamW opt(pm.vars(), cfg.weight_decay);

  const int64_t batches_per_epoch =
      (static_cast<int64_t>(train_idx.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = batches_per_epoch * cfg.epochs;
  const int64_t warmup_steps = std::min<int64_t>(batches_per_epoch * cfg.warmup_epochs,
                                                 total_steps);

  PretrainResult result;
  result.checkpoint_path = out_dir + "/checkpoint.ckpt";
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = train_idx;
    Rng shuffle_rng(derive_seed(cfg.seed, kTagShuffle, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    for (int64_t b = 0; b < batches_per_epoch; ++b) {
      const size_t begin = static_cast<size_t>(b) * cfg.batch_size;
      const size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<int> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
      // A single sample cannot form in-batch negatives without a hard negative.
      if (batch_idx.size() == 1 && cfg.global_branch && cfg.erase_strategy == "off") continue;

      auto clips = assemble_clips(ds, batch_idx, cfg, epoch);
      std::vector<Rng> aug_rngs;
      aug_rngs.reserve(batch_idx.size());
      for (int idx : batch_idx) {
        aug_rngs.emplace_back(derive_seed(cfg.seed, kTagAugment, static_cast<uint64_t>(epoch),
                                          static_cast<uint64_t>(idx)));
      }
      auto batch = batch_forward(model, clips, aug_rngs);

      const double lr_now = nn::lr_at_step(step, total_steps, warmup_steps, cfg.lr);
      opt.zero_grad();
      backward(batch.total);
      opt.step(lr_now);

      StepMetrics m;
      m.step = step;
      m.epoch = epoch;
      m.lr = lr_now;
      m.loss_total = batch.total->val[0];
      m.loss_local = batch.loss_local;
      m.loss_global = batch.loss_global;
      m.pos_rank_mean = batch.pos_rank_mean;
      m.sim_positive = batch.sim_positive;
      m.sim_hard = batch.sim_hard;
      result.metrics.push_back(m);
      metrics_file << metrics_row(m) << "\n";

      audit_file << "step=" << step << " video=" << ds.videos[static_cast<size_t>(batch_idx[0])].video_id;
      if (cfg.local_branch) audit_file << " " << aug::describe_mask(batch.samples[0].mask);
      if (batch.samples[0].hard_grid) audit_file << " " << aug::describe_erase(batch.samples[0].erase);
      audit_file << "\n";
      ++step;
    }
    save_checkpoint(result.checkpoint_path, model, &opt, epoch + 1, cfg.seed);
  }
  return result;
}

Tensor eval_global_feature(const Model& model, const data::PointCloudVideo& video,
                           uint64_t video_tag) {
  Rng rng(derive_seed(kTagEval, video_tag));
  data::Clip clip = data::sample_clip(video, model.cfg.clip_frames, model.cfg.stride,
                                      model.cfg.points_per_frame, rng);
  auto seg = data::segment_clip(clip, model.cfg.L);
  auto [grid, g] = enc::encode(seg, model.encoder);
  (void)grid;
  return g.feat->val;
}

namespace {

struct FeatureSet {
  Tensor features;  // n x C
  std::vector<int> labels;
};

FeatureSet collect_features(const Model& model, const data::Dataset& ds,
                            const std::vector<int>& indices) {
  FeatureSet fs;
  fs.features = Tensor(static_cast<int64_t>(indices.size()), model.cfg.C);
  fs.labels.reserve(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    Tensor f = eval_global_feature(model, ds.videos[static_cast<size_t>(idx)],
                                   static_cast<uint64_t>(idx));
    for (int64_t c = 0; c < f.numel(); ++c) fs.features(static_cast<int64_t>(i), c) = f[c];
    fs.labels.push_back(static_cast<int>(ds.videos[static_cast<size_t>(idx)].label));
  }
  return fs;
}

// Mean cross-entropy of a linear head over fixed features.
Var head_loss(const nn::Linear& head, const Var& features, const Tensor& onehot) {
  Var logits = head(features);
  Var lse = logsumexp_rows(logits);                       // n x 1
  Var picked = sum_axis1(mul(logits, constant(onehot)));  // n x 1
  return mean_all(sub(lse, picked));
}

double head_accuracy(const nn::Linear& head, const Tensor& features,
                     const std::vector<int>& labels) {
  Var logits = head(constant(features));
  int64_t correct = 0;
  for (int64_t i = 0; i < logits->val.rows(); ++i) {
    int64_t best = 0;
    for (int64_t c = 1; c < logits->val.cols(); ++c) {
      if (logits->val(i, c) > logits->val(i, best)) best = c;
    }
    if (best == labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits->val.rows());
}

nn::Linear zero_head(int in, int out) {
  nn::Linear head;
  head.W = leaf(Tensor::zeros(in, out));
  head.b = leaf(Tensor::zeros(1, out));
  return head;
}

Tensor onehot_of(const std::vector<int>& labels, int num_classes) {
  Tensor oh(static_cast<int64_t>(labels.size()), num_classes);
  for (size_t i = 0; i < labels.size(); ++i) oh(static_cast<int64_t>(i), labels[i]) = 1.0;
  return oh;
}

}  // namespace

double train_linear_classifier(const Tensor& train_features, const std::vector<int>& train_labels,
                               const Tensor& test_features, const std::vector<int>& test_labels,
                               int num_classes, int epochs, double lr) {
  nn::Linear head = zero_head(static_cast<int>(train_features.cols()), num_classes);
  nn::AdamW opt({head.W, head.b}, 0.0);
  const Tensor onehot = onehot_of(train_labels, num_classes);
  Var features = constant(train_features);
  for (int e = 0; e < epochs; ++e) {
    opt.zero_grad();
    Var loss = head_loss(head, features, onehot);
    backward(loss);
    opt.step(lr);
  }
  return head_accuracy(head, test_features, test_labels);
}

double linear_probe(const Model& model, const data::Dataset& ds, int epochs, double lr) {
  model.cfg.validate();
  validate_dataset(ds, model.cfg);
  std::vector<int> train_idx, test_idx;
  data::stratified_split(ds, model.cfg.train_fraction, model.cfg.seed, train_idx, test_idx);

  const FeatureSet train_fs = collect_features(model, ds, train_idx);
  const FeatureSet test_fs = collect_features(model, ds, test_idx);
  return train_linear_classifier(train_fs.features, train_fs.labels, test_fs.features,
                                 test_fs.labels, static_cast<int>(ds.num_classes), epochs, lr);
}

double finetune(Model& model, const data::Dataset& ds, int epochs, double lr) {
  model.cfg.validate();
  validate_dataset(ds, model.cfg);
  const RunConfig& cfg = model.cfg;
  std::vector<int> train_idx, test_idx;
  data::stratified_split(ds, cfg.train_fraction, cfg.seed, train_idx, test_idx);
  const int k = static_cast<int>(ds.num_classes);

  nn::Linear head = zero_head(cfg.C, k);
  auto pm = model.params();
  auto vars = pm.vars();
  vars.push_back(head.W);
  vars.push_back(head.b);
  nn::AdamW opt(vars, cfg.weight_decay);

  const int64_t batches_per_epoch =
      (static_cast<int64_t>(train_idx.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = batches_per_epoch * std::max(epochs, 1);
  const int64_t warmup_steps = std::min<int64_t>(batches_per_epoch, total_steps);
  int64_t step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<int> order = train_idx;
    Rng shuffle_rng(derive_seed(cfg.seed, kTagShuffle ^ 0xf17eULL, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    for (int64_t b = 0; b < batches_per_epoch; ++b) {
      const size_t begin = static_cast<size_t>(b) * cfg.batch_size;
      const size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<int> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
      auto clips = assemble_clips(ds, batch_idx, cfg, epoch);
      std::vector<Var> feats;
      std::vector<int> labels;
      for (size_t i = 0; i < clips.size(); ++i) {
        auto [grid, g] = enc::encode(clips[i], model.encoder);
        (void)grid;
        feats.push_back(g.feat);
        labels.push_back(static_cast<int>(clips[i].label));
      }
      Var features = concat_rows(feats);
      Var loss = head_loss(head, features, onehot_of(labels, k));
      opt.zero_grad();
      backward(loss);
      opt.step(nn::lr_at_step(step, total_steps, warmup_steps, lr));
      ++step;
    }
  }
  const FeatureSet test_fs = collect_features(model, ds, test_idx);
  return head_accuracy(head, test_fs.features, test_fs.labels);
}

void export_embeddings(const Model& model, const data::Dataset& ds, const std::string& out_path) {
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw DataError("export_embeddings: cannot open " + out_path);
  out.precision(17);
  for (size_t i = 0; i < ds.videos.size(); ++i) {
    const auto& video = ds.videos[i];
    Tensor f = eval_global_feature(model, video, static_cast<uint64_t>(i));
    out << video.video_id << " " << video.label;
    for (int64_t c = 0; c < f.numel(); ++c) out << " " << f[c];
    out << "\n";
  }
}

SimilarityHistogram similarity_histogram(const Model& model, const data::Dataset& ds,
                                         const std::string& out_path) {
  const RunConfig& cfg = model.cfg;
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw DataError("similarity_histogram: cannot open " + out_path);
  out << "positive,batch_negative,hard_negative\n";
  out.precision(17);

  SimilarityHistogram hist;
  std::vector<int> all_idx(ds.videos.size());
  for (size_t i = 0; i < all_idx.size(); ++i) all_idx[i] = static_cast<int>(i);

  for (size_t begin = 0; begin < all_idx.size(); begin += static_cast<size_t>(cfg.batch_size)) {
    const size_t end = std::min(all_idx.size(), begin + static_cast<size_t>(cfg.batch_size));
    if (end - begin < 2) break;  // batch negatives need company
    std::vector<int> batch_idx(all_idx.begin() + static_cast<std::ptrdiff_t>(begin),
                               all_idx.begin() + static_cast<std::ptrdiff_t>(end));
    auto clips = assemble_clips(ds, batch_idx, cfg, /*epoch=*/0);
    std::vector<SampleForward> samples;
    samples.reserve(batch_idx.size());
    for (size_t i = 0; i < clips.size(); ++i) {
      Rng aug_rng(derive_seed(cfg.seed, kTagAugment ^ 0x415aULL, static_cast<uint64_t>(batch_idx[i])));
      samples.push_back(forward_sample(model, clips[i], aug_rng, /*force_erase_spec=*/true));
    }
    auto project = [&](const Var& x) { return l2_normalize_rows(model.projection(x)); };
    for (size_t i = 0; i < samples.size(); ++i) {
      Var qn = project(samples[i].g.feat);
      Var positive_pool = samples[i].regressor_out ? max_axis0(samples[i].regressor_out)
                                                   : max_axis0(samples[i].grid.feat);
      Var pn = project(positive_pool);
      Var hn = project(max_axis0(samples[i].hard_grid));
      const size_t j = (i + 1) % samples.size();
      Var bn = project(max_axis0(samples[j].grid.feat));
      const double cos_pos = matmul_nt(qn, pn)->val[0];
      const double cos_hard = matmul_nt(qn, hn)->val[0];
      const double cos_batch = matmul_nt(qn, bn)->val[0];
      out << fmt_double(cos_pos) << "," << fmt_double(cos_batch) << "," << fmt_double(cos_hard)
          << "\n";
      hist.mean_positive += cos_pos;
      hist.mean_batch_negative += cos_batch;
      hist.mean_hard_negative += cos_hard;
      ++hist.rows;
    }
  }
  if (hist.rows > 0) {
    hist.mean_positive /= static_cast<double>(hist.rows);
    hist.mean_batch_negative /= static_cast<double>(hist.rows);
    hist.mean_hard_negative /= static_cast<double>(hist.rows);
  }
  return hist;
}

std::vector<AblationSpec> ablation_specs(const RunConfig& base) {
  std::vector<AblationSpec> rows;
  auto push = [&](const std::string& id, const std::string& desc, auto&& mutate) {
    RunConfig cfg = base;
    cfg.mask_strategy = "similarity";
    cfg.mask_granularity = "segment";
    cfg.erase_strategy = "similarity";
    cfg.local_branch = true;
    cfg.global_branch = true;
    cfg.matching_module = true;
    mutate(cfg);
    rows.push_back({id, desc, cfg});
  };

  // Architecture rows: A-models without the similarity module fall back to
  // random masking / random erasing of the same cardinality.
  push("A1", "local branch only, random masking", [](RunConfig& c) {
    c.global_branch = false;
    c.mask_strategy = "random";
    c.erase_strategy = "off";
  });
  push("A2", "global branch only, random erasing", [](RunConfig& c) {
    c.local_branch = false;
    c.mask_strategy = "off";
    c.erase_strategy = "random";
  });
  push("A3", "both branches, random masking and erasing", [](RunConfig& c) {
    c.mask_strategy = "random";
    c.erase_strategy = "random";
  });
  push("A4", "both branches, similarity masking and erasing", [](RunConfig&) {});

  const double ratios[3] = {0.25, 0.5, 0.75};
  const char* ratio_names[3] = {"25", "50", "75"};
  for (int r = 0; r < 3; ++r) {
    push("B1_" + std::string(ratio_names[r]), "token masking, random", [&](RunConfig& c) {
      c.mask_granularity = "token";
      c.mask_strategy = "random";
      c.mask_ratio = ratios[r];
    });
    push("B2_" + std::string(ratio_names[r]), "token masking, similarity", [&](RunConfig& c) {
      c.mask_granularity = "token";
      c.mask_ratio = ratios[r];
    });
    push("B3_" + std::string(ratio_names[r]), "segment masking, random", [&](RunConfig& c) {
      c.mask_strategy = "random";
      c.mask_ratio = ratios[r];
    });
    push("B4_" + std::string(ratio_names[r]), "segment masking, similarity", [&](RunConfig& c) {
      c.mask_ratio = ratios[r];
    });
  }

  push("C1", "hard negatives off", [](RunConfig& c) { c.erase_strategy = "off"; });
  push("C2", "random channel erasing", [](RunConfig& c) { c.erase_strategy = "random"; });
  push("C3", "similarity channel erasing", [](RunConfig&) {});

  push("D1", "local only, no matching module", [](RunConfig& c) {
    c.global_branch = false;
    c.mask_strategy = "random";
    c.erase_strategy = "off";
    c.matching_module = false;
  });
  push("D2", "local only, matching module", [](RunConfig& c) {
    c.global_branch = false;
    c.mask_strategy = "random";
    c.erase_strategy = "off";
  });
  push("D3", "both branches, no matching module", [](RunConfig& c) { c.matching_module = false; });
  push("D4", "both branches, matching module", [](RunConfig&) {});
  return rows;
}

std::vector<AblationRow> run_ablation_suite(const RunConfig& base, const data::Dataset& ds,
                                            const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<AblationRow> results;
  const auto grid = ablation_specs(base);
  std::ofstream table(out_dir + "/ablation_table.txt", std::ios::trunc);
  if (!table) throw DataError("run_ablation_suite: cannot open output table");
  table << "row\taccuracy\tdescription\n";
  for (const auto& spec : grid) {
    Model model(spec.cfg);
    pretrain(model, ds, out_dir + "/" + spec.id);
    const double acc = linear_probe(model, ds, spec.cfg.probe_epochs, spec.cfg.probe_lr);
    results.push_back({spec.id, spec.description, acc});
    table << spec.id << "\t" << acc << "\t" << spec.description << "\n";
    table.flush();
  }
  return results;
}

namespace {

// Checkpoint binary helpers (shared CRC with the dataset container).
uint64_t crc64_bytes(const std::string& payload) {
  // CRC-64/XZ, same polynomial as the dataset writer.
  static const auto table = [] {
    std::vector<uint64_t> t(256);
    const uint64_t poly = 0xC96C5795D7870F42ULL;
    for (uint64_t i = 0; i < 256; ++i) {
      uint64_t crc = i;
      for (int b = 0; b < 8; ++b) crc = (crc & 1) ? (crc >> 1) ^ poly : crc >> 1;
      t[i] = crc;
    }
    return t;
  }();
  uint64_t crc = ~0ULL;
  for (unsigned char ch : payload) crc = table[(crc ^ ch) & 0xff] ^ (crc >> 8);
  return crc ^ ~0ULL;
}

void put_u32(std::string& buf, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.append(b, 4);
}

void put_u64(std::string& buf, uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  buf.append(b, 8);
}

void put_string(std::string& buf, const std::string& s) {
  put_u32(buf, static_cast<uint32_t>(s.size()));
  buf.append(s);
}

void put_tensor(std::string& buf, const Tensor& t) {
  put_u32(buf, static_cast<uint32_t>(t.rows()));
  put_u32(buf, static_cast<uint32_t>(t.cols()));
  buf.append(reinterpret_cast<const char*>(t.data()),
             static_cast<size_t>(t.numel()) * sizeof(double));
}

struct CkptReader {
  const std::string& buf;
  size_t pos = 0;
  uint32_t u32() {
    if (pos + 4 > buf.size()) throw DataError("checkpoint truncated");
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    if (pos + 8 > buf.size()) throw DataError("checkpoint truncated");
    uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str() {
    const uint32_t n = u32();
    if (pos + n > buf.size()) throw DataError("checkpoint truncated");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  Tensor tensor() {
    const uint32_t r = u32();
    const uint32_t c = u32();
    const size_t bytes = static_cast<size_t>(r) * c * sizeof(double);
    if (pos + bytes > buf.size()) throw DataError("checkpoint truncated");
    Tensor t(r, c);
    std::memcpy(t.data(), buf.data() + pos, bytes);
    pos += bytes;
    return t;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const nn::AdamW* opt, int epoch,
                     uint64_t rng_state) {
  std::string payload;
  put_string(payload, model.cfg.to_kv());
  put_u32(payload, static_cast<uint32_t>(epoch));
  put_u64(payload, rng_state);
  const auto pm = model.params();
  put_u32(payload, static_cast<uint32_t>(pm.entries.size()));
  for (const auto& [name, var] : pm.entries) {
    put_string(payload, name);
    put_tensor(payload, var->val);
  }
  if (opt) {
    put_u32(payload, 1);
    put_u64(payload, static_cast<uint64_t>(opt->t));
    for (size_t i = 0; i < opt->params.size(); ++i) {
      put_tensor(payload, opt->m[i]);
      put_tensor(payload, opt->v[i]);
    }
  } else {
    put_u32(payload, 0);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("save_checkpoint: cannot open " + path);
  out.write("PCK1", 4);
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  const uint64_t crc = crc64_bytes(payload);
  char cb[8];
  std::memcpy(cb, &crc, 8);
  out.write(cb, 8);
  if (!out) throw DataError("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string all = ss.str();
  if (all.size() < 12) throw DataError("checkpoint truncated");
  if (all.compare(0, 4, "PCK1") != 0) throw DataError("checkpoint format error: bad magic");
  const std::string payload = all.substr(4, all.size() - 12);
  uint64_t stored;
  std::memcpy(&stored, all.data() + all.size() - 8, 8);
  if (crc64_bytes(payload) != stored) throw DataError("checkpoint checksum failure");

  CkptReader r{payload};
  RunConfig cfg = RunConfig::from_kv_text(r.str());
  const int epoch = static_cast<int>(r.u32());
  const uint64_t rng_state = r.u64();

  LoadedCheckpoint loaded{Model(cfg)};
  loaded.epoch = epoch;
  loaded.rng_state = rng_state;

  const uint32_t num_params = r.u32();
  auto pm = loaded.model.params();
  std::map<std::string, ad::Var> by_name;
  for (auto& [name, var] : pm.entries) by_name[name] = var;
  if (num_params != pm.entries.size()) throw DataError("checkpoint parameter count mismatch");
  for (uint32_t i = 0; i < num_params; ++i) {
    const std::string name = r.str();
    Tensor t = r.tensor();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint has unknown parameter " + name);
    if (!it->second->val.same_shape(t)) throw DataError("checkpoint shape mismatch for " + name);
    it->second->val = std::move(t);
  }
  const uint32_t has_opt = r.u32();
  if (has_opt) {
    loaded.has_optimizer = true;
    loaded.opt_t = static_cast<int64_t>(r.u64());
    for (uint32_t i = 0; i < num_params; ++i) {
      loaded.opt_m.push_back(r.tensor());
      loaded.opt_v.push_back(r.tensor());
    }
  }
  if (r.pos != payload.size()) throw DataError("checkpoint has trailing bytes");
  return loaded;
}

}  // namespace pointcmp::train
