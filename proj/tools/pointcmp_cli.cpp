#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "pointcmp/data.hpp"
#include "pointcmp/train.hpp"

namespace {

using pointcmp::ConfigError;
using pointcmp::DataError;

constexpr const char* kUnset = "\x01unset";

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  std::istringstream in(pointcmp::train::RunConfig().to_kv());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) keys.push_back(line.substr(0, eq));
  }
  return keys;
}

struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value config file");
    for (const auto& key : config_keys()) {
      values[key] = kUnset;
      cmd->add_option("--" + key, values[key], "RunConfig field " + key);
    }
  }

  pointcmp::train::RunConfig resolve() const {
    pointcmp::train::RunConfig cfg;
    if (!config_path.empty()) cfg = pointcmp::train::RunConfig::from_kv_file(config_path);
    for (const auto& [key, value] : values) {
      if (value != kUnset) cfg.set_key(key, value);
    }
    return cfg;
  }
};

// Keys that may be changed on a model loaded from a checkpoint; architecture
// fields stay pinned to the stored parameter shapes.
const std::set<std::string> kCheckpointSafeKeys = {
    "probe_epochs", "probe_lr", "finetune_epochs", "finetune_lr", "epochs", "batch_size",
    "lr", "warmup_epochs", "weight_decay", "seed", "train_fraction", "tau_local",
    "tau_global", "mask_strategy", "mask_granularity", "mask_ratio", "erase_strategy",
    "erase_fraction", "dominant_fraction", "scale_lo", "scale_hi"};

pointcmp::train::Model model_from(const std::string& checkpoint_path, const ConfigFlags& flags) {
  if (!checkpoint_path.empty()) {
    auto model = pointcmp::train::load_checkpoint(checkpoint_path).model;
    for (const auto& [key, value] : flags.values) {
      if (value == kUnset) continue;
      if (!kCheckpointSafeKeys.count(key)) {
        throw ConfigError("cannot override architecture key '" + key + "' on a checkpoint");
      }
      model.cfg.set_key(key, value);
    }
    model.cfg.validate();
    return model;
  }
  auto cfg = flags.resolve();
  cfg.validate();
  return pointcmp::train::Model(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PointCMP: self-supervised pretraining on point cloud videos"};
  app.require_subcommand(1);

  std::string out_dir = "runs";
  uint64_t global_seed = 0;
  bool seed_given = false;
  bool deterministic = false;
  app.add_option("--out-dir", out_dir, "output directory")->capture_default_str();
  app.add_option("--seed", global_seed, "seed override")->each([&](const std::string&) {
    seed_given = true;
  });
  app.add_flag("--deterministic", deterministic,
               "single-threaded deterministic mode (the default and only mode)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  pointcmp::data::SyntheticSpec spec;
  std::string gen_out = "dataset.pcv";
  gen->add_option("--classes", spec.num_classes)->capture_default_str();
  gen->add_option("--videos-per-class", spec.videos_per_class)->capture_default_str();
  gen->add_option("--frames", spec.frames)->capture_default_str();
  gen->add_option("--points", spec.points_per_frame)->capture_default_str();
  gen->add_option("--out", gen_out, "output dataset path")->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining");
  ConfigFlags pre_flags;
  std::string pre_data;
  pre->add_option("--data", pre_data, "dataset path")->required();
  pre_flags.attach(pre);

  // probe
  auto* probe = app.add_subcommand("probe", "linear probe with a frozen encoder");
  ConfigFlags probe_flags;
  std::string probe_data, probe_ckpt;
  probe->add_option("--data", probe_data)->required();
  probe->add_option("--checkpoint", probe_ckpt, "checkpoint (omit for a random-init encoder)");
  probe_flags.attach(probe);

  // finetune
  auto* ft = app.add_subcommand("finetune", "end-to-end supervised fine-tuning");
  ConfigFlags ft_flags;
  std::string ft_data, ft_ckpt;
  ft->add_option("--data", ft_data)->required();
  ft->add_option("--checkpoint", ft_ckpt, "checkpoint (omit for the supervised baseline)");
  ft_flags.attach(ft);

  // export-embeddings
  auto* exp = app.add_subcommand("export-embeddings", "write per-video global features");
  std::string exp_data, exp_ckpt, exp_out = "embeddings.txt";
  exp->add_option("--data", exp_data)->required();
  exp->add_option("--checkpoint", exp_ckpt)->required();
  exp->add_option("--out", exp_out)->capture_default_str();

  // sim-hist
  auto* hist = app.add_subcommand("sim-hist", "cosine similarity histogram data");
  std::string hist_data, hist_ckpt, hist_out = "sim_hist.csv";
  hist->add_option("--data", hist_data)->required();
  hist->add_option("--checkpoint", hist_ckpt)->required();
  hist->add_option("--out", hist_out)->capture_default_str();

  // ablate
  auto* abl = app.add_subcommand("ablate", "run the ablation grid at toy scale");
  ConfigFlags abl_flags;
  std::string abl_data;
  abl->add_option("--data", abl_data)->required();
  abl_flags.attach(abl);

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      if (seed_given) spec.seed = global_seed;
      auto ds = pointcmp::data::generate_synthetic_dataset(spec);
      pointcmp::data::write_dataset(ds, gen_out);
      std::cout << "wrote " << ds.videos.size() << " videos (" << ds.num_classes
                << " classes) to " << gen_out << "\n";
    } else if (pre->parsed()) {
      auto cfg = pre_flags.resolve();
      if (seed_given) cfg.seed = global_seed;
      cfg.validate();
      auto ds = pointcmp::data::read_dataset(pre_data);
      pointcmp::train::Model model(cfg);
      auto result = pointcmp::train::pretrain(model, ds, out_dir);
      const auto& last = result.metrics.back();
      std::cout << "pretrained " << cfg.epochs << " epochs, " << result.metrics.size()
                << " steps; final loss_total=" << last.loss_total << "\n";
      std::cout << "checkpoint: " << result.checkpoint_path << "\n";
      std::cout << "metrics: " << out_dir << "/metrics.csv\n";
    } else if (probe->parsed()) {
      auto ds = pointcmp::data::read_dataset(probe_data);
      auto model = model_from(probe_ckpt, probe_flags);
      if (seed_given) model.cfg.seed = global_seed;
      const double acc =
          pointcmp::train::linear_probe(model, ds, model.cfg.probe_epochs, model.cfg.probe_lr);
      std::cout << "probe accuracy: " << acc << "\n";
    } else if (ft->parsed()) {
      auto ds = pointcmp::data::read_dataset(ft_data);
      auto model = model_from(ft_ckpt, ft_flags);
      if (seed_given) model.cfg.seed = global_seed;
      const double acc = pointcmp::train::finetune(model, ds, model.cfg.finetune_epochs,
                                                   model.cfg.finetune_lr);
      std::cout << "finetune accuracy: " << acc << "\n";
    } else if (exp->parsed()) {
      auto ds = pointcmp::data::read_dataset(exp_data);
      auto model = pointcmp::train::load_checkpoint(exp_ckpt).model;
      pointcmp::train::export_embeddings(model, ds, exp_out);
      std::cout << "wrote " << ds.videos.size() << " embeddings to " << exp_out << "\n";
    } else if (hist->parsed()) {
      auto ds = pointcmp::data::read_dataset(hist_data);
      auto model = pointcmp::train::load_checkpoint(hist_ckpt).model;
      auto h = pointcmp::train::similarity_histogram(model, ds, hist_out);
      std::cout << "rows=" << h.rows << " mean_positive=" << h.mean_positive
                << " mean_hard=" << h.mean_hard_negative
                << " mean_batch=" << h.mean_batch_negative << "\n";
      std::cout << "histogram data: " << hist_out << "\n";
    } else if (abl->parsed()) {
      auto cfg = abl_flags.resolve();
      if (seed_given) cfg.seed = global_seed;
      cfg.validate();
      auto ds = pointcmp::data::read_dataset(abl_data);
      auto rows = pointcmp::train::run_ablation_suite(cfg, ds, out_dir);
      for (const auto& row : rows) {
        std::cout << row.id << "\t" << row.accuracy << "\t" << row.description << "\n";
      }
      std::cout << "table: " << out_dir << "/ablation_table.txt\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
