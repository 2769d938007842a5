#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "pclsr/checkpoint.hpp"
#include "pclsr/datapipe.hpp"
#include "pclsr/metrics.hpp"

namespace pclsr::train {

enum class Transform { haar, fft, none };
enum class EmbeddingMode { learned, frozen, off };
enum class Precision { f32, f64 };

struct TrainConfig {
  // data
  std::string dataset = "div2k_crops";
  std::string data_root;
  int scale = 4;
  int lr_patch = 48;
  int batch_size = 16;
  // model
  int sr_channels = 32;
  int sr_resblocks = 4;
  int embed_base = 64;
  int embed_layers = 5;
  bool embed_spectral_norm = false;
  // objective
  double alpha = 0.1;
  double tau = 0.5;
  int loss_layers = 4;
  int k_pos = 4;
  int k_neg = 4;
  bool use_pos_aug = true;
  bool use_neg_aug = true;
  Transform transform = Transform::haar;
  EmbeddingMode embedding_mode = EmbeddingMode::learned;
  std::string frozen_path;
  // optimization
  std::int64_t steps = 2000;
  double learning_rate = 1e-4;
  std::int64_t lr_halve_every = 0;  // 0 disables halving
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int d_steps_per_g = 1;
  // run control
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;
  int workers = 1;
  std::int64_t checkpoint_every = 1000;
};

TrainConfig config_from_json_string(const std::string& text);
TrainConfig config_from_json_file(const std::filesystem::path& path);
std::string config_to_json(const TrainConfig& cfg);

/// Apply one "key=value" override; the value is parsed like a JSON literal
/// (bare words become strings). Unknown keys raise ConfigError.
void apply_override(TrainConfig& cfg, const std::string& assignment);

void validate(const TrainConfig& cfg);

struct StepRecord {
  std::int64_t step = 0;
  double l1 = 0, lcl = 0, lcld = 0, total = 0;
  double ms = 0;
};
using StepCallback = std::function<void(const StepRecord&)>;

struct TrainResult {
  std::int64_t steps = 0;
  double final_l1 = 0, final_lcl = 0;
  std::filesystem::path run_dir;
  std::filesystem::path final_checkpoint;
};

/// Full training run. Writes config.snapshot.json, log.csv, periodic
/// checkpoints, final.bin and manifest.json under out_dir. A non-finite loss
/// aborts with NumericError after dumping diagnostics to abort_dump.json.
/// `resume` continues from a checkpoint (the config should be the one stored
/// in it, possibly with a larger `steps`).
TrainResult run_training(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                         bool force = false, const StepCallback& cb = nullptr,
                         const std::filesystem::path& resume = {});

/// Rebuild the generator from a checkpoint and upscale one image
/// (clamped to [0,1]).
Image upscale_image(const ckpt::Checkpoint& c, const Image& lr, int threads = 1);

metrics::EvalReport evaluate_checkpoint(const ckpt::Checkpoint& c, const data::Dataset& ds,
                                        int threads = 1);

/// Contrastive loss of the generator in `model` measured on `n_patches`
/// deterministic patches from `ds`, with positives/negatives resampled from
/// the ground truth and features taken from the embedding stored in
/// `embed_src`. Holding `embed_src` and `seed` fixed makes values comparable
/// across models (e.g. a run's init.bin against its final.bin).
double contrastive_eval(const ckpt::Checkpoint& model, const ckpt::Checkpoint& embed_src,
                        const data::Dataset& ds, int n_patches, std::uint64_t seed,
                        int threads = 1);

}  // namespace pclsr::train
