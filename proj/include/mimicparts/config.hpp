#pragma once

#include <array>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "mimicparts/common.hpp"

namespace mimicparts {

// Whole-run configuration with flat dotted-key JSON serialization. Every
// field has a documented default; unknown keys are a validation error so
// typos cannot silently fall back to defaults.
struct RunConfig {
  uint64_t seed = 7;
  int threads = 2;

  // Synthetic dataset.
  int data_n_styles = 4;
  int data_clips_per_style = 200;
  int data_frames = 128;
  double data_fps = 30.0;
  int data_channels_upper = 24;
  int data_channels_hands = 18;
  int data_channels_lower = 10;
  double data_tempo_min = 70.0;
  double data_tempo_max = 140.0;
  int data_n_emotions = 8;
  double data_split_train = 0.85;
  double data_split_val = 0.075;
  double data_split_test = 0.075;
  int data_d_content = 32;
  int data_d_rhythm = 8;
  int data_d_emotion = 8;

  // Per-part motion codec.
  int rvq_num_layers = 6;
  int rvq_codebook_size = 64;
  int rvq_latent_dim = 16;
  int rvq_hidden = 128;
  double rvq_beta = 0.25;
  double rvq_quantizer_dropout = 0.2;
  double rvq_ema_decay = 0.99;
  double rvq_dead_usage_threshold = 0.03;
  int rvq_steps = 400;
  int rvq_batch_size = 32;
  double rvq_lr = 2e-4;

  // Part-aware style encoder.
  int style_d_model = 64;
  int style_layers = 2;
  int style_heads = 2;
  int style_t_window = 64;
  double style_temperature = 0.1;
  int style_ffn_mult = 4;
  int style_steps = 2000;
  int style_batch_size = 32;
  double style_lr = 3e-4;

  // Style-recognition classifier (trained during the style stage).
  int classifier_d_model = 32;
  int classifier_layers = 1;
  int classifier_heads = 2;
  int classifier_t_window = 32;
  int classifier_steps = 600;
  int classifier_batch_size = 16;
  double classifier_lr = 1e-3;

  // Part-aware latent diffusion.
  int diffusion_layer_pairs = 2;
  int diffusion_latent_dim = 48;
  int diffusion_heads = 6;
  int diffusion_t_steps = 200;
  std::string diffusion_schedule = "cosine";
  int diffusion_t_embed_dim = 32;
  double diffusion_cond_dropout = 0.1;
  int diffusion_ffn_mult = 2;
  int diffusion_steps = 2000;
  int diffusion_batch_size = 32;
  double diffusion_lr = 2e-4;

  // Generation defaults.
  double generate_weight_content = 1.0;
  double generate_weight_style = 2.0;
  double generate_weight_rhythm_emotion = 1.0;
  int generate_n_steps = 50;
  int generate_n_clips = 16;

  // Evaluation.
  double eval_bc_sigma = 0.1;
  int eval_diversity_pairs = 0;  // 0 = every pair

  int checkpoint_save_every = 500;

  nlohmann::json to_json() const;
  // Applies `overrides` on top of defaults; rejects unknown keys. The
  // MIMICPARTS_SEED environment variable, when set, wins over both.
  static RunConfig from_json(const nlohmann::json& overrides);
  static RunConfig load(const std::filesystem::path& path);
  void validate() const;

  std::string hash() const;  // hash of the canonical JSON dump
  // Hash over the dataset-defining subset (seed + data.*); training and
  // inference settings may change within a run directory, the dataset
  // definition may not.
  std::string dataset_hash() const;

  int total_clips() const { return data_n_styles * data_clips_per_style; }
  int channels() const {
    return data_channels_upper + data_channels_hands + data_channels_lower;
  }
};

}  // namespace mimicparts
