#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mimicparts/config.hpp"
#include "mimicparts/diffusion.hpp"
#include "mimicparts/metrics.hpp"

namespace mimicparts {

// Run-directory layout shared by every verb.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path dataset_dir() const { return root / "dataset"; }
  std::filesystem::path clips_dir() const { return dataset_dir() / "clips"; }
  std::filesystem::path features_dir() const { return dataset_dir() / "features"; }
  std::filesystem::path manifest() const { return dataset_dir() / "manifest.json"; }
  std::filesystem::path checkpoints_dir() const { return root / "checkpoints"; }
  std::filesystem::path checkpoint(const std::string& name) const {
    return checkpoints_dir() / (name + ".mpck");
  }
  std::filesystem::path logs_dir() const { return root / "logs"; }
  std::filesystem::path log(const std::string& stage) const {
    return logs_dir() / ("train_" + stage + ".jsonl");
  }
  std::filesystem::path plots_dir() const { return root / "plots"; }
  std::filesystem::path generated_dir(const std::string& tag) const {
    return root / "generated" / tag;
  }
  std::filesystem::path reports_dir() const { return root / "reports"; }
};

struct ManifestEntry {
  std::string clip_file;
  std::string features_file;
  int style = 0;
  int emotion = 0;
  double tempo = 0.0;
  Split split = Split::train;
  std::string clip_hash;
  std::string features_hash;
};

struct Manifest {
  std::string config_hash;
  std::string dataset_hash;
  uint64_t seed = 0;
  std::vector<ManifestEntry> entries;

  std::vector<int> indices(Split split) const;
  void save(const std::filesystem::path& path) const;
  static Manifest load(const std::filesystem::path& path);
};

// The model-conditioning variants exercised by the ablation study.
enum class Variant { full, no_part_style, no_rhythm, no_emotion, no_rhythm_emotion };
const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// --- verbs -----------------------------------------------------------------

// Synthesizes the styled dataset with stratified train/val/test splits and
// writes clips, feature files, and the manifest.
Manifest cmd_synth_data(const RunConfig& cfg, const RunPaths& paths);

// Trains one stage: "rvq" (three per-region codecs), "style" (part-aware
// style encoder + the frozen SRA classifier), or "diffusion" (requires the
// earlier stages' checkpoints). Existing partial checkpoints resume unless
// fresh is set.
void cmd_train(const RunConfig& cfg, const RunPaths& paths, const std::string& stage,
               bool fresh = false);

struct GenerateRequest {
  int n_clips = 0;  // 0: cfg.generate_n_clips
  uint64_t seed = 0;
  std::optional<GuidanceWeights> weights;
  int n_steps = 0;  // 0: cfg.generate_n_steps
  std::optional<int> style;                        // intended style; else round-robin
  std::optional<std::string> audio_features_path;  // else synthetic audio
  std::optional<std::string> reference_clip_path;  // else picked from the train split
  std::string tag = "default";
  Variant variant = Variant::full;
  bool export_indices = false;
};

// Samples clips through the trained pipeline; emits clips plus a sampling
// manifest with seeds, weights, and condition-source hashes.
nlohmann::json cmd_generate(const RunConfig& cfg, const RunPaths& paths,
                            const GenerateRequest& req);

struct EvaluateRequest {
  // A tag under generated/, or "split:train|val|test" to evaluate real clips.
  std::string generated = "default";
  Split reference = Split::test;
  std::vector<std::string> metrics = {"fgd", "bc", "diversity", "sra"};
  std::string report_name;  // default: eval_<generated>
};

// Emits one report row per metric x scope (all|u|l|h) as JSON + CSV.
nlohmann::json cmd_evaluate(const RunConfig& cfg, const RunPaths& paths,
                            const EvaluateRequest& req);

// Retrains the conditioning path per ablation row, generates and evaluates
// with shared seeds, and emits a comparison table.
nlohmann::json cmd_ablate(const RunConfig& cfg, const RunPaths& paths,
                          const std::vector<std::string>& rows);

// Finite-difference verification of every trainable module's loss gradient
// on tiny instances; one row per module.
nlohmann::json grad_check_suite();

// --- helpers shared with tests ----------------------------------------------

struct LoadedClip {
  MotionClip clip;
  SpeechFeatures features;
  ManifestEntry meta;
};
std::vector<LoadedClip> load_split(const RunPaths& paths, const Manifest& manifest,
                                   std::optional<Split> split);

// Clean-latent training samples for the diffusion stage.
struct LatentSample {
  std::array<Tensor, kNumParts> z0;     // [n, d_rvq]
  std::array<Tensor, kNumParts> style;  // [d_style]
  Tensor content, rhythm, emotion;      // [n, d_*], token-aligned
  int style_label = 0;
};
std::vector<LatentSample> prepare_latents(const std::vector<LoadedClip>& clips,
                                          const std::array<const RvqModel*, kNumParts>& codecs,
                                          const StyleEncoder& style_encoder,
                                          const RunConfig& cfg);

// Loss-curve plot files (CSV + static SVG).
void write_loss_plot(const std::filesystem::path& csv_path,
                     const std::filesystem::path& svg_path,
                     const std::vector<TrainLogEntry>& log);

}  // namespace mimicparts
