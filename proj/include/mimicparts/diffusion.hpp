#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mimicparts/nn.hpp"
#include "mimicparts/rvq.hpp"
#include "mimicparts/style.hpp"

namespace mimicparts {

// Forward-process tables: alpha[t], alpha_bar[t] = prod_{s<=t} alpha[s],
// indexed 1..T with alpha_bar[0] = 1.
struct NoiseSchedule {
  int t_steps = 0;
  std::vector<double> alpha;      // [T+1], index 0 unused (= 1)
  std::vector<double> alpha_bar;  // [T+1], alpha_bar[0] = 1

  void validate() const;
  static NoiseSchedule make(int t_steps, const std::string& kind);  // linear | cosine
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);

struct GuidanceWeights {
  double w_c = 1.0;
  double w_s = 2.0;
  double w_re = 1.0;
  void validate() const;
};

// Batched conditioning streams; a missing entry means "no condition" and is
// replaced inside the denoiser by its learned null embedding.
struct CondBatch {
  std::optional<std::array<Tensor, kNumParts>> style;  // each [B, d_s]
  std::optional<Tensor> content;                       // [B, n, d_c], token-aligned
  std::optional<Tensor> rhythm;                        // [B, n_r, d_r]
  std::optional<Tensor> emotion;                       // [B, n_e, d_e]

  CondBatch with_style(bool keep) const;
  CondBatch with_content(bool keep) const;
  CondBatch with_rhythm_emotion(bool keep) const;
};

struct DenoiserConfig {
  int layer_pairs = 2;
  int latent_dim = 48;  // fused width; one third per region
  int heads = 6;        // divisible by 3, one third per region
  int t_steps = 200;
  std::string schedule = "cosine";
  int rvq_latent_dim = 16;
  int d_style = 64;
  int d_content = 32;
  int d_rhythm = 8;
  int d_emotion = 8;
  int t_embed_dim = 32;
  double cond_dropout = 0.1;
  int ffn_mult = 2;
  int part_dim() const { return latent_dim / kNumParts; }
  void validate() const;
};

// Part-aware attention block (Eq.-6 shape): per-region attention over that
// region's tokens (self) or over a shared condition stream (cross), outputs
// concatenated and fused by one linear layer, with residual + layer norm.
struct PartBlockOut {
  std::array<Var, kNumParts> tokens;      // post residual
  std::array<Var, kNumParts> pre_fusion;  // raw per-region attention outputs
};
enum class AttnMode { self_attn, cross_attn };
PartBlockOut part_attention_block(ParamBinding& p, const std::string& prefix,
                                  const std::array<Var, kNumParts>& parts, AttnMode mode,
                                  const std::optional<Var>& condition, int heads_total);
void declare_part_attention_block(ParamStore& store, const std::string& prefix, int part_dim,
                                  int cond_dim, Rng& rng);

// Style/content fusion (Eq.-7 shape): s_i broadcast-added to region i's
// tokens, then the content stream concatenated along features.
std::array<Var, kNumParts> fuse_style_content(const std::array<Var, kNumParts>& tokens,
                                              const std::array<Var, kNumParts>& style,
                                              Var content);

class Denoiser {
 public:
  Denoiser(DenoiserConfig cfg, uint64_t seed);

  // z_parts: [B, n, d_rvq] per region; t: one timestep per sample.
  // Predicts z0 for every region (x0 parameterization).
  std::array<Var, kNumParts> forward(ParamBinding& p,
                                     const std::array<Var, kNumParts>& z_parts,
                                     const std::vector<int>& t,
                                     const CondBatch& conds) const;

  // Single-sample eval convenience; latents [n, d_rvq] per part.
  std::array<Tensor, kNumParts> denoise(const std::array<Tensor, kNumParts>& z_t, int t,
                                        const CondBatch& conds) const;

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  void save(const std::filesystem::path& path, const nlohmann::json& extra_meta = {}) const;
  static Denoiser load_from(const std::filesystem::path& path,
                            nlohmann::json* meta_out = nullptr);

 private:
  DenoiserConfig cfg_;
  ParamStore params_;
};

// Incremental classifier-free guidance (Eq.-11 shape): exactly four denoiser
// evaluations — unconditional, content, content+style, content+rhythm&emotion.
std::array<Tensor, kNumParts> cfg_denoise(const Denoiser& model,
                                          const std::array<Tensor, kNumParts>& z_t, int t,
                                          const CondBatch& conds, const GuidanceWeights& w);

// One training step on a batch of clean latents: t ~ U[1,T], forward noising,
// smooth-L1 on the x0 prediction, one Adam update. Condition groups (style,
// content, rhythm+emotion) are independently dropped with cond_dropout.
struct DiffusionStepStats {
  double loss = 0.0;
  bool dropped_style = false;
  bool dropped_content = false;
  bool dropped_rhythm_emotion = false;
  int t_min = 0, t_max = 0;
};
DiffusionStepStats diffusion_train_step(Denoiser& model,
                                        const std::array<Tensor, kNumParts>& z0_parts,
                                        const CondBatch& conds,
                                        const NoiseSchedule& schedule, Adam& adam, Rng& rng);

// Ancestral sampling over an evenly spaced timestep subset (n_steps <= T),
// guided by Eq.-11 CFG; returns the final clean-latent prediction per region.
std::array<Tensor, kNumParts> sample_latents(const Denoiser& model,
                                             const NoiseSchedule& schedule,
                                             const CondBatch& conds,
                                             const GuidanceWeights& weights, int n_steps,
                                             int n_tokens, uint64_t seed);

// Full sampling path: latents -> rq_forward (eval) -> per-part decode ->
// channel concat into a MotionClip.
MotionClip sample_motion(const Denoiser& model, const NoiseSchedule& schedule,
                         const CondBatch& conds, const GuidanceWeights& weights, int n_steps,
                         int n_tokens, uint64_t seed,
                         const std::array<const RvqModel*, kNumParts>& codecs,
                         const PartLayout& layout, double fps);

}  // namespace mimicparts
