#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <vector>

#include "mimicparts/body.hpp"
#include "mimicparts/nn.hpp"
#include "mimicparts/rvq.hpp"

namespace mimicparts {

// Localized style representations, one vector per region (upper, hands,
// lower). Stored un-normalized; similarity computations normalize internally.
struct StyleEmbedding {
  std::array<Tensor, kNumParts> parts;
  Tensor concat() const { return ops::concat({parts[0], parts[1], parts[2]}, 0); }
};

struct StyleEncoderConfig {
  int d_model = 64;  // d_s
  int layers = 2;
  int heads = 2;
  int t_window = 64;  // T_s: training views are half-clips of length T_s
  double temperature = 0.1;
  int ffn_mult = 4;
  bool full_body = false;  // ablation: one encoder over all channels
};

// Splits each clip of length 2T into its two temporally adjacent halves.
// Output order: all first halves (batch order), then all second halves;
// views i and i+N form positive pair i.
struct PairBatch {
  std::vector<Tensor> views;  // 2N tensors [T, C]
  std::vector<int> pair_ids;  // 2N entries
};
PairBatch make_pairs(const std::vector<Tensor>& clips);

// NT-Xent over embeddings [2N, d]. The positive of row i is the unique other
// row sharing its pair id; the denominator excludes only k = i. Averaged over
// both orientations of every pair.
Var nt_xent(Var embeddings, const std::vector<int>& pair_ids, double temperature);

// Three per-region transformer encoders with identical hyperparameters and
// independent weights (or a single whole-body encoder in full_body mode).
class StyleEncoder {
 public:
  StyleEncoder(StyleEncoderConfig cfg, PartLayout layout, uint64_t seed);

  // Training path: part views [B, T, C_part] -> embeddings [B, d].
  Var encode_part(ParamBinding& p, int part, Var views) const;

  // Eval path: embeds a whole clip (any length), mean-pooled over tokens.
  // In full_body mode all three region slots hold the same embedding.
  StyleEmbedding encode(const MotionClip& clip) const;
  Tensor encode_window_part(int part, const Tensor& window) const;  // [T, C_p] -> [d]
  // Windows longer clips into t_window chunks and averages their embeddings.
  Tensor embed_part(int part, const Tensor& values) const;

  const StyleEncoderConfig& config() const { return cfg_; }
  const PartLayout& layout() const { return layout_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  void save(const std::filesystem::path& path, const nlohmann::json& extra_meta = {}) const;
  static StyleEncoder load_from(const std::filesystem::path& path,
                                nlohmann::json* meta_out = nullptr);

 private:
  std::string part_prefix(int part) const;
  StyleEncoderConfig cfg_;
  PartLayout layout_;
  ParamStore params_;
};

struct StyleTrainConfig {
  int steps = 2000;
  int batch_size = 32;
  double lr = 3e-4;
};

// Contrastive training over temporally adjacent half-clips; the three part
// losses are summed into one optimizer step.
std::vector<TrainLogEntry> train_style(
    StyleEncoder& model, const std::vector<MotionClip>& clips, const StyleTrainConfig& tc,
    uint64_t seed, const std::function<void(const TrainLogEntry&)>& on_step = nullptr,
    Adam* optimizer = nullptr, Rng* external_rng = nullptr);

}  // namespace mimicparts
