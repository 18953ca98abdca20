#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "mimicparts/body.hpp"
#include "mimicparts/nn.hpp"

namespace mimicparts {

struct RvqConfig {
  int num_layers = 6;      // quantization depth V
  int codebook_size = 64;  // entries per layer K
  int latent_dim = 16;     // entry dimension d
  int hidden = 128;        // conv channel width
  double beta = 0.25;      // commitment weight
  double quantizer_dropout = 0.2;
  double ema_decay = 0.99;
  double dead_usage_threshold = 0.03;
  static constexpr int downscale = 4;  // two stride-2 stages
};

// Stack of codebooks with EMA statistics for training-time updates.
class Codebooks {
 public:
  Codebooks() = default;
  Codebooks(int num_layers, int size, int dim);

  int num_layers() const { return static_cast<int>(entries_.size()); }
  int size() const { return size_; }
  int dim() const { return dim_; }
  bool initialized() const { return initialized_; }

  const Tensor& layer(int v) const;
  void set_layer(int v, Tensor entries);
  const std::vector<double>& usage(int v) const { return usage_[v]; }

  // Seeds every layer from rows of the progressive residuals of `latents`
  // (flattened tokens x dim).
  void init_from_latents(const Tensor& latents, Rng& rng);

  // One EMA step for layer v given the tokens quantized onto it.
  void ema_update(int v, const Tensor& residual_tokens, const std::vector<int>& indices,
                  double decay, double dead_threshold, Rng& rng);

  // Restores serialized EMA statistics (checkpoint resume).
  void restore_stats(int v, std::vector<double> usage, std::vector<double> ema_sum);
  const std::vector<double>& ema_sum(int v) const { return ema_sum_[v]; }

  int dead_entries(int v, double threshold) const;

 private:
  std::vector<Tensor> entries_;             // V x [K, d]
  std::vector<std::vector<double>> usage_;  // EMA assignment counts
  std::vector<std::vector<double>> ema_sum_;  // EMA assigned-vector sums, K*d each
  int size_ = 0, dim_ = 0;
  bool initialized_ = false;
};

struct QuantizeResult {
  Tensor z;                  // same shape as the input residual
  std::vector<int> indices;  // one per token (row-major over leading axes)
};

// Nearest codebook entry per token by squared Euclidean distance; ties break
// to the lowest index.
QuantizeResult quantize_layer(const Tensor& residual, const Tensor& codebook);

enum class RqMode { train, eval };

struct RqResult {
  Tensor quantized_sum;  // sum of the used layers' outputs
  Tensor final_residual;
  std::vector<Tensor> layer_z;
  std::vector<std::vector<int>> layer_indices;
  std::vector<Tensor> layer_residuals;  // residual fed to each used layer
  int depth = 0;
  bool truncated = false;
};

// Layer-by-layer residual quantization. In train mode, with probability
// `quantizer_dropout` a uniformly random truncation depth in {1..V} is used.
// Residuals are formed as r^{v+1} = r^1 - sum of used outputs, so the
// telescoping identity holds bitwise.
RqResult rq_forward(const Tensor& latent, const Codebooks& books, RqMode mode,
                    double quantizer_dropout, Rng* rng);

// Reconstruction + commitment loss: L1(m, m_hat) + beta * sum_v
// mean((r^v - sg[z^v])^2). The residuals are live variables, the quantized
// outputs constants, so the latent term's gradient reaches only r^v.
Var rvq_loss(Tape& tape, Var m, Var m_hat, const std::vector<Var>& residuals,
             const std::vector<Tensor>& quantized, double beta);

// Builds the residual variables r^v = latent - sum_{w<v} sg[z^w] for rvq_loss.
std::vector<Var> residual_vars(Tape& tape, Var latent, const std::vector<Tensor>& quantized);

// Per-part temporal codec: conv residual encoder (downscale 4), RQ bottleneck,
// mirrored decoder.
class RvqModel {
 public:
  RvqModel(RvqConfig cfg, int channels, uint64_t init_seed);

  Var encode(ParamBinding& p, Var x) const;  // [B, T, C] -> [B, T/4, d]
  Var decode(ParamBinding& p, Var z) const;  // [B, n, d] -> [B, 4n, C]

  // Eval-mode conveniences on a single clip part [T, C].
  Tensor encode_eval(const Tensor& part) const;
  Tensor decode_eval(const Tensor& latent) const;
  // encode -> quantize (eval) -> decode.
  Tensor reconstruct(const Tensor& part) const;

  // Seeds the codebooks from encoded samples without any training step.
  void init_codebooks(const std::vector<Tensor>& parts, uint64_t seed);

  void save(const std::filesystem::path& path, const nlohmann::json& extra_meta = {}) const;
  static RvqModel load_from(const std::filesystem::path& path, nlohmann::json* meta_out = nullptr);

  const RvqConfig& config() const { return cfg_; }
  int channels() const { return channels_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  Codebooks& codebooks() { return books_; }
  const Codebooks& codebooks() const { return books_; }

 private:
  RvqConfig cfg_;
  int channels_ = 0;
  ParamStore params_;
  Codebooks books_;
};

struct RvqTrainConfig {
  int steps = 400;
  int batch_size = 32;
  double lr = 2e-4;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double recon = 0.0;
  double aux = 0.0;
};

// Trains the codec on part tensors [T, C]. Codebooks are EMA-updated with
// dead-entry reseeding; encoder/decoder take Adam steps.
std::vector<TrainLogEntry> train_rvq(
    RvqModel& model, const std::vector<Tensor>& parts, const RvqTrainConfig& tc,
    uint64_t seed, const std::function<void(const TrainLogEntry&)>& on_step = nullptr,
    Adam* optimizer = nullptr, Rng* external_rng = nullptr);

// RQ index export: "MPQI" container with one u16 array per layer.
void save_rq_indices(const std::filesystem::path& path, const RqResult& rq);

}  // namespace mimicparts
