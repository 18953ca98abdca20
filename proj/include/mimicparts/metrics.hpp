#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "mimicparts/body.hpp"
#include "mimicparts/style.hpp"

namespace mimicparts {

// Gaussian fit of a clip-feature embedding set.
struct FeatureDist {
  Tensor mean;  // [d]
  Tensor cov;   // [d, d], symmetrized
  int n = 0;

  static FeatureDist estimate(const std::vector<Tensor>& features);
};

// Symmetric PSD square root via eigendecomposition. Eigenvalues in
// [-1e-10, 0) are clamped to zero; materially negative ones are an error.
Tensor matrix_sqrt_psd(const Tensor& a);

// Frechet distance between two Gaussian fits:
// |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).
double fgd(const FeatureDist& a, const FeatureDist& b);

// Kinematic beats: local minima of the per-frame velocity magnitude whose
// value lies below the 25th-percentile threshold; times in seconds. An
// optional part restricts the channels used.
std::vector<double> motion_beats(const MotionClip& clip, std::optional<int> part = {});

// The BC kernel over explicit beat lists:
// mean over audio beats of exp(-min_m (b - m)^2 / (2 sigma^2)).
double bc_kernel(const std::vector<double>& audio_beats,
                 const std::vector<double>& motion_beat_times, double sigma);

// BC of a clip: bc_kernel over its extracted kinematic beats;
// 0 when the clip has no kinematic beats.
double beat_consistency(const MotionClip& clip, const std::vector<double>& audio_beats,
                        double sigma = 0.1, std::optional<int> part = {});

// Mean per-element L1 distance over sampled unordered clip pairs.
// n_pairs <= 0 or >= the pair count uses every pair.
double diversity(const std::vector<Tensor>& clips, int n_pairs, uint64_t seed);
double diversity_clips(const std::vector<MotionClip>& clips, int n_pairs, uint64_t seed,
                       std::optional<int> part = {});

// Frozen-encoder clip features for FGD: the concatenated region embeddings,
// or a single region's embedding for the per-part variant.
std::vector<Tensor> style_features(const StyleEncoder& encoder,
                                   const std::vector<MotionClip>& clips,
                                   std::optional<int> part = {});

// Part-aware transformer classifier for style recognition, trained
// supervised on labeled clips and then frozen.
class StyleClassifier {
 public:
  StyleClassifier(StyleEncoderConfig backbone, PartLayout layout, int n_styles,
                  uint64_t seed);

  std::vector<TrainLogEntry> train(const std::vector<MotionClip>& clips, int steps,
                                   int batch_size, double lr, uint64_t seed);
  int predict(const MotionClip& clip) const;
  double accuracy(const std::vector<MotionClip>& clips) const;
  int n_styles() const { return n_styles_; }

  void save(const std::filesystem::path& path) const;
  static StyleClassifier load_from(const std::filesystem::path& path);

 private:
  Var logits_for(ParamBinding& enc_binding, ParamBinding& head_binding,
                 const std::vector<Tensor>& windows) const;
  StyleEncoder backbone_;
  ParamStore head_;
  int n_styles_ = 0;
};

// Fraction of clips whose predicted style matches the intended label.
double sra(const StyleClassifier& classifier, const std::vector<MotionClip>& clips,
           const std::vector<int>& intended_labels);

}  // namespace mimicparts
