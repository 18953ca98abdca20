#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "mimicparts/tensor.hpp"

namespace mimicparts {

// The three conditioning streams: content, rhythm, emotion. Either produced
// synthetically (with ground-truth beat times and emotion label) or imported
// from files written by external feature extractors.
struct SpeechFeatures {
  Tensor content;  // [T_a, d_c]
  Tensor rhythm;   // [T_a, d_r]
  Tensor emotion;  // [T_a, d_e]
  double fps = 30.0;
  std::optional<std::vector<double>> beat_times;  // seconds, strictly increasing
  std::optional<int> emotion_label;

  int frames() const { return content.empty() ? 0 : content.dim(0); }
  double duration() const { return frames() / fps; }
  void validate() const;

  void save(const std::filesystem::path& path) const;
  static SpeechFeatures load(const std::filesystem::path& path);
};

struct SpeechSynthConfig {
  int d_content = 32;
  int d_rhythm = 8;
  int d_emotion = 8;
  int n_emotions = 8;
  double beat_width_s = 0.05;  // gaussian width of rhythm impulses
};

// Deterministic synthetic speech streams. Beats lie on the 60/tempo grid
// starting at t = 0; the rhythm stream carries smoothed impulses at the
// beats, the emotion stream a fixed per-label embedding plus small noise,
// and the content stream a smoothed random walk.
SpeechFeatures synth_speech(double tempo_bpm, int emotion_id, int n_frames, double fps,
                            uint64_t seed, const SpeechSynthConfig& cfg = {});

// Endpoint-preserving linear resample of all three streams to n_frames at
// motion_fps. Beat times are wall-clock and stay unchanged.
SpeechFeatures align_features(const SpeechFeatures& f, double motion_fps, int n_frames);

// Fixed (learnable-free) per-emotion quantities shared by the synthetic
// generators: a unit embedding direction, an amplitude gain, and a posture
// shift. Emotion 0 is the neutral baseline (gain 1, zero shift).
Tensor emotion_embedding(int emotion_id, int dim);
double emotion_gain(int emotion_id, int n_emotions);
std::vector<double> emotion_posture(int emotion_id, int channels);

}  // namespace mimicparts
