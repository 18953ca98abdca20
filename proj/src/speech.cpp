#include "mimicparts/speech.hpp"

#include <cmath>
#include <fstream>

#include "mimicparts/io.hpp"

namespace mimicparts {

namespace {

constexpr uint64_t kEmotionSeed = 0x9d2c5680aull;

Tensor resample_rows(const Tensor& x, int n_out) {
  int n_in = x.dim(0), d = x.dim(1);
  if (n_out == n_in) return x;
  auto xv = x.data();
  std::vector<double> out(static_cast<int64_t>(n_out) * d);
  for (int i = 0; i < n_out; ++i) {
    double p = n_out == 1 ? 0.0
                          : static_cast<double>(i) * (n_in - 1) / (n_out - 1);
    int lo = static_cast<int>(p);
    int hi = std::min(lo + 1, n_in - 1);
    double w = p - lo;
    for (int j = 0; j < d; ++j) {
      out[static_cast<int64_t>(i) * d + j] =
          (1.0 - w) * xv[static_cast<int64_t>(lo) * d + j] +
          w * xv[static_cast<int64_t>(hi) * d + j];
    }
  }
  return Tensor({n_out, d}, std::move(out));
}

}  // namespace

void SpeechFeatures::validate() const {
  MP_REQUIRE(!content.empty() && !rhythm.empty() && !emotion.empty(),
             "speech features must have all three streams");
  MP_REQUIRE(content.rank() == 2 && rhythm.rank() == 2 && emotion.rank() == 2,
             "speech streams must be rank-2 [T, d]");
  MP_REQUIRE(content.dim(0) == rhythm.dim(0) && rhythm.dim(0) == emotion.dim(0),
             "speech streams disagree on frame count");
  MP_REQUIRE(fps > 0, "speech fps must be positive");
  MP_REQUIRE(content.all_finite() && rhythm.all_finite() && emotion.all_finite(),
             "speech streams contain non-finite values");
  if (beat_times.has_value()) {
    double horizon = frames() / fps;
    double prev = -1.0;
    for (double b : *beat_times) {
      MP_REQUIRE(b > prev, "beat times must be strictly increasing");
      MP_REQUIRE(b >= 0.0 && b <= horizon, "beat time outside the stream duration");
      prev = b;
    }
  }
}

Tensor emotion_embedding(int emotion_id, int dim) {
  Rng rng(derive_seed(kEmotionSeed, static_cast<uint64_t>(emotion_id)));
  Tensor raw = Tensor::randn({dim}, rng);
  double norm = ops::l2_norm(raw);
  return ops::scale(raw, 1.0 / norm);
}

double emotion_gain(int emotion_id, int n_emotions) {
  if (emotion_id == 0) return 1.0;
  // Spread the remaining labels over [0.78, 1.30].
  double f = n_emotions > 2 ? static_cast<double>(emotion_id - 1) / (n_emotions - 2) : 0.5;
  return 0.78 + 0.52 * f;
}

std::vector<double> emotion_posture(int emotion_id, int channels) {
  std::vector<double> out(channels, 0.0);
  if (emotion_id == 0) return out;
  Rng rng(derive_seed(kEmotionSeed ^ 0x5bull, static_cast<uint64_t>(emotion_id)));
  for (auto& v : out) v = 0.18 * rng.normal();
  return out;
}

SpeechFeatures synth_speech(double tempo_bpm, int emotion_id, int n_frames, double fps,
                            uint64_t seed, const SpeechSynthConfig& cfg) {
  MP_REQUIRE(tempo_bpm >= 40.0 && tempo_bpm <= 240.0,
             "tempo must lie in [40, 240] bpm, got " + std::to_string(tempo_bpm));
  MP_REQUIRE(emotion_id >= 0 && emotion_id < cfg.n_emotions,
             "unknown emotion id " + std::to_string(emotion_id));
  MP_REQUIRE(n_frames >= 1 && fps > 0, "bad frame count or fps");

  Rng rng(seed);
  double duration = n_frames / fps;
  double period = 60.0 / tempo_bpm;
  std::vector<double> beats;
  for (double b = 0.0; b < duration; b += period) beats.push_back(b);

  // Rhythm: smoothed impulses at beats; channel 0 carries the envelope,
  // the rest scaled copies plus noise.
  std::vector<double> rweights(cfg.d_rhythm);
  Rng wrng(derive_seed(kEmotionSeed ^ 0x777ull, 0));
  for (auto& w : rweights) w = 0.3 + 0.5 * wrng.uniform();
  rweights[0] = 1.0;
  std::vector<double> rhythm(static_cast<int64_t>(n_frames) * cfg.d_rhythm);
  for (int t = 0; t < n_frames; ++t) {
    double time = t / fps;
    double env = 0.0;
    for (double b : beats) {
      double d = time - b;
      env += std::exp(-d * d / (2.0 * cfg.beat_width_s * cfg.beat_width_s));
    }
    for (int j = 0; j < cfg.d_rhythm; ++j) {
      rhythm[static_cast<int64_t>(t) * cfg.d_rhythm + j] =
          env * rweights[j] + 0.01 * rng.normal();
    }
  }

  // Emotion: fixed embedding of the label plus small noise.
  Tensor evec = emotion_embedding(emotion_id, cfg.d_emotion);
  std::vector<double> emo(static_cast<int64_t>(n_frames) * cfg.d_emotion);
  for (int t = 0; t < n_frames; ++t) {
    for (int j = 0; j < cfg.d_emotion; ++j) {
      emo[static_cast<int64_t>(t) * cfg.d_emotion + j] = evec(j) + 0.05 * rng.normal();
    }
  }

  // Content: smoothed token-like random walk.
  std::vector<double> content(static_cast<int64_t>(n_frames) * cfg.d_content);
  std::vector<double> state(cfg.d_content, 0.0);
  for (int t = 0; t < n_frames; ++t) {
    for (int j = 0; j < cfg.d_content; ++j) {
      state[j] = 0.92 * state[j] + 0.25 * rng.normal();
      content[static_cast<int64_t>(t) * cfg.d_content + j] = state[j];
    }
  }
  // Length-3 moving average for smoothness.
  std::vector<double> smoothed(content.size());
  for (int t = 0; t < n_frames; ++t) {
    int t0 = std::max(0, t - 1), t1 = std::min(n_frames - 1, t + 1);
    for (int j = 0; j < cfg.d_content; ++j) {
      double acc = 0.0;
      for (int s = t0; s <= t1; ++s) acc += content[static_cast<int64_t>(s) * cfg.d_content + j];
      smoothed[static_cast<int64_t>(t) * cfg.d_content + j] = acc / (t1 - t0 + 1);
    }
  }

  SpeechFeatures out;
  out.content = Tensor({n_frames, cfg.d_content}, std::move(smoothed));
  out.rhythm = Tensor({n_frames, cfg.d_rhythm}, std::move(rhythm));
  out.emotion = Tensor({n_frames, cfg.d_emotion}, std::move(emo));
  out.fps = fps;
  out.beat_times = std::move(beats);
  out.emotion_label = emotion_id;
  out.validate();
  return out;
}

SpeechFeatures align_features(const SpeechFeatures& f, double motion_fps, int n_frames) {
  f.validate();
  MP_REQUIRE(n_frames > 0, "align_features: n_frames must be positive");
  SpeechFeatures out = f;
  out.content = resample_rows(f.content, n_frames);
  out.rhythm = resample_rows(f.rhythm, n_frames);
  out.emotion = resample_rows(f.emotion, n_frames);
  out.fps = motion_fps;
  return out;
}

void SpeechFeatures::save(const std::filesystem::path& path) const {
  validate();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error::io("cannot write " + path.string());
  f.write("MPSF", 4);
  io::json meta;
  meta["fps"] = fps;
  meta["dims"] = {content.dim(1), rhythm.dim(1), emotion.dim(1)};
  if (beat_times.has_value()) meta["beat_times"] = *beat_times;
  if (emotion_label.has_value()) meta["emotion_label"] = *emotion_label;
  io::write_json_block(f, meta);
  content.save(f);
  rhythm.save(f);
  emotion.save(f);
  if (!f) throw Error::io("short write to " + path.string());
}

SpeechFeatures SpeechFeatures::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error::io("cannot open " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "MPSF") {
    throw Error::io("bad feature-file magic in " + path.string());
  }
  io::json meta = io::read_json_block(f);
  SpeechFeatures out;
  out.fps = meta.value("fps", 30.0);
  if (meta.contains("beat_times")) {
    out.beat_times = meta["beat_times"].get<std::vector<double>>();
  }
  if (meta.contains("emotion_label")) out.emotion_label = meta["emotion_label"].get<int>();
  out.content = Tensor::load(f);
  out.rhythm = Tensor::load(f);
  out.emotion = Tensor::load(f);
  out.validate();
  return out;
}

}  // namespace mimicparts
