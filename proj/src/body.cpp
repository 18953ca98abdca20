#include "mimicparts/body.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "mimicparts/io.hpp"

namespace mimicparts {

PartLayout::PartLayout(std::vector<int> upper, std::vector<int> hands, std::vector<int> lower) {
  regions_[kUpper] = std::move(upper);
  regions_[kHands] = std::move(hands);
  regions_[kLower] = std::move(lower);
  int total = 0;
  for (int p = 0; p < kNumParts; ++p) {
    MP_REQUIRE(!regions_[p].empty(), std::string(kPartNames[p]) + " region must be non-empty");
    total += static_cast<int>(regions_[p].size());
  }
  std::vector<char> seen(total, 0);
  for (const auto& region : regions_) {
    for (int c : region) {
      MP_REQUIRE(c >= 0 && c < total, "channel index " + std::to_string(c) + " out of range");
      MP_REQUIRE(!seen[c], "channel " + std::to_string(c) + " assigned to two regions");
      seen[c] = 1;
    }
  }
  channels_ = total;  // disjoint + in-range + counts match => exhaustive
}

const std::vector<int>& PartLayout::region(int part) const {
  MP_REQUIRE(part >= 0 && part < kNumParts, "bad part index");
  return regions_[part];
}

std::array<int, kNumParts> PartLayout::region_sizes() const {
  return {region_size(kUpper), region_size(kHands), region_size(kLower)};
}

bool PartLayout::contiguous_blocks() const {
  int next = 0;
  for (const auto& region : regions_) {
    for (int c : region) {
      if (c != next++) return false;
    }
  }
  return true;
}

bool PartLayout::operator==(const PartLayout& other) const {
  return regions_ == other.regions_;
}

nlohmann::json PartLayout::to_json() const {
  nlohmann::json j;
  for (int p = 0; p < kNumParts; ++p) j[kPartNames[p]] = regions_[p];
  return j;
}

PartLayout PartLayout::from_json(const nlohmann::json& j) {
  return PartLayout(j.at("upper").get<std::vector<int>>(),
                    j.at("hands").get<std::vector<int>>(),
                    j.at("lower").get<std::vector<int>>());
}

PartLayout make_part_layout(int upper, int hands, int lower) {
  MP_REQUIRE(upper >= 1 && hands >= 1 && lower >= 1,
             "every region needs at least one channel");
  auto iota = [](int from, int count) {
    std::vector<int> v(count);
    std::iota(v.begin(), v.end(), from);
    return v;
  };
  return PartLayout(iota(0, upper), iota(upper, hands), iota(upper + hands, lower));
}

void MotionClip::validate() const {
  MP_REQUIRE(!values.empty() && values.rank() == 2, "clip values must be [T, C]");
  MP_REQUIRE(frames() >= 1, "clip must have at least one frame");
  MP_REQUIRE(fps > 0, "clip fps must be positive");
  MP_REQUIRE(layout.channels() == channels(),
             "layout covers " + std::to_string(layout.channels()) + " channels but clip has " +
                 std::to_string(channels()));
  MP_REQUIRE(values.all_finite(), "clip contains non-finite values");
}

void MotionClip::save(const std::filesystem::path& path) const {
  validate();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error::io("cannot write " + path.string());
  f.write("MPCL", 4);
  io::json meta;
  meta["fps"] = fps;
  meta["layout"] = layout.to_json();
  if (style_label.has_value()) meta["style_label"] = *style_label;
  if (speaker_id.has_value()) meta["speaker_id"] = *speaker_id;
  io::write_json_block(f, meta);
  values.save(f);
  if (!f) throw Error::io("short write to " + path.string());
}

MotionClip MotionClip::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error::io("cannot open " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "MPCL") {
    throw Error::io("bad clip magic in " + path.string());
  }
  io::json meta = io::read_json_block(f);
  MotionClip clip;
  clip.fps = meta.value("fps", 30.0);
  clip.layout = PartLayout::from_json(meta.at("layout"));
  if (meta.contains("style_label")) clip.style_label = meta["style_label"].get<int>();
  if (meta.contains("speaker_id")) clip.speaker_id = meta["speaker_id"].get<int>();
  clip.values = Tensor::load(f);
  clip.validate();
  return clip;
}

std::vector<StyleParams> default_styles(int n_styles) {
  MP_REQUIRE(n_styles >= 1, "need at least one style");
  // Rotations of one frequency triple: the whole-body frequency multiset is
  // identical across the first three styles, so only part-resolved features
  // separate them. Every region still sees three distinct frequencies, so
  // each part alone identifies the style. Styles beyond the rotation cycle
  // reuse a pattern and sit in a different amplitude band.
  constexpr double kTriple[kNumParts] = {3.0, 1.0, 1.8};
  std::vector<StyleParams> out;
  for (int s = 0; s < n_styles; ++s) {
    StyleParams sp;
    int rotation = s % kNumParts;
    double amp = s < kNumParts ? 1.0 : (s % 2 == 0 ? 1.3 : 0.5);
    for (int p = 0; p < kNumParts; ++p) {
      RegionStyle& r = sp.regions[p];
      r.frequency_hz = kTriple[(p + rotation) % kNumParts];
      r.amplitude = amp;
      r.phase = 0.7 * s;
      r.jitter = 0.05;
    }
    out.push_back(std::move(sp));
  }
  return out;
}

MotionClip synth_motion(const StyleParams& style, const SpeechFeatures& speech,
                        const PartLayout& layout, int n_frames, uint64_t seed) {
  MP_REQUIRE(n_frames >= 4 && n_frames % 4 == 0,
             "n_frames must be a positive multiple of the codec downscale 4");
  speech.validate();
  MP_REQUIRE(speech.beat_times.has_value() && speech.emotion_label.has_value(),
             "synth_motion needs speech ground truth (beats + emotion)");
  double fps = speech.fps;
  MP_REQUIRE(speech.frames() >= n_frames,
             "speech covers " + std::to_string(speech.frames()) + " frames but " +
                 std::to_string(n_frames) + " were requested");
  for (int p = 0; p < kNumParts; ++p) {
    const RegionStyle& r = style.regions[p];
    MP_REQUIRE(r.amplitude >= 0.0, "amplitude must be non-negative");
    MP_REQUIRE(r.frequency_hz > 0.0 && r.frequency_hz < fps / 2.0,
               "frequency must lie in (0, fps/2)");
    MP_REQUIRE(r.posture.empty() ||
                   r.posture.size() == static_cast<size_t>(layout.region_size(p)),
               "posture vector length must match the region size");
  }

  int channels = layout.channels();
  double gain = emotion_gain(*speech.emotion_label, 8);
  std::vector<double> emo_shift = emotion_posture(*speech.emotion_label, channels);

  // Beat envelope in [0, 1]; motion amplitude dips at beats so kinematic
  // beats (velocity minima) line up with the audio beats.
  constexpr double kBeatWidth = 0.07, kBeatDip = 0.75;
  std::vector<double> beat_env(n_frames, 0.0);
  for (int t = 0; t < n_frames; ++t) {
    double time = t / fps;
    double env = 0.0;
    for (double b : *speech.beat_times) {
      double d = time - b;
      env += std::exp(-d * d / (2.0 * kBeatWidth * kBeatWidth));
    }
    beat_env[t] = std::min(env, 1.0);
  }

  // Smoothed per-channel jitter.
  Rng rng(seed);
  std::vector<double> noise(static_cast<int64_t>(n_frames) * channels);
  for (auto& v : noise) v = rng.normal();
  std::vector<double> smooth(noise.size(), 0.0);
  for (int t = 0; t < n_frames; ++t) {
    int t0 = std::max(0, t - 2), t1 = std::min(n_frames - 1, t + 2);
    for (int c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (int s = t0; s <= t1; ++s) acc += noise[static_cast<int64_t>(s) * channels + c];
      smooth[static_cast<int64_t>(t) * channels + c] = acc / (t1 - t0 + 1);
    }
  }

  std::vector<double> values(static_cast<int64_t>(n_frames) * channels, 0.0);
  for (int p = 0; p < kNumParts; ++p) {
    const RegionStyle& r = style.regions[p];
    const auto& idx = layout.region(p);
    double omega = 2.0 * 3.14159265358979323846 * r.frequency_hz;
    for (size_t j = 0; j < idx.size(); ++j) {
      int c = idx[j];
      double posture = r.posture.empty() ? 0.0 : r.posture[j];
      double phase = r.phase + 1.9 * static_cast<double>(j);
      for (int t = 0; t < n_frames; ++t) {
        double time = t / fps;
        double amp = r.amplitude * gain * (1.0 - kBeatDip * beat_env[t]);
        values[static_cast<int64_t>(t) * channels + c] =
            posture + emo_shift[c] + amp * std::sin(omega * time + phase) +
            r.jitter * smooth[static_cast<int64_t>(t) * channels + c];
      }
    }
  }

  MotionClip clip;
  clip.values = Tensor({n_frames, channels}, std::move(values));
  clip.fps = fps;
  clip.layout = layout;
  clip.validate();
  return clip;
}

std::array<Tensor, kNumParts> split_channels(const Tensor& values, const PartLayout& layout) {
  MP_REQUIRE(values.rank() == 2, "split_channels expects [T, C]");
  MP_REQUIRE(layout.channels() == values.dim(1), "layout does not match channel count");
  int t_frames = values.dim(0);
  int channels = values.dim(1);
  auto cv = values.data();
  std::array<Tensor, kNumParts> out;
  for (int p = 0; p < kNumParts; ++p) {
    const auto& idx = layout.region(p);
    std::vector<double> d(static_cast<int64_t>(t_frames) * idx.size());
    for (int t = 0; t < t_frames; ++t) {
      for (size_t j = 0; j < idx.size(); ++j) {
        d[static_cast<int64_t>(t) * idx.size() + j] =
            cv[static_cast<int64_t>(t) * channels + idx[j]];
      }
    }
    out[p] = Tensor({t_frames, static_cast<int>(idx.size())}, std::move(d));
  }
  return out;
}

std::array<Tensor, kNumParts> split_clip(const MotionClip& clip, const PartLayout& layout) {
  clip.validate();
  return split_channels(clip.values, layout);
}

Tensor concat_parts(const PartLayout& layout, const std::array<Tensor, kNumParts>& parts) {
  int t_frames = parts[0].dim(0);
  int channels = layout.channels();
  std::vector<double> d(static_cast<int64_t>(t_frames) * channels);
  for (int p = 0; p < kNumParts; ++p) {
    const auto& idx = layout.region(p);
    MP_REQUIRE(parts[p].rank() == 2 && parts[p].dim(0) == t_frames &&
                   parts[p].dim(1) == static_cast<int>(idx.size()),
               "part tensor shape does not match the layout");
    auto pv = parts[p].data();
    for (int t = 0; t < t_frames; ++t) {
      for (size_t j = 0; j < idx.size(); ++j) {
        d[static_cast<int64_t>(t) * channels + idx[j]] =
            pv[static_cast<int64_t>(t) * idx.size() + j];
      }
    }
  }
  return Tensor({t_frames, channels}, std::move(d));
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::vector<Split> split_dataset(const std::vector<std::string>& keys,
                                 const std::vector<int>& style_labels,
                                 const std::array<double, 3>& ratios, uint64_t seed) {
  MP_REQUIRE(keys.size() == style_labels.size(), "keys and labels disagree in length");
  double sum = ratios[0] + ratios[1] + ratios[2];
  MP_REQUIRE(std::abs(sum - 1.0) < 1e-9, "split ratios must sum to 1");
  for (double r : ratios) MP_REQUIRE(r >= 0.0, "split ratios must be non-negative");
  int active = 0;
  for (double r : ratios) active += r > 0.0 ? 1 : 0;

  // Group indices per label, ordered by key so the result does not depend
  // on the caller's ordering.
  std::map<int, std::vector<int>> by_label;
  for (size_t i = 0; i < keys.size(); ++i) by_label[style_labels[i]].push_back(static_cast<int>(i));
  std::vector<Split> out(keys.size(), Split::train);
  for (auto& [label, indices] : by_label) {
    std::sort(indices.begin(), indices.end(),
              [&](int a, int b) { return keys[a] < keys[b]; });
    int n = static_cast<int>(indices.size());
    MP_REQUIRE(n >= active, "label " + std::to_string(label) + " has fewer clips (" +
                                std::to_string(n) + ") than active partitions");
    // Largest-remainder apportionment of n over the three partitions.
    std::array<int, 3> counts{};
    std::array<double, 3> frac{};
    int assigned = 0;
    for (int s = 0; s < 3; ++s) {
      double exact = ratios[s] * n;
      counts[s] = static_cast<int>(exact);
      frac[s] = exact - counts[s];
      assigned += counts[s];
    }
    std::array<int, 3> order = {0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return frac[a] != frac[b] ? frac[a] > frac[b] : a < b;
    });
    for (int r = 0; assigned < n; ++r, ++assigned) counts[order[r % 3]] += 1;

    // Seeded shuffle within the label group (Fisher-Yates, label-keyed rng).
    Rng rng(derive_seed(seed, static_cast<uint64_t>(label) + 0x51ab));
    for (int i = n - 1; i > 0; --i) {
      int j = rng.uniform_int(0, i);
      std::swap(indices[i], indices[j]);
    }
    int cursor = 0;
    for (int s = 0; s < 3; ++s) {
      for (int k = 0; k < counts[s]; ++k) out[indices[cursor++]] = static_cast<Split>(s);
    }
  }
  return out;
}

}  // namespace mimicparts
