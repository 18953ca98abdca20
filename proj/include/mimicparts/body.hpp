#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mimicparts/speech.hpp"
#include "mimicparts/tensor.hpp"

namespace mimicparts {

inline constexpr int kNumParts = 3;
enum Part : int { kUpper = 0, kHands = 1, kLower = 2 };
inline constexpr std::array<const char*, kNumParts> kPartNames = {"upper", "hands", "lower"};

// Partition of motion channels into upper / hands / lower index sets.
// Construction rejects overlapping, incomplete, or empty regions.
class PartLayout {
 public:
  PartLayout() = default;
  PartLayout(std::vector<int> upper, std::vector<int> hands, std::vector<int> lower);

  int channels() const { return channels_; }
  const std::vector<int>& region(int part) const;
  int region_size(int part) const { return static_cast<int>(region(part).size()); }
  std::array<int, kNumParts> region_sizes() const;
  bool contiguous_blocks() const;

  bool operator==(const PartLayout& other) const;

  nlohmann::json to_json() const;
  static PartLayout from_json(const nlohmann::json& j);

 private:
  std::array<std::vector<int>, kNumParts> regions_;
  int channels_ = 0;
};

// Contiguous channel blocks in order upper, hands, lower.
PartLayout make_part_layout(int upper, int hands, int lower);

struct MotionClip {
  Tensor values;  // [T_frames, C]
  double fps = 30.0;
  PartLayout layout;
  std::optional<int> style_label;
  std::optional<int> speaker_id;

  int frames() const { return values.empty() ? 0 : values.dim(0); }
  int channels() const { return values.empty() ? 0 : values.dim(1); }
  double duration() const { return frames() / fps; }
  void validate() const;

  void save(const std::filesystem::path& path) const;
  static MotionClip load(const std::filesystem::path& path);
};

// Synthetic style definition: one tuple per region.
struct RegionStyle {
  double amplitude = 1.0;
  double frequency_hz = 2.0;
  double phase = 0.0;
  std::vector<double> posture;  // empty = zeros; else one value per region channel
  double jitter = 0.05;
};

struct StyleParams {
  std::array<RegionStyle, kNumParts> regions;
};

// The default style set: per-part frequency patterns are rotations of
// (fast, slow, slow), so whole-body frequency statistics cannot separate
// them; the last two styles share a pattern and differ in amplitude band.
std::vector<StyleParams> default_styles(int n_styles);

// Deterministic styled motion. Channels oscillate at the region's style
// frequency with an amplitude scaled by the emotion gain and dipped at the
// speech beats (kinematic holds), plus smoothed jitter noise. Requires the
// speech ground truth (beat times + emotion label) and n_frames divisible
// by the codec downscale factor 4.
MotionClip synth_motion(const StyleParams& style, const SpeechFeatures& speech,
                        const PartLayout& layout, int n_frames, uint64_t seed);

// Per-part channel extraction; concat_parts inverts it exactly.
std::array<Tensor, kNumParts> split_clip(const MotionClip& clip, const PartLayout& layout);
std::array<Tensor, kNumParts> split_channels(const Tensor& values, const PartLayout& layout);
Tensor concat_parts(const PartLayout& layout, const std::array<Tensor, kNumParts>& parts);

enum class Split : int { train = 0, val = 1, test = 2 };
const char* split_name(Split s);

// Stratified per-label split, deterministic per seed and independent of the
// input ordering (entries are grouped per label and sorted by key first).
std::vector<Split> split_dataset(const std::vector<std::string>& keys,
                                 const std::vector<int>& style_labels,
                                 const std::array<double, 3>& ratios, uint64_t seed);

}  // namespace mimicparts
