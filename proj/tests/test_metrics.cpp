#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mimicparts/metrics.hpp"
#include "test_util.hpp"

using namespace mimicparts;

namespace {

Tensor random_psd(int d, Rng& rng) {
  Tensor a = Tensor::randn({d, d}, rng);
  Tensor sym = ops::matmul(a, ops::transpose2d(a));  // A A^T is PSD
  return sym;
}

std::vector<MotionClip> labeled_clips(int per_style, int frames, uint64_t seed,
                                      const PartLayout& layout) {
  auto styles = default_styles(4);
  std::vector<MotionClip> clips;
  Rng meta(seed);
  for (int s = 0; s < 4; ++s) {
    for (int i = 0; i < per_style; ++i) {
      auto speech = synth_speech(meta.uniform(70.0, 140.0), meta.uniform_int(0, 7), frames,
                                 30.0, derive_seed(seed, s * 100 + i));
      auto clip = synth_motion(styles[s], speech, layout, frames,
                               derive_seed(seed, 7000 + s * 100 + i));
      clip.style_label = s;
      clips.push_back(std::move(clip));
    }
  }
  return clips;
}

}  // namespace

TEST_CASE("matrix_sqrt_psd basic and reconstruction") {
  Tensor eye = Tensor::eye(4);
  CHECK(mptest::max_abs_diff(matrix_sqrt_psd(eye), eye) < 1e-12);

  Tensor diag({2, 2}, {4, 0, 0, 9});
  Tensor root = matrix_sqrt_psd(diag);
  CHECK(root(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(root(1, 1) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(std::abs(root(0, 1)) < 1e-12);

  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = random_psd(8, rng);
    Tensor b = matrix_sqrt_psd(a);
    Tensor back = ops::matmul(b, b);
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
      num += (back.at(i) - a.at(i)) * (back.at(i) - a.at(i));
      den += a.at(i) * a.at(i);
    }
    CHECK(std::sqrt(num) / std::sqrt(den) < 1e-8);
  }

  Tensor negative({2, 2}, {-1.0, 0, 0, 1.0});
  CHECK_THROWS_AS((void)matrix_sqrt_psd(negative), Error);
  Tensor asym({2, 2}, {1.0, 0.5, -0.5, 1.0});
  CHECK_THROWS_AS((void)matrix_sqrt_psd(asym), Error);
}

TEST_CASE("fgd closed forms and symmetry") {
  // Identical distributions: exactly zero distance.
  Rng rng(7);
  std::vector<Tensor> feats;
  for (int i = 0; i < 20; ++i) feats.push_back(Tensor::randn({5}, rng));
  auto d1 = FeatureDist::estimate(feats);
  CHECK(std::abs(fgd(d1, d1)) < 1e-8);

  // 1-D N(0,1) vs N(2,1): (2)^2 + (1 + 1 - 2) = 4.
  FeatureDist a, b;
  a.mean = Tensor({1}, {0.0});
  a.cov = Tensor({1, 1}, {1.0});
  b.mean = Tensor({1}, {2.0});
  b.cov = Tensor({1, 1}, {1.0});
  CHECK(fgd(a, b) == doctest::Approx(4.0).epsilon(1e-12));

  // Diagonal covariances: sum_d (mu-diff^2 + (sqrt(s1) - sqrt(s2))^2).
  const int d = 4;
  std::vector<double> mu1 = {0.3, -1.0, 2.0, 0.0};
  std::vector<double> mu2 = {1.3, 0.0, 1.0, -2.0};
  std::vector<double> v1 = {1.0, 2.0, 0.5, 3.0};
  std::vector<double> v2 = {2.0, 1.0, 1.5, 0.25};
  FeatureDist da, db;
  da.mean = Tensor({d}, mu1);
  db.mean = Tensor({d}, mu2);
  std::vector<double> c1(d * d, 0.0), c2(d * d, 0.0);
  for (int i = 0; i < d; ++i) {
    c1[i * d + i] = v1[i];
    c2[i * d + i] = v2[i];
  }
  da.cov = Tensor({d, d}, c1);
  db.cov = Tensor({d, d}, c2);
  double want = 0.0;
  for (int i = 0; i < d; ++i) {
    double md = mu1[i] - mu2[i];
    double sd = std::sqrt(v1[i]) - std::sqrt(v2[i]);
    want += md * md + sd * sd;
  }
  CHECK(fgd(da, db) == doctest::Approx(want).epsilon(1e-10));
  // Symmetry and non-negativity.
  CHECK(fgd(da, db) == doctest::Approx(fgd(db, da)).epsilon(1e-10));
  CHECK(fgd(da, db) >= -1e-8);

  FeatureDist wrong;
  wrong.mean = Tensor({2}, {0.0, 0.0});
  wrong.cov = Tensor::eye(2);
  CHECK_THROWS_AS((void)fgd(da, wrong), Error);
}

TEST_CASE("beat consistency closed forms") {
  auto layout = make_part_layout(4, 3, 3);
  auto styles = default_styles(4);
  auto speech = synth_speech(90.0, 0, 128, 30.0, 3);
  auto clip = synth_motion(styles[0], speech, layout, 128, 9);

  auto beats = motion_beats(clip);
  REQUIRE(!beats.empty());

  // Audio beats exactly at the motion beats: every kernel term is exp(0).
  CHECK(beat_consistency(clip, beats) == doctest::Approx(1.0).epsilon(1e-12));

  // Every audio beat offset by exactly sigma: exp(-1/2).
  const double sigma = 0.1;
  std::vector<double> offset;
  for (double b : beats) offset.push_back(b + sigma);
  CHECK(beat_consistency(clip, offset, sigma) ==
        doctest::Approx(std::exp(-0.5)).epsilon(1e-9));

  CHECK_THROWS_AS((void)beat_consistency(clip, {}, sigma), Error);
  CHECK_THROWS_AS((void)beat_consistency(clip, beats, 0.0), Error);
}

TEST_CASE("bc kernel matches a brute-force double loop and ignores duplicates") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> audio, motion;
    int na = rng.uniform_int(1, 8), nm = rng.uniform_int(1, 8);
    for (int i = 0; i < na; ++i) audio.push_back(rng.uniform(0.0, 4.0));
    for (int i = 0; i < nm; ++i) motion.push_back(rng.uniform(0.0, 4.0));
    double sigma = rng.uniform(0.05, 0.3);

    double got = bc_kernel(audio, motion, sigma);
    double want = 0.0;
    for (double b : audio) {
      double best = 1e300;
      for (double m : motion) best = std::min(best, (b - m) * (b - m));
      want += std::exp(-best / (2 * sigma * sigma));
    }
    want /= audio.size();
    CHECK(std::abs(got - want) <= 1e-12);

    // Duplicating motion beats cannot change the nearest-beat distances.
    std::vector<double> dup = motion;
    dup.insert(dup.end(), motion.begin(), motion.end());
    CHECK(bc_kernel(audio, dup, sigma) == doctest::Approx(got).epsilon(1e-15));
  }
}

TEST_CASE("per-part BC equals full BC when all channels carry the same signal") {
  // Replicate one channel across the full body: restriction to any region
  // sees the same kinematic beats as the whole.
  auto layout = make_part_layout(3, 2, 2);
  auto speech = synth_speech(80.0, 0, 128, 30.0, 21);
  auto base = synth_motion(default_styles(1)[0], speech, make_part_layout(1, 1, 1), 128, 5);
  std::vector<double> rep(static_cast<int64_t>(128) * 7);
  for (int t = 0; t < 128; ++t) {
    for (int c = 0; c < 7; ++c) rep[static_cast<int64_t>(t) * 7 + c] = base.values(t, 0);
  }
  MotionClip clip;
  clip.values = Tensor({128, 7}, rep);
  clip.fps = 30.0;
  clip.layout = layout;

  auto full = beat_consistency(clip, *speech.beat_times);
  for (int p = 0; p < kNumParts; ++p) {
    CHECK(beat_consistency(clip, *speech.beat_times, 0.1, p) ==
          doctest::Approx(full).epsilon(1e-12));
  }
}

TEST_CASE("diversity closed forms and exhaustive oracle") {
  Rng rng(13);
  Tensor a = Tensor::randn({8, 4}, rng);
  // Identical clips -> 0.
  CHECK(diversity({a, a, a}, 0, 1) == 0.0);
  // Two clips differing by a constant 1 everywhere -> 1.0.
  Tensor b = ops::add_scalar(a, 1.0);
  CHECK(diversity({a, b}, 0, 1) == doctest::Approx(1.0).epsilon(1e-12));

  // Five random clips, all pairs: matches the exhaustive pair average.
  std::vector<Tensor> clips;
  for (int i = 0; i < 5; ++i) clips.push_back(Tensor::randn({6, 3}, rng));
  double got = diversity(clips, 0, 7);
  double want = 0.0;
  int count = 0;
  for (int i = 0; i < 5; ++i) {
    for (int j = i + 1; j < 5; ++j) {
      want += ops::l1_loss(clips[i], clips[j]).scalar_value();
      ++count;
    }
  }
  want /= count;
  CHECK(got == doctest::Approx(want).epsilon(1e-12));

  // Order invariance when every pair is used.
  std::vector<Tensor> shuffled = {clips[3], clips[0], clips[4], clips[2], clips[1]};
  CHECK(diversity(shuffled, 0, 99) == doctest::Approx(got).epsilon(1e-12));

  // Sampled-pair mode stays within the clip population's range and is
  // deterministic per seed.
  double s1 = diversity(clips, 4, 42);
  double s2 = diversity(clips, 4, 42);
  CHECK(s1 == s2);

  CHECK_THROWS_AS((void)diversity({a}, 0, 1), Error);
  CHECK_THROWS_AS((void)diversity({a, Tensor::randn({3, 3}, rng)}, 0, 1), Error);
}

TEST_CASE("per-part diversity equals full diversity on replicated channels") {
  Rng rng(17);
  auto layout = make_part_layout(2, 2, 2);
  std::vector<MotionClip> clips;
  for (int i = 0; i < 4; ++i) {
    Tensor col = Tensor::randn({10, 1}, rng);
    std::vector<double> rep(60);
    for (int t = 0; t < 10; ++t) {
      for (int c = 0; c < 6; ++c) rep[t * 6 + c] = col(t, 0);
    }
    MotionClip clip;
    clip.values = Tensor({10, 6}, rep);
    clip.fps = 30.0;
    clip.layout = layout;
    clips.push_back(std::move(clip));
  }
  double full = diversity_clips(clips, 0, 1);
  for (int p = 0; p < kNumParts; ++p) {
    CHECK(diversity_clips(clips, 0, 1, p) == doctest::Approx(full).epsilon(1e-12));
  }
}

TEST_CASE("style classifier learns, passes through, and is at chance on noise") {
  auto layout = make_part_layout(8, 6, 4);
  auto train_clips = labeled_clips(16, 64, 101, layout);
  auto test_clips = labeled_clips(10, 64, 505, layout);

  StyleEncoderConfig backbone;
  backbone.d_model = 16;
  backbone.layers = 1;
  backbone.heads = 2;
  backbone.t_window = 16;
  StyleClassifier cls(backbone, layout, 4, 77);
  auto log = cls.train(train_clips, 400, 16, 1e-3, 3);
  CHECK(log.back().loss < log.front().loss);

  double holdout = cls.accuracy(test_clips);
  CAPTURE(holdout);
  CHECK(holdout >= 0.9);

  // Copies of real clips with their own labels: SRA equals the classifier's
  // accuracy on those clips by definition.
  std::vector<int> intended;
  for (const auto& c : test_clips) intended.push_back(*c.style_label);
  CHECK(sra(cls, test_clips, intended) == doctest::Approx(holdout).epsilon(1e-12));

  // Random-noise clips: SRA near chance (binomial 3-sigma band around 0.25).
  Rng rng(31);
  std::vector<MotionClip> noise;
  std::vector<int> noise_labels;
  for (int i = 0; i < 40; ++i) {
    MotionClip c;
    c.values = Tensor::randn({64, layout.channels()}, rng);
    c.fps = 30.0;
    c.layout = layout;
    noise.push_back(std::move(c));
    noise_labels.push_back(i % 4);
  }
  double noise_sra = sra(cls, noise, noise_labels);
  CAPTURE(noise_sra);
  CHECK(noise_sra <= 0.25 + 3.0 * std::sqrt(0.25 * 0.75 / 40));

  // Label space mismatch.
  CHECK_THROWS_AS((void)sra(cls, noise, std::vector<int>(40, 9)), Error);
}

TEST_CASE("classifier checkpoint round-trips") {
  auto layout = make_part_layout(4, 3, 3);
  StyleEncoderConfig backbone;
  backbone.d_model = 8;
  backbone.layers = 1;
  backbone.heads = 1;
  backbone.t_window = 16;
  StyleClassifier cls(backbone, layout, 4, 5);
  auto clips = labeled_clips(2, 32, 9, layout);
  cls.train(clips, 20, 4, 1e-3, 1);

  auto path = std::filesystem::temp_directory_path() / "mp_cls.mpck";
  cls.save(path);
  auto back = StyleClassifier::load_from(path);
  for (const auto& c : clips) CHECK(back.predict(c) == cls.predict(c));
  std::filesystem::remove(path);
}
