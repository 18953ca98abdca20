#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mimicparts/style.hpp"
#include "test_util.hpp"

using namespace mimicparts;

namespace {

// Brute-force NT-Xent: the literal double sum over ordered positive pairs.
double nt_xent_brute(const Tensor& emb, const std::vector<int>& pair_ids, double tau) {
  int n = emb.dim(0), d = emb.dim(1);
  auto cos_sim = [&](int i, int j) {
    double dot = 0, ni = 0, nj = 0;
    for (int k = 0; k < d; ++k) {
      dot += emb(i, k) * emb(j, k);
      ni += emb(i, k) * emb(i, k);
      nj += emb(j, k) * emb(j, k);
    }
    return dot / (std::sqrt(ni) * std::sqrt(nj));
  };
  double total = 0.0;
  int terms = 0;
  for (int i = 0; i < n; ++i) {
    int j = -1;
    for (int k = 0; k < n; ++k) {
      if (k != i && pair_ids[k] == pair_ids[i]) j = k;
    }
    double denom = 0.0;
    for (int k = 0; k < n; ++k) {
      if (k == i) continue;
      denom += std::exp(cos_sim(i, k) / tau);
    }
    total += -std::log(std::exp(cos_sim(i, j) / tau) / denom);
    ++terms;
  }
  return total / terms;
}

std::vector<MotionClip> make_style_dataset(int per_style, int frames, uint64_t seed) {
  auto layout = make_part_layout(8, 6, 4);
  auto styles = default_styles(4);
  std::vector<MotionClip> clips;
  Rng meta(seed);
  for (int s = 0; s < 4; ++s) {
    for (int i = 0; i < per_style; ++i) {
      auto speech = synth_speech(meta.uniform(70.0, 140.0), meta.uniform_int(0, 7), frames,
                                 30.0, derive_seed(seed, s * 500 + i));
      auto clip = synth_motion(styles[s], speech, layout, frames,
                               derive_seed(seed, 9000 + s * 500 + i));
      clip.style_label = s;
      clips.push_back(std::move(clip));
    }
  }
  return clips;
}

}  // namespace

TEST_CASE("make_pairs splits halves in order") {
  Rng rng(3);
  Tensor clip = Tensor::randn({8, 2}, rng);
  auto batch = make_pairs({clip});
  REQUIRE(batch.views.size() == 2);
  CHECK(batch.views[0].shape() == Shape{4, 2});
  CHECK(batch.pair_ids[0] == batch.pair_ids[1]);
  // View frames equal the original half frames.
  for (int t = 0; t < 4; ++t) {
    for (int c = 0; c < 2; ++c) {
      CHECK(batch.views[0](t, c) == clip(t, c));
      CHECK(batch.views[1](t, c) == clip(4 + t, c));
    }
  }

  std::vector<Tensor> four(4, clip);
  auto b4 = make_pairs(four);
  CHECK(b4.views.size() == 8);
  CHECK(b4.pair_ids[2] == b4.pair_ids[6]);

  Tensor odd = Tensor::randn({7, 2}, rng);
  CHECK_THROWS_AS((void)make_pairs({odd}), Error);
}

TEST_CASE("nt_xent closed-form cases") {
  // N_s = 1: the sole negative is the positive itself -> loss 0.
  {
    Tape tape;
    Rng rng(1);
    Var emb = tape.leaf(Tensor::randn({2, 4}, rng), true);
    Var loss = nt_xent(emb, {0, 0}, 0.1);
    CHECK(loss.value().scalar_value() == doctest::Approx(0.0).epsilon(1e-12));
  }
  // All 2N embeddings identical, N_s = 4 -> log(2N-1) = log 7, any tau.
  {
    Tape tape;
    std::vector<double> d;
    for (int i = 0; i < 8; ++i) {
      d.push_back(0.3);
      d.push_back(-1.2);
      d.push_back(0.7);
    }
    Var emb = tape.constant(Tensor({8, 3}, d));
    Var loss = nt_xent(emb, {0, 1, 2, 3, 0, 1, 2, 3}, 0.37);
    CHECK(loss.value().scalar_value() == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }
  // N_s = 2, tau = 1, within-pair similarity 1, cross-pair 0.
  {
    Tape tape;
    Tensor emb({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});  // pairs (0,2), (1,3)
    Var loss = nt_xent(tape.constant(emb), {0, 1, 0, 1}, 1.0);
    double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
    CHECK(loss.value().scalar_value() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(loss.value().scalar_value() == doctest::Approx(0.55144471393).epsilon(1e-9));
  }
}

TEST_CASE("nt_xent matches the brute-force double sum") {
  Rng rng(17);
  for (int ns = 2; ns <= 8; ++ns) {
    for (int trial = 0; trial < 5; ++trial) {
      Tensor emb = Tensor::randn({2 * ns, 6}, rng);
      std::vector<int> ids(2 * ns);
      for (int i = 0; i < ns; ++i) ids[i] = ids[ns + i] = i;
      Tape tape;
      double got = nt_xent(tape.constant(emb), ids, 0.1).value().scalar_value();
      double want = nt_xent_brute(emb, ids, 0.1);
      CHECK(std::abs(got - want) < 1e-9);
      CHECK(got >= 0.0);  // lower bound
    }
  }
}

TEST_CASE("nt_xent is invariant to positive rescaling of all embeddings") {
  Rng rng(23);
  Tensor emb = Tensor::randn({8, 5}, rng);
  std::vector<int> ids = {0, 1, 2, 3, 0, 1, 2, 3};
  Tape t1, t2, t3;
  double base = nt_xent(t1.constant(emb), ids, 0.1).value().scalar_value();
  double scaled = nt_xent(t2.constant(ops::scale(emb, 3.7)), ids, 0.1).value().scalar_value();
  double shrunk = nt_xent(t3.constant(ops::scale(emb, 1e-3)), ids, 0.1).value().scalar_value();
  CHECK(std::abs(base - scaled) < 1e-12);
  CHECK(std::abs(base - shrunk) < 1e-10);
}

TEST_CASE("nt_xent rejects zero-norm embeddings and bad temperature") {
  Tape tape;
  Tensor emb({2, 2}, {1, 0, 0, 0});
  CHECK_THROWS_AS((void)nt_xent(tape.constant(emb), {0, 0}, 0.1), Error);
  Tape t2;
  Rng rng(2);
  CHECK_THROWS_AS((void)nt_xent(t2.constant(Tensor::randn({2, 2}, rng)), {0, 0}, 0.0), Error);
}

TEST_CASE("nt_xent gradient matches finite differences on a 4-sample batch") {
  Rng rng(29);
  Tensor emb = Tensor::randn({4, 5}, rng);
  std::vector<int> ids = {0, 1, 0, 1};
  auto fn = [&](Tape& t, const std::vector<Var>& v) { return nt_xent(v[0], ids, 0.1); };
  auto report = grad_check(fn, {emb}, 1e-5);
  CAPTURE(report.max_rel_err);
  CHECK(report.pass);
}

TEST_CASE("part isolation: other parts' channels cannot influence an embedding") {
  auto layout = make_part_layout(8, 6, 4);
  StyleEncoderConfig cfg;
  cfg.d_model = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  StyleEncoder enc(cfg, layout, 5);

  auto clips = make_style_dataset(1, 64, 11);
  MotionClip clip = clips[0];
  StyleEmbedding base = enc.encode(clip);

  // Scramble every lower-body channel.
  Rng rng(3);
  std::vector<double> vals(clip.values.data().begin(), clip.values.data().end());
  for (int t = 0; t < clip.frames(); ++t) {
    for (int c : layout.region(kLower)) {
      vals[static_cast<int64_t>(t) * clip.channels() + c] = rng.normal() * 10.0;
    }
  }
  MotionClip perturbed = clip;
  perturbed.values = Tensor({clip.frames(), clip.channels()}, vals);
  StyleEmbedding after = enc.encode(perturbed);

  CHECK(mptest::bitwise_equal(base.parts[kUpper], after.parts[kUpper]));
  CHECK(mptest::bitwise_equal(base.parts[kHands], after.parts[kHands]));
  CHECK_FALSE(mptest::bitwise_equal(base.parts[kLower], after.parts[kLower]));

  // Encoding the same clip twice is deterministic.
  StyleEmbedding again = enc.encode(clip);
  for (int p = 0; p < kNumParts; ++p) CHECK(mptest::bitwise_equal(base.parts[p], again.parts[p]));
}

TEST_CASE("style encoder checkpoint round-trips") {
  auto layout = make_part_layout(8, 6, 4);
  StyleEncoderConfig cfg;
  cfg.d_model = 16;
  cfg.layers = 1;
  StyleEncoder enc(cfg, layout, 7);
  auto clips = make_style_dataset(1, 64, 13);
  auto path = std::filesystem::temp_directory_path() / "mp_style_ck.mpck";
  enc.save(path);
  auto back = StyleEncoder::load_from(path);
  StyleEmbedding a = enc.encode(clips[0]);
  StyleEmbedding b = back.encode(clips[0]);
  for (int p = 0; p < kNumParts; ++p) CHECK(mptest::bitwise_equal(a.parts[p], b.parts[p]));
  std::filesystem::remove(path);
}

TEST_CASE("contrastive training converges and a linear probe reads styles") {
  auto layout = make_part_layout(8, 6, 4);
  auto clips = make_style_dataset(24, 64, 19);  // 96 training clips of 64 frames

  StyleEncoderConfig cfg;
  cfg.d_model = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.t_window = 16;
  StyleEncoder enc(cfg, layout, 3);

  StyleTrainConfig tc;
  tc.steps = 2000;
  tc.batch_size = 32;
  tc.lr = 3e-4;
  auto log = train_style(enc, clips, tc, 77);

  auto smooth = [&](int from, int count) {
    double s = 0.0;
    for (int i = from; i < from + count; ++i) s += log[i].loss;
    return s / count;
  };
  double initial = smooth(0, 20);
  double final_loss = smooth(tc.steps - 100, 100);
  CAPTURE(initial);
  CAPTURE(final_loss);
  CHECK(final_loss < 0.6 * initial);

  // Deterministic re-run reproduces the loss trajectory.
  StyleEncoder enc2(cfg, layout, 3);
  auto log2 = train_style(enc2, clips, tc, 77);
  CHECK(log2.back().loss == log.back().loss);

  // Post-training: halves of one clip agree more than cross-style clips.
  auto probe_clips = make_style_dataset(12, 64, 501);
  {
    const MotionClip& c = probe_clips[0];
    auto halves = ops::split(c.values, 0, {32, 32});
    Tensor e1 = enc.embed_part(kUpper, split_channels(halves[0], layout)[kUpper]);
    Tensor e2 = enc.embed_part(kUpper, split_channels(halves[1], layout)[kUpper]);
    double within = ops::cosine_similarity(e1, e2);
    double cross = 0.0;
    int n_cross = 0;
    for (size_t i = 12; i < probe_clips.size(); ++i) {  // other styles
      Tensor eo = enc.embed_part(kUpper, split_channels(probe_clips[i].values, layout)[kUpper]);
      cross += ops::cosine_similarity(e1, eo);
      ++n_cross;
    }
    cross /= n_cross;
    CAPTURE(within);
    CAPTURE(cross);
    CHECK(within > cross);
  }

  // Linear probe on s_u: a softmax regression trained on frozen embeddings
  // of half the probe clips, evaluated on the other half.
  auto probe_train_clips = make_style_dataset(24, 64, 733);
  std::vector<Tensor> train_emb, test_emb;
  std::vector<int> train_lab, test_lab;
  for (const auto& c : probe_train_clips) {
    train_emb.push_back(enc.embed_part(kUpper, split_channels(c.values, layout)[kUpper])
                            .reshaped({1, cfg.d_model}));
    train_lab.push_back(*c.style_label);
  }
  for (const auto& c : probe_clips) {
    test_emb.push_back(enc.embed_part(kUpper, split_channels(c.values, layout)[kUpper])
                           .reshaped({1, cfg.d_model}));
    test_lab.push_back(*c.style_label);
  }
  Tensor x_train = ops::concat(train_emb, 0);
  int n_train = x_train.dim(0);
  std::vector<double> onehot(static_cast<size_t>(n_train) * 4, 0.0);
  for (int i = 0; i < n_train; ++i) onehot[static_cast<size_t>(i) * 4 + train_lab[i]] = 1.0;
  Tensor y_train({n_train, 4}, onehot);

  ParamStore probe;
  Rng prng(5);
  nn::declare_linear(probe, "probe", cfg.d_model, 4, prng);
  Adam adam(5e-2);
  for (int step = 0; step < 300; ++step) {
    Tape tape;
    ParamBinding pb(tape, probe);
    Var logits = nn::linear(pb, "probe", tape.constant(x_train));
    Var ce = scale(neg(sum_all(mul(log_softmax_rows(logits), tape.constant(y_train)))),
                   1.0 / n_train);
    auto grads = tape.backward(ce);
    NamedGrads named;
    pb.accumulate_grads(grads, named);
    adam.step(probe, named);
  }
  int correct = 0;
  for (size_t i = 0; i < test_emb.size(); ++i) {
    Tape tape(false);
    ParamBinding pb(tape, probe, false);
    Tensor logits = nn::linear(pb, "probe", tape.constant(test_emb[i])).value();
    int best = 0;
    for (int s = 1; s < 4; ++s) {
      if (logits(0, s) > logits(0, best)) best = s;
    }
    correct += best == test_lab[i] ? 1 : 0;
  }
  double acc = static_cast<double>(correct) / test_emb.size();
  CAPTURE(acc);
  CHECK(acc >= 0.9);
}

TEST_CASE("train_style rejects an empty dataset and short clips") {
  auto layout = make_part_layout(2, 2, 2);
  StyleEncoderConfig cfg;
  cfg.d_model = 8;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.t_window = 32;
  StyleEncoder enc(cfg, layout, 1);
  StyleTrainConfig tc;
  CHECK_THROWS_AS((void)train_style(enc, {}, tc, 1), Error);

  auto clips = make_style_dataset(1, 32, 3);  // 32 frames < 2 * 32
  std::vector<MotionClip> wrong;
  MotionClip c = clips[0];
  CHECK_THROWS_AS((void)train_style(enc, {c}, tc, 1), Error);
}