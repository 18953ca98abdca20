#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mimicparts/diffusion.hpp"
#include "test_util.hpp"

using namespace mimicparts;

namespace {

DenoiserConfig tiny_config() {
  DenoiserConfig cfg;
  cfg.layer_pairs = 1;
  cfg.latent_dim = 6;
  cfg.heads = 3;
  cfg.t_steps = 20;
  cfg.rvq_latent_dim = 2;
  cfg.d_style = 4;
  cfg.d_content = 3;
  cfg.d_rhythm = 2;
  cfg.d_emotion = 2;
  cfg.t_embed_dim = 4;
  cfg.ffn_mult = 1;
  return cfg;
}

CondBatch random_conds(const DenoiserConfig& cfg, int batch, int n_tokens, Rng& rng) {
  CondBatch c;
  std::array<Tensor, kNumParts> style;
  for (int p = 0; p < kNumParts; ++p) style[p] = Tensor::randn({batch, cfg.d_style}, rng);
  c.style = style;
  c.content = Tensor::randn({batch, n_tokens, cfg.d_content}, rng);
  c.rhythm = Tensor::randn({batch, n_tokens, cfg.d_rhythm}, rng);
  c.emotion = Tensor::randn({batch, n_tokens, cfg.d_emotion}, rng);
  return c;
}

double max_part_diff(const std::array<Tensor, kNumParts>& a,
                     const std::array<Tensor, kNumParts>& b) {
  double m = 0.0;
  for (int p = 0; p < kNumParts; ++p) m = std::max(m, mptest::max_abs_diff(a[p], b[p]));
  return m;
}

}  // namespace

TEST_CASE("schedule construction and invariants") {
  // T=1 with alpha_1 = 0.99 gives alpha_bar_1 = 0.99.
  NoiseSchedule s1;
  s1.t_steps = 1;
  s1.alpha = {1.0, 0.99};
  s1.alpha_bar = {1.0, 0.99};
  s1.validate();
  CHECK(s1.alpha_bar[1] == doctest::Approx(0.99).epsilon(1e-15));

  auto lin = NoiseSchedule::make(1000, "linear");
  CHECK(lin.alpha_bar[0] == 1.0);
  for (int t = 1; t <= 1000; ++t) CHECK(lin.alpha_bar[t] < lin.alpha_bar[t - 1]);

  auto cos = NoiseSchedule::make(200, "cosine");
  cos.validate();
  CHECK(cos.alpha_bar[200] < 0.01);  // deep steps are close to pure noise

  CHECK_THROWS_AS((void)NoiseSchedule::make(100, "quadratic"), Error);
}

TEST_CASE("q_sample closed form") {
  auto sched = NoiseSchedule::make(50, "cosine");
  Rng rng(3);
  Tensor z0 = Tensor::randn({4, 3}, rng);
  Tensor zero = Tensor::zeros({4, 3});
  Tensor zt = q_sample(z0, 7, zero, sched);
  CHECK(mptest::max_abs_diff(zt, ops::scale(z0, std::sqrt(sched.alpha_bar[7]))) < 1e-15);

  // Early steps barely move the signal.
  Tensor z1 = q_sample(z0, 1, zero, sched);
  CHECK(mptest::max_abs_diff(z1, z0) < 0.01);

  CHECK_THROWS_AS((void)q_sample(z0, 0, zero, sched), Error);
  CHECK_THROWS_AS((void)q_sample(z0, 51, zero, sched), Error);
}

TEST_CASE("iterated one-step noising matches the closed-form marginal") {
  auto sched = NoiseSchedule::make(50, "cosine");
  const int t_target = 10;
  const int draws = 100000;
  Rng rng(12345);
  double z0 = 1.0;

  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < draws; ++i) {
    double z = z0;
    for (int t = 1; t <= t_target; ++t) {
      z = std::sqrt(sched.alpha[t]) * z + std::sqrt(1.0 - sched.alpha[t]) * rng.normal();
    }
    sum += z;
    sumsq += z * z;
  }
  double mean = sum / draws;
  double var = sumsq / draws - mean * mean;
  double want_mean = std::sqrt(sched.alpha_bar[t_target]) * z0;
  double want_var = 1.0 - sched.alpha_bar[t_target];

  double se_mean = std::sqrt(want_var / draws);
  double se_var = want_var * std::sqrt(2.0 / (draws - 1));
  CAPTURE(mean);
  CAPTURE(var);
  CHECK(std::abs(mean - want_mean) < 3.0 * se_mean);
  CHECK(std::abs(var - want_var) < 3.0 * se_var);

  // q_sample's own sampling statistics agree within 1%.
  Rng rng2(777);
  double s2 = 0.0, ss2 = 0.0;
  Tensor z0t = Tensor::scalar(1.0);
  for (int i = 0; i < draws; ++i) {
    Tensor eps = Tensor::randn({1}, rng2);
    double v = q_sample(z0t, t_target, eps, sched).scalar_value();
    s2 += v;
    ss2 += v * v;
  }
  double m2 = s2 / draws;
  double v2 = ss2 / draws - m2 * m2;
  CHECK(std::abs(m2 - want_mean) < 0.01 * std::max(1.0, std::abs(want_mean)));
  CHECK(std::abs(v2 - want_var) < 0.01 * std::max(1.0, want_var));
}

TEST_CASE("part attention block: degenerate identity case and isolation") {
  const int dp = 4;
  ParamStore store;
  Rng rng(5);
  declare_part_attention_block(store, "blk", dp, 0, rng);
  // Identity-initialize projections and the fusion layer.
  for (int part = 0; part < kNumParts; ++part) {
    std::string pp = std::string("blk.") + kPartNames[part];
    for (const char* which : {".att.q", ".att.k", ".att.v", ".att.o"}) {
      store.set(pp + which + ".w", Tensor::eye(dp));
      store.set(pp + which + ".b", Tensor::zeros({dp}));
    }
  }
  store.set("blk.fc.w", Tensor::eye(3 * dp));
  store.set("blk.fc.b", Tensor::zeros({3 * dp}));

  Tape tape;
  ParamBinding p(tape, store, false);
  std::array<Var, kNumParts> parts;
  std::array<Tensor, kNumParts> raw;
  for (int part = 0; part < kNumParts; ++part) {
    raw[part] = Tensor::randn({1, 1, dp}, rng);  // single token per part
    parts[part] = tape.constant(raw[part]);
  }
  auto out = part_attention_block(p, "blk", parts, AttnMode::self_attn, std::nullopt, 3);

  // Single token + identity V/O: the pre-fusion output is the normalized
  // token itself, and the fused residual adds it back onto the input.
  for (int part = 0; part < kNumParts; ++part) {
    Tensor ln = ops::layer_norm_rows(raw[part], Tensor::full({dp}, 1.0), Tensor::zeros({dp}));
    CHECK(mptest::max_abs_diff(out.pre_fusion[part].value(), ln) < 1e-12);
    CHECK(mptest::max_abs_diff(out.tokens[part].value(), ops::add(raw[part], ln)) < 1e-12);
  }
}

TEST_CASE("perturbing one part leaves other parts' pre-fusion outputs bitwise unchanged") {
  const int dp = 6;
  ParamStore store;
  Rng rng(7);
  declare_part_attention_block(store, "blk", dp, 0, rng);

  auto run = [&](const std::array<Tensor, kNumParts>& inputs) {
    Tape tape;
    ParamBinding p(tape, store, false);
    std::array<Var, kNumParts> parts;
    for (int i = 0; i < kNumParts; ++i) parts[i] = tape.constant(inputs[i]);
    auto out = part_attention_block(p, "blk", parts, AttnMode::self_attn, std::nullopt, 3);
    std::array<Tensor, kNumParts> pre;
    for (int i = 0; i < kNumParts; ++i) pre[i] = out.pre_fusion[i].value();
    return pre;
  };

  std::array<Tensor, kNumParts> inputs;
  for (int i = 0; i < kNumParts; ++i) inputs[i] = Tensor::randn({2, 5, dp}, rng);
  auto base = run(inputs);

  auto perturbed = inputs;
  perturbed[kLower] = Tensor::randn({2, 5, dp}, rng);
  auto after = run(perturbed);

  CHECK(mptest::bitwise_equal(base[kUpper], after[kUpper]));
  CHECK(mptest::bitwise_equal(base[kHands], after[kHands]));
  CHECK_FALSE(mptest::bitwise_equal(base[kLower], after[kLower]));
}

TEST_CASE("cross attention with an all-equal condition averages to the value projection") {
  const int dp = 4, d_cond = 3;
  ParamStore store;
  Rng rng(11);
  declare_part_attention_block(store, "blk", dp, d_cond, rng);

  Tape tape;
  ParamBinding p(tape, store, false);
  std::array<Var, kNumParts> parts;
  for (int i = 0; i < kNumParts; ++i) parts[i] = tape.constant(Tensor::randn({1, 4, dp}, rng));

  // Condition stream of identical tokens.
  std::vector<double> tok = {0.4, -1.1, 2.0};
  std::vector<double> cond_data;
  for (int i = 0; i < 6; ++i) cond_data.insert(cond_data.end(), tok.begin(), tok.end());
  Var cond = tape.constant(Tensor({1, 6, d_cond}, cond_data));
  auto out = part_attention_block(p, "blk", parts, AttnMode::cross_attn, cond, 3);

  // Every query must see exactly the value projection of that token.
  Tensor tok_t({1, d_cond}, tok);
  for (int part = 0; part < kNumParts; ++part) {
    std::string pp = std::string("blk.") + kPartNames[part];
    Tensor v = ops::add(ops::matmul(tok_t, store.get(pp + ".att.v.w")),
                        store.get(pp + ".att.v.b").reshaped({1, dp}));
    Tensor vo = ops::add(ops::matmul(v, store.get(pp + ".att.o.w")),
                         store.get(pp + ".att.o.b").reshaped({1, dp}));
    const Tensor& pre = out.pre_fusion[part].value();
    for (int q = 0; q < 4; ++q) {
      for (int j = 0; j < dp; ++j) {
        CHECK(pre(0, q, j) == doctest::Approx(vo(0, j)).epsilon(1e-12));
      }
    }
  }

  // Cross mode without a condition is an error.
  CHECK_THROWS_AS(
      (void)part_attention_block(p, "blk", parts, AttnMode::cross_attn, std::nullopt, 3),
      Error);
}

TEST_CASE("fuse_style_content shapes and isolation") {
  Tape tape;
  Rng rng(13);
  const int n = 32, dp = 64, dc = 32;
  std::array<Var, kNumParts> tokens, style;
  for (int i = 0; i < kNumParts; ++i) {
    tokens[i] = tape.constant(Tensor::randn({1, n, dp}, rng));
    style[i] = tape.constant(Tensor::zeros({1, dp}));
  }
  Var content = tape.constant(Tensor::randn({1, n, dc}, rng));
  auto fused = fuse_style_content(tokens, style, content);
  CHECK(fused[0].value().shape() == Shape{1, n, dp + dc});  // 64 + 32 = 96

  // Zero style: z' = concat(z, a_c) exactly.
  Tensor expect = ops::concat({tokens[0].value(), content.value()}, 2);
  CHECK(mptest::bitwise_equal(fused[0].value(), expect));

  // Adding delta to s_u shifts z'_u uniformly in the first dp features and
  // leaves the other regions untouched.
  std::array<Var, kNumParts> style2 = style;
  const double delta = 0.37;
  style2[kUpper] = tape.constant(Tensor::full({1, dp}, delta));
  auto fused2 = fuse_style_content(tokens, style2, content);
  Tensor diff = ops::sub(fused2[kUpper].value(), fused[kUpper].value());
  for (int t = 0; t < n; ++t) {
    for (int j = 0; j < dp; ++j) CHECK(diff(0, t, j) == doctest::Approx(delta).epsilon(1e-15));
    for (int j = dp; j < dp + dc; ++j) CHECK(diff(0, t, j) == 0.0);
  }
  CHECK(mptest::bitwise_equal(fused2[kHands].value(), fused[kHands].value()));
  CHECK(mptest::bitwise_equal(fused2[kLower].value(), fused[kLower].value()));

  // Misaligned content is rejected.
  Var bad = tape.constant(Tensor::randn({1, n / 2, dc}, rng));
  CHECK_THROWS_AS((void)fuse_style_content(tokens, style, bad), Error);
}

TEST_CASE("denoiser output shape and null-condition determinism") {
  auto cfg = tiny_config();
  Denoiser model(cfg, 99);
  Rng rng(1);
  std::array<Tensor, kNumParts> z;
  for (int i = 0; i < kNumParts; ++i) z[i] = Tensor::randn({8, cfg.rvq_latent_dim}, rng);

  CondBatch none;
  auto out1 = model.denoise(z, 5, none);
  for (int i = 0; i < kNumParts; ++i) CHECK(out1[i].shape() == z[i].shape());
  auto out2 = model.denoise(z, 5, none);
  CHECK(max_part_diff(out1, out2) == 0.0);

  // The all-null path depends only on (z_t, t): supplying conditions changes
  // the output, changing t changes it too.
  auto cond = random_conds(cfg, 1, 8, rng);
  std::array<Tensor, kNumParts> style1;
  for (int i = 0; i < kNumParts; ++i) style1[i] = (*cond.style)[i].reshaped({1, cfg.d_style});
  CondBatch with_c;
  with_c.content = cond.content;
  CHECK(max_part_diff(model.denoise(z, 5, with_c), out1) > 0.0);
  CHECK(max_part_diff(model.denoise(z, 6, none), out1) > 0.0);
}

TEST_CASE("CFG reductions are exact at the degenerate weight settings") {
  auto cfg = tiny_config();
  Denoiser model(cfg, 31);
  Rng rng(9);
  std::array<Tensor, kNumParts> z;
  for (int i = 0; i < kNumParts; ++i) z[i] = Tensor::randn({6, cfg.rvq_latent_dim}, rng);
  auto conds = random_conds(cfg, 1, 6, rng);

  auto none = conds.with_style(false).with_content(false).with_rhythm_emotion(false);
  auto c_only = conds.with_style(false).with_rhythm_emotion(false);
  auto c_s = conds.with_rhythm_emotion(false);

  auto r000 = cfg_denoise(model, z, 3, conds, {0.0, 0.0, 0.0});
  CHECK(max_part_diff(r000, model.denoise(z, 3, none)) <= 1e-12);

  auto r100 = cfg_denoise(model, z, 3, conds, {1.0, 0.0, 0.0});
  CHECK(max_part_diff(r100, model.denoise(z, 3, c_only)) <= 1e-12);

  auto r110 = cfg_denoise(model, z, 3, conds, {1.0, 1.0, 0.0});
  CHECK(max_part_diff(r110, model.denoise(z, 3, c_s)) <= 1e-12);

  GuidanceWeights bad;
  bad.w_s = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS((void)cfg_denoise(model, z, 3, conds, bad), Error);
}

TEST_CASE("training-loss gradients match finite differences on a tiny model") {
  auto cfg = tiny_config();
  Denoiser model(cfg, 7);
  CAPTURE(model.params().total_params());
  CHECK(model.params().total_params() <= 1000);

  Rng rng(21);
  const int n_tokens = 3;
  std::array<Tensor, kNumParts> z0, zt;
  for (int i = 0; i < kNumParts; ++i) {
    z0[i] = Tensor::randn({1, n_tokens, cfg.rvq_latent_dim}, rng);
    zt[i] = Tensor::randn({1, n_tokens, cfg.rvq_latent_dim}, rng);
  }
  auto conds = random_conds(cfg, 1, n_tokens, rng);
  Tensor target = ops::concat({z0[0], z0[1], z0[2]}, 2);

  auto names = model.params().names();
  std::vector<Tensor> point;
  for (const auto& n : names) point.push_back(model.params().get(n));

  auto fn = [&](Tape& tape, const std::vector<Var>& vars) {
    ParamBinding p(tape, model.params());
    for (size_t i = 0; i < names.size(); ++i) p.preset(names[i], vars[i]);
    std::array<Var, kNumParts> z_vars;
    for (int i = 0; i < kNumParts; ++i) z_vars[i] = tape.constant(zt[i]);
    auto pred = model.forward(p, z_vars, {4}, conds);
    return smooth_l1(concat({pred[0], pred[1], pred[2]}, 2), tape.constant(target));
  };
  auto report = grad_check(fn, point, 1e-5);
  CAPTURE(report.max_rel_err);
  CAPTURE(report.n_checked);
  CHECK(report.pass);
}

TEST_CASE("condition-dropout statistics over 1e4 train steps") {
  auto cfg = tiny_config();
  cfg.t_steps = 10;
  Denoiser model(cfg, 3);
  auto sched = NoiseSchedule::make(cfg.t_steps, "cosine");
  Adam adam(0.0);  // zero learning rate: statistics only
  Rng rng(424242);
  Rng data_rng(5);

  std::array<Tensor, kNumParts> z0;
  for (int i = 0; i < kNumParts; ++i) z0[i] = Tensor::randn({1, 2, cfg.rvq_latent_dim}, data_rng);
  auto conds = random_conds(cfg, 1, 2, data_rng);

  const int steps = 10000;
  int ds = 0, dc = 0, dre = 0;
  for (int i = 0; i < steps; ++i) {
    auto stats = diffusion_train_step(model, z0, conds, sched, adam, rng);
    ds += stats.dropped_style ? 1 : 0;
    dc += stats.dropped_content ? 1 : 0;
    dre += stats.dropped_rhythm_emotion ? 1 : 0;
    CHECK(stats.t_min >= 1);
    CHECK(stats.t_max <= cfg.t_steps);
  }
  for (int count : {ds, dc, dre}) {
    double rate = static_cast<double>(count) / steps;
    CAPTURE(rate);
    CHECK(rate >= 0.09);
    CHECK(rate <= 0.11);
  }
}

TEST_CASE("a perfect-prediction setup yields zero loss") {
  // With t at the near-clean end and a model stub that copies its input, the
  // loss is the smooth-L1 between z0 and z0. Here we verify the loss surface
  // directly: identical prediction and target give exactly zero.
  Tape tape;
  Rng rng(3);
  Tensor z0 = Tensor::randn({2, 4, 6}, rng);
  Var loss = smooth_l1(tape.constant(z0), tape.constant(z0));
  CHECK(loss.value().scalar_value() == 0.0);
}

TEST_CASE("tiny training run reduces the loss") {
  auto cfg = tiny_config();
  cfg.t_steps = 30;
  Denoiser model(cfg, 17);
  auto sched = NoiseSchedule::make(cfg.t_steps, "cosine");
  Adam adam(2e-3);
  Rng rng(77);
  Rng data_rng(11);

  // Learnable structure: clean latents are a fixed pattern per region.
  std::array<Tensor, kNumParts> z0;
  for (int i = 0; i < kNumParts; ++i) {
    z0[i] = Tensor::randn({4, 4, cfg.rvq_latent_dim}, data_rng);
  }
  auto conds = random_conds(cfg, 4, 4, data_rng);

  double first = 0.0, last = 0.0;
  const int steps = 400;
  for (int i = 0; i < steps; ++i) {
    auto stats = diffusion_train_step(model, z0, conds, sched, adam, rng);
    if (i < 20) first += stats.loss / 20;
    if (i >= steps - 20) last += stats.loss / 20;
  }
  CAPTURE(first);
  CAPTURE(last);
  CHECK(last < 0.5 * first);
}

TEST_CASE("sampling is deterministic per seed and respects n_steps") {
  auto cfg = tiny_config();
  Denoiser model(cfg, 55);
  auto sched = NoiseSchedule::make(cfg.t_steps, "cosine");
  CondBatch none;
  GuidanceWeights w{1.0, 2.0, 1.0};

  auto a = sample_latents(model, sched, none, w, 5, 8, 1234);
  auto b = sample_latents(model, sched, none, w, 5, 8, 1234);
  CHECK(max_part_diff(a, b) == 0.0);
  auto c = sample_latents(model, sched, none, w, 5, 8, 1235);
  CHECK(max_part_diff(a, c) > 0.0);
  for (int i = 0; i < kNumParts; ++i) CHECK(a[i].shape() == Shape{8, cfg.rvq_latent_dim});

  CHECK_THROWS_AS((void)sample_latents(model, sched, none, w, cfg.t_steps + 1, 8, 1), Error);
}

TEST_CASE("sample_motion decodes through the codecs with length 4n") {
  auto cfg = tiny_config();
  Denoiser model(cfg, 21);
  auto sched = NoiseSchedule::make(cfg.t_steps, "cosine");

  RvqConfig rc;
  rc.hidden = 8;
  rc.latent_dim = cfg.rvq_latent_dim;
  rc.codebook_size = 8;
  rc.num_layers = 2;
  auto layout = make_part_layout(3, 2, 2);
  std::vector<RvqModel> codecs;
  Rng rng(5);
  for (int part = 0; part < kNumParts; ++part) {
    codecs.emplace_back(rc, layout.region_size(part), 100 + part);
    std::vector<Tensor> sample = {Tensor::randn({16, layout.region_size(part)}, rng)};
    codecs[part].init_codebooks(sample, 3);
  }

  CondBatch none;
  GuidanceWeights w{1.0, 1.0, 1.0};
  MotionClip clip = sample_motion(model, sched, none, w, 4, 8, 99,
                                  {&codecs[0], &codecs[1], &codecs[2]}, layout, 30.0);
  CHECK(clip.frames() == 32);  // 4 x 8 tokens
  CHECK(clip.channels() == layout.channels());
  clip.validate();

  MotionClip again = sample_motion(model, sched, none, w, 4, 8, 99,
                                   {&codecs[0], &codecs[1], &codecs[2]}, layout, 30.0);
  CHECK(mptest::bitwise_equal(clip.values, again.values));
}
