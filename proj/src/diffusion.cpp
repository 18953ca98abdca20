#include "mimicparts/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "mimicparts/io.hpp"

namespace mimicparts {

void NoiseSchedule::validate() const {
  MP_REQUIRE(t_steps >= 1, "schedule needs at least one step");
  MP_REQUIRE(static_cast<int>(alpha.size()) == t_steps + 1 &&
                 static_cast<int>(alpha_bar.size()) == t_steps + 1,
             "schedule tables have the wrong length");
  MP_REQUIRE(alpha_bar[0] == 1.0, "alpha_bar[0] must be 1");
  for (int t = 1; t <= t_steps; ++t) {
    MP_REQUIRE(alpha[t] > 0.0 && alpha[t] < 1.0, "alpha out of (0,1) at t=" + std::to_string(t));
    MP_REQUIRE(alpha_bar[t] < alpha_bar[t - 1], "alpha_bar not strictly decreasing");
  }
}

NoiseSchedule NoiseSchedule::make(int t_steps, const std::string& kind) {
  MP_REQUIRE(t_steps >= 1, "schedule needs at least one step");
  NoiseSchedule s;
  s.t_steps = t_steps;
  s.alpha.assign(t_steps + 1, 1.0);
  s.alpha_bar.assign(t_steps + 1, 1.0);
  if (kind == "linear") {
    double beta_lo = 1e-4, beta_hi = 0.02;
    for (int t = 1; t <= t_steps; ++t) {
      double frac = t_steps == 1 ? 0.0 : static_cast<double>(t - 1) / (t_steps - 1);
      s.alpha[t] = 1.0 - (beta_lo + (beta_hi - beta_lo) * frac);
    }
  } else if (kind == "cosine") {
    constexpr double shift = 0.008;
    auto f = [&](double t) {
      double x = (t / t_steps + shift) / (1.0 + shift) * 1.5707963267948966;
      double c = std::cos(x);
      return c * c;
    };
    for (int t = 1; t <= t_steps; ++t) {
      double beta = 1.0 - f(t) / f(t - 1.0);
      beta = std::min(0.999, std::max(1e-8, beta));
      s.alpha[t] = 1.0 - beta;
    }
  } else {
    throw Error::validation("unknown schedule kind: " + kind);
  }
  for (int t = 1; t <= t_steps; ++t) s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  s.validate();
  return s;
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  schedule.validate();
  MP_REQUIRE(t >= 1 && t <= schedule.t_steps, "timestep out of range");
  MP_REQUIRE(z0.same_shape(eps), "noise shape must match z0");
  double ab = schedule.alpha_bar[t];
  return ops::add(ops::scale(z0, std::sqrt(ab)), ops::scale(eps, std::sqrt(1.0 - ab)));
}

void GuidanceWeights::validate() const {
  MP_REQUIRE(std::isfinite(w_c) && std::isfinite(w_s) && std::isfinite(w_re),
             "guidance weights must be finite");
}

CondBatch CondBatch::with_style(bool keep) const {
  CondBatch c = *this;
  if (!keep) c.style.reset();
  return c;
}
CondBatch CondBatch::with_content(bool keep) const {
  CondBatch c = *this;
  if (!keep) c.content.reset();
  return c;
}
CondBatch CondBatch::with_rhythm_emotion(bool keep) const {
  CondBatch c = *this;
  if (!keep) {
    c.rhythm.reset();
    c.emotion.reset();
  }
  return c;
}

void DenoiserConfig::validate() const {
  MP_REQUIRE(heads % kNumParts == 0, "head count must be divisible by the three regions");
  MP_REQUIRE(latent_dim % heads == 0, "latent_dim must be divisible by heads");
  MP_REQUIRE(latent_dim % kNumParts == 0, "latent_dim must split across regions");
  MP_REQUIRE(layer_pairs >= 1 && t_steps >= 1, "bad layer/step counts");
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

namespace {

// Broadcasts a per-sample vector [B, d] over n tokens -> [B, n, d].
Var broadcast_tokens(Var per_sample, int n_tokens) {
  Tape& tape = *per_sample.tape;
  Shape s = per_sample.value().shape();
  Var as3d = reshape(per_sample, {s[0], 1, s[1]});
  Var ones = tape.constant(Tensor::full({s[0], n_tokens, 1}, 1.0));
  return bmm(ones, as3d);
}

}  // namespace

void declare_part_attention_block(ParamStore& store, const std::string& prefix, int part_dim,
                                  int cond_dim, Rng& rng) {
  for (int part = 0; part < kNumParts; ++part) {
    std::string pp = prefix + "." + kPartNames[part];
    nn::declare_layer_norm(store, pp + ".ln", part_dim);
    nn::declare_attention(store, pp + ".att", part_dim, cond_dim > 0 ? cond_dim : part_dim,
                          rng);
  }
  nn::declare_linear(store, prefix + ".fc", kNumParts * part_dim, kNumParts * part_dim, rng);
}

PartBlockOut part_attention_block(ParamBinding& p, const std::string& prefix,
                                  const std::array<Var, kNumParts>& parts, AttnMode mode,
                                  const std::optional<Var>& condition, int heads_total) {
  MP_REQUIRE(heads_total % kNumParts == 0, "heads must split across the three regions");
  MP_REQUIRE(mode == AttnMode::self_attn || condition.has_value(),
             "cross-attention block needs a condition stream");
  int heads_per_part = heads_total / kNumParts;
  PartBlockOut out;
  for (int part = 0; part < kNumParts; ++part) {
    std::string pp = prefix + "." + kPartNames[part];
    Var h = nn::layer_norm(p, pp + ".ln", parts[part]);
    Var kv = mode == AttnMode::cross_attn ? *condition : h;
    out.pre_fusion[part] = nn::attention(p, pp + ".att", h, kv, heads_per_part);
  }
  Var fused = nn::linear(
      p, prefix + ".fc",
      concat({out.pre_fusion[0], out.pre_fusion[1], out.pre_fusion[2]}, 2));
  int part_dim = parts[0].value().shape().back();
  auto pieces = split(fused, 2, {part_dim, part_dim, part_dim});
  for (int part = 0; part < kNumParts; ++part) {
    out.tokens[part] = add(parts[part], pieces[part]);
  }
  return out;
}

std::array<Var, kNumParts> fuse_style_content(const std::array<Var, kNumParts>& tokens,
                                              const std::array<Var, kNumParts>& style,
                                              Var content) {
  int n_tokens = tokens[0].value().dim(1);
  MP_REQUIRE(content.value().rank() == 3 && content.value().dim(1) == n_tokens,
             "content stream must be aligned to the token count");
  std::array<Var, kNumParts> out;
  for (int part = 0; part < kNumParts; ++part) {
    MP_REQUIRE(style[part].value().shape().back() == tokens[part].value().shape().back(),
               "style dim must match the token dim after projection");
    Var styled = add(tokens[part], broadcast_tokens(style[part], n_tokens));
    out[part] = concat({styled, content}, 2);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

Denoiser::Denoiser(DenoiserConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, 0xd1ff));
  int dp = cfg_.part_dim();
  for (int part = 0; part < kNumParts; ++part) {
    std::string s = kPartNames[part];
    nn::declare_linear(params_, "in." + s, cfg_.rvq_latent_dim, dp, rng);
    nn::declare_linear(params_, "style_proj." + s, cfg_.d_style, dp, rng);
    nn::declare_linear(params_, "fuse." + s, dp + cfg_.d_content, dp, rng);
    nn::declare_layer_norm(params_, "out.ln." + s, dp);
    nn::declare_linear(params_, "out.head." + s, dp, cfg_.rvq_latent_dim, rng);
    params_.declare("null.style." + s, init::normal({cfg_.d_style}, rng, 0.02));
  }
  params_.declare("null.content", init::normal({cfg_.d_content}, rng, 0.02));
  params_.declare("null.rhythm", init::normal({cfg_.d_rhythm}, rng, 0.02));
  params_.declare("null.emotion", init::normal({cfg_.d_emotion}, rng, 0.02));
  nn::declare_linear(params_, "temb.fc1", cfg_.t_embed_dim, cfg_.t_embed_dim * 2, rng);
  nn::declare_linear(params_, "temb.fc2", cfg_.t_embed_dim * 2, dp, rng);
  for (int l = 0; l < cfg_.layer_pairs; ++l) {
    std::string lp = "L" + std::to_string(l);
    declare_part_attention_block(params_, lp + ".self", dp, 0, rng);
    declare_part_attention_block(params_, lp + ".rhy", dp, cfg_.d_rhythm, rng);
    declare_part_attention_block(params_, lp + ".emo", dp, cfg_.d_emotion, rng);
    for (int part = 0; part < kNumParts; ++part) {
      std::string s = kPartNames[part];
      nn::declare_layer_norm(params_, lp + ".ffnln." + s, dp);
      nn::declare_ffn(params_, lp + ".ffn." + s, dp, dp * cfg_.ffn_mult, rng);
    }
  }
}

std::array<Var, kNumParts> Denoiser::forward(ParamBinding& p,
                                             const std::array<Var, kNumParts>& z_parts,
                                             const std::vector<int>& t,
                                             const CondBatch& conds) const {
  Shape zs = z_parts[0].value().shape();
  MP_REQUIRE(zs.size() == 3 && zs[2] == cfg_.rvq_latent_dim,
             "denoiser expects [B, n, d_rvq] region latents");
  int batch = zs[0], n_tokens = zs[1];
  MP_REQUIRE(static_cast<int>(t.size()) == batch, "one timestep per sample required");
  Tape& tape = p.tape();
  int dp = cfg_.part_dim();

  // Null-embedding substitution for absent condition groups.
  std::array<Var, kNumParts> style_raw;
  if (conds.style.has_value()) {
    for (int part = 0; part < kNumParts; ++part) {
      const Tensor& sv = (*conds.style)[part];
      MP_REQUIRE(sv.rank() == 2 && sv.dim(0) == batch && sv.dim(1) == cfg_.d_style,
                 "style conditions must be [B, d_style]");
      style_raw[part] = tape.constant(sv);
    }
  } else {
    for (int part = 0; part < kNumParts; ++part) {
      Var null_s = p(std::string("null.style.") + kPartNames[part]);
      style_raw[part] = add(tape.constant(Tensor::zeros({batch, cfg_.d_style})), null_s);
    }
  }

  Var content;
  if (conds.content.has_value()) {
    const Tensor& cv = *conds.content;
    MP_REQUIRE(cv.rank() == 3 && cv.dim(0) == batch && cv.dim(2) == cfg_.d_content,
               "content must be [B, n, d_content]");
    MP_REQUIRE(cv.dim(1) == n_tokens, "content stream not aligned to token count");
    content = tape.constant(cv);
  } else {
    content = add(tape.constant(Tensor::zeros({batch, n_tokens, cfg_.d_content})),
                  p("null.content"));
  }

  auto cond_stream = [&](const std::optional<Tensor>& given, const char* null_name,
                         int want_dim) {
    if (given.has_value()) {
      MP_REQUIRE(given->rank() == 3 && given->dim(0) == batch && given->dim(2) == want_dim,
                 std::string("condition stream shape mismatch for ") + null_name);
      return tape.constant(*given);
    }
    return add(tape.constant(Tensor::zeros({batch, n_tokens, want_dim})), p(null_name));
  };
  Var rhythm = cond_stream(conds.rhythm, "null.rhythm", cfg_.d_rhythm);
  Var emotion = cond_stream(conds.emotion, "null.emotion", cfg_.d_emotion);

  // Region token streams with projected style added, content concatenated,
  // then fused back to the region width (Eq.-7 pathway).
  std::array<Var, kNumParts> tokens;
  std::array<Var, kNumParts> style_proj;
  for (int part = 0; part < kNumParts; ++part) {
    std::string s = kPartNames[part];
    tokens[part] = nn::linear(p, "in." + s, z_parts[part]);
    style_proj[part] = nn::linear(p, "style_proj." + s, style_raw[part]);
  }
  auto fused_in = fuse_style_content(tokens, style_proj, content);

  // Timestep embedding, shared projection, added to every region.
  Tensor temb_raw = nn::timestep_embedding(t, cfg_.t_embed_dim);
  Var temb = nn::linear(p, "temb.fc2", gelu(nn::linear(p, "temb.fc1", tape.constant(temb_raw))));
  Var temb_tokens = broadcast_tokens(temb, n_tokens);

  std::array<Var, kNumParts> h;
  for (int part = 0; part < kNumParts; ++part) {
    h[part] = add(nn::linear(p, std::string("fuse.") + kPartNames[part], fused_in[part]),
                  temb_tokens);
  }

  for (int l = 0; l < cfg_.layer_pairs; ++l) {
    std::string lp = "L" + std::to_string(l);
    h = part_attention_block(p, lp + ".self", h, AttnMode::self_attn, std::nullopt,
                             cfg_.heads).tokens;
    h = part_attention_block(p, lp + ".rhy", h, AttnMode::cross_attn, rhythm,
                             cfg_.heads).tokens;
    h = part_attention_block(p, lp + ".emo", h, AttnMode::cross_attn, emotion,
                             cfg_.heads).tokens;
    for (int part = 0; part < kNumParts; ++part) {
      std::string s = kPartNames[part];
      h[part] = add(h[part], nn::ffn(p, lp + ".ffn." + s,
                                     nn::layer_norm(p, lp + ".ffnln." + s, h[part])));
    }
  }

  std::array<Var, kNumParts> out;
  for (int part = 0; part < kNumParts; ++part) {
    std::string s = kPartNames[part];
    out[part] = nn::linear(p, "out.head." + s, nn::layer_norm(p, "out.ln." + s, h[part]));
  }
  return out;
}

std::array<Tensor, kNumParts> Denoiser::denoise(const std::array<Tensor, kNumParts>& z_t,
                                                int t, const CondBatch& conds) const {
  Tape tape(false);
  ParamBinding p(tape, params_, false);
  std::array<Var, kNumParts> z_vars;
  for (int part = 0; part < kNumParts; ++part) {
    MP_REQUIRE(z_t[part].rank() == 2, "denoise expects [n, d_rvq] region latents");
    z_vars[part] = tape.constant(
        z_t[part].reshaped({1, z_t[part].dim(0), z_t[part].dim(1)}));
  }
  auto out = forward(p, z_vars, {t}, conds);
  std::array<Tensor, kNumParts> res;
  for (int part = 0; part < kNumParts; ++part) {
    Tensor v = out[part].value();
    res[part] = v.reshaped({v.dim(1), v.dim(2)});
  }
  return res;
}

void Denoiser::save(const std::filesystem::path& path, const nlohmann::json& extra_meta) const {
  nlohmann::json meta = extra_meta;
  meta["kind"] = "denoiser";
  meta["config"] = {{"layer_pairs", cfg_.layer_pairs}, {"latent_dim", cfg_.latent_dim},
                    {"heads", cfg_.heads},             {"t_steps", cfg_.t_steps},
                    {"schedule", cfg_.schedule},       {"rvq_latent_dim", cfg_.rvq_latent_dim},
                    {"d_style", cfg_.d_style},         {"d_content", cfg_.d_content},
                    {"d_rhythm", cfg_.d_rhythm},       {"d_emotion", cfg_.d_emotion},
                    {"t_embed_dim", cfg_.t_embed_dim}, {"cond_dropout", cfg_.cond_dropout},
                    {"ffn_mult", cfg_.ffn_mult}};
  io::save_checkpoint(path, meta, params_);
}

Denoiser Denoiser::load_from(const std::filesystem::path& path, nlohmann::json* meta_out) {
  io::Checkpoint ck = io::load_checkpoint(path);
  MP_REQUIRE(ck.meta.value("kind", "") == "denoiser", "checkpoint is not a denoiser");
  const auto& jc = ck.meta.at("config");
  DenoiserConfig cfg;
  cfg.layer_pairs = jc.at("layer_pairs");
  cfg.latent_dim = jc.at("latent_dim");
  cfg.heads = jc.at("heads");
  cfg.t_steps = jc.at("t_steps");
  cfg.schedule = jc.at("schedule");
  cfg.rvq_latent_dim = jc.at("rvq_latent_dim");
  cfg.d_style = jc.at("d_style");
  cfg.d_content = jc.at("d_content");
  cfg.d_rhythm = jc.at("d_rhythm");
  cfg.d_emotion = jc.at("d_emotion");
  cfg.t_embed_dim = jc.at("t_embed_dim");
  cfg.cond_dropout = jc.at("cond_dropout");
  cfg.ffn_mult = jc.at("ffn_mult");
  Denoiser model(cfg, 0);
  for (auto& e : ck.params.entries()) {
    model.params_.set(e.name, e.value);
    for (auto& dst : model.params_.entries()) {
      if (dst.name == e.name) {
        dst.adam_m = e.adam_m;
        dst.adam_v = e.adam_v;
        break;
      }
    }
  }
  if (meta_out) *meta_out = ck.meta;
  return model;
}

// ---------------------------------------------------------------------------
// CFG, training, sampling
// ---------------------------------------------------------------------------

std::array<Tensor, kNumParts> cfg_denoise(const Denoiser& model,
                                          const std::array<Tensor, kNumParts>& z_t, int t,
                                          const CondBatch& conds, const GuidanceWeights& w) {
  w.validate();
  // The four evaluations of the incremental scheme.
  auto none = conds.with_style(false).with_content(false).with_rhythm_emotion(false);
  auto c_only = conds.with_style(false).with_rhythm_emotion(false);
  auto c_s = conds.with_rhythm_emotion(false);
  auto c_re = conds.with_style(false);

  auto u = model.denoise(z_t, t, none);
  auto c = model.denoise(z_t, t, c_only);
  auto cs = model.denoise(z_t, t, c_s);
  auto cre = model.denoise(z_t, t, c_re);

  std::array<Tensor, kNumParts> out;
  for (int part = 0; part < kNumParts; ++part) {
    Tensor acc = u[part];
    acc = ops::add(acc, ops::scale(ops::sub(c[part], u[part]), w.w_c));
    acc = ops::add(acc, ops::scale(ops::sub(cs[part], c[part]), w.w_s));
    acc = ops::add(acc, ops::scale(ops::sub(cre[part], c[part]), w.w_re));
    out[part] = std::move(acc);
  }
  return out;
}

DiffusionStepStats diffusion_train_step(Denoiser& model,
                                        const std::array<Tensor, kNumParts>& z0_parts,
                                        const CondBatch& conds,
                                        const NoiseSchedule& schedule, Adam& adam, Rng& rng) {
  schedule.validate();
  Shape zs = z0_parts[0].shape();
  MP_REQUIRE(zs.size() == 3, "train step expects [B, n, d] region latents");
  int batch = zs[0];

  DiffusionStepStats stats;
  stats.dropped_style = rng.uniform() < model.config().cond_dropout;
  stats.dropped_content = rng.uniform() < model.config().cond_dropout;
  stats.dropped_rhythm_emotion = rng.uniform() < model.config().cond_dropout;
  CondBatch used = conds.with_style(!stats.dropped_style)
                       .with_content(!stats.dropped_content)
                       .with_rhythm_emotion(!stats.dropped_rhythm_emotion);

  std::vector<int> t(batch);
  for (auto& v : t) v = rng.uniform_int(1, schedule.t_steps);
  stats.t_min = *std::min_element(t.begin(), t.end());
  stats.t_max = *std::max_element(t.begin(), t.end());

  // Per-sample forward noising with the closed-form marginal.
  std::array<Tensor, kNumParts> z_t;
  for (int part = 0; part < kNumParts; ++part) {
    const Tensor& z0 = z0_parts[part];
    auto zv = z0.data();
    std::vector<double> noised(zv.size());
    int64_t per_sample = z0.numel() / batch;
    for (int b = 0; b < batch; ++b) {
      double ab = schedule.alpha_bar[t[b]];
      double s0 = std::sqrt(ab), s1 = std::sqrt(1.0 - ab);
      for (int64_t i = 0; i < per_sample; ++i) {
        int64_t o = b * per_sample + i;
        noised[o] = s0 * zv[o] + s1 * rng.normal();
      }
    }
    z_t[part] = Tensor(z0.shape(), std::move(noised));
  }

  Tape tape;
  ParamBinding p(tape, model.params());
  std::array<Var, kNumParts> z_vars;
  for (int part = 0; part < kNumParts; ++part) z_vars[part] = tape.constant(z_t[part]);
  auto pred = model.forward(p, z_vars, t, used);

  Var pred_all = concat({pred[0], pred[1], pred[2]}, 2);
  Tensor target = ops::concat({z0_parts[0], z0_parts[1], z0_parts[2]}, 2);
  Var loss = smooth_l1(pred_all, tape.constant(target));
  stats.loss = loss.value().scalar_value();

  GradMap grads = tape.backward(loss);
  NamedGrads named;
  p.accumulate_grads(grads, named);
  adam.step(model.params(), named);
  return stats;
}

std::array<Tensor, kNumParts> sample_latents(const Denoiser& model,
                                             const NoiseSchedule& schedule,
                                             const CondBatch& conds,
                                             const GuidanceWeights& weights, int n_steps,
                                             int n_tokens, uint64_t seed) {
  schedule.validate();
  MP_REQUIRE(n_steps >= 1 && n_steps <= schedule.t_steps,
             "n_steps must lie in [1, T]");
  int d = model.config().rvq_latent_dim;
  Rng rng(derive_seed(seed, 0x5a3));

  // Evenly spaced decreasing timestep subset from T down to 1.
  std::vector<int> ts;
  for (int i = 0; i < n_steps; ++i) {
    double frac = n_steps == 1 ? 0.0 : static_cast<double>(i) / (n_steps - 1);
    int t = static_cast<int>(std::lround(schedule.t_steps - frac * (schedule.t_steps - 1)));
    if (ts.empty() || t < ts.back()) ts.push_back(t);
  }

  std::array<Tensor, kNumParts> z;
  for (int part = 0; part < kNumParts; ++part) z[part] = Tensor::randn({n_tokens, d}, rng);

  for (size_t i = 0; i < ts.size(); ++i) {
    int t_cur = ts[i];
    int t_next = i + 1 < ts.size() ? ts[i + 1] : 0;
    auto z0_hat = cfg_denoise(model, z, t_cur, conds, weights);

    double ab_cur = schedule.alpha_bar[t_cur];
    double ab_next = schedule.alpha_bar[t_next];  // alpha_bar[0] = 1
    double alpha_eff = ab_cur / ab_next;
    double beta_eff = 1.0 - alpha_eff;
    double coef_z0 = std::sqrt(ab_next) * beta_eff / (1.0 - ab_cur);
    double coef_zt = std::sqrt(alpha_eff) * (1.0 - ab_next) / (1.0 - ab_cur);
    double var = beta_eff * (1.0 - ab_next) / (1.0 - ab_cur);

    for (int part = 0; part < kNumParts; ++part) {
      Tensor mean = ops::add(ops::scale(z0_hat[part], coef_z0), ops::scale(z[part], coef_zt));
      if (t_next == 0) {
        z[part] = std::move(mean);
      } else {
        Tensor noise = Tensor::randn({n_tokens, d}, rng);
        z[part] = ops::add(mean, ops::scale(noise, std::sqrt(var)));
      }
    }
  }
  return z;
}

MotionClip sample_motion(const Denoiser& model, const NoiseSchedule& schedule,
                         const CondBatch& conds, const GuidanceWeights& weights, int n_steps,
                         int n_tokens, uint64_t seed,
                         const std::array<const RvqModel*, kNumParts>& codecs,
                         const PartLayout& layout, double fps) {
  auto latents = sample_latents(model, schedule, conds, weights, n_steps, n_tokens, seed);
  std::array<Tensor, kNumParts> decoded;
  for (int part = 0; part < kNumParts; ++part) {
    const RvqModel* codec = codecs[part];
    MP_REQUIRE(codec != nullptr, "missing codec for a region");
    RqResult rq = rq_forward(latents[part], codec->codebooks(), RqMode::eval, 0.0, nullptr);
    decoded[part] = codec->decode_eval(rq.quantized_sum);
  }
  MotionClip clip;
  clip.values = concat_parts(layout, decoded);
  clip.fps = fps;
  clip.layout = layout;
  return clip;
}

}  // namespace mimicparts
