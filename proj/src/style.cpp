#include "mimicparts/style.hpp"

#include <algorithm>
#include <cmath>

#include "mimicparts/io.hpp"

namespace mimicparts {

PairBatch make_pairs(const std::vector<Tensor>& clips) {
  MP_REQUIRE(!clips.empty(), "make_pairs: empty batch");
  int full = clips[0].dim(0);
  MP_REQUIRE(full % 2 == 0, "make_pairs: clip length must be even");
  int half = full / 2;
  int channels = clips[0].dim(1);
  PairBatch out;
  out.views.resize(clips.size() * 2);
  out.pair_ids.resize(clips.size() * 2);
  for (size_t i = 0; i < clips.size(); ++i) {
    MP_REQUIRE(clips[i].rank() == 2 && clips[i].dim(0) == full && clips[i].dim(1) == channels,
               "make_pairs: clips must share shape");
    auto halves = ops::split(clips[i], 0, {half, half});
    out.views[i] = std::move(halves[0]);
    out.views[clips.size() + i] = std::move(halves[1]);
    out.pair_ids[i] = static_cast<int>(i);
    out.pair_ids[clips.size() + i] = static_cast<int>(i);
  }
  return out;
}

Var nt_xent(Var embeddings, const std::vector<int>& pair_ids, double temperature) {
  MP_REQUIRE(temperature > 0.0, "nt_xent temperature must be positive");
  const Shape& s = embeddings.value().shape();
  MP_REQUIRE(s.size() == 2, "nt_xent expects [2N, d] embeddings");
  int n_views = s[0];
  MP_REQUIRE(static_cast<int>(pair_ids.size()) == n_views, "pair id count mismatch");
  MP_REQUIRE(n_views >= 2 && n_views % 2 == 0, "nt_xent needs 2N views");

  // Partner of each view: the unique other view with the same pair id.
  std::vector<int> partner(n_views, -1);
  for (int i = 0; i < n_views; ++i) {
    for (int j = 0; j < n_views; ++j) {
      if (i != j && pair_ids[j] == pair_ids[i]) {
        MP_REQUIRE(partner[i] == -1, "pair id appears more than twice");
        partner[i] = j;
      }
    }
    MP_REQUIRE(partner[i] >= 0, "view " + std::to_string(i) + " has no positive partner");
  }

  Tape& tape = *embeddings.tape;
  Var normed = l2_normalize_rows(embeddings);
  Var sims = scale(matmul(normed, transpose2d(normed)), 1.0 / temperature);

  // Exclude k = i from every denominator with a large negative shift (kept
  // finite so eager checks stay meaningful).
  std::vector<double> mask(static_cast<size_t>(n_views) * n_views, 0.0);
  std::vector<double> pick(static_cast<size_t>(n_views) * n_views, 0.0);
  for (int i = 0; i < n_views; ++i) {
    mask[static_cast<size_t>(i) * n_views + i] = -1e9;
    pick[static_cast<size_t>(i) * n_views + partner[i]] = 1.0;
  }
  Var logp = log_softmax_rows(add(sims, tape.constant(Tensor({n_views, n_views}, mask))));
  Var pos = mul(logp, tape.constant(Tensor({n_views, n_views}, pick)));
  return scale(neg(sum_all(pos)), 1.0 / n_views);
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

std::string StyleEncoder::part_prefix(int part) const {
  if (cfg_.full_body) return "full";
  return kPartNames[part];
}

StyleEncoder::StyleEncoder(StyleEncoderConfig cfg, PartLayout layout, uint64_t seed)
    : cfg_(cfg), layout_(std::move(layout)) {
  MP_REQUIRE(cfg_.d_model % cfg_.heads == 0, "d_model must be divisible by heads");
  Rng rng(derive_seed(seed, 0x57e));
  int n_encoders = cfg_.full_body ? 1 : kNumParts;
  for (int p = 0; p < n_encoders; ++p) {
    std::string prefix = cfg_.full_body ? "full" : kPartNames[p];
    int in_dim = cfg_.full_body ? layout_.channels() : layout_.region_size(p);
    nn::declare_linear(params_, prefix + ".embed", in_dim, cfg_.d_model, rng);
    for (int l = 0; l < cfg_.layers; ++l) {
      nn::declare_transformer_layer(params_, prefix + ".layer" + std::to_string(l),
                                    cfg_.d_model, cfg_.d_model * cfg_.ffn_mult, rng);
    }
    nn::declare_layer_norm(params_, prefix + ".final", cfg_.d_model);
  }
}

Var StyleEncoder::encode_part(ParamBinding& p, int part, Var views) const {
  Shape s = views.value().shape();
  MP_REQUIRE(s.size() == 3, "encode_part expects [B, T, C]");
  int expected = cfg_.full_body ? layout_.channels() : layout_.region_size(part);
  MP_REQUIRE(s[2] == expected, "encode_part: channel count " + std::to_string(s[2]) +
                                   " does not match the region width " +
                                   std::to_string(expected));
  std::string prefix = part_prefix(part);
  Var h = nn::linear(p, prefix + ".embed", views);

  Tensor pe = nn::sinusoidal_table(s[1], cfg_.d_model);
  h = add(h, p.tape().constant(pe.reshaped({1, s[1], cfg_.d_model})));

  for (int l = 0; l < cfg_.layers; ++l) {
    h = nn::transformer_layer(p, prefix + ".layer" + std::to_string(l), h, cfg_.heads);
  }
  h = nn::layer_norm(p, prefix + ".final", h);
  // Temporal mean pooling over tokens: [B, T, d] -> [B, d].
  return mean_axis1(h);
}

Tensor StyleEncoder::encode_window_part(int part, const Tensor& window) const {
  MP_REQUIRE(window.rank() == 2, "encode_window_part expects [T, C]");
  Tape tape(false);
  ParamBinding p(tape, params_, false);
  Var views = tape.constant(window.reshaped({1, window.dim(0), window.dim(1)}));
  Tensor out = encode_part(p, part, views).value();
  return out.reshaped({out.dim(1)});
}

Tensor StyleEncoder::embed_part(int part, const Tensor& values) const {
  int t_frames = values.dim(0);
  int w = cfg_.t_window;
  if (t_frames <= w) return encode_window_part(part, values);
  // Consecutive windows of the training length; the last window is anchored
  // at the clip end so every frame is covered.
  std::vector<int> starts;
  for (int s0 = 0; s0 + w <= t_frames; s0 += w) starts.push_back(s0);
  if (starts.back() + w < t_frames) starts.push_back(t_frames - w);
  auto vv = values.data();
  int channels = values.dim(1);
  Tensor acc = Tensor::zeros({cfg_.d_model});
  for (int s0 : starts) {
    std::vector<double> chunk(static_cast<int64_t>(w) * channels);
    std::copy(vv.begin() + static_cast<int64_t>(s0) * channels,
              vv.begin() + static_cast<int64_t>(s0 + w) * channels, chunk.begin());
    acc = ops::add(acc, encode_window_part(part, Tensor({w, channels}, std::move(chunk))));
  }
  return ops::scale(acc, 1.0 / static_cast<double>(starts.size()));
}

StyleEmbedding StyleEncoder::encode(const MotionClip& clip) const {
  clip.validate();
  MP_REQUIRE(clip.layout == layout_, "clip layout does not match the encoder layout");
  StyleEmbedding out;
  if (cfg_.full_body) {
    Tensor s = embed_part(0, clip.values);
    for (int p = 0; p < kNumParts; ++p) out.parts[p] = s;
    return out;
  }
  auto parts = split_clip(clip, layout_);
  for (int p = 0; p < kNumParts; ++p) {
    out.parts[p] = embed_part(p, parts[p]);
  }
  return out;
}

void StyleEncoder::save(const std::filesystem::path& path,
                        const nlohmann::json& extra_meta) const {
  nlohmann::json meta = extra_meta;
  meta["kind"] = "style";
  meta["layout"] = layout_.to_json();
  meta["config"] = {{"d_model", cfg_.d_model},     {"layers", cfg_.layers},
                    {"heads", cfg_.heads},         {"t_window", cfg_.t_window},
                    {"temperature", cfg_.temperature}, {"ffn_mult", cfg_.ffn_mult},
                    {"full_body", cfg_.full_body}};
  io::save_checkpoint(path, meta, params_);
}

StyleEncoder StyleEncoder::load_from(const std::filesystem::path& path,
                                     nlohmann::json* meta_out) {
  io::Checkpoint ck = io::load_checkpoint(path);
  MP_REQUIRE(ck.meta.value("kind", "") == "style", "checkpoint is not a style encoder");
  const auto& jc = ck.meta.at("config");
  StyleEncoderConfig cfg;
  cfg.d_model = jc.at("d_model");
  cfg.layers = jc.at("layers");
  cfg.heads = jc.at("heads");
  cfg.t_window = jc.at("t_window");
  cfg.temperature = jc.at("temperature");
  cfg.ffn_mult = jc.at("ffn_mult");
  cfg.full_body = jc.at("full_body");
  StyleEncoder model(cfg, PartLayout::from_json(ck.meta.at("layout")), 0);
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
// Training
// ---------------------------------------------------------------------------

std::vector<TrainLogEntry> train_style(StyleEncoder& model,
                                       const std::vector<MotionClip>& clips,
                                       const StyleTrainConfig& tc, uint64_t seed,
                                       const std::function<void(const TrainLogEntry&)>& on_step,
                                       Adam* optimizer, Rng* external_rng) {
  MP_REQUIRE(!clips.empty(), "train_style: empty dataset");
  const StyleEncoderConfig& cfg = model.config();
  int window = 2 * cfg.t_window;
  for (const auto& c : clips) {
    MP_REQUIRE(c.frames() >= window,
               "clips must cover 2*t_window = " + std::to_string(window) + " frames");
  }
  Rng local_rng(derive_seed(seed, 0x517e));
  Rng& rng = external_rng ? *external_rng : local_rng;
  Adam local_adam(tc.lr);
  Adam& adam = optimizer ? *optimizer : local_adam;
  int batch = std::min<int>(tc.batch_size, static_cast<int>(clips.size()));
  int n_parts = cfg.full_body ? 1 : kNumParts;

  std::vector<TrainLogEntry> log;
  for (int step = 0; step < tc.steps; ++step) {
    // Sample clips and a window offset, split into halves per part.
    std::vector<Tensor> windows;
    windows.reserve(batch);
    for (int b = 0; b < batch; ++b) {
      const MotionClip& clip = clips[rng.uniform_int(0, static_cast<int>(clips.size()) - 1)];
      if (clip.frames() == window) {
        windows.push_back(clip.values);
        continue;
      }
      int start = rng.uniform_int(0, clip.frames() - window);
      auto cv = clip.values.data();
      int channels = clip.channels();
      std::vector<double> w(static_cast<int64_t>(window) * channels);
      std::copy(cv.begin() + static_cast<int64_t>(start) * channels,
                cv.begin() + static_cast<int64_t>(start + window) * channels, w.begin());
      windows.push_back(Tensor({window, channels}, std::move(w)));
    }
    PairBatch pairs = make_pairs(windows);

    Tape tape;
    ParamBinding p(tape, model.params());
    Var total;
    double loss_value = 0.0;
    for (int part = 0; part < n_parts; ++part) {
      // Stack the part channels of every view into [2N, T_s, C_p].
      std::vector<Tensor> part_views;
      part_views.reserve(pairs.views.size());
      for (const auto& view : pairs.views) {
        if (cfg.full_body) {
          part_views.push_back(view.reshaped({1, view.dim(0), view.dim(1)}));
        } else {
          Tensor pv = split_channels(view, clips[0].layout)[part];
          part_views.push_back(pv.reshaped({1, pv.dim(0), pv.dim(1)}));
        }
      }
      Var views = tape.constant(ops::concat(part_views, 0));
      Var emb = model.encode_part(p, part, views);
      Var loss_p = nt_xent(emb, pairs.pair_ids, cfg.temperature);
      total = part == 0 ? loss_p : add(total, loss_p);
    }
    loss_value = total.value().scalar_value();

    GradMap grads = tape.backward(total);
    NamedGrads named;
    p.accumulate_grads(grads, named);
    adam.step(model.params(), named);

    TrainLogEntry e;
    e.step = step;
    e.loss = loss_value;
    e.recon = loss_value / n_parts;
    if (on_step) on_step(e);
    log.push_back(e);
  }
  return log;
}

}  // namespace mimicparts
