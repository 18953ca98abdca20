#include "mimicparts/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mimicparts/io.hpp"

namespace mimicparts {

namespace {

using json = nlohmann::json;

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s = "0" + s;
  return s;
}

PartLayout layout_from(const RunConfig& cfg) {
  return make_part_layout(cfg.data_channels_upper, cfg.data_channels_hands,
                          cfg.data_channels_lower);
}

SpeechSynthConfig speech_cfg_from(const RunConfig& cfg) {
  SpeechSynthConfig sc;
  sc.d_content = cfg.data_d_content;
  sc.d_rhythm = cfg.data_d_rhythm;
  sc.d_emotion = cfg.data_d_emotion;
  sc.n_emotions = cfg.data_n_emotions;
  return sc;
}

RvqConfig rvq_cfg_from(const RunConfig& cfg) {
  RvqConfig rc;
  rc.num_layers = cfg.rvq_num_layers;
  rc.codebook_size = cfg.rvq_codebook_size;
  rc.latent_dim = cfg.rvq_latent_dim;
  rc.hidden = cfg.rvq_hidden;
  rc.beta = cfg.rvq_beta;
  rc.quantizer_dropout = cfg.rvq_quantizer_dropout;
  rc.ema_decay = cfg.rvq_ema_decay;
  rc.dead_usage_threshold = cfg.rvq_dead_usage_threshold;
  return rc;
}

StyleEncoderConfig style_cfg_from(const RunConfig& cfg, bool full_body) {
  StyleEncoderConfig sc;
  sc.d_model = cfg.style_d_model;
  sc.layers = cfg.style_layers;
  sc.heads = cfg.style_heads;
  sc.t_window = cfg.style_t_window;
  sc.temperature = cfg.style_temperature;
  sc.ffn_mult = cfg.style_ffn_mult;
  sc.full_body = full_body;
  return sc;
}

StyleEncoderConfig classifier_cfg_from(const RunConfig& cfg) {
  StyleEncoderConfig sc;
  sc.d_model = cfg.classifier_d_model;
  sc.layers = cfg.classifier_layers;
  sc.heads = cfg.classifier_heads;
  sc.t_window = cfg.classifier_t_window;
  return sc;
}

DenoiserConfig denoiser_cfg_from(const RunConfig& cfg) {
  DenoiserConfig dc;
  dc.layer_pairs = cfg.diffusion_layer_pairs;
  dc.latent_dim = cfg.diffusion_latent_dim;
  dc.heads = cfg.diffusion_heads;
  dc.t_steps = cfg.diffusion_t_steps;
  dc.schedule = cfg.diffusion_schedule;
  dc.rvq_latent_dim = cfg.rvq_latent_dim;
  dc.d_style = cfg.style_d_model;
  dc.d_content = cfg.data_d_content;
  dc.d_rhythm = cfg.data_d_rhythm;
  dc.d_emotion = cfg.data_d_emotion;
  dc.t_embed_dim = cfg.diffusion_t_embed_dim;
  dc.cond_dropout = cfg.diffusion_cond_dropout;
  dc.ffn_mult = cfg.diffusion_ffn_mult;
  return dc;
}

void require_config_matches(const RunConfig& cfg, const Manifest& manifest) {
  MP_REQUIRE(cfg.dataset_hash() == manifest.dataset_hash,
             "dataset-defining config keys (seed, data.*) do not match the manifest; "
             "synthesize a new run directory for a different dataset");
}

Manifest load_manifest_checked(const RunConfig& cfg, const RunPaths& paths) {
  if (!std::filesystem::exists(paths.manifest())) {
    throw Error::prerequisite("no dataset manifest at " + paths.manifest().string() +
                              "; run synth-data first");
  }
  Manifest m = Manifest::load(paths.manifest());
  require_config_matches(cfg, m);
  return m;
}

void append_jsonl(const std::filesystem::path& path, const json& j) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw Error::io("cannot append to " + path.string());
  f << j.dump() << "\n";
}

struct StageCheckpointMeta {
  int step = 0;
  std::string rng_state;
  int64_t adam_steps = 0;
};

// Resuming requires an architecture-identical checkpoint; training-loop
// settings (steps, lr) may differ between invocations.
void require_same_arch(bool ok, const std::string& what) {
  if (!ok) {
    throw Error::validation("existing " + what +
                            " checkpoint was trained with a different architecture; "
                            "rerun with --fresh or restore the original config");
  }
}

StageCheckpointMeta stage_meta_from(const json& meta) {
  StageCheckpointMeta out;
  out.step = meta.value("step", 0);
  out.rng_state = meta.value("rng_state", "");
  out.adam_steps = meta.value("adam_steps", int64_t{0});
  return out;
}

json stage_meta_json(int step, const Rng& rng, const Adam& adam, const RunConfig& cfg) {
  json j;
  j["step"] = step;
  j["rng_state"] = rng.state();
  j["adam_steps"] = adam.step_count();
  j["config_hash"] = cfg.hash();
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

std::vector<int> Manifest::indices(Split split) const {
  std::vector<int> out;
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == split) out.push_back(static_cast<int>(i));
  }
  return out;
}

void Manifest::save(const std::filesystem::path& path) const {
  json j;
  j["config_hash"] = config_hash;
  j["dataset_hash"] = dataset_hash;
  j["seed"] = seed;
  json list = json::array();
  for (const auto& e : entries) {
    list.push_back({{"clip", e.clip_file},
                    {"features", e.features_file},
                    {"style", e.style},
                    {"emotion", e.emotion},
                    {"tempo", e.tempo},
                    {"split", split_name(e.split)},
                    {"clip_hash", e.clip_hash},
                    {"features_hash", e.features_hash}});
  }
  j["clips"] = std::move(list);
  io::write_file(path, j.dump(2));
}

Manifest Manifest::load(const std::filesystem::path& path) {
  json j = json::parse(io::read_file(path), nullptr, false);
  if (j.is_discarded()) throw Error::io("manifest does not parse: " + path.string());
  Manifest m;
  m.config_hash = j.value("config_hash", "");
  m.dataset_hash = j.value("dataset_hash", "");
  m.seed = j.value("seed", uint64_t{0});
  for (const auto& e : j.at("clips")) {
    ManifestEntry entry;
    entry.clip_file = e.at("clip");
    entry.features_file = e.at("features");
    entry.style = e.at("style");
    entry.emotion = e.at("emotion");
    entry.tempo = e.at("tempo");
    std::string sp = e.at("split");
    entry.split = sp == "train" ? Split::train : (sp == "val" ? Split::val : Split::test);
    entry.clip_hash = e.value("clip_hash", "");
    entry.features_hash = e.value("features_hash", "");
    m.entries.push_back(std::move(entry));
  }
  return m;
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_part_style: return "no_part_style";
    case Variant::no_rhythm: return "no_rhythm";
    case Variant::no_emotion: return "no_emotion";
    case Variant::no_rhythm_emotion: return "no_rhythm_emotion";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  for (Variant v : {Variant::full, Variant::no_part_style, Variant::no_rhythm,
                    Variant::no_emotion, Variant::no_rhythm_emotion}) {
    if (name == variant_name(v)) return v;
  }
  throw Error::validation("unknown ablation row: " + name);
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

Manifest cmd_synth_data(const RunConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  MP_REQUIRE(cfg.data_clips_per_style >= 1, "dataset would be empty (data.clips_per_style < 1)");
  io::ensure_dir(paths.clips_dir());
  io::ensure_dir(paths.features_dir());

  PartLayout layout = layout_from(cfg);
  auto styles = default_styles(cfg.data_n_styles);
  SpeechSynthConfig sc = speech_cfg_from(cfg);

  int total = cfg.total_clips();
  std::vector<ManifestEntry> entries(total);
  parallel_for(total, cfg.threads, [&](int64_t idx) {
    int s = static_cast<int>(idx) / cfg.data_clips_per_style;
    int i = static_cast<int>(idx) % cfg.data_clips_per_style;
    Rng pick(derive_seed(cfg.seed, 0xae00 + idx));
    double tempo = pick.uniform(cfg.data_tempo_min, cfg.data_tempo_max);
    int emotion = pick.uniform_int(0, cfg.data_n_emotions - 1);

    SpeechFeatures features =
        synth_speech(tempo, emotion, cfg.data_frames, cfg.data_fps,
                     derive_seed(cfg.seed, 2 * idx), sc);
    MotionClip clip = synth_motion(styles[s], features, layout, cfg.data_frames,
                                   derive_seed(cfg.seed, 2 * idx + 1));
    clip.style_label = s;
    clip.speaker_id = s;

    ManifestEntry e;
    e.clip_file = "clips/clip_" + std::to_string(s) + "_" + zero_pad(i, 4) + ".mpcl";
    e.features_file = "features/feat_" + std::to_string(s) + "_" + zero_pad(i, 4) + ".mpsf";
    e.style = s;
    e.emotion = emotion;
    e.tempo = tempo;
    clip.save(paths.dataset_dir() / e.clip_file);
    features.save(paths.dataset_dir() / e.features_file);
    entries[idx] = std::move(e);
  });

  // Stratified split, then file hashes (sequential, order-stable).
  std::vector<std::string> keys;
  std::vector<int> labels;
  for (const auto& e : entries) {
    keys.push_back(e.clip_file);
    labels.push_back(e.style);
  }
  auto splits = split_dataset(
      keys, labels, {cfg.data_split_train, cfg.data_split_val, cfg.data_split_test}, cfg.seed);
  for (int i = 0; i < total; ++i) {
    entries[i].split = splits[i];
    entries[i].clip_hash = io::hash_file(paths.dataset_dir() / entries[i].clip_file);
    entries[i].features_hash = io::hash_file(paths.dataset_dir() / entries[i].features_file);
  }

  Manifest manifest;
  manifest.config_hash = cfg.hash();
  manifest.dataset_hash = cfg.dataset_hash();
  manifest.seed = cfg.seed;
  manifest.entries = std::move(entries);
  manifest.save(paths.manifest());

  json config_doc;
  config_doc["config"] = cfg.to_json();
  config_doc["config_hash"] = cfg.hash();
  io::write_file(paths.config(), config_doc.dump(2));
  return manifest;
}

// ---------------------------------------------------------------------------
// dataset loading and latent preparation
// ---------------------------------------------------------------------------

std::vector<LoadedClip> load_split(const RunPaths& paths, const Manifest& manifest,
                                   std::optional<Split> split) {
  std::vector<int> idx;
  if (split.has_value()) {
    idx = manifest.indices(*split);
  } else {
    idx.resize(manifest.entries.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  }
  std::vector<LoadedClip> out(idx.size());
  for (size_t k = 0; k < idx.size(); ++k) {
    const ManifestEntry& e = manifest.entries[idx[k]];
    out[k].clip = MotionClip::load(paths.dataset_dir() / e.clip_file);
    out[k].features = SpeechFeatures::load(paths.dataset_dir() / e.features_file);
    out[k].meta = e;
  }
  return out;
}

namespace {

// Token-rate alignment of the conditioning streams: n = frames / 4.
SpeechFeatures align_to_tokens(const SpeechFeatures& f, double fps, int n_tokens) {
  return align_features(f, fps / RvqConfig::downscale, n_tokens);
}

}  // namespace

std::vector<LatentSample> prepare_latents(const std::vector<LoadedClip>& clips,
                                          const std::array<const RvqModel*, kNumParts>& codecs,
                                          const StyleEncoder& style_encoder,
                                          const RunConfig& cfg) {
  MP_REQUIRE(!clips.empty(), "prepare_latents: empty clip set");
  std::vector<LatentSample> out(clips.size());
  parallel_for(static_cast<int64_t>(clips.size()), cfg.threads, [&](int64_t i) {
    const LoadedClip& lc = clips[i];
    auto parts = split_clip(lc.clip, lc.clip.layout);
    LatentSample s;
    for (int p = 0; p < kNumParts; ++p) s.z0[p] = codecs[p]->encode_eval(parts[p]);
    StyleEmbedding emb = style_encoder.encode(lc.clip);
    s.style = emb.parts;
    int n_tokens = s.z0[0].dim(0);
    SpeechFeatures aligned = align_to_tokens(lc.features, lc.clip.fps, n_tokens);
    s.content = aligned.content;
    s.rhythm = aligned.rhythm;
    s.emotion = aligned.emotion;
    s.style_label = lc.meta.style;
    out[i] = std::move(s);
  });
  return out;
}

// ---------------------------------------------------------------------------
// training stages
// ---------------------------------------------------------------------------

namespace {

void train_rvq_stage(const RunConfig& cfg, const RunPaths& paths, const Manifest& manifest,
                     bool fresh) {
  auto clips = load_split(paths, manifest, Split::train);
  MP_REQUIRE(!clips.empty(), "train split is empty");
  PartLayout layout = layout_from(cfg);
  RvqConfig rc = rvq_cfg_from(cfg);
  io::ensure_dir(paths.checkpoints_dir());
  io::ensure_dir(paths.logs_dir());
  io::ensure_dir(paths.plots_dir());

  for (int part = 0; part < kNumParts; ++part) {
    std::string name = std::string("rvq_") + kPartNames[part];
    std::vector<Tensor> parts;
    parts.reserve(clips.size());
    for (const auto& lc : clips) parts.push_back(split_clip(lc.clip, layout)[part]);

    uint64_t stage_seed = derive_seed(cfg.seed, 0x1100 + part);
    Rng rng(derive_seed(stage_seed, 0x3f2));
    Adam adam(cfg.rvq_lr);
    int done = 0;
    auto ckpt = paths.checkpoint(name);
    RvqModel model(rc, layout.region_size(part), stage_seed);
    if (!fresh && std::filesystem::exists(ckpt)) {
      json meta;
      model = RvqModel::load_from(ckpt, &meta);
      const RvqConfig& lc = model.config();
      require_same_arch(lc.num_layers == rc.num_layers && lc.codebook_size == rc.codebook_size &&
                            lc.latent_dim == rc.latent_dim && lc.hidden == rc.hidden &&
                            model.channels() == layout.region_size(part),
                        name);
      auto sm = stage_meta_from(meta);
      done = sm.step;
      adam.set_step_count(sm.adam_steps);
      if (!sm.rng_state.empty()) rng.set_state(sm.rng_state);
    } else {
      std::filesystem::remove(paths.log(name));
    }
    if (done >= cfg.rvq_steps) continue;

    std::vector<TrainLogEntry> full_log;
    while (done < cfg.rvq_steps) {
      int chunk = std::min(cfg.checkpoint_save_every, cfg.rvq_steps - done);
      RvqTrainConfig tc;
      tc.steps = chunk;
      tc.batch_size = cfg.rvq_batch_size;
      tc.lr = cfg.rvq_lr;
      int base = done;
      auto log = train_rvq(
          model, parts, tc, stage_seed,
          [&](const TrainLogEntry& e) {
            append_jsonl(paths.log(name), json{{"step", base + e.step},
                                               {"loss", e.loss},
                                               {"recon", e.recon},
                                               {"commit", e.aux}});
          },
          &adam, &rng);
      for (auto& e : log) {
        e.step += base;
        full_log.push_back(e);
      }
      done += chunk;
      model.save(ckpt, stage_meta_json(done, rng, adam, cfg));
    }
    write_loss_plot(paths.plots_dir() / ("loss_" + name + ".csv"),
                    paths.plots_dir() / ("loss_" + name + ".svg"), full_log);
  }
}

StyleEncoder train_style_encoder(const RunConfig& cfg, const RunPaths& paths,
                                 const std::vector<LoadedClip>& clips, bool full_body,
                                 bool fresh, const std::string& ckpt_name) {
  PartLayout layout = layout_from(cfg);
  StyleEncoderConfig sc = style_cfg_from(cfg, full_body);
  uint64_t stage_seed = derive_seed(cfg.seed, full_body ? 0x2201 : 0x2200);

  std::vector<MotionClip> motion;
  motion.reserve(clips.size());
  for (const auto& lc : clips) motion.push_back(lc.clip);

  StyleEncoder model(sc, layout, stage_seed);
  Rng rng(derive_seed(stage_seed, 0x517e));
  Adam adam(cfg.style_lr);
  int done = 0;
  auto ckpt = paths.checkpoint(ckpt_name);
  if (!fresh && std::filesystem::exists(ckpt)) {
    json meta;
    model = StyleEncoder::load_from(ckpt, &meta);
    const StyleEncoderConfig& lc = model.config();
    require_same_arch(lc.d_model == sc.d_model && lc.layers == sc.layers &&
                          lc.heads == sc.heads && lc.t_window == sc.t_window &&
                          lc.full_body == sc.full_body && model.layout() == layout,
                      ckpt_name);
    auto sm = stage_meta_from(meta);
    done = sm.step;
    adam.set_step_count(sm.adam_steps);
    if (!sm.rng_state.empty()) rng.set_state(sm.rng_state);
  } else {
    std::filesystem::remove(paths.log(ckpt_name));
  }

  std::vector<TrainLogEntry> full_log;
  while (done < cfg.style_steps) {
    int chunk = std::min(cfg.checkpoint_save_every, cfg.style_steps - done);
    StyleTrainConfig tc;
    tc.steps = chunk;
    tc.batch_size = cfg.style_batch_size;
    tc.lr = cfg.style_lr;
    int base = done;
    auto log = train_style(
        model, motion, tc, stage_seed,
        [&](const TrainLogEntry& e) {
          append_jsonl(paths.log(ckpt_name), json{{"step", base + e.step}, {"loss", e.loss}});
        },
        &adam, &rng);
    for (auto& e : log) {
      e.step += base;
      full_log.push_back(e);
    }
    done += chunk;
    model.save(ckpt, stage_meta_json(done, rng, adam, cfg));
  }
  if (!full_log.empty()) {
    write_loss_plot(paths.plots_dir() / ("loss_" + ckpt_name + ".csv"),
                    paths.plots_dir() / ("loss_" + ckpt_name + ".svg"), full_log);
  }
  return model;
}

void dump_style_embeddings(const RunPaths& paths, const StyleEncoder& encoder,
                           const std::vector<LoadedClip>& clips) {
  io::ensure_dir(paths.reports_dir());
  std::ostringstream csv;
  csv << "clip,part";
  for (int j = 0; j < encoder.config().d_model; ++j) csv << ",e" << j;
  csv << "\n";
  for (const auto& lc : clips) {
    StyleEmbedding emb = encoder.encode(lc.clip);
    for (int p = 0; p < kNumParts; ++p) {
      csv << lc.meta.clip_file << "," << kPartNames[p];
      for (int64_t j = 0; j < emb.parts[p].numel(); ++j) csv << "," << emb.parts[p].at(j);
      csv << "\n";
    }
  }
  io::write_file(paths.reports_dir() / "style_embeddings.csv", csv.str());
}

void train_style_stage(const RunConfig& cfg, const RunPaths& paths, const Manifest& manifest,
                       bool fresh) {
  auto clips = load_split(paths, manifest, Split::train);
  MP_REQUIRE(!clips.empty(), "train split is empty");
  io::ensure_dir(paths.checkpoints_dir());
  io::ensure_dir(paths.logs_dir());
  io::ensure_dir(paths.plots_dir());

  StyleEncoder encoder = train_style_encoder(cfg, paths, clips, false, fresh, "style");

  // The SRA classifier trains fresh once the encoder stage completes.
  PartLayout layout = layout_from(cfg);
  StyleClassifier classifier(classifier_cfg_from(cfg), layout, cfg.data_n_styles,
                             derive_seed(cfg.seed, 0x2300));
  std::vector<MotionClip> motion;
  for (const auto& lc : clips) motion.push_back(lc.clip);
  auto log = classifier.train(motion, cfg.classifier_steps, cfg.classifier_batch_size,
                              cfg.classifier_lr, derive_seed(cfg.seed, 0x2301));
  std::filesystem::remove(paths.log("classifier"));
  for (const auto& e : log) {
    append_jsonl(paths.log("classifier"), json{{"step", e.step}, {"loss", e.loss}});
  }
  classifier.save(paths.checkpoint("classifier"));
  write_loss_plot(paths.plots_dir() / "loss_classifier.csv",
                  paths.plots_dir() / "loss_classifier.svg", log);

  auto test_clips = load_split(paths, manifest, Split::test);
  if (!test_clips.empty()) dump_style_embeddings(paths, encoder, test_clips);
}

struct DiffusionBundle {
  std::vector<RvqModel> codecs;
  StyleEncoder style;
  DiffusionBundle(std::vector<RvqModel> c, StyleEncoder s)
      : codecs(std::move(c)), style(std::move(s)) {}
  std::array<const RvqModel*, kNumParts> codec_ptrs() const {
    return {&codecs[0], &codecs[1], &codecs[2]};
  }
};

DiffusionBundle load_prereqs(const RunConfig& cfg, const RunPaths& paths, Variant variant) {
  std::vector<RvqModel> codecs;
  for (int part = 0; part < kNumParts; ++part) {
    auto ckpt = paths.checkpoint(std::string("rvq_") + kPartNames[part]);
    if (!std::filesystem::exists(ckpt)) {
      throw Error::prerequisite("missing codec checkpoint " + ckpt.string() +
                                "; run train --stage rvq first");
    }
    codecs.push_back(RvqModel::load_from(ckpt));
  }
  std::string style_name = variant == Variant::no_part_style ? "style_fullbody" : "style";
  auto style_ckpt = paths.checkpoint(style_name);
  if (!std::filesystem::exists(style_ckpt)) {
    throw Error::prerequisite("missing style checkpoint " + style_ckpt.string() +
                              "; run train --stage style first");
  }
  return DiffusionBundle(std::move(codecs), StyleEncoder::load_from(style_ckpt));
}

CondBatch strip_for_variant(const CondBatch& conds, Variant variant) {
  CondBatch out = conds;
  if (variant == Variant::no_rhythm || variant == Variant::no_rhythm_emotion) {
    out.rhythm.reset();
  }
  if (variant == Variant::no_emotion || variant == Variant::no_rhythm_emotion) {
    out.emotion.reset();
  }
  return out;
}

std::string diffusion_ckpt_name(Variant variant) {
  return variant == Variant::full ? "diffusion"
                                  : std::string("diffusion_") + variant_name(variant);
}

void train_diffusion_variant(const RunConfig& cfg, const RunPaths& paths,
                             const Manifest& manifest, Variant variant, bool fresh) {
  auto bundle = load_prereqs(cfg, paths, variant);
  auto clips = load_split(paths, manifest, Split::train);
  auto samples = prepare_latents(clips, bundle.codec_ptrs(), bundle.style, cfg);

  DenoiserConfig dc = denoiser_cfg_from(cfg);
  NoiseSchedule schedule = NoiseSchedule::make(dc.t_steps, dc.schedule);
  uint64_t stage_seed = derive_seed(cfg.seed, 0x3300 + static_cast<int>(variant));
  std::string name = diffusion_ckpt_name(variant);

  Denoiser model(dc, stage_seed);
  Rng rng(derive_seed(stage_seed, 0xd1f));
  Adam adam(cfg.diffusion_lr);
  int done = 0;
  auto ckpt = paths.checkpoint(name);
  if (!fresh && std::filesystem::exists(ckpt)) {
    json meta;
    model = Denoiser::load_from(ckpt, &meta);
    const DenoiserConfig& lc = model.config();
    require_same_arch(lc.layer_pairs == dc.layer_pairs && lc.latent_dim == dc.latent_dim &&
                          lc.heads == dc.heads && lc.t_steps == dc.t_steps &&
                          lc.rvq_latent_dim == dc.rvq_latent_dim && lc.d_style == dc.d_style,
                      name);
    auto sm = stage_meta_from(meta);
    done = sm.step;
    adam.set_step_count(sm.adam_steps);
    if (!sm.rng_state.empty()) rng.set_state(sm.rng_state);
  } else {
    std::filesystem::remove(paths.log(name));
  }

  int n_tokens = samples[0].z0[0].dim(0);
  int batch = std::min(cfg.diffusion_batch_size, static_cast<int>(samples.size()));
  auto assemble = [&](const std::vector<int>& picks) {
    std::array<std::vector<Tensor>, kNumParts> z0, style;
    std::vector<Tensor> content, rhythm, emotion;
    for (int idx : picks) {
      const LatentSample& s = samples[idx];
      for (int p = 0; p < kNumParts; ++p) {
        z0[p].push_back(s.z0[p].reshaped({1, n_tokens, cfg.rvq_latent_dim}));
        style[p].push_back(s.style[p].reshaped({1, cfg.style_d_model}));
      }
      content.push_back(s.content.reshaped({1, n_tokens, cfg.data_d_content}));
      rhythm.push_back(s.rhythm.reshaped({1, n_tokens, cfg.data_d_rhythm}));
      emotion.push_back(s.emotion.reshaped({1, n_tokens, cfg.data_d_emotion}));
    }
    std::array<Tensor, kNumParts> z0_b;
    CondBatch conds;
    std::array<Tensor, kNumParts> style_b;
    for (int p = 0; p < kNumParts; ++p) {
      z0_b[p] = ops::concat(z0[p], 0);
      style_b[p] = ops::concat(style[p], 0);
    }
    conds.style = style_b;
    conds.content = ops::concat(content, 0);
    conds.rhythm = ops::concat(rhythm, 0);
    conds.emotion = ops::concat(emotion, 0);
    return std::make_pair(z0_b, strip_for_variant(conds, variant));
  };

  std::vector<TrainLogEntry> full_log;
  while (done < cfg.diffusion_steps) {
    int chunk = std::min(cfg.checkpoint_save_every, cfg.diffusion_steps - done);
    for (int k = 0; k < chunk; ++k) {
      std::vector<int> picks(batch);
      for (auto& v : picks) v = rng.uniform_int(0, static_cast<int>(samples.size()) - 1);
      auto [z0_b, conds] = assemble(picks);
      auto stats = diffusion_train_step(model, z0_b, conds, schedule, adam, rng);
      TrainLogEntry e;
      e.step = done + k;
      e.loss = stats.loss;
      full_log.push_back(e);
      append_jsonl(paths.log(name),
                   json{{"step", e.step},
                        {"loss", stats.loss},
                        {"dropped_style", stats.dropped_style},
                        {"dropped_content", stats.dropped_content},
                        {"dropped_rhythm_emotion", stats.dropped_rhythm_emotion}});
    }
    done += chunk;
    model.save(ckpt, stage_meta_json(done, rng, adam, cfg));
  }
  if (!full_log.empty()) {
    write_loss_plot(paths.plots_dir() / ("loss_" + name + ".csv"),
                    paths.plots_dir() / ("loss_" + name + ".svg"), full_log);
  }
}

}  // namespace

void cmd_train(const RunConfig& cfg, const RunPaths& paths, const std::string& stage,
               bool fresh) {
  Manifest manifest = load_manifest_checked(cfg, paths);
  io::ensure_dir(paths.checkpoints_dir());
  io::ensure_dir(paths.logs_dir());
  io::ensure_dir(paths.plots_dir());
  if (stage == "rvq") {
    train_rvq_stage(cfg, paths, manifest, fresh);
  } else if (stage == "style") {
    train_style_stage(cfg, paths, manifest, fresh);
  } else if (stage == "diffusion") {
    train_diffusion_variant(cfg, paths, manifest, Variant::full, fresh);
  } else {
    throw Error::validation("unknown training stage: " + stage +
                            " (expected rvq | style | diffusion)");
  }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

nlohmann::json cmd_generate(const RunConfig& cfg, const RunPaths& paths,
                            const GenerateRequest& req) {
  Manifest manifest = load_manifest_checked(cfg, paths);
  auto bundle = load_prereqs(cfg, paths, req.variant);
  auto diff_ckpt = paths.checkpoint(diffusion_ckpt_name(req.variant));
  if (!std::filesystem::exists(diff_ckpt)) {
    throw Error::prerequisite("missing denoiser checkpoint " + diff_ckpt.string());
  }
  Denoiser model = Denoiser::load_from(diff_ckpt);
  NoiseSchedule schedule = NoiseSchedule::make(model.config().t_steps, model.config().schedule);

  int n_clips = req.n_clips > 0 ? req.n_clips : cfg.generate_n_clips;
  uint64_t seed = req.seed != 0 ? req.seed : cfg.seed;
  GuidanceWeights weights = req.weights.value_or(GuidanceWeights{
      cfg.generate_weight_content, cfg.generate_weight_style,
      cfg.generate_weight_rhythm_emotion});
  int n_steps = req.n_steps > 0 ? req.n_steps : cfg.generate_n_steps;
  PartLayout layout = layout_from(cfg);

  auto out_dir = paths.generated_dir(req.tag);
  io::ensure_dir(out_dir);

  // Reference clips per intended style (style extraction source).
  auto reference_for = [&](int style) -> std::pair<MotionClip, std::string> {
    if (req.reference_clip_path.has_value()) {
      return {MotionClip::load(*req.reference_clip_path), *req.reference_clip_path};
    }
    for (const auto& e : manifest.entries) {
      if (e.style == style && e.split == Split::train) {
        return {MotionClip::load(paths.dataset_dir() / e.clip_file), e.clip_file};
      }
    }
    throw Error::validation("no training clip with style " + std::to_string(style));
  };

  std::optional<SpeechFeatures> file_audio;
  std::string audio_hash;
  if (req.audio_features_path.has_value()) {
    file_audio = SpeechFeatures::load(*req.audio_features_path);
    audio_hash = io::hash_file(*req.audio_features_path);
  }

  json items = json::array();
  for (int i = 0; i < n_clips; ++i) {
    int intended = req.style.value_or(i % cfg.data_n_styles);
    auto [reference, ref_name] = reference_for(intended);
    StyleEmbedding emb = bundle.style.encode(reference);

    SpeechFeatures audio;
    double tempo = 0.0;
    int emotion = 0;
    if (file_audio.has_value()) {
      audio = align_features(*file_audio, cfg.data_fps,
                             (static_cast<int>(file_audio->frames() * cfg.data_fps /
                                               file_audio->fps) / 4) * 4);
      emotion = audio.emotion_label.value_or(0);
    } else {
      Rng pick(derive_seed(seed, 0x9e00 + i));
      tempo = pick.uniform(cfg.data_tempo_min, cfg.data_tempo_max);
      emotion = pick.uniform_int(0, cfg.data_n_emotions - 1);
      audio = synth_speech(tempo, emotion, cfg.data_frames, cfg.data_fps,
                           derive_seed(seed, 0x5e00 + i), speech_cfg_from(cfg));
    }
    int frames = audio.frames();
    int n_tokens = frames / RvqConfig::downscale;
    SpeechFeatures aligned = align_to_tokens(audio, cfg.data_fps, n_tokens);

    CondBatch conds;
    std::array<Tensor, kNumParts> style_b;
    for (int p = 0; p < kNumParts; ++p) {
      style_b[p] = emb.parts[p].reshaped({1, cfg.style_d_model});
    }
    conds.style = style_b;
    conds.content = aligned.content.reshaped({1, n_tokens, cfg.data_d_content});
    conds.rhythm = aligned.rhythm.reshaped({1, n_tokens, cfg.data_d_rhythm});
    conds.emotion = aligned.emotion.reshaped({1, n_tokens, cfg.data_d_emotion});
    conds = strip_for_variant(conds, req.variant);

    uint64_t clip_seed = derive_seed(seed, 0xc11b + i);
    auto latents = sample_latents(model, schedule, conds, weights, n_steps, n_tokens,
                                  clip_seed);
    std::array<Tensor, kNumParts> decoded;
    for (int p = 0; p < kNumParts; ++p) {
      RqResult rq = rq_forward(latents[p], bundle.codecs[p].codebooks(), RqMode::eval, 0.0,
                               nullptr);
      decoded[p] = bundle.codecs[p].decode_eval(rq.quantized_sum);
      if (req.export_indices) {
        save_rq_indices(out_dir / ("clip_" + zero_pad(i, 4) + "_indices_" +
                                   kPartNames[p] + ".mpqi"),
                        rq);
      }
    }
    MotionClip clip;
    clip.values = concat_parts(layout, decoded);
    clip.fps = cfg.data_fps;
    clip.layout = layout;
    clip.style_label = intended;
    std::string clip_file = "clip_" + zero_pad(i, 4) + ".mpcl";
    clip.save(out_dir / clip_file);

    json item;
    item["clip"] = clip_file;
    item["intended_style"] = intended;
    item["emotion"] = emotion;
    item["tempo"] = tempo;
    item["seed"] = clip_seed;
    item["reference"] = ref_name;
    if (audio.beat_times.has_value()) item["beats"] = *audio.beat_times;
    item["clip_hash"] = io::hash_file(out_dir / clip_file);
    item["reference_hash"] = io::hex64(io::fnv1a64(ref_name));
    if (!audio_hash.empty()) item["audio_hash"] = audio_hash;
    items.push_back(std::move(item));
  }

  json doc;
  doc["seed"] = seed;
  doc["weights"] = {{"content", weights.w_c},
                    {"style", weights.w_s},
                    {"rhythm_emotion", weights.w_re}};
  doc["n_steps"] = n_steps;
  doc["schedule"] = model.config().schedule;
  doc["t_steps"] = model.config().t_steps;
  doc["variant"] = variant_name(req.variant);
  doc["config_hash"] = cfg.hash();
  doc["items"] = std::move(items);
  io::write_file(out_dir / "sampling_manifest.json", doc.dump(2));
  return doc;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

namespace {

struct EvalSet {
  std::vector<MotionClip> clips;
  std::vector<int> intended;
  std::vector<std::vector<double>> beats;  // may be empty per clip
  std::string source;
};

EvalSet load_generated_set(const RunConfig& cfg, const RunPaths& paths,
                           const Manifest& manifest, const std::string& generated) {
  EvalSet out;
  out.source = generated;
  if (generated.rfind("split:", 0) == 0) {
    std::string sp = generated.substr(6);
    Split split = sp == "train" ? Split::train : (sp == "val" ? Split::val : Split::test);
    MP_REQUIRE(sp == "train" || sp == "val" || sp == "test",
               "unknown split in generated source: " + generated);
    auto loaded = load_split(paths, manifest, split);
    MP_REQUIRE(!loaded.empty(), "split " + sp + " is empty");
    for (auto& lc : loaded) {
      out.clips.push_back(lc.clip);
      out.intended.push_back(lc.meta.style);
      out.beats.push_back(lc.features.beat_times.value_or(std::vector<double>{}));
    }
    return out;
  }
  auto dir = paths.generated_dir(generated);
  auto manifest_path = dir / "sampling_manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw Error::prerequisite("no sampling manifest at " + manifest_path.string() +
                              "; run generate first");
  }
  json doc = json::parse(io::read_file(manifest_path));
  for (const auto& item : doc.at("items")) {
    out.clips.push_back(MotionClip::load(dir / item.at("clip").get<std::string>()));
    out.intended.push_back(item.at("intended_style"));
    out.beats.push_back(item.value("beats", std::vector<double>{}));
  }
  MP_REQUIRE(!out.clips.empty(), "generated set is empty");
  return out;
}

}  // namespace

nlohmann::json cmd_evaluate(const RunConfig& cfg, const RunPaths& paths,
                            const EvaluateRequest& req) {
  Manifest manifest = load_manifest_checked(cfg, paths);
  MP_REQUIRE(!req.metrics.empty(), "metric list is empty");
  for (const auto& m : req.metrics) {
    MP_REQUIRE(m == "fgd" || m == "bc" || m == "diversity" || m == "sra",
               "unknown metric: " + m);
  }
  EvalSet gen = load_generated_set(cfg, paths, manifest, req.generated);

  json rows = json::array();
  auto add_row = [&](const std::string& metric, const std::string& scope, double value,
                     int n) {
    rows.push_back({{"metric", metric}, {"scope", scope}, {"value", value}, {"n", n}});
  };
  const std::array<std::pair<std::string, std::optional<int>>, 4> scopes = {
      std::make_pair(std::string("all"), std::optional<int>{}),
      std::make_pair(std::string("u"), std::optional<int>{kUpper}),
      std::make_pair(std::string("l"), std::optional<int>{kLower}),
      std::make_pair(std::string("h"), std::optional<int>{kHands})};

  for (const auto& metric : req.metrics) {
    if (metric == "fgd") {
      auto style_ckpt = paths.checkpoint("style");
      if (!std::filesystem::exists(style_ckpt)) {
        throw Error::prerequisite("fgd needs the style encoder checkpoint");
      }
      StyleEncoder encoder = StyleEncoder::load_from(style_ckpt);
      auto reference = load_split(paths, manifest, req.reference);
      MP_REQUIRE(!reference.empty(), "reference split is empty");
      std::vector<MotionClip> ref_clips;
      for (auto& lc : reference) ref_clips.push_back(lc.clip);
      for (const auto& [scope, part] : scopes) {
        auto ref_feats = style_features(encoder, ref_clips, part);
        auto gen_feats = style_features(encoder, gen.clips, part);
        double v = fgd(FeatureDist::estimate(ref_feats), FeatureDist::estimate(gen_feats));
        add_row("fgd", scope, v, static_cast<int>(gen.clips.size()));
      }
    } else if (metric == "bc") {
      for (const auto& [scope, part] : scopes) {
        double acc = 0.0;
        int n = 0;
        for (size_t i = 0; i < gen.clips.size(); ++i) {
          if (gen.beats[i].empty()) continue;
          acc += beat_consistency(gen.clips[i], gen.beats[i], cfg.eval_bc_sigma, part);
          ++n;
        }
        MP_REQUIRE(n > 0, "no clips with beat annotations for the bc metric");
        add_row("bc", scope, acc / n, n);
      }
    } else if (metric == "diversity") {
      for (const auto& [scope, part] : scopes) {
        double v = diversity_clips(gen.clips, cfg.eval_diversity_pairs,
                                   derive_seed(cfg.seed, 0xd1e), part);
        add_row("diversity", scope, v, static_cast<int>(gen.clips.size()));
      }
    } else if (metric == "sra") {
      auto cls_ckpt = paths.checkpoint("classifier");
      if (!std::filesystem::exists(cls_ckpt)) {
        throw Error::prerequisite("sra needs the classifier checkpoint");
      }
      StyleClassifier classifier = StyleClassifier::load_from(cls_ckpt);
      double v = sra(classifier, gen.clips, gen.intended);
      add_row("sra", "all", v, static_cast<int>(gen.clips.size()));
    }
  }

  json report;
  report["generated"] = req.generated;
  report["reference"] = split_name(req.reference);
  report["config_hash"] = cfg.hash();
  report["rows"] = rows;

  io::ensure_dir(paths.reports_dir());
  std::string name = req.report_name.empty() ? ("eval_" + req.generated) : req.report_name;
  for (auto& ch : name) {
    if (ch == ':' || ch == '/') ch = '_';
  }
  io::write_file(paths.reports_dir() / (name + ".json"), report.dump(2));
  std::ostringstream csv;
  csv << "metric,scope,value,n,config_hash\n";
  for (const auto& r : rows) {
    csv << r["metric"].get<std::string>() << "," << r["scope"].get<std::string>() << ","
        << r["value"].get<double>() << "," << r["n"].get<int>() << "," << cfg.hash() << "\n";
  }
  io::write_file(paths.reports_dir() / (name + ".csv"), csv.str());
  return report;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

nlohmann::json cmd_ablate(const RunConfig& cfg, const RunPaths& paths,
                          const std::vector<std::string>& rows) {
  Manifest manifest = load_manifest_checked(cfg, paths);
  // Base pipeline must exist.
  if (!std::filesystem::exists(paths.checkpoint("diffusion"))) {
    throw Error::prerequisite("ablation needs the trained base pipeline (diffusion checkpoint)");
  }
  std::vector<Variant> variants = {Variant::full};
  for (const auto& name : rows) {
    Variant v = variant_from_name(name);
    MP_REQUIRE(v != Variant::full, "'full' is the baseline, not an ablation row");
    variants.push_back(v);
  }

  json table;
  for (Variant v : variants) {
    if (v == Variant::no_part_style &&
        !std::filesystem::exists(paths.checkpoint("style_fullbody"))) {
      auto clips = load_split(paths, manifest, Split::train);
      train_style_encoder(cfg, paths, clips, true, false, "style_fullbody");
    }
    if (v != Variant::full &&
        !std::filesystem::exists(paths.checkpoint(diffusion_ckpt_name(v)))) {
      train_diffusion_variant(cfg, paths, manifest, v, false);
    }
    GenerateRequest greq;
    greq.tag = std::string("ablate_") + variant_name(v);
    greq.variant = v;
    greq.seed = derive_seed(cfg.seed, 0xab1a);  // shared across rows
    cmd_generate(cfg, paths, greq);

    EvaluateRequest ereq;
    ereq.generated = greq.tag;
    ereq.report_name = "eval_ablate_" + std::string(variant_name(v));
    json report = cmd_evaluate(cfg, paths, ereq);
    json summary;
    for (const auto& r : report["rows"]) {
      if (r["scope"] == "all") summary[r["metric"].get<std::string>()] = r["value"];
    }
    table[variant_name(v)] = std::move(summary);
  }

  json doc;
  doc["config_hash"] = cfg.hash();
  doc["columns"] = {"fgd", "bc", "diversity", "sra"};
  doc["rows"] = table;
  io::ensure_dir(paths.reports_dir());
  io::write_file(paths.reports_dir() / "ablation.json", doc.dump(2));
  std::ostringstream csv;
  csv << "row,fgd,bc,diversity,sra\n";
  for (auto it = table.begin(); it != table.end(); ++it) {
    csv << it.key();
    for (const char* m : {"fgd", "bc", "diversity", "sra"}) {
      csv << ",";
      if (it.value().contains(m)) csv << it.value()[m].get<double>();
    }
    csv << "\n";
  }
  io::write_file(paths.reports_dir() / "ablation.csv", csv.str());
  return doc;
}

// ---------------------------------------------------------------------------
// gradient suite
// ---------------------------------------------------------------------------

namespace {

json check_module(const std::string& name, ParamStore& params,
                  const std::function<Var(Tape&, ParamBinding&)>& loss_fn) {
  auto names = params.names();
  std::vector<Tensor> point;
  for (const auto& n : names) point.push_back(params.get(n));
  auto fn = [&](Tape& tape, const std::vector<Var>& vars) {
    ParamBinding p(tape, params);
    for (size_t i = 0; i < names.size(); ++i) p.preset(names[i], vars[i]);
    return loss_fn(tape, p);
  };
  auto t0 = std::chrono::steady_clock::now();
  auto report = grad_check(fn, point, 1e-5);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return json{{"module", name},
              {"params", params.total_params()},
              {"max_rel_err", report.max_rel_err},
              {"checked", report.n_checked},
              {"pass", report.pass},
              {"seconds", secs}};
}

}  // namespace

nlohmann::json grad_check_suite() {
  json rows = json::array();
  Rng data_rng(404);

  // Codec: full reconstruction + commitment loss with the quantization frozen
  // at the evaluation point (straight-through path).
  {
    RvqConfig rc;
    rc.hidden = 3;
    rc.latent_dim = 2;
    rc.codebook_size = 4;
    rc.num_layers = 2;
    RvqModel model(rc, 2, 11);
    Tensor m = Tensor::randn({1, 8, 2}, data_rng);
    std::vector<Tensor> sample = {m.reshaped({8, 2})};
    model.init_codebooks(sample, 3);

    Tensor latent0 = model.encode_eval(m.reshaped({8, 2})).reshaped({1, 2, 2});
    RqResult rq = rq_forward(latent0, model.codebooks(), RqMode::eval, 0.0, nullptr);
    Tensor ste_shift = ops::sub(rq.quantized_sum, latent0);

    rows.push_back(check_module("rvq", model.params(), [&](Tape& tape, ParamBinding& p) {
      Var x = tape.constant(m);
      Var latent = model.encode(p, x);
      Var z_q = add(latent, tape.constant(ste_shift));
      Var m_hat = model.decode(p, z_q);
      auto residuals = residual_vars(tape, latent, rq.layer_z);
      return rvq_loss(tape, x, m_hat, residuals, rq.layer_z, rc.beta);
    }));
  }

  // Style encoder through the contrastive loss.
  {
    StyleEncoderConfig sc;
    sc.d_model = 4;
    sc.layers = 1;
    sc.heads = 1;
    sc.ffn_mult = 1;
    PartLayout layout = make_part_layout(2, 2, 2);
    StyleEncoder enc(sc, layout, 5);
    std::vector<Tensor> views;
    for (int i = 0; i < 4; ++i) views.push_back(Tensor::randn({1, 4, 2}, data_rng));
    std::vector<int> pair_ids = {0, 1, 0, 1};

    rows.push_back(check_module("style", enc.params(), [&](Tape& tape, ParamBinding& p) {
      Var total;
      for (int part = 0; part < kNumParts; ++part) {
        Var v = tape.constant(ops::concat(views, 0));
        Var emb = enc.encode_part(p, part, v);
        Var loss = nt_xent(emb, pair_ids, 0.1);
        total = part == 0 ? loss : add(total, loss);
      }
      return total;
    }));
  }

  // Denoiser through the smooth-L1 prediction loss.
  {
    DenoiserConfig dc;
    dc.layer_pairs = 1;
    dc.latent_dim = 6;
    dc.heads = 3;
    dc.t_steps = 10;
    dc.rvq_latent_dim = 2;
    dc.d_style = 3;
    dc.d_content = 2;
    dc.d_rhythm = 2;
    dc.d_emotion = 2;
    dc.t_embed_dim = 4;
    dc.ffn_mult = 1;
    Denoiser model(dc, 21);
    std::array<Tensor, kNumParts> z0, zt;
    for (int i = 0; i < kNumParts; ++i) {
      z0[i] = Tensor::randn({1, 3, 2}, data_rng);
      zt[i] = Tensor::randn({1, 3, 2}, data_rng);
    }
    CondBatch conds;
    std::array<Tensor, kNumParts> style;
    for (int i = 0; i < kNumParts; ++i) style[i] = Tensor::randn({1, 3}, data_rng);
    conds.style = style;
    conds.content = Tensor::randn({1, 3, 2}, data_rng);
    conds.rhythm = Tensor::randn({1, 3, 2}, data_rng);
    conds.emotion = Tensor::randn({1, 3, 2}, data_rng);
    Tensor target = ops::concat({z0[0], z0[1], z0[2]}, 2);

    rows.push_back(check_module("diffusion", model.params(), [&](Tape& tape, ParamBinding& p) {
      std::array<Var, kNumParts> z_vars;
      for (int i = 0; i < kNumParts; ++i) z_vars[i] = tape.constant(zt[i]);
      auto pred = model.forward(p, z_vars, {4}, conds);
      return smooth_l1(concat({pred[0], pred[1], pred[2]}, 2), tape.constant(target));
    }));
  }

  // Classifier through the cross-entropy loss. The backbone and head live in
  // separate stores; merge them for one joint check.
  {
    StyleEncoderConfig sc;
    sc.d_model = 4;
    sc.layers = 1;
    sc.heads = 1;
    sc.ffn_mult = 1;
    PartLayout layout = make_part_layout(2, 2, 2);
    StyleEncoder enc(sc, layout, 9);
    ParamStore merged = enc.params();
    Rng hr(3);
    nn::declare_linear(merged, "head", kNumParts * sc.d_model, 3, hr);
    std::vector<Tensor> windows;
    std::vector<int> labels = {0, 2};
    for (int i = 0; i < 2; ++i) windows.push_back(Tensor::randn({6, 6}, data_rng));

    rows.push_back(check_module("classifier", merged, [&](Tape& tape, ParamBinding& p) {
      std::vector<Var> embs;
      for (int part = 0; part < kNumParts; ++part) {
        std::vector<Tensor> pv;
        for (const auto& w : windows) {
          Tensor part_w = split_channels(w, layout)[part];
          pv.push_back(part_w.reshaped({1, part_w.dim(0), part_w.dim(1)}));
        }
        embs.push_back(enc.encode_part(p, part, tape.constant(ops::concat(pv, 0))));
      }
      Var logits = nn::linear(p, "head", concat(embs, 1));
      std::vector<double> onehot(2 * 3, 0.0);
      for (int b = 0; b < 2; ++b) onehot[b * 3 + labels[b]] = 1.0;
      return scale(neg(sum_all(mul(log_softmax_rows(logits),
                                   tape.constant(Tensor({2, 3}, onehot))))),
                   0.5);
    }));
  }

  json doc;
  doc["rows"] = rows;
  bool all = true;
  for (const auto& r : rows) all = all && r["pass"].get<bool>();
  doc["pass"] = all;
  return doc;
}

// ---------------------------------------------------------------------------
// plots
// ---------------------------------------------------------------------------

void write_loss_plot(const std::filesystem::path& csv_path,
                     const std::filesystem::path& svg_path,
                     const std::vector<TrainLogEntry>& log) {
  if (log.empty()) return;
  std::ostringstream csv;
  csv << "step,loss\n";
  for (const auto& e : log) csv << e.step << "," << e.loss << "\n";
  io::write_file(csv_path, csv.str());

  double lo = log[0].loss, hi = log[0].loss;
  for (const auto& e : log) {
    lo = std::min(lo, e.loss);
    hi = std::max(hi, e.loss);
  }
  if (hi <= lo) hi = lo + 1.0;
  const int width = 640, height = 320, pad = 40;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << pad << "\" y1=\"" << height - pad << "\" x2=\"" << width - pad
      << "\" y2=\"" << height - pad << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\""
      << height - pad << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << pad << "\" y=\"" << pad - 8 << "\" font-size=\"12\">loss "
      << lo << " .. " << hi << " over " << log.size() << " steps</text>\n";
  svg << "<polyline fill=\"none\" stroke=\"#1668cc\" stroke-width=\"1.5\" points=\"";
  for (size_t i = 0; i < log.size(); ++i) {
    double x = pad + (width - 2.0 * pad) * (log.size() == 1 ? 0.5 : static_cast<double>(i) /
                                                                        (log.size() - 1));
    double y = height - pad - (height - 2.0 * pad) * (log[i].loss - lo) / (hi - lo);
    svg << x << "," << y << " ";
  }
  svg << "\"/>\n</svg>\n";
  io::write_file(svg_path, svg.str());
}

}  // namespace mimicparts
