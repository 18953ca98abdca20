#include "mimicparts/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <vector>

#include "mimicparts/io.hpp"

namespace mimicparts {

namespace {

struct Field {
  const char* key;
  std::function<nlohmann::json(const RunConfig&)> get;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
};

#define MP_FIELD(KEY, MEMBER)                                            \
  Field{KEY, [](const RunConfig& c) { return nlohmann::json(c.MEMBER); }, \
        [](RunConfig& c, const nlohmann::json& v) { v.get_to(c.MEMBER); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      MP_FIELD("seed", seed),
      MP_FIELD("threads", threads),
      MP_FIELD("data.n_styles", data_n_styles),
      MP_FIELD("data.clips_per_style", data_clips_per_style),
      MP_FIELD("data.frames", data_frames),
      MP_FIELD("data.fps", data_fps),
      MP_FIELD("data.channels_upper", data_channels_upper),
      MP_FIELD("data.channels_hands", data_channels_hands),
      MP_FIELD("data.channels_lower", data_channels_lower),
      MP_FIELD("data.tempo_min", data_tempo_min),
      MP_FIELD("data.tempo_max", data_tempo_max),
      MP_FIELD("data.n_emotions", data_n_emotions),
      MP_FIELD("data.split_train", data_split_train),
      MP_FIELD("data.split_val", data_split_val),
      MP_FIELD("data.split_test", data_split_test),
      MP_FIELD("data.d_content", data_d_content),
      MP_FIELD("data.d_rhythm", data_d_rhythm),
      MP_FIELD("data.d_emotion", data_d_emotion),
      MP_FIELD("rvq.num_layers", rvq_num_layers),
      MP_FIELD("rvq.codebook_size", rvq_codebook_size),
      MP_FIELD("rvq.latent_dim", rvq_latent_dim),
      MP_FIELD("rvq.hidden", rvq_hidden),
      MP_FIELD("rvq.beta", rvq_beta),
      MP_FIELD("rvq.quantizer_dropout", rvq_quantizer_dropout),
      MP_FIELD("rvq.ema_decay", rvq_ema_decay),
      MP_FIELD("rvq.dead_usage_threshold", rvq_dead_usage_threshold),
      MP_FIELD("rvq.steps", rvq_steps),
      MP_FIELD("rvq.batch_size", rvq_batch_size),
      MP_FIELD("rvq.lr", rvq_lr),
      MP_FIELD("style.d_model", style_d_model),
      MP_FIELD("style.layers", style_layers),
      MP_FIELD("style.heads", style_heads),
      MP_FIELD("style.t_window", style_t_window),
      MP_FIELD("style.temperature", style_temperature),
      MP_FIELD("style.ffn_mult", style_ffn_mult),
      MP_FIELD("style.steps", style_steps),
      MP_FIELD("style.batch_size", style_batch_size),
      MP_FIELD("style.lr", style_lr),
      MP_FIELD("classifier.d_model", classifier_d_model),
      MP_FIELD("classifier.layers", classifier_layers),
      MP_FIELD("classifier.heads", classifier_heads),
      MP_FIELD("classifier.t_window", classifier_t_window),
      MP_FIELD("classifier.steps", classifier_steps),
      MP_FIELD("classifier.batch_size", classifier_batch_size),
      MP_FIELD("classifier.lr", classifier_lr),
      MP_FIELD("diffusion.layer_pairs", diffusion_layer_pairs),
      MP_FIELD("diffusion.latent_dim", diffusion_latent_dim),
      MP_FIELD("diffusion.heads", diffusion_heads),
      MP_FIELD("diffusion.t_steps", diffusion_t_steps),
      MP_FIELD("diffusion.schedule", diffusion_schedule),
      MP_FIELD("diffusion.t_embed_dim", diffusion_t_embed_dim),
      MP_FIELD("diffusion.cond_dropout", diffusion_cond_dropout),
      MP_FIELD("diffusion.ffn_mult", diffusion_ffn_mult),
      MP_FIELD("diffusion.steps", diffusion_steps),
      MP_FIELD("diffusion.batch_size", diffusion_batch_size),
      MP_FIELD("diffusion.lr", diffusion_lr),
      MP_FIELD("generate.weight_content", generate_weight_content),
      MP_FIELD("generate.weight_style", generate_weight_style),
      MP_FIELD("generate.weight_rhythm_emotion", generate_weight_rhythm_emotion),
      MP_FIELD("generate.n_steps", generate_n_steps),
      MP_FIELD("generate.n_clips", generate_n_clips),
      MP_FIELD("eval.bc_sigma", eval_bc_sigma),
      MP_FIELD("eval.diversity_pairs", eval_diversity_pairs),
      MP_FIELD("checkpoint.save_every", checkpoint_save_every),
  };
  return table;
}

#undef MP_FIELD

}  // namespace

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  for (const auto& f : fields()) j[f.key] = f.get(*this);
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& overrides) {
  MP_REQUIRE(overrides.is_object() || overrides.is_null(),
             "config must be a JSON object of flat dotted keys");
  RunConfig cfg;
  if (overrides.is_object()) {
    for (auto it = overrides.begin(); it != overrides.end(); ++it) {
      bool known = false;
      for (const auto& f : fields()) {
        if (it.key() == f.key) {
          try {
            f.set(cfg, it.value());
          } catch (const nlohmann::json::exception& e) {
            throw Error::validation("config key '" + it.key() + "': " + e.what());
          }
          known = true;
          break;
        }
      }
      MP_REQUIRE(known, "unknown config key: " + it.key());
    }
  }
  if (const char* env = std::getenv("MIMICPARTS_SEED")) {
    cfg.seed = std::strtoull(env, nullptr, 10);
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error::io("cannot open config " + path.string());
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded()) throw Error::validation("config file is not valid JSON");
  return from_json(j);
}

void RunConfig::validate() const {
  MP_REQUIRE(threads >= 1, "threads must be >= 1");
  MP_REQUIRE(data_n_styles >= 1 && data_clips_per_style >= 0, "bad dataset sizes");
  MP_REQUIRE(data_frames >= 4 && data_frames % 4 == 0,
             "data.frames must be a positive multiple of 4");
  MP_REQUIRE(data_channels_upper >= 1 && data_channels_hands >= 1 && data_channels_lower >= 1,
             "every region needs at least one channel");
  MP_REQUIRE(std::abs(data_split_train + data_split_val + data_split_test - 1.0) < 1e-9,
             "split ratios must sum to 1");
  MP_REQUIRE(data_n_emotions >= 1 && data_n_emotions <= 8, "data.n_emotions must be in [1, 8]");
  MP_REQUIRE(rvq_num_layers >= 1 && rvq_codebook_size >= 1 && rvq_latent_dim >= 1,
             "bad rvq dimensions");
  MP_REQUIRE(style_d_model % style_heads == 0, "style.d_model must divide by style.heads");
  MP_REQUIRE(classifier_d_model % classifier_heads == 0,
             "classifier.d_model must divide by classifier.heads");
  MP_REQUIRE(diffusion_heads % 3 == 0 && diffusion_latent_dim % diffusion_heads == 0,
             "diffusion heads must divide the latent dim and split across three regions");
  MP_REQUIRE(diffusion_schedule == "linear" || diffusion_schedule == "cosine",
             "diffusion.schedule must be linear or cosine");
  MP_REQUIRE(generate_n_steps >= 1 && generate_n_steps <= diffusion_t_steps,
             "generate.n_steps must lie in [1, diffusion.t_steps]");
  MP_REQUIRE(eval_bc_sigma > 0.0, "eval.bc_sigma must be positive");
}

std::string RunConfig::hash() const { return io::hash_json(to_json()); }

std::string RunConfig::dataset_hash() const {
  nlohmann::json full = to_json();
  nlohmann::json subset;
  for (auto it = full.begin(); it != full.end(); ++it) {
    if (it.key() == "seed" || it.key().rfind("data.", 0) == 0) subset[it.key()] = it.value();
  }
  return io::hash_json(subset);
}

}  // namespace mimicparts
