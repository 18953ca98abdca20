#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "mimicparts/io.hpp"
#include "mimicparts/pipeline.hpp"
#include "test_util.hpp"

using namespace mimicparts;

namespace {

RunConfig smoke_config() {
  nlohmann::json j = {
      {"seed", 11},
      {"data.clips_per_style", 12},
      {"data.frames", 64},
      {"data.channels_upper", 8},
      {"data.channels_hands", 6},
      {"data.channels_lower", 4},
      {"data.split_train", 0.7},
      {"data.split_val", 0.15},
      {"data.split_test", 0.15},
      {"rvq.hidden", 16},
      {"rvq.latent_dim", 8},
      {"rvq.codebook_size", 16},
      {"rvq.steps", 40},
      {"rvq.batch_size", 8},
      {"style.d_model", 16},
      {"style.layers", 1},
      {"style.heads", 2},
      {"style.t_window", 16},
      {"style.steps", 50},
      {"style.batch_size", 8},
      {"classifier.d_model", 16},
      {"classifier.layers", 1},
      {"classifier.heads", 2},
      {"classifier.t_window", 16},
      {"classifier.steps", 30},
      {"classifier.batch_size", 8},
      {"diffusion.latent_dim", 24},
      {"diffusion.heads", 6},
      {"diffusion.t_steps", 50},
      {"diffusion.steps", 50},
      {"diffusion.batch_size", 8},
      {"generate.n_steps", 8},
      {"generate.n_clips", 4},
      {"checkpoint.save_every", 20},
  };
  return RunConfig::from_json(j);
}

struct TempRun {
  RunPaths paths;
  explicit TempRun(const std::string& name) {
    paths.root = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(paths.root);
  }
  ~TempRun() { std::filesystem::remove_all(paths.root); }
};

}  // namespace

TEST_CASE("config round-trip, unknown keys, env override") {
  RunConfig def;
  auto j = def.to_json();
  RunConfig back = RunConfig::from_json(j);
  CHECK(back.hash() == def.hash());

  CHECK_THROWS_AS((void)RunConfig::from_json({{"nope", 1}}), Error);
  CHECK_THROWS_AS((void)RunConfig::from_json({{"data.frames", 63}}), Error);

  ::setenv("MIMICPARTS_SEED", "12345", 1);
  RunConfig env = RunConfig::from_json({});
  ::unsetenv("MIMICPARTS_SEED");
  CHECK(env.seed == 12345);

  // Training keys do not affect the dataset hash; data keys do.
  RunConfig more_steps = RunConfig::from_json({{"rvq.steps", 999}});
  CHECK(more_steps.dataset_hash() == def.dataset_hash());
  CHECK(more_steps.hash() != def.hash());
  RunConfig other_data = RunConfig::from_json({{"data.frames", 64}});
  CHECK(other_data.dataset_hash() != def.dataset_hash());
}

TEST_CASE("synth-data is deterministic per seed and validates its manifest") {
  RunConfig cfg = smoke_config();
  TempRun a("mp_run_a"), b("mp_run_b");
  Manifest ma = cmd_synth_data(cfg, a.paths);
  Manifest mb = cmd_synth_data(cfg, b.paths);

  REQUIRE(ma.entries.size() == static_cast<size_t>(cfg.total_clips()));
  std::map<Split, int> counts;
  for (size_t i = 0; i < ma.entries.size(); ++i) {
    const auto& ea = ma.entries[i];
    const auto& eb = mb.entries[i];
    CHECK(ea.clip_hash == eb.clip_hash);          // identical dataset bytes
    CHECK(ea.features_hash == eb.features_hash);
    CHECK(ea.split == eb.split);
    CHECK(std::filesystem::exists(a.paths.dataset_dir() / ea.clip_file));
    CHECK(std::filesystem::exists(a.paths.dataset_dir() / ea.features_file));
    CHECK(ea.style >= 0);
    CHECK(ea.style < cfg.data_n_styles);
    counts[ea.split] += 1;
  }
  CHECK(counts[Split::train] > 0);
  CHECK(counts[Split::val] > 0);
  CHECK(counts[Split::test] > 0);

  // A different seed changes the clip bytes.
  RunConfig cfg2 = cfg;
  cfg2.seed = 12;
  TempRun c("mp_run_c");
  Manifest mc = cmd_synth_data(cfg2, c.paths);
  CHECK(mc.entries[0].clip_hash != ma.entries[0].clip_hash);

  // Loading an entry round-trips through the file format.
  auto loaded = load_split(a.paths, ma, Split::test);
  REQUIRE(!loaded.empty());
  loaded[0].clip.validate();
  loaded[0].features.validate();
}

TEST_CASE("zero-clip request errors") {
  RunConfig cfg = smoke_config();
  cfg.data_clips_per_style = 0;
  TempRun t("mp_run_zero");
  CHECK_THROWS_AS((void)cmd_synth_data(cfg, t.paths), Error);
}

TEST_CASE("stage ordering is enforced") {
  RunConfig cfg = smoke_config();
  TempRun t("mp_run_order");
  // No dataset yet: every stage is blocked.
  CHECK_THROWS_AS(cmd_train(cfg, t.paths, "rvq"), Error);
  cmd_synth_data(cfg, t.paths);
  // Diffusion needs rvq + style checkpoints.
  CHECK_THROWS_AS(cmd_train(cfg, t.paths, "diffusion"), Error);
  CHECK_THROWS_AS(cmd_train(cfg, t.paths, "warp"), Error);
  // Generate needs the trained pipeline.
  GenerateRequest req;
  CHECK_THROWS_AS((void)cmd_generate(cfg, t.paths, req), Error);
}

TEST_CASE("training, resume equivalence, generation determinism") {
  RunConfig cfg = smoke_config();
  TempRun t("mp_run_train");
  cmd_synth_data(cfg, t.paths);

  // Interrupted-at-checkpoint run: train to 20, then ask for 40 (resumes),
  // against a straight 40-step run in a second directory.
  RunConfig cfg_short = cfg;
  cfg_short.rvq_steps = 20;
  cmd_train(cfg_short, t.paths, "rvq");
  cmd_train(cfg, t.paths, "rvq");  // resumes from step 20

  TempRun u("mp_run_train_straight");
  cmd_synth_data(cfg, u.paths);
  cmd_train(cfg, u.paths, "rvq");

  for (const char* part : {"upper", "hands", "lower"}) {
    auto a = io::load_checkpoint(t.paths.checkpoint(std::string("rvq_") + part));
    auto b = io::load_checkpoint(u.paths.checkpoint(std::string("rvq_") + part));
    REQUIRE(a.params.entries().size() == b.params.entries().size());
    for (size_t i = 0; i < a.params.entries().size(); ++i) {
      CHECK(mptest::bitwise_equal(a.params.entries()[i].value, b.params.entries()[i].value));
    }
  }
  // The resumed log continues from the pre-interrupt loss (bit-exact here,
  // comfortably inside the 5% contract).
  {
    std::istringstream tl(io::read_file(t.paths.log("rvq_upper")));
    std::vector<double> t_losses;
    std::string line;
    while (std::getline(tl, line)) {
      t_losses.push_back(nlohmann::json::parse(line)["loss"].get<double>());
    }
    std::istringstream ul(io::read_file(u.paths.log("rvq_upper")));
    std::vector<double> u_losses;
    while (std::getline(ul, line)) {
      u_losses.push_back(nlohmann::json::parse(line)["loss"].get<double>());
    }
    REQUIRE(t_losses.size() == u_losses.size());
    CHECK(t_losses[20] == u_losses[20]);
    double rel = std::abs(t_losses[20] - t_losses[19]) / t_losses[19];
    CHECK(rel < 0.05);
  }

  cmd_train(cfg, t.paths, "style");
  cmd_train(cfg, t.paths, "diffusion");
  CHECK(std::filesystem::exists(t.paths.checkpoint("style")));
  CHECK(std::filesystem::exists(t.paths.checkpoint("classifier")));
  CHECK(std::filesystem::exists(t.paths.checkpoint("diffusion")));
  CHECK(std::filesystem::exists(t.paths.reports_dir() / "style_embeddings.csv"));
  CHECK(std::filesystem::exists(t.paths.plots_dir() / "loss_diffusion.svg"));

  // Generation: fixed seed reproduces clip hashes; different guidance
  // weights change them.
  GenerateRequest req;
  req.tag = "g1";
  req.seed = 99;
  auto m1 = cmd_generate(cfg, t.paths, req);
  req.tag = "g2";
  auto m2 = cmd_generate(cfg, t.paths, req);
  req.tag = "g3";
  req.weights = GuidanceWeights{0.0, 0.0, 0.0};
  auto m3 = cmd_generate(cfg, t.paths, req);
  for (size_t i = 0; i < m1["items"].size(); ++i) {
    CHECK(m1["items"][i]["clip_hash"] == m2["items"][i]["clip_hash"]);
    CHECK(m1["items"][i]["clip_hash"] != m3["items"][i]["clip_hash"]);
  }
  // Output length follows the conditioning feature length.
  auto clip = MotionClip::load(t.paths.generated_dir("g1") /
                               m1["items"][0]["clip"].get<std::string>());
  CHECK(clip.frames() == cfg.data_frames);

  // Style from reference A + audio of length B: matches B's length. Use a
  // short imported feature file.
  auto audio = synth_speech(100.0, 1, 48, cfg.data_fps, 5,
                            SpeechSynthConfig{cfg.data_d_content, cfg.data_d_rhythm,
                                              cfg.data_d_emotion, cfg.data_n_emotions});
  auto audio_path = t.paths.root / "imported.mpsf";
  audio.save(audio_path);
  GenerateRequest req_audio;
  req_audio.tag = "g_audio";
  req_audio.audio_features_path = audio_path.string();
  req_audio.n_clips = 1;
  req_audio.export_indices = true;
  auto ma = cmd_generate(cfg, t.paths, req_audio);
  auto aclip = MotionClip::load(t.paths.generated_dir("g_audio") /
                                ma["items"][0]["clip"].get<std::string>());
  CHECK(aclip.frames() == 48);
  CHECK(std::filesystem::exists(t.paths.generated_dir("g_audio") /
                                "clip_0000_indices_upper.mpqi"));

  // Evaluate: metric subset and the self-comparison baseline.
  EvaluateRequest ereq;
  ereq.generated = "g1";
  ereq.metrics = {"bc"};
  auto report = cmd_evaluate(cfg, t.paths, ereq);
  for (const auto& row : report["rows"]) CHECK(row["metric"] == "bc");
  CHECK(report["rows"].size() == 4);  // all, u, l, h

  EvaluateRequest self;
  self.generated = "split:test";
  self.metrics = {"fgd", "sra"};
  auto self_report = cmd_evaluate(cfg, t.paths, self);
  for (const auto& row : self_report["rows"]) {
    if (row["metric"] == "fgd") CHECK(std::abs(row["value"].get<double>()) < 0.05);
  }
  CHECK(std::filesystem::exists(t.paths.reports_dir() / "eval_split_test.json"));
  CHECK(std::filesystem::exists(t.paths.reports_dir() / "eval_split_test.csv"));

  // Dataset-defining config changes are rejected against this run dir.
  RunConfig other = cfg;
  other.data_clips_per_style = 13;
  CHECK_THROWS_AS(cmd_train(other, t.paths, "rvq"), Error);
}

TEST_CASE("gradient suite passes for every module") {
  auto doc = grad_check_suite();
  CHECK(doc["pass"].get<bool>());
  CHECK(doc["rows"].size() == 4);
  for (const auto& r : doc["rows"]) {
    CAPTURE(r["module"].get<std::string>());
    CHECK(r["pass"].get<bool>());
    CHECK(r["params"].get<int>() <= 1000);
    CHECK(r["max_rel_err"].get<double>() < 1e-4);
  }
}
