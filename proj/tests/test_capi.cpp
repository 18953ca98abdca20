// Exercises the shared-library surface end to end: handles, error codes,
// and the verb round trip on a miniature run.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <string>

#include <json.hpp>
#include <mimicparts.h>

namespace {

const char* kSmokeConfig = R"({
  "seed": 21,
  "data.clips_per_style": 8,
  "data.frames": 64,
  "data.channels_upper": 6, "data.channels_hands": 4, "data.channels_lower": 4,
  "data.split_train": 0.5, "data.split_val": 0.25, "data.split_test": 0.25,
  "rvq.hidden": 12, "rvq.latent_dim": 6, "rvq.codebook_size": 8, "rvq.steps": 15,
  "rvq.batch_size": 4,
  "style.d_model": 8, "style.layers": 1, "style.heads": 1, "style.t_window": 16,
  "style.steps": 15, "style.batch_size": 4,
  "classifier.d_model": 8, "classifier.layers": 1, "classifier.heads": 1,
  "classifier.t_window": 16, "classifier.steps": 10, "classifier.batch_size": 4,
  "diffusion.latent_dim": 12, "diffusion.heads", 3
})";

std::string smoke_config() {
  // Fix the deliberate typo above at runtime so the constant doubles as a
  // negative test input.
  std::string good = kSmokeConfig;
  auto pos = good.find("\"diffusion.heads\",");
  good.replace(pos, std::strlen("\"diffusion.heads\","), "\"diffusion.heads\":");
  return good;
}

struct Run {
  std::filesystem::path dir;
  explicit Run(const char* name) {
    dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
  }
  ~Run() { std::filesystem::remove_all(dir); }
};

}  // namespace

TEST_CASE("version and default config") {
  CHECK(mp_version() != nullptr);
  const char* defaults = mp_default_config_json();
  REQUIRE(defaults != nullptr);
  auto j = nlohmann::json::parse(defaults, nullptr, false);
  REQUIRE_FALSE(j.is_discarded());
  CHECK(j.contains("seed"));
  CHECK(j.contains("diffusion.t_steps"));
}

TEST_CASE("create rejects bad inputs with validation status") {
  mp_pipeline* p = nullptr;
  CHECK(mp_pipeline_create("{}", "", &p) == MP_ERR_VALIDATION);
  CHECK(std::string(mp_pipeline_last_error(p)).find("run_dir") != std::string::npos);
  mp_pipeline_destroy(p);

  CHECK(mp_pipeline_create("not json", "/tmp/mp_capi_x", &p) == MP_ERR_VALIDATION);
  mp_pipeline_destroy(p);

  CHECK(mp_pipeline_create(R"({"bogus.key": 1})", "/tmp/mp_capi_x", &p) ==
        MP_ERR_VALIDATION);
  CHECK(std::string(mp_pipeline_last_error(p)).find("bogus.key") != std::string::npos);
  // Verbs on an invalid handle keep failing with validation errors.
  CHECK(mp_synth_data(p) == MP_ERR_VALIDATION);
  mp_pipeline_destroy(p);

  // The raw constant with the typo is itself invalid JSON.
  CHECK(mp_pipeline_create(kSmokeConfig, "/tmp/mp_capi_x", &p) == MP_ERR_VALIDATION);
  mp_pipeline_destroy(p);

  mp_pipeline_destroy(nullptr);  // must be a no-op
}

TEST_CASE("verb round trip with error codes") {
  Run run("mp_capi_run");
  mp_pipeline* p = nullptr;
  std::string cfg = smoke_config();
  REQUIRE(mp_pipeline_create(cfg.c_str(), run.dir.c_str(), &p) == MP_OK);

  // Missing prerequisite before the dataset exists.
  CHECK(mp_train(p, "rvq", 0) == MP_ERR_MISSING_PREREQUISITE);

  REQUIRE(mp_synth_data(p) == MP_OK);
  CHECK(std::filesystem::exists(run.dir / "dataset" / "manifest.json"));

  // Ordering violation: diffusion before rvq/style.
  CHECK(mp_train(p, "diffusion", 0) == MP_ERR_MISSING_PREREQUISITE);
  CHECK(mp_train(p, "bogus", 0) == MP_ERR_VALIDATION);

  REQUIRE(mp_train(p, "rvq", 0) == MP_OK);
  REQUIRE(mp_train(p, "style", 0) == MP_OK);
  REQUIRE(mp_train(p, "diffusion", 0) == MP_OK);

  char* manifest = nullptr;
  REQUIRE(mp_generate(p, R"({"n_clips": 2, "tag": "t", "seed": 5})", &manifest) == MP_OK);
  REQUIRE(manifest != nullptr);
  auto doc = nlohmann::json::parse(manifest);
  CHECK(doc["items"].size() == 2);
  mp_string_free(manifest);

  CHECK(mp_generate(p, "{bad json", &manifest) == MP_ERR_VALIDATION);

  char* report = nullptr;
  REQUIRE(mp_evaluate(p, R"({"generated": "t", "metrics": ["diversity"]})", &report) ==
          MP_OK);
  auto rep = nlohmann::json::parse(report);
  CHECK(rep["rows"].size() == 4);
  mp_string_free(report);

  CHECK(mp_evaluate(p, R"({"generated": "nonexistent"})", &report) ==
        MP_ERR_MISSING_PREREQUISITE);
  CHECK(mp_ablate(p, "not_a_row", &report) == MP_ERR_VALIDATION);

  mp_pipeline_destroy(p);
}

TEST_CASE("grad check through the C API") {
  Run run("mp_capi_grad");
  mp_pipeline* p = nullptr;
  REQUIRE(mp_pipeline_create("{}", run.dir.c_str(), &p) == MP_OK);
  char* report = nullptr;
  REQUIRE(mp_grad_check(p, &report) == MP_OK);
  auto doc = nlohmann::json::parse(report);
  CHECK(doc["pass"].get<bool>());
  mp_string_free(report);
  mp_pipeline_destroy(p);
}
