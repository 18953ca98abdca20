#include "mimicparts.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "mimicparts/pipeline.hpp"

using namespace mimicparts;

struct mp_pipeline {
  RunConfig cfg;
  RunPaths paths;
  bool cfg_ok = false;
  std::string last_error;
};

namespace {

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

mp_status status_from(ErrorCode code) {
  switch (code) {
    case ErrorCode::validation: return MP_ERR_VALIDATION;
    case ErrorCode::missing_prerequisite: return MP_ERR_MISSING_PREREQUISITE;
    case ErrorCode::io: return MP_ERR_IO;
    case ErrorCode::internal: return MP_ERR_INTERNAL;
  }
  return MP_ERR_INTERNAL;
}

template <typename Fn>
mp_status run_guarded(mp_pipeline* p, Fn&& fn) {
  if (p == nullptr) return MP_ERR_VALIDATION;
  if (!p->cfg_ok) return MP_ERR_VALIDATION;
  p->last_error.clear();
  try {
    fn();
    return MP_OK;
  } catch (const Error& e) {
    p->last_error = e.what();
    return status_from(e.code());
  } catch (const std::exception& e) {
    p->last_error = e.what();
    return MP_ERR_INTERNAL;
  } catch (...) {
    p->last_error = "unknown error";
    return MP_ERR_INTERNAL;
  }
}

Split split_from(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw Error::validation("unknown split: " + name);
}

}  // namespace

extern "C" {

const char* mp_version(void) { return "0.1.0"; }

const char* mp_default_config_json(void) {
  static const std::string doc = RunConfig{}.to_json().dump(2);
  return doc.c_str();
}

mp_status mp_pipeline_create(const char* config_json, const char* run_dir,
                             mp_pipeline** out) {
  if (out == nullptr) return MP_ERR_VALIDATION;
  auto* p = new mp_pipeline();
  *out = p;
  if (run_dir == nullptr || run_dir[0] == '\0') {
    p->last_error = "run_dir must be a non-empty path";
    return MP_ERR_VALIDATION;
  }
  p->paths.root = run_dir;
  try {
    nlohmann::json overrides;
    if (config_json != nullptr && config_json[0] != '\0') {
      overrides = nlohmann::json::parse(config_json, nullptr, false);
      if (overrides.is_discarded()) throw Error::validation("config is not valid JSON");
    }
    p->cfg = RunConfig::from_json(overrides);
    p->cfg_ok = true;
    return MP_OK;
  } catch (const Error& e) {
    p->last_error = e.what();
    return status_from(e.code());
  } catch (const std::exception& e) {
    p->last_error = e.what();
    return MP_ERR_VALIDATION;
  }
}

void mp_pipeline_destroy(mp_pipeline* p) { delete p; }

const char* mp_pipeline_last_error(const mp_pipeline* p) {
  return p == nullptr ? "null pipeline handle" : p->last_error.c_str();
}

mp_status mp_synth_data(mp_pipeline* p) {
  return run_guarded(p, [&] { cmd_synth_data(p->cfg, p->paths); });
}

mp_status mp_train(mp_pipeline* p, const char* stage, int fresh) {
  return run_guarded(p, [&] {
    if (stage == nullptr) throw Error::validation("stage must be rvq | style | diffusion");
    cmd_train(p->cfg, p->paths, stage, fresh != 0);
  });
}

mp_status mp_generate(mp_pipeline* p, const char* request_json, char** manifest_json_out) {
  return run_guarded(p, [&] {
    GenerateRequest req;
    if (request_json != nullptr && request_json[0] != '\0') {
      nlohmann::json j = nlohmann::json::parse(request_json, nullptr, false);
      if (j.is_discarded()) throw Error::validation("generate request is not valid JSON");
      req.n_clips = j.value("n_clips", 0);
      req.seed = j.value("seed", uint64_t{0});
      if (j.contains("weights")) {
        auto w = j.at("weights");
        MP_REQUIRE(w.is_array() && w.size() == 3, "weights must be [w_c, w_s, w_re]");
        req.weights = GuidanceWeights{w[0], w[1], w[2]};
      }
      req.n_steps = j.value("n_steps", 0);
      if (j.contains("style")) req.style = j.at("style").get<int>();
      if (j.contains("audio_features")) {
        req.audio_features_path = j.at("audio_features").get<std::string>();
      }
      if (j.contains("reference_clip")) {
        req.reference_clip_path = j.at("reference_clip").get<std::string>();
      }
      req.tag = j.value("tag", std::string("default"));
      req.variant = variant_from_name(j.value("variant", std::string("full")));
      req.export_indices = j.value("export_indices", false);
    }
    nlohmann::json doc = cmd_generate(p->cfg, p->paths, req);
    if (manifest_json_out != nullptr) *manifest_json_out = dup_string(doc.dump(2));
  });
}

mp_status mp_evaluate(mp_pipeline* p, const char* request_json, char** report_json_out) {
  return run_guarded(p, [&] {
    EvaluateRequest req;
    if (request_json != nullptr && request_json[0] != '\0') {
      nlohmann::json j = nlohmann::json::parse(request_json, nullptr, false);
      if (j.is_discarded()) throw Error::validation("evaluate request is not valid JSON");
      req.generated = j.value("generated", std::string("default"));
      req.reference = split_from(j.value("reference", std::string("test")));
      if (j.contains("metrics")) {
        req.metrics = j.at("metrics").get<std::vector<std::string>>();
      }
      req.report_name = j.value("report_name", std::string());
    }
    nlohmann::json doc = cmd_evaluate(p->cfg, p->paths, req);
    if (report_json_out != nullptr) *report_json_out = dup_string(doc.dump(2));
  });
}

mp_status mp_ablate(mp_pipeline* p, const char* rows_csv, char** report_json_out) {
  return run_guarded(p, [&] {
    std::vector<std::string> rows;
    std::string csv = rows_csv == nullptr ? "" : rows_csv;
    if (csv.empty()) {
      rows = {"no_part_style", "no_rhythm", "no_emotion", "no_rhythm_emotion"};
    } else {
      size_t start = 0;
      while (start <= csv.size()) {
        size_t comma = csv.find(',', start);
        std::string item = csv.substr(start, comma == std::string::npos ? std::string::npos
                                                                        : comma - start);
        if (!item.empty()) rows.push_back(item);
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
    }
    nlohmann::json doc = cmd_ablate(p->cfg, p->paths, rows);
    if (report_json_out != nullptr) *report_json_out = dup_string(doc.dump(2));
  });
}

mp_status mp_grad_check(mp_pipeline* p, char** report_json_out) {
  return run_guarded(p, [&] {
    nlohmann::json doc = grad_check_suite();
    if (report_json_out != nullptr) *report_json_out = dup_string(doc.dump(2));
    if (!doc["pass"].get<bool>()) {
      throw Error::internal("gradient check failed for at least one module");
    }
  });
}

void mp_string_free(char* s) { std::free(s); }

}  // extern "C"
