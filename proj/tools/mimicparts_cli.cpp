// Command-line driver for the mimicparts pipeline. Talks to the core
// exclusively through the C API in mimicparts.h.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <mimicparts.h>

namespace {

using nlohmann::json;

std::string read_config_text(const std::string& path) {
  if (path.empty()) return "{}";
  std::ifstream f(path);
  if (!f) {
    std::cerr << "error: cannot open config " << path << "\n";
    std::exit(MP_ERR_IO);
  }
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct Handle {
  mp_pipeline* p = nullptr;
  ~Handle() { mp_pipeline_destroy(p); }
};

int finish(mp_status status, const mp_pipeline* p, const char* verb) {
  if (status == MP_OK) return 0;
  std::cerr << "error (" << verb << "): " << mp_pipeline_last_error(p) << "\n";
  return static_cast<int>(status);
}

void print_report_rows(const std::string& report_json) {
  json doc = json::parse(report_json, nullptr, false);
  if (doc.is_discarded() || !doc.contains("rows")) return;
  std::printf("%-10s %-6s %12s %6s\n", "metric", "scope", "value", "n");
  for (const auto& r : doc["rows"]) {
    std::printf("%-10s %-6s %12.6f %6d\n", r["metric"].get<std::string>().c_str(),
                r["scope"].get<std::string>().c_str(), r["value"].get<double>(),
                r["n"].get<int>());
  }
}

void print_ablation_table(const std::string& report_json) {
  json doc = json::parse(report_json, nullptr, false);
  if (doc.is_discarded() || !doc.contains("rows")) return;
  std::printf("%-20s %10s %10s %10s %10s\n", "row", "FGD", "BC", "Diversity", "SRA");
  for (auto it = doc["rows"].begin(); it != doc["rows"].end(); ++it) {
    std::printf("%-20s", it.key().c_str());
    for (const char* m : {"fgd", "bc", "diversity", "sra"}) {
      if (it.value().contains(m)) {
        std::printf(" %10.4f", it.value()[m].get<double>());
      } else {
        std::printf(" %10s", "-");
      }
    }
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mimicparts: part-aware speech-driven stylized motion pipeline"};
  app.require_subcommand(0, 1);

  std::string config_path, run_dir = "run";
  bool dump_defaults = false;
  app.add_option("--config", config_path, "JSON config file (flat dotted keys)");
  app.add_option("--run", run_dir, "run directory")->capture_default_str();
  app.add_flag("--print-default-config", dump_defaults,
               "print the full default configuration and exit");

  auto* synth = app.add_subcommand("synth-data", "synthesize the styled dataset");

  auto* train = app.add_subcommand("train", "train one stage");
  std::string stage;
  bool fresh = false;
  train->add_option("--stage", stage, "rvq | style | diffusion")->required();
  train->add_flag("--fresh", fresh, "ignore existing checkpoints");

  auto* generate = app.add_subcommand("generate", "sample stylized clips");
  int g_n = 0, g_steps = 0, g_style = -1;
  uint64_t g_seed = 0;
  std::vector<double> g_weights;
  std::string g_tag = "default", g_variant = "full", g_audio, g_reference;
  bool g_indices = false;
  generate->add_option("-n,--n-clips", g_n, "clip count");
  generate->add_option("--seed", g_seed, "sampling seed");
  generate->add_option("--steps", g_steps, "inference steps");
  generate->add_option("--style", g_style, "intended style id (default: round-robin)");
  generate->add_option("--weights", g_weights, "guidance weights w_c w_s w_re")
      ->expected(3);
  generate->add_option("--tag", g_tag, "output tag under generated/");
  generate->add_option("--variant", g_variant,
                       "full | no_part_style | no_rhythm | no_emotion | no_rhythm_emotion");
  generate->add_option("--audio-features", g_audio, "feature file instead of synthetic audio");
  generate->add_option("--reference", g_reference, "reference clip for style extraction");
  generate->add_flag("--export-indices", g_indices, "write RQ codebook indices per clip");

  auto* evaluate = app.add_subcommand("evaluate", "compute metrics on generated clips");
  std::string e_generated = "default", e_reference = "test", e_report;
  std::vector<std::string> e_metrics;
  evaluate->add_option("--generated", e_generated, "tag under generated/, or split:test");
  evaluate->add_option("--reference", e_reference, "reference split: train | val | test");
  evaluate->add_option("--metrics", e_metrics, "subset of fgd bc diversity sra");
  evaluate->add_option("--report-name", e_report, "report file stem");

  auto* ablate = app.add_subcommand("ablate", "run the ablation table");
  std::string a_rows;
  ablate->add_option("--rows", a_rows,
                     "comma-separated rows (default: all four ablations)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");

  CLI11_PARSE(app, argc, argv);

  if (dump_defaults) {
    std::printf("%s\n", mp_default_config_json());
    return 0;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return MP_ERR_VALIDATION;
  }

  Handle h;
  std::string config_text = read_config_text(config_path);
  mp_status st = mp_pipeline_create(config_text.c_str(), run_dir.c_str(), &h.p);
  if (st != MP_OK) return finish(st, h.p, "config");

  if (synth->parsed()) {
    return finish(mp_synth_data(h.p), h.p, "synth-data");
  }
  if (train->parsed()) {
    return finish(mp_train(h.p, stage.c_str(), fresh ? 1 : 0), h.p, "train");
  }
  if (generate->parsed()) {
    json req;
    if (g_n > 0) req["n_clips"] = g_n;
    if (g_seed != 0) req["seed"] = g_seed;
    if (g_steps > 0) req["n_steps"] = g_steps;
    if (g_style >= 0) req["style"] = g_style;
    if (!g_weights.empty()) req["weights"] = g_weights;
    req["tag"] = g_tag;
    req["variant"] = g_variant;
    if (!g_audio.empty()) req["audio_features"] = g_audio;
    if (!g_reference.empty()) req["reference_clip"] = g_reference;
    if (g_indices) req["export_indices"] = true;
    char* out = nullptr;
    mp_status s = mp_generate(h.p, req.dump().c_str(), &out);
    if (s == MP_OK && out != nullptr) {
      json doc = json::parse(out, nullptr, false);
      if (!doc.is_discarded()) {
        std::printf("generated %zu clip(s) under %s/generated/%s\n",
                    doc["items"].size(), run_dir.c_str(), g_tag.c_str());
      }
    }
    mp_string_free(out);
    return finish(s, h.p, "generate");
  }
  if (evaluate->parsed()) {
    json req;
    req["generated"] = e_generated;
    req["reference"] = e_reference;
    if (!e_metrics.empty()) req["metrics"] = e_metrics;
    if (!e_report.empty()) req["report_name"] = e_report;
    char* out = nullptr;
    mp_status s = mp_evaluate(h.p, req.dump().c_str(), &out);
    if (s == MP_OK && out != nullptr) print_report_rows(out);
    mp_string_free(out);
    return finish(s, h.p, "evaluate");
  }
  if (ablate->parsed()) {
    char* out = nullptr;
    mp_status s = mp_ablate(h.p, a_rows.c_str(), &out);
    if (s == MP_OK && out != nullptr) print_ablation_table(out);
    mp_string_free(out);
    return finish(s, h.p, "ablate");
  }
  if (gradcheck->parsed()) {
    char* out = nullptr;
    mp_status s = mp_grad_check(h.p, &out);
    if (out != nullptr) {
      json doc = json::parse(out, nullptr, false);
      if (!doc.is_discarded()) {
        for (const auto& r : doc["rows"]) {
          std::printf("%-12s params=%-5d max_rel_err=%.3e  %s\n",
                      r["module"].get<std::string>().c_str(), r["params"].get<int>(),
                      r["max_rel_err"].get<double>(),
                      r["pass"].get<bool>() ? "pass" : "FAIL");
        }
      }
    }
    mp_string_free(out);
    return finish(s, h.p, "gradcheck");
  }
  return 0;
}
