// Command-line front end. Talks to the library only through jmvar.h.
//
// Settings are resolved per key, later sources winning:
//   built-in defaults < --config file < JMVAR_<KEY> environment < flags

#include <algorithm>
#include <chrono>
#include <climits>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unistd.h>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "jmvar/jmvar.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

jmvar_context* g_ctx = nullptr;

extern "C" void on_signal(int) {
  if (g_ctx) jmvar_cancel(g_ctx);
}

enum class Kind { Int, Uint, Double, String, Bool };

struct Setting {
  const char* key;  // config key; flag is --key with '_' -> '-'
  Kind kind;
  std::vector<std::string> commands;
  const char* help;
};

const std::vector<Setting>& settings() {
  static const std::vector<Setting> s{
      {"scenario", Kind::String, {"simulate", "run-study", "plotdata"}, "preset (linear, quadratic, null) or scenario JSON file"},
      {"alpha_sigma", Kind::Double, {"simulate", "run-study", "plotdata"}, "true variability association"},
      {"subjects", Kind::Int, {"simulate", "run-study", "plotdata"}, "subjects per dataset"},
      {"seed", Kind::Uint, {"simulate", "fit-joint", "run-study", "plotdata"}, "master seed"},
      {"replicates", Kind::Int, {"run-study"}, "number of replicates"},
      {"jobs", Kind::Int, {"fit-joint", "run-study"}, "worker threads (default: logical cores)"},
      {"quad_nodes", Kind::Int, {"fit-joint", "run-study"}, "Gauss-Kronrod nodes per hazard panel"},
      {"chains", Kind::Int, {"fit-joint", "run-study"}, "MCMC chains"},
      {"warmup", Kind::Int, {"fit-joint", "run-study"}, "warmup iterations per chain"},
      {"kept", Kind::Int, {"fit-joint", "run-study"}, "kept iterations per chain"},
      {"timeout_min", Kind::Double, {"fit-joint", "run-study"}, "wall-clock limit in minutes (per replicate for studies)"},
      {"rhat_threshold", Kind::Double, {"run-study", "summarize"}, "R-hat cutoff for the association rows"},
      {"residual", Kind::String, {"fit-joint", "run-study"}, "residual transform: absolute, squared or raw"},
      {"residual_scaling", Kind::String, {"fit-joint", "run-study"}, "leverage (default) or none"},
      {"method", Kind::String, {"fit-lmm", "run-study"}, "reml or ml"},
      {"keep_chains", Kind::Bool, {"fit-joint", "run-study"}, "store chain draws (true/false)"},
      {"out", Kind::String, {"simulate", "fit-lmm", "fit-joint", "run-study", "summarize", "plotdata"}, "output path"},
      {"schema", Kind::String, {"fit-lmm", "fit-joint"}, "column schema JSON file"},
      {"data", Kind::String, {"fit-lmm", "fit-joint"}, "directory with longitudinal.csv and survival.csv"},
      {"lmm", Kind::String, {"fit-joint"}, "fit-lmm output directory"},
      {"spec", Kind::String, {"fit-joint"}, "joint model spec JSON file"},
      {"outcome", Kind::String, {"fit-lmm"}, "longitudinal outcome name"},
      {"model", Kind::String, {"fit-lmm"}, "linear, quadratic or time model JSON file"},
      {"truth", Kind::String, {"plotdata"}, "simulate output directory"},
      {"fit", Kind::String, {"plotdata"}, "fit-joint or fit-lmm output directory"},
      {"points", Kind::Int, {"plotdata"}, "time grid points for km-vs-analytic"},
  };
  return s;
}

const Setting* find_setting(const std::string& key) {
  for (const auto& s : settings())
    if (key == s.key) return &s;
  return nullptr;
}

bool applies(const Setting& s, const std::string& cmd) {
  for (const auto& c : s.commands)
    if (c == cmd) return true;
  return false;
}

std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  for (auto& c : f)
    if (c == '_') c = '-';
  return f;
}

std::string env_name(const std::string& key) {
  std::string e = "JMVAR_" + key;
  for (auto& c : e) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return e;
}

/// Failure raised inside the CLI, reported like library errors.
struct CliError {
  jmvar_status status;
  std::string message;
  std::vector<std::string> fields;
};

struct ConfigProblems {
  std::vector<std::string> messages, fields;
  void add(const std::string& field, const std::string& msg) {
    fields.push_back(field);
    messages.push_back(field + ": " + msg);
  }
  void raise() const {
    if (fields.empty()) return;
    std::string all;
    for (std::size_t i = 0; i < messages.size(); ++i) all += (i ? "; " : "") + messages[i];
    throw CliError{JMVAR_E_CONFIG, all, fields};
  }
};

std::optional<json> convert_text(Kind kind, const std::string& text) {
  try {
    std::size_t used = 0;
    switch (kind) {
      case Kind::Int: {
        long long v = std::stoll(text, &used);
        if (used != text.size() || v < INT32_MIN || v > INT32_MAX) return std::nullopt;
        return json(static_cast<int>(v));
      }
      case Kind::Uint: {
        if (!text.empty() && text[0] == '-') return std::nullopt;
        unsigned long long v = std::stoull(text, &used);
        if (used != text.size()) return std::nullopt;
        return json(static_cast<std::uint64_t>(v));
      }
      case Kind::Double: {
        double v = std::stod(text, &used);
        if (used != text.size()) return std::nullopt;
        return json(v);
      }
      case Kind::Bool:
        if (text == "true" || text == "1" || text == "yes") return json(true);
        if (text == "false" || text == "0" || text == "no") return json(false);
        return std::nullopt;
      case Kind::String: return json(text);
    }
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

bool kind_matches(Kind kind, const json& v) {
  switch (kind) {
    case Kind::Int: return v.is_number_integer();
    case Kind::Uint: return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    case Kind::Double: return v.is_number();
    case Kind::Bool: return v.is_boolean();
    case Kind::String: return v.is_string();
  }
  return false;
}

const char* kind_label(Kind kind) {
  switch (kind) {
    case Kind::Int: return "an integer";
    case Kind::Uint: return "a non-negative integer";
    case Kind::Double: return "a number";
    case Kind::Bool: return "true or false";
    case Kind::String: return "a string";
  }
  return "";
}

std::string read_file(const fs::path& p, const std::string& field) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CliError{JMVAR_E_IO, field + ": cannot read " + p.string(), {field}};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json_file(const fs::path& p, const std::string& field) {
  try {
    return json::parse(read_file(p, field));
  } catch (const json::exception& e) {
    throw CliError{JMVAR_E_CONFIG, field + ": " + p.string() + " is not valid JSON: " + e.what(), {field}};
  }
}

void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp-" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << content;
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw CliError{JMVAR_E_IO, "cannot write " + path.string(), {}};
    }
  }
  fs::rename(tmp, path);
}

/// Resolved settings plus where each came from.
struct Resolved {
  json values = json::object();
  std::map<std::string, std::string> source;

  bool has(const std::string& k) const { return values.contains(k); }
  template <class T>
  T get(const std::string& k) const {
    return values.at(k).get<T>();
  }
  std::string str(const std::string& k, const std::string& fallback = "") const {
    return has(k) ? values.at(k).get<std::string>() : fallback;
  }
};

Resolved resolve(const std::string& cmd, const std::string& config_path,
                 const std::map<std::string, std::string>& flags) {
  Resolved r;
  ConfigProblems problems;
  if (applies(*find_setting("jobs"), cmd)) {
    r.values["jobs"] = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    r.source["jobs"] = "default";
  }
  if (!config_path.empty()) {
    json cfg = read_json_file(config_path, "config");
    if (!cfg.is_object()) throw CliError{JMVAR_E_CONFIG, "config: expected a JSON object", {"config"}};
    for (const auto& item : cfg.items()) {
      const Setting* s = find_setting(item.key());
      if (!s) {
        problems.add(item.key(), "unknown field");
        continue;
      }
      if (!applies(*s, cmd)) continue;
      if (!kind_matches(s->kind, item.value())) {
        problems.add(item.key(), std::string("expected ") + kind_label(s->kind));
        continue;
      }
      r.values[s->key] = item.value();
      r.source[s->key] = "config";
    }
  }
  for (const auto& s : settings()) {
    if (!applies(s, cmd)) continue;
    const char* env = std::getenv(env_name(s.key).c_str());
    if (!env) continue;
    auto v = convert_text(s.kind, env);
    if (!v) {
      problems.add(s.key, env_name(s.key) + " must be " + kind_label(s.kind));
      continue;
    }
    r.values[s.key] = *v;
    r.source[s.key] = "env";
  }
  for (const auto& [key, text] : flags) {
    const Setting* s = find_setting(key);
    auto v = convert_text(s->kind, text);
    if (!v) {
      problems.add(key, flag_name(key) + " must be " + kind_label(s->kind));
      continue;
    }
    r.values[key] = *v;
    r.source[key] = "flag";
  }
  problems.raise();
  return r;
}

// ------------------------------------------------------------------ calls

struct Lib {
  jmvar_context* ctx;

  [[noreturn]] void raise(jmvar_status st) const {
    CliError e{st, jmvar_status_name(st), {}};
    if (const char* rec = jmvar_last_error(ctx)) {
      json j = json::parse(rec);
      e.message = j.value("message", e.message);
      if (j.contains("fields")) e.fields = j["fields"].get<std::vector<std::string>>();
    }
    throw e;
  }
  /// `out` is read only after the call producing `st` has run.
  std::string take(jmvar_status st, char** out) const {
    if (st != JMVAR_OK) raise(st);
    std::string s = *out ? *out : "";
    jmvar_string_free(*out);
    *out = nullptr;
    return s;
  }
};

json scenario_json(const Resolved& r, const Lib& lib) {
  json sc;
  std::string name = r.str("scenario", "linear");
  if (name == "linear" || name == "quadratic" || name == "null") {
    sc["preset"] = name;
  } else {
    sc = read_json_file(name, "scenario");
    if (!sc.is_object()) throw CliError{JMVAR_E_CONFIG, "scenario: expected a JSON object", {"scenario"}};
  }
  if (r.has("alpha_sigma")) sc["alpha_sigma"] = r.values["alpha_sigma"];
  if (r.has("subjects")) sc["n_subjects"] = r.values["subjects"];
  if (r.has("seed")) sc["seed"] = r.values["seed"];
  char* out = nullptr;
  return json::parse(lib.take(jmvar_config_normalize(lib.ctx, "scenario", sc.dump().c_str(), &out), &out));
}

json sampler_json(const Resolved& r) {
  json s = json::object();
  for (const char* k : {"chains", "warmup", "kept"})
    if (r.has(k)) s[k] = r.values[k];
  return s;
}

std::string require_out(const Resolved& r) {
  if (!r.has("out") || r.str("out").empty())
    throw CliError{JMVAR_E_CONFIG, "out: an output path is required (--out or JMVAR_OUT)", {"out"}};
  return r.str("out");
}

std::string utc_now() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

int progress_stream = 0;  // 0: silent, 1: stderr

extern "C" void report_progress(const char* rec, void*) {
  if (progress_stream) std::cerr << rec << '\n';
}

struct Outcome {
  json result;                        // library summary
  std::string config_hash;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> outputs;
  std::optional<fs::path> manifest;   // where to write the manifest
  std::optional<std::string> text;    // printed on stdout instead of the manifest
};

Outcome run_command(const std::string& cmd, const Resolved& r, const std::vector<std::string>& positional,
                    const Lib& lib) {
  Outcome o;
  char* out = nullptr;
  if (cmd == "simulate") {
    json sc = scenario_json(r, lib);
    std::string dir = require_out(r);
    o.result = json::parse(lib.take(jmvar_simulate(lib.ctx, sc.dump().c_str(), dir.c_str(), &out), &out));
    o.config_hash = o.result["config_hash"];
    o.seed = sc["seed"].get<std::uint64_t>();
    o.manifest = fs::path(dir) / "manifest.json";
  } else if (cmd == "fit-lmm" || cmd == "fit-joint") {
    json req;
    if (!r.has("data")) throw CliError{JMVAR_E_CONFIG, "data: an input directory is required", {"data"}};
    req["data"] = r.values["data"];
    if (r.has("schema")) req["schema"] = read_json_file(r.str("schema"), "schema");
    if (cmd == "fit-lmm") {
      for (const char* k : {"outcome", "method"})
        if (r.has(k)) req[k] = r.values[k];
      if (r.has("model")) {
        std::string m = r.str("model");
        req["model"] = (m == "linear" || m == "quadratic") ? json(m) : read_json_file(m, "model");
      }
    } else {
      for (const char* k : {"lmm", "residual", "residual_scaling", "quad_nodes", "keep_chains", "timeout_min"})
        if (r.has(k)) req[k] = r.values[k];
      if (r.has("spec")) req["spec"] = read_json_file(r.str("spec"), "spec");
      json s = sampler_json(r);
      if (r.has("seed")) s["seed"] = r.values["seed"];
      s["jobs"] = r.values["jobs"];
      req["sampler"] = s;
      o.seed = r.has("seed") ? r.get<std::uint64_t>("seed") : 1;
    }
    std::string dir = require_out(r);
    auto fn = cmd == "fit-lmm" ? jmvar_fit_lmm : jmvar_fit_joint;
    std::string text = req.dump();
    o.result = json::parse(lib.take(fn(lib.ctx, text.c_str(), dir.c_str(), &out), &out));
    o.config_hash = lib.take(jmvar_hash_text(lib.ctx, text.c_str(), &out), &out);
    o.manifest = fs::path(dir) / "manifest.json";
  } else if (cmd == "run-study") {
    json st;
    st["scenario"] = scenario_json(r, lib);
    st["scenario"].erase("seed");
    for (const char* k : {"replicates", "seed", "jobs", "timeout_min", "rhat_threshold", "quad_nodes", "residual",
                          "residual_scaling", "method", "keep_chains"})
      if (r.has(k)) st[k] = r.values[k];
    json s = sampler_json(r);
    s["jobs"] = 1;
    st["sampler"] = s;
    std::string dir = require_out(r);
    std::string text = st.dump();
    o.config_hash = lib.take(jmvar_config_hash(lib.ctx, "study", text.c_str(), &out), &out);
    o.result = json::parse(
        lib.take(jmvar_run_study(lib.ctx, text.c_str(), dir.c_str(), report_progress, nullptr, &out), &out));
    o.seed = r.has("seed") ? r.get<std::uint64_t>("seed") : 1;
    o.manifest = fs::path(dir) / "manifest.json";
  } else if (cmd == "summarize") {
    if (positional.empty()) throw CliError{JMVAR_E_CONFIG, "dir: a study directory is required", {"dir"}};
    double thr = r.has("rhat_threshold") ? r.get<double>("rhat_threshold") : std::nan("");
    std::string csv = lib.take(jmvar_summarize(lib.ctx, positional[0].c_str(), thr, &out), &out);
    json h;
    h["dir"] = positional[0];
    h["rhat_threshold"] = r.has("rhat_threshold") ? r.values["rhat_threshold"] : json(nullptr);
    o.config_hash = lib.take(jmvar_hash_text(lib.ctx, h.dump().c_str(), &out), &out);
    o.result = {{"rows", std::count(csv.begin(), csv.end(), '\n')}};
    if (r.has("out")) {
      write_atomic(r.str("out"), csv);
      o.outputs.push_back(r.str("out"));
      o.manifest = fs::path(r.str("out") + ".manifest.json");
    } else {
      o.text = csv;
    }
  } else if (cmd == "plotdata") {
    if (positional.empty())
      throw CliError{JMVAR_E_CONFIG, "kind: sigma-trajectories, marker-trajectories or km-vs-analytic required", {"kind"}};
    json req{{"kind", positional[0]}};
    for (const char* k : {"truth", "fit", "points"})
      if (r.has(k)) req[k] = r.values[k];
    if (positional[0] == "km-vs-analytic") {
      if (r.has("subjects")) req["subjects"] = r.values["subjects"];
      if (r.has("scenario") || !r.has("truth")) {
        req["scenario"] = scenario_json(r, lib);
        o.seed = req["scenario"]["seed"].get<std::uint64_t>();
      }
    }
    std::string text = req.dump();
    std::string csv = lib.take(jmvar_plot_data(lib.ctx, text.c_str(), &out), &out);
    o.config_hash = lib.take(jmvar_hash_text(lib.ctx, text.c_str(), &out), &out);
    o.result = {{"kind", positional[0]}};
    if (r.has("out")) {
      write_atomic(r.str("out"), csv);
      o.outputs.push_back(r.str("out"));
      o.manifest = fs::path(r.str("out") + ".manifest.json");
    } else {
      o.text = csv;
    }
  }
  if (o.result.contains("outputs"))
    for (const auto& p : o.result["outputs"]) o.outputs.push_back(p.get<std::string>());
  return o;
}

int emit_error(const std::string& cmd, const CliError& e) {
  json j{{"error",
          {{"code", static_cast<int>(e.status)},
           {"status", jmvar_status_name(e.status)},
           {"message", e.message},
           {"fields", e.fields},
           {"command", cmd}}}};
  std::cerr << j.dump() << std::endl;
  return static_cast<int>(e.status);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint models of longitudinal markers, their variability, and event times"};
  app.require_subcommand(1);
  app.set_version_flag("--version", [] {
    jmvar_context* ctx = jmvar_context_new();
    char* out = nullptr;
    std::string v = jmvar_version(ctx, &out) == JMVAR_OK ? out : "{}";
    jmvar_string_free(out);
    jmvar_context_free(ctx);
    return v;
  });

  const std::vector<std::pair<std::string, std::string>> commands{
      {"simulate", "simulate one dataset from a scenario"},
      {"fit-lmm", "fit a linear mixed model to one outcome"},
      {"fit-joint", "fit the joint model by MCMC"},
      {"run-study", "run a simulation study"},
      {"summarize", "recompute a study summary from its results"},
      {"plotdata", "tables for plotting"},
  };
  std::string config_path;
  bool quiet = false;
  std::map<std::string, std::map<std::string, std::string>> flag_text;
  std::map<std::string, std::vector<std::string>> positional;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON settings file (env JMVAR_CONFIG)");
    sub->add_flag("--quiet,-q", quiet, "no progress output");
    for (const auto& s : settings()) {
      if (!applies(s, name)) continue;
      auto* text = &flag_text[name][s.key];
      sub->add_option(flag_name(s.key), *text, s.help);
    }
    if (name == "summarize") sub->add_option("dir", positional[name], "study directory")->required();
    if (name == "plotdata")
      sub->add_option("kind", positional[name], "sigma-trajectories, marker-trajectories or km-vs-analytic")
          ->required()
          ->check(CLI::IsMember({"sigma-trajectories", "marker-trajectories", "km-vs-analytic"}));
    subs[name] = sub;
  }
  app.footer(
      "Settings come from built-in defaults, then --config FILE (a flat JSON object keyed like the flags with '_'\n"
      "for '-'), then JMVAR_<KEY> environment variables (e.g. JMVAR_SEED), then flags.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string cmd;
    const CLI::App* failing = &app;
    for (const auto* s : app.get_subcommands()) {
      cmd = s->get_name();
      failing = s;
    }
    std::cerr << failing->help() << std::endl;
    CliError err{JMVAR_E_INVALID_ARGUMENT, e.what(), {}};
    emit_error(cmd, err);
    return 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  CLI::App* sub = subs[cmd];
  std::map<std::string, std::string> given;
  for (const auto& [key, text] : flag_text[cmd])
    if (sub->get_option(flag_name(key))->count() > 0) given[key] = text;
  if (config_path.empty())
    if (const char* env = std::getenv("JMVAR_CONFIG")) config_path = env;

  jmvar_context* ctx = jmvar_context_new();
  if (!ctx) return emit_error(cmd, {JMVAR_E_INTERNAL, "cannot allocate a library context", {}});
  g_ctx = ctx;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  progress_stream = quiet ? 0 : 1;
  Lib lib{ctx};
  const auto start = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  int code = 0;
  try {
    Resolved r = resolve(cmd, config_path, given);
    Outcome o = run_command(cmd, r, positional[cmd], lib);
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    char* out = nullptr;
    json versions = json::parse(lib.take(jmvar_version(ctx, &out), &out));
    std::vector<std::string> args(argv, argv + argc);
    json manifest{{"command", cmd},
                  {"argv", args},
                  {"settings", r.values},
                  {"sources", r.source},
                  {"config_hash", o.config_hash},
                  {"master_seed", o.seed ? json(*o.seed) : json(nullptr)},
                  {"versions", versions},
                  {"started_at", started},
                  {"wall_time_seconds", wall},
                  {"outputs", o.outputs},
                  {"result", o.result}};
    if (o.manifest) {
      manifest["outputs"].push_back(o.manifest->string());
      write_atomic(*o.manifest, manifest.dump(2) + "\n");
    }
    if (o.text)
      std::cout << *o.text;
    else
      std::cout << manifest.dump() << std::endl;
  } catch (const CliError& e) {
    code = emit_error(cmd, e);
  } catch (const std::exception& e) {
    code = emit_error(cmd, {JMVAR_E_INTERNAL, e.what(), {}});
  }
  g_ctx = nullptr;
  jmvar_context_free(ctx);
  return code;
}
