#include "jmvar/jmvar.h"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <new>
#include <string>

#include <nlohmann/json.hpp>

#include "jmvar/error.hpp"
#include "jmvar/pipeline.hpp"

using nlohmann::json;
using namespace jmvar;

struct jmvar_context {
  std::atomic<bool> cancel{false};
  std::string last_error;
};

namespace {

class Cancelled : public std::exception {
 public:
  const char* what() const noexcept override { return "cancelled"; }
};

char* dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void put(char** out, const std::string& s) {
  if (out) *out = dup(s);
}

json parse_arg(const char* text, const char* what) {
  require(text != nullptr, ErrorCode::InvalidArgument, std::string(what) + " is null");
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::Config, std::string(what) + ": invalid JSON: " + e.what());
  }
}

std::string path_arg(const char* text, const char* what) {
  require(text != nullptr && *text != '\0', ErrorCode::InvalidArgument, std::string(what) + " is empty");
  return text;
}

void record(jmvar_context* ctx, jmvar_status status, const std::string& message, const std::vector<std::string>& fields) {
  if (!ctx) return;
  json j{{"code", static_cast<int>(status)},
         {"status", jmvar_status_name(status)},
         {"message", message},
         {"fields", fields}};
  ctx->last_error = j.dump();
}

template <class F>
jmvar_status guarded(jmvar_context* ctx, F&& body) {
  if (!ctx) return JMVAR_E_INVALID_ARGUMENT;
  ctx->last_error.clear();
  ctx->cancel.store(false);
  try {
    body();
    if (ctx->cancel.load()) throw Cancelled();
    return JMVAR_OK;
  } catch (const Cancelled&) {
    record(ctx, JMVAR_E_CANCELLED, "operation cancelled", {});
    return JMVAR_E_CANCELLED;
  } catch (const Error& e) {
    if (ctx->cancel.load()) {
      record(ctx, JMVAR_E_CANCELLED, "operation cancelled", {});
      return JMVAR_E_CANCELLED;
    }
    auto st = static_cast<jmvar_status>(static_cast<int>(e.code()));
    record(ctx, st, e.what(), e.fields());
    return st;
  } catch (const std::bad_alloc&) {
    record(ctx, JMVAR_E_INTERNAL, "out of memory", {});
    return JMVAR_E_INTERNAL;
  } catch (const std::filesystem::filesystem_error& e) {
    record(ctx, JMVAR_E_IO, e.what(), {});
    return JMVAR_E_IO;
  } catch (const json::exception& e) {
    record(ctx, JMVAR_E_CONFIG, e.what(), {});
    return JMVAR_E_CONFIG;
  } catch (const std::exception& e) {
    record(ctx, JMVAR_E_INTERNAL, e.what(), {});
    return JMVAR_E_INTERNAL;
  } catch (...) {
    record(ctx, JMVAR_E_INTERNAL, "unknown failure", {});
    return JMVAR_E_INTERNAL;
  }
}

std::string string_field(const json& j, const char* key, const std::string& fallback = "") {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  if (!j[key].is_string()) throw Error(ErrorCode::Config, std::string(key) + ": expected a string", {key});
  return j[key].get<std::string>();
}

ColumnSchema schema_field(const json& j) {
  if (!j.contains("schema") || j["schema"].is_null()) return {};
  try {
    return ColumnSchema::from_json(j["schema"].dump());
  } catch (const Error& e) {
    std::vector<std::string> fields;
    for (const auto& f : e.fields()) fields.push_back("schema." + f);
    if (fields.empty()) fields.push_back("schema");
    throw Error(ErrorCode::Config, std::string("schema: ") + e.what(), fields);
  }
}

TimeModel model_field(const json& j) {
  if (!j.contains("model") || j["model"].is_null()) return TimeModel::linear();
  const auto& m = j["model"];
  if (m.is_string()) {
    std::string name = m.get<std::string>();
    if (name == "linear") return TimeModel::linear();
    if (name == "quadratic") return TimeModel::quadratic(2.0);
    throw Error(ErrorCode::Config, "model: expected \"linear\", \"quadratic\" or {\"fixed\": [...], \"random\": [...]}",
                {"model"});
  }
  return TimeModel::from_json(m.dump());
}

template <class F>
auto in_field(const char* path, F&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    std::vector<std::string> fields;
    std::string msg = e.what();
    for (auto f : e.fields()) {
      if (f.rfind(std::string(path) + ".", 0) != 0) f = std::string(path) + "." + f;
      fields.push_back(f);
    }
    if (fields.empty()) fields.push_back(path);
    if (msg.rfind(path, 0) != 0) msg = std::string(path) + ": " + msg;
    throw Error(e.code(), msg, fields);
  }
}

ScenarioConfig scenario_of(const json& j) { return ScenarioConfig::from_json(j); }

json normalized(const std::string& kind, const json& j) {
  if (kind == "scenario") return ScenarioConfig::from_json(j).to_json();
  if (kind == "sampler") return SamplerConfig::from_json(j).to_json();
  if (kind == "study") return StudyConfig::from_json(j).to_json();
  fail(ErrorCode::InvalidArgument, "config kind '" + kind + "' (expected scenario, sampler or study)");
}

std::string hash_of(const std::string& kind, const json& j) {
  if (kind == "scenario") return ScenarioConfig::from_json(j).hash();
  if (kind == "study") return StudyConfig::from_json(j).hash();
  if (kind == "sampler") {
    auto s = SamplerConfig::from_json(j).to_json();
    s.erase("jobs");
    return fnv1a_hex(s.dump());
  }
  fail(ErrorCode::InvalidArgument, "config kind '" + kind + "' (expected scenario, sampler or study)");
}

json replicate_json(const ReplicateResult& r) {
  json j{{"replicate", r.id},
         {"seed", r.seed},
         {"failed", r.failed},
         {"runtime_seconds", r.runtime_seconds},
         {"event_rate", r.event_rate}};
  if (r.failed) j["error"] = r.error;
  for (const auto& p : r.params)
    j["params"][p.name] = {{"mean", p.mean}, {"lower", p.lower}, {"upper", p.upper}, {"rhat", p.rhat}};
  return j;
}

}  // namespace

extern "C" {

jmvar_context* jmvar_context_new(void) { return new (std::nothrow) jmvar_context(); }

void jmvar_context_free(jmvar_context* ctx) { delete ctx; }

void jmvar_cancel(jmvar_context* ctx) {
  if (ctx) ctx->cancel.store(true);
}

const char* jmvar_last_error(const jmvar_context* ctx) {
  if (!ctx || ctx->last_error.empty()) return nullptr;
  return ctx->last_error.c_str();
}

const char* jmvar_status_name(jmvar_status status) {
  if (status == JMVAR_OK) return "ok";
  if (status == JMVAR_E_CANCELLED) return "cancelled";
  if (status >= JMVAR_E_INVALID_ARGUMENT && status <= JMVAR_E_INTERNAL)
    return error_code_name(static_cast<ErrorCode>(static_cast<int>(status)));
  return "unknown";
}

void jmvar_string_free(char* s) { std::free(s); }

jmvar_status jmvar_version(jmvar_context* ctx, char** out_json) {
  return guarded(ctx, [&] { put(out_json, version_info().dump()); });
}

jmvar_status jmvar_config_normalize(jmvar_context* ctx, const char* kind, const char* config_json, char** out_json) {
  return guarded(ctx, [&] {
    require(kind != nullptr, ErrorCode::InvalidArgument, "kind is null");
    put(out_json, normalized(kind, parse_arg(config_json, "config")).dump());
  });
}

jmvar_status jmvar_config_hash(jmvar_context* ctx, const char* kind, const char* config_json, char** out_hash) {
  return guarded(ctx, [&] {
    require(kind != nullptr, ErrorCode::InvalidArgument, "kind is null");
    put(out_hash, hash_of(kind, parse_arg(config_json, "config")));
  });
}

jmvar_status jmvar_hash_text(jmvar_context* ctx, const char* text, char** out_hash) {
  return guarded(ctx, [&] {
    require(text != nullptr, ErrorCode::InvalidArgument, "text is null");
    put(out_hash, fnv1a_hex(text));
  });
}

jmvar_status jmvar_simulate(jmvar_context* ctx, const char* scenario_json, const char* out_dir, char** out_json) {
  return guarded(ctx, [&] {
    ScenarioConfig cfg = scenario_of(parse_arg(scenario_json, "scenario"));
    std::string out = path_arg(out_dir, "out_dir");
    put(out_json, run_simulate(cfg, out).dump());
  });
}

jmvar_status jmvar_fit_lmm(jmvar_context* ctx, const char* request_json, const char* out_dir, char** out_json) {
  return guarded(ctx, [&] {
    json j = parse_arg(request_json, "request");
    require(j.is_object(), ErrorCode::Config, "request: expected an object");
    LmmRequest req;
    req.data = string_field(j, "data");
    require(!req.data.empty(), ErrorCode::Config, "data: input directory required");
    req.schema = schema_field(j);
    req.outcome = string_field(j, "outcome", req.schema.default_outcome);
    req.model = model_field(j);
    req.method = in_field("method", [&] { return parse_lmm_method(string_field(j, "method", "reml")); });
    std::string out = path_arg(out_dir, "out_dir");
    put(out_json, run_fit_lmm(req, out).dump());
  });
}

jmvar_status jmvar_fit_joint(jmvar_context* ctx, const char* request_json, const char* out_dir, char** out_json) {
  return guarded(ctx, [&] {
    json j = parse_arg(request_json, "request");
    require(j.is_object(), ErrorCode::Config, "request: expected an object");
    JointRequest req;
    req.data = string_field(j, "data");
    require(!req.data.empty(), ErrorCode::Config, "data: input directory required");
    req.schema = schema_field(j);
    std::string lmm = string_field(j, "lmm");
    if (!lmm.empty()) req.lmm = lmm;
    req.residual = in_field("residual", [&] { return parse_residual_kind(string_field(j, "residual", "absolute")); });
    req.scaling = in_field("residual_scaling",
                           [&] { return parse_residual_scaling(string_field(j, "residual_scaling", "leverage")); });
    if (j.contains("spec") && !j["spec"].is_null()) req.spec = j["spec"];
    if (j.contains("quad_nodes")) {
      require(j["quad_nodes"].is_number_integer(), ErrorCode::Config, "quad_nodes: expected an integer");
      req.quad_nodes = j["quad_nodes"].get<int>();
    }
    if (j.contains("sampler")) req.sampler = SamplerConfig::from_json(j["sampler"]);
    if (j.contains("keep_chains")) {
      require(j["keep_chains"].is_boolean(), ErrorCode::Config, "keep_chains: expected a boolean");
      req.keep_chains = j["keep_chains"].get<bool>();
    }
    if (j.contains("timeout_min") && !j["timeout_min"].is_null()) {
      require(j["timeout_min"].is_number() && j["timeout_min"].get<double>() > 0.0, ErrorCode::Config,
              "timeout_min: expected a positive number");
      auto span = std::chrono::duration<double, std::ratio<60>>(j["timeout_min"].get<double>());
      req.sampler.deadline =
          std::chrono::steady_clock::now() + std::chrono::duration_cast<std::chrono::steady_clock::duration>(span);
    }
    req.sampler.cancel = &ctx->cancel;
    std::string out = path_arg(out_dir, "out_dir");
    put(out_json, run_fit_joint(req, out).dump());
  });
}

jmvar_status jmvar_run_study(jmvar_context* ctx, const char* study_json, const char* out_dir,
                             jmvar_progress_fn progress, void* user, char** out_json) {
  return guarded(ctx, [&] {
    StudyConfig cfg = StudyConfig::from_json(parse_arg(study_json, "study"));
    cfg.sampler.cancel = &ctx->cancel;
    std::string out = path_arg(out_dir, "out_dir");
    ProgressFn fn;
    if (progress)
      fn = [&](const ReplicateResult& r) {
        std::string s = replicate_json(r).dump();
        progress(s.c_str(), user);
      };
    json result = run_study_dir(cfg, out, fn);
    put(out_json, result.dump());
  });
}

jmvar_status jmvar_summarize(jmvar_context* ctx, const char* study_dir, double rhat_threshold, char** out_csv) {
  return guarded(ctx, [&] {
    std::optional<double> thr;
    if (!std::isnan(rhat_threshold)) thr = rhat_threshold;
    put(out_csv, summarize_study_dir(path_arg(study_dir, "study_dir"), thr));
  });
}

jmvar_status jmvar_plot_data(jmvar_context* ctx, const char* request_json, char** out_csv) {
  return guarded(ctx, [&] {
    json j = parse_arg(request_json, "request");
    require(j.is_object(), ErrorCode::Config, "request: expected an object");
    PlotRequest req;
    req.kind = in_field("kind", [&] { return parse_plot_kind(string_field(j, "kind")); });
    std::string truth = string_field(j, "truth"), fit = string_field(j, "fit");
    if (!truth.empty()) req.truth = truth;
    if (!fit.empty()) req.fit = fit;
    if (j.contains("scenario") && !j["scenario"].is_null())
      req.scenario = in_field("scenario", [&] { return ScenarioConfig::from_json(j["scenario"]); });
    if (j.contains("subjects")) {
      require(j["subjects"].is_number_integer(), ErrorCode::Config, "subjects: expected an integer");
      req.km_subjects = j["subjects"].get<int>();
    }
    if (j.contains("points")) {
      require(j["points"].is_number_integer(), ErrorCode::Config, "points: expected an integer");
      req.km_points = j["points"].get<int>();
    }
    put(out_csv, plot_data(req));
  });
}

}  // extern "C"
