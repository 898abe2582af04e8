#include <stdexcept>

#include "backflush/experiment.hpp"
#include "json.hpp"

namespace backflush {

using nlohmann::ordered_json;

namespace {

inline constexpr const char* kReportSchema = "backflush-report/1";

ordered_json metrics_to_json(const Metrics& m) {
  m.check_bounds();
  return {{"asr", m.asr}, {"cacc", m.cacc}, {"utility_ppl", m.utility_ppl}, {"watermark_bit", m.watermark_bit}};
}

Metrics metrics_from_json(const ordered_json& j) {
  Metrics m;
  m.asr = j.at("asr").get<double>();
  m.cacc = j.at("cacc").get<double>();
  m.utility_ppl = j.at("utility_ppl").get<double>();
  m.watermark_bit = j.at("watermark_bit").get<bool>();
  m.check_bounds();
  return m;
}

template <typename T>
std::vector<T> vec(const ordered_json& j, const char* key) {
  return j.at(key).get<std::vector<T>>();
}

}  // namespace

ordered_json stage_to_json(const StageRecord& r, bool with_timings) {
  ordered_json j;
  j["name"] = r.name;
  j["skipped"] = r.skipped;
  j["failed"] = r.failed;
  j["reason"] = r.reason;
  j["metrics"] = r.metrics ? metrics_to_json(*r.metrics) : ordered_json(nullptr);
  ordered_json values = ordered_json::object();
  for (const auto& [k, v] : r.values) values[k] = v;
  j["values"] = values;
  if (with_timings) j["seconds"] = r.seconds;
  return j;
}

StageRecord stage_from_json(const ordered_json& j) {
  StageRecord r;
  r.name = j.at("name").get<std::string>();
  r.skipped = j.at("skipped").get<bool>();
  r.failed = j.at("failed").get<bool>();
  r.reason = j.at("reason").get<std::string>();
  if (!j.at("metrics").is_null()) r.metrics = metrics_from_json(j.at("metrics"));
  for (const auto& [k, v] : j.at("values").items()) r.values[k] = v.get<double>();
  if (j.contains("seconds")) r.seconds = j.at("seconds").get<double>();
  return r;
}

ordered_json detection_to_json(const DetectionResult& r) {
  return {{"loss_suspect", r.loss_suspect}, {"loss_clean", r.loss_clean},   {"gap", r.gap},
          {"step0_gap", r.step0_gap},       {"read_step", r.read_step},     {"tau", r.tau},
          {"verdict", r.verdict},           {"probe_eval_count", r.probe_eval_count},
          {"curve_suspect", r.curve_suspect}, {"curve_clean", r.curve_clean}};
}

DetectionResult detection_from_json(const ordered_json& j) {
  DetectionResult r;
  r.loss_suspect = j.at("loss_suspect").get<double>();
  r.loss_clean = j.at("loss_clean").get<double>();
  r.gap = j.at("gap").get<double>();
  r.step0_gap = j.at("step0_gap").get<double>();
  r.read_step = j.at("read_step").get<std::size_t>();
  r.tau = j.at("tau").get<double>();
  r.verdict = j.at("verdict").get<bool>();
  r.probe_eval_count = j.at("probe_eval_count").get<std::size_t>();
  r.curve_suspect = vec<double>(j, "curve_suspect");
  r.curve_clean = vec<double>(j, "curve_clean");
  return r;
}

ordered_json calibration_to_json(const TauCalibration& c) {
  return {{"tau", c.tau}, {"mean_gap", c.mean_gap}, {"stddev_gap", c.stddev_gap}, {"models", c.models},
          {"pairs", c.pairs}, {"readings", c.readings}, {"baseline", c.median_model()}};
}

TauCalibration calibration_from_json(const ordered_json& j) {
  TauCalibration c;
  c.tau = j.at("tau").get<double>();
  c.mean_gap = j.at("mean_gap").get<double>();
  c.stddev_gap = j.at("stddev_gap").get<double>();
  c.models = j.at("models").get<std::size_t>();
  c.pairs = j.at("pairs").get<std::size_t>();
  c.readings = vec<double>(j, "readings");
  return c;
}

ordered_json purification_to_json(const PurificationReport& r) {
  ordered_json j;
  j["variant"] = to_string(r.variant);
  j["detected"] = r.detected;
  j["ok"] = r.ok;
  j["failure"] = r.failure;
  j["phase1_steps"] = r.phase1_steps;
  j["phase2_steps"] = r.phase2_steps;
  j["aux_accuracy_trace"] = r.aux_accuracy_trace;
  j["cosine_trace"] = r.cosine_trace;
  j["loss_trace"] = r.loss_trace;
  j["retain_trace"] = r.retain_trace;
  j["metrics_before"] = r.metrics_before ? metrics_to_json(*r.metrics_before) : ordered_json(nullptr);
  j["metrics_after"] = r.metrics_after ? metrics_to_json(*r.metrics_after) : ordered_json(nullptr);
  return j;
}

PurificationReport purification_from_json(const ordered_json& j) {
  PurificationReport r;
  r.variant = variant_from_string(j.at("variant").get<std::string>());
  r.detected = j.at("detected").get<bool>();
  r.ok = j.at("ok").get<bool>();
  r.failure = j.at("failure").get<std::string>();
  r.phase1_steps = j.at("phase1_steps").get<std::size_t>();
  r.phase2_steps = j.at("phase2_steps").get<std::size_t>();
  r.aux_accuracy_trace = vec<double>(j, "aux_accuracy_trace");
  r.cosine_trace = vec<double>(j, "cosine_trace");
  r.loss_trace = vec<double>(j, "loss_trace");
  r.retain_trace = vec<double>(j, "retain_trace");
  if (!j.at("metrics_before").is_null()) r.metrics_before = metrics_from_json(j.at("metrics_before"));
  if (!j.at("metrics_after").is_null()) r.metrics_after = metrics_from_json(j.at("metrics_after"));
  return r;
}

std::string report_json(const ExperimentReport& r, bool with_timings) {
  ordered_json j;
  j["schema"] = kReportSchema;
  j["seed"] = r.seed;
  j["config"] = ordered_json::parse(dump_config(r.config));
  j["status"] = r.ok() ? "ok" : "failed";
  j["failed_stage"] = r.failed_stage.empty() ? ordered_json(nullptr) : ordered_json(r.failed_stage);
  ordered_json stages = ordered_json::array();
  for (const auto& s : r.stages) stages.push_back(stage_to_json(s, false));
  j["stages"] = stages;
  j["detection"] = r.detection ? detection_to_json(*r.detection) : ordered_json(nullptr);
  j["calibration"] = r.calibration ? calibration_to_json(*r.calibration) : ordered_json(nullptr);
  j["purification"] = r.purification ? purification_to_json(*r.purification) : ordered_json(nullptr);
  if (with_timings) {
    ordered_json t = ordered_json::object();
    for (const auto& s : r.stages) t[s.name] = s.seconds;
    j["timings_s"] = t;
  }
  return j.dump(2);
}

}  // namespace backflush
