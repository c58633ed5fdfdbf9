#include "urbanmind/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>

#include "urbanmind/common.hpp"

namespace urbanmind {

using nlohmann::ordered_json;

namespace {

void expect_keys(const ordered_json& obj, const std::set<std::string>& known,
                 const std::string& where) {
  for (const auto& [key, _] : obj.items())
    check_arg(known.count(key) > 0, "unknown config key: " + where + "." + key);
}

template <typename T>
void opt(const ordered_json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

MaskStrategy strategy_from_string(const std::string& s) {
  if (s == "spatial") return MaskStrategy::kSpatial;
  if (s == "temporal") return MaskStrategy::kTemporal;
  if (s == "global") return MaskStrategy::kGlobal;
  throw std::invalid_argument("unknown masking strategy: " + s);
}

ordered_json synth_to_json(const SyntheticParams& p) {
  return ordered_json{{"amplitude", p.amplitude},
                      {"phase", p.phase},
                      {"phase_drift_per_day", p.phase_drift_per_day},
                      {"grad_x", p.grad_x},
                      {"grad_y", p.grad_y},
                      {"coupling", p.coupling},
                      {"channel_offset", p.channel_offset},
                      {"noise", p.noise}};
}

SyntheticParams synth_from_json(const ordered_json& j, const std::string& where) {
  expect_keys(j, {"amplitude", "phase", "phase_drift_per_day", "grad_x", "grad_y",
                  "coupling", "channel_offset", "noise"},
              where);
  SyntheticParams p;
  opt(j, "amplitude", p.amplitude);
  opt(j, "phase", p.phase);
  opt(j, "phase_drift_per_day", p.phase_drift_per_day);
  opt(j, "grad_x", p.grad_x);
  opt(j, "grad_y", p.grad_y);
  opt(j, "coupling", p.coupling);
  opt(j, "channel_offset", p.channel_offset);
  opt(j, "noise", p.noise);
  return p;
}

}  // namespace

double ExperimentConfig::mae_lr() const {
  if (mae.lr >= 0.0) return mae.lr;
  return eval.lr_preset == "large" ? 1e-5 : 1e-4;
}

double ExperimentConfig::finetune_lr() const {
  if (backbone.lr >= 0.0) return backbone.lr;
  return eval.lr_preset == "large" ? 1e-5 : 1e-4;
}

double ExperimentConfig::tta_lr() const {
  if (tta.lr >= 0.0) return tta.lr;
  return eval.lr_preset == "large" ? 5e-5 : 5e-4;
}

void ExperimentConfig::validate() const {
  check_arg(data.mode == "standard" || data.mode == "zero_shot",
            "data.mode must be standard or zero_shot");
  check_arg(data.side >= 1 && data.stride >= 1, "bad data.side or data.stride");
  check_arg(data.days >= 1 && data.slots >= 1 && data.channels >= 1,
            "bad data dimensions");
  check_arg(data.target_channel >= 0 &&
                data.target_channel < static_cast<int>(data.channels),
            "target_channel out of range");
  check_arg(eval.h >= 1 && eval.m >= 1 && eval.h + eval.m <= data.slots,
            "eval.h + eval.m must fit in data.slots");
  check_arg(eval.lr_preset == "small" || eval.lr_preset == "large",
            "eval.lr_preset must be small or large");
  check_arg(tta.scope == "per_region" || tta.scope == "per_batch",
            "tta.scope must be per_region or per_batch");
  check_arg(tta.epochs >= 1, "tta.epochs must be >= 1");
  check_arg(tta.p > 0.0 && tta.p < 1.0, "tta.p must lie in (0,1)");
  check_arg(backbone.frozen_layers >= 0 && backbone.frozen_layers <= backbone.layers,
            "backbone.frozen_layers out of range");
}

std::string ExperimentConfig::to_json() const {
  ordered_json j;
  j["data"] = ordered_json{{"city", data.city},
                           {"grid_height", data.grid_height},
                           {"grid_width", data.grid_width},
                           {"side", data.side},
                           {"stride", data.stride},
                           {"days", data.days},
                           {"slots", data.slots},
                           {"channels", data.channels},
                           {"target_channel", data.target_channel},
                           {"mode", data.mode},
                           {"test_fraction", data.test_fraction},
                           {"train_day_fraction", data.train_day_fraction},
                           {"clip", data.clip},
                           {"synth", synth_to_json(data.synth)},
                           {"shift_test_regions", data.shift_test_regions},
                           {"shifted_synth", synth_to_json(data.shifted_synth)},
                           {"import_dir", data.import_dir}};
  std::vector<std::string> sched;
  for (auto s : mae.schedule) sched.push_back(to_string(s));
  j["mae"] = ordered_json{{"d_v", mae.d_v},
                          {"d_k", mae.d_k},
                          {"conv_widths", mae.conv_widths},
                          {"lr", mae.lr},
                          {"epochs", mae.epochs},
                          {"batch_size", mae.batch_size},
                          {"p_s", mae.p_s},
                          {"p_t", mae.p_t},
                          {"schedule", sched}};
  j["backbone"] = ordered_json{{"layers", backbone.layers},
                               {"frozen_layers", backbone.frozen_layers},
                               {"hidden_dim", backbone.hidden_dim},
                               {"n_heads", backbone.n_heads},
                               {"ffn_dim", backbone.ffn_dim},
                               {"max_seq_len", backbone.max_seq_len},
                               {"lr", backbone.lr},
                               {"epochs", backbone.epochs},
                               {"batch_size", backbone.batch_size}};
  j["heads"] = ordered_json{{"trunk_layers", heads.trunk_layers},
                            {"predictor_layers", heads.predictor_layers},
                            {"reconstructor_layers", heads.reconstructor_layers},
                            {"fc_hidden", heads.fc_hidden}};
  j["tta"] = ordered_json{{"epochs", tta.epochs},
                          {"lr", tta.lr},
                          {"p", tta.p},
                          {"scope", tta.scope},
                          {"reset", tta.reset}};
  j["eval"] = ordered_json{
      {"h", eval.h},
      {"m", eval.m},
      {"seed", eval.seed},
      {"lr_preset", eval.lr_preset},
      {"ablation", ordered_json{{"no_muffin_mae", eval.ablation.no_muffin_mae},
                                {"no_temporal_mask", eval.ablation.no_temporal_mask},
                                {"no_spatial_mask", eval.ablation.no_spatial_mask},
                                {"no_global_mask", eval.ablation.no_global_mask},
                                {"no_target_embedding", eval.ablation.no_target_embedding},
                                {"no_multifaceted_embedding",
                                 eval.ablation.no_multifaceted_embedding},
                                {"no_finetuning", eval.ablation.no_finetuning},
                                {"no_adaptation", eval.ablation.no_adaptation}}}};
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  expect_keys(j, {"data", "mae", "backbone", "heads", "tta", "eval"}, "config");

  ExperimentConfig c;
  if (j.contains("data")) {
    const auto& d = j["data"];
    expect_keys(d, {"city", "grid_height", "grid_width", "side", "stride", "days",
                    "slots", "channels", "target_channel", "mode", "test_fraction",
                    "train_day_fraction", "clip", "synth", "shift_test_regions",
                    "shifted_synth", "import_dir"},
                "data");
    opt(d, "city", c.data.city);
    opt(d, "grid_height", c.data.grid_height);
    opt(d, "grid_width", c.data.grid_width);
    opt(d, "side", c.data.side);
    opt(d, "stride", c.data.stride);
    opt(d, "days", c.data.days);
    opt(d, "slots", c.data.slots);
    opt(d, "channels", c.data.channels);
    opt(d, "target_channel", c.data.target_channel);
    opt(d, "mode", c.data.mode);
    opt(d, "test_fraction", c.data.test_fraction);
    opt(d, "train_day_fraction", c.data.train_day_fraction);
    opt(d, "clip", c.data.clip);
    if (d.contains("synth")) c.data.synth = synth_from_json(d["synth"], "data.synth");
    opt(d, "shift_test_regions", c.data.shift_test_regions);
    if (d.contains("shifted_synth"))
      c.data.shifted_synth = synth_from_json(d["shifted_synth"], "data.shifted_synth");
    opt(d, "import_dir", c.data.import_dir);
  }
  if (j.contains("mae")) {
    const auto& m = j["mae"];
    expect_keys(m, {"d_v", "d_k", "conv_widths", "lr", "epochs", "batch_size", "p_s",
                    "p_t", "schedule"},
                "mae");
    opt(m, "d_v", c.mae.d_v);
    opt(m, "d_k", c.mae.d_k);
    opt(m, "conv_widths", c.mae.conv_widths);
    opt(m, "lr", c.mae.lr);
    opt(m, "epochs", c.mae.epochs);
    opt(m, "batch_size", c.mae.batch_size);
    opt(m, "p_s", c.mae.p_s);
    opt(m, "p_t", c.mae.p_t);
    if (m.contains("schedule")) {
      c.mae.schedule.clear();
      for (const auto& s : m["schedule"])
        c.mae.schedule.push_back(strategy_from_string(s.get<std::string>()));
    }
  }
  if (j.contains("backbone")) {
    const auto& b = j["backbone"];
    expect_keys(b, {"layers", "frozen_layers", "hidden_dim", "n_heads", "ffn_dim",
                    "max_seq_len", "lr", "epochs", "batch_size"},
                "backbone");
    opt(b, "layers", c.backbone.layers);
    opt(b, "frozen_layers", c.backbone.frozen_layers);
    opt(b, "hidden_dim", c.backbone.hidden_dim);
    opt(b, "n_heads", c.backbone.n_heads);
    opt(b, "ffn_dim", c.backbone.ffn_dim);
    opt(b, "max_seq_len", c.backbone.max_seq_len);
    opt(b, "lr", c.backbone.lr);
    opt(b, "epochs", c.backbone.epochs);
    opt(b, "batch_size", c.backbone.batch_size);
  }
  if (j.contains("heads")) {
    const auto& h = j["heads"];
    expect_keys(h, {"trunk_layers", "predictor_layers", "reconstructor_layers",
                    "fc_hidden"},
                "heads");
    opt(h, "trunk_layers", c.heads.trunk_layers);
    opt(h, "predictor_layers", c.heads.predictor_layers);
    opt(h, "reconstructor_layers", c.heads.reconstructor_layers);
    opt(h, "fc_hidden", c.heads.fc_hidden);
  }
  if (j.contains("tta")) {
    const auto& t = j["tta"];
    expect_keys(t, {"epochs", "lr", "p", "scope", "reset"}, "tta");
    opt(t, "epochs", c.tta.epochs);
    opt(t, "lr", c.tta.lr);
    opt(t, "p", c.tta.p);
    opt(t, "scope", c.tta.scope);
    opt(t, "reset", c.tta.reset);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    expect_keys(e, {"h", "m", "seed", "lr_preset", "ablation"}, "eval");
    opt(e, "h", c.eval.h);
    opt(e, "m", c.eval.m);
    opt(e, "seed", c.eval.seed);
    opt(e, "lr_preset", c.eval.lr_preset);
    if (e.contains("ablation")) {
      const auto& a = e["ablation"];
      expect_keys(a, {"no_muffin_mae", "no_temporal_mask", "no_spatial_mask",
                      "no_global_mask", "no_target_embedding",
                      "no_multifaceted_embedding", "no_finetuning", "no_adaptation"},
                  "eval.ablation");
      opt(a, "no_muffin_mae", c.eval.ablation.no_muffin_mae);
      opt(a, "no_temporal_mask", c.eval.ablation.no_temporal_mask);
      opt(a, "no_spatial_mask", c.eval.ablation.no_spatial_mask);
      opt(a, "no_global_mask", c.eval.ablation.no_global_mask);
      opt(a, "no_target_embedding", c.eval.ablation.no_target_embedding);
      opt(a, "no_multifaceted_embedding", c.eval.ablation.no_multifaceted_embedding);
      opt(a, "no_finetuning", c.eval.ablation.no_finetuning);
      opt(a, "no_adaptation", c.eval.ablation.no_adaptation);
    }
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  return from_json(text);
}

uint64_t ExperimentConfig::fingerprint() const {
  const std::string s = to_json();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch : s) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace urbanmind
