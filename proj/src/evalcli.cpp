#include "urbanmind/evalcli.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "urbanmind/common.hpp"

namespace urbanmind {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

double mae_metric(const Tensor& pred, const Tensor& truth) {
  check_arg(pred.same_shape(truth), "mae_metric: shape mismatch");
  check_arg(pred.size() > 0, "mae_metric: empty tensors");
  double total = 0.0;
  for (int64_t i = 0; i < pred.size(); ++i) total += std::abs(pred[i] - truth[i]);
  return total / static_cast<double>(pred.size());
}

double rmse_metric(const Tensor& pred, const Tensor& truth) {
  check_arg(pred.same_shape(truth), "rmse_metric: shape mismatch");
  check_arg(pred.size() > 0, "rmse_metric: empty tensors");
  double total = 0.0;
  for (int64_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    total += d * d;
  }
  return std::sqrt(total / static_cast<double>(pred.size()));
}

std::string MetricReport::to_json() const {
  ordered_json j;
  j["city"] = city;
  j["dynamics"] = dynamics;
  j["mode"] = mode;
  j["horizon"] = horizon;
  j["mae_per_step"] = mae_per_step;
  j["rmse_per_step"] = rmse_per_step;
  j["mae"] = mae;
  j["rmse"] = rmse;
  j["config_fingerprint"] = config_fingerprint;
  return j.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt metric report: ") + e.what());
  }
  MetricReport r;
  r.city = j.at("city");
  r.dynamics = j.at("dynamics");
  r.mode = j.at("mode");
  r.horizon = j.at("horizon");
  r.mae_per_step = j.at("mae_per_step").get<std::vector<double>>();
  r.rmse_per_step = j.at("rmse_per_step").get<std::vector<double>>();
  r.mae = j.at("mae");
  r.rmse = j.at("rmse");
  r.config_fingerprint = j.at("config_fingerprint");
  return r;
}

namespace {

MetricReport report_from_frames(const ExperimentConfig& cfg,
                                const std::vector<Tensor>& predictions,
                                const std::vector<Tensor>& truth) {
  check_arg(predictions.size() == truth.size() && !predictions.empty(),
            "report: prediction/truth count mismatch");
  const int64_t m = cfg.eval.m;
  MetricReport r;
  r.city = cfg.data.city;
  r.dynamics = "channel" + std::to_string(cfg.data.target_channel);
  r.mode = cfg.data.mode;
  r.horizon = m;
  r.config_fingerprint = cfg.fingerprint();

  const int64_t cells = predictions.front().size() / m;
  double total_abs = 0.0, total_sq = 0.0;
  for (int64_t step = 0; step < m; ++step) {
    double abs_sum = 0.0, sq_sum = 0.0;
    int64_t count = 0;
    for (size_t u = 0; u < predictions.size(); ++u)
      for (int64_t i = 0; i < cells; ++i) {
        const double d = predictions[u][step * cells + i] - truth[u][step * cells + i];
        abs_sum += std::abs(d);
        sq_sum += d * d;
        ++count;
      }
    r.mae_per_step.push_back(abs_sum / static_cast<double>(count));
    r.rmse_per_step.push_back(std::sqrt(sq_sum / static_cast<double>(count)));
    total_abs += abs_sum;
    total_sq += sq_sum;
  }
  const auto n = static_cast<double>(predictions.size() * static_cast<size_t>(m * cells));
  r.mae = total_abs / n;
  r.rmse = std::sqrt(total_sq / n);
  return r;
}

std::vector<float> read_f32(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("missing file: " + path.string());
  is.seekg(0, std::ios::end);
  const auto bytes = static_cast<size_t>(is.tellg());
  if (bytes % sizeof(float) != 0) throw FormatError("partial float in " + path.string());
  std::vector<float> buf(bytes / sizeof(float));
  is.seekg(0);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  return buf;
}

}  // namespace

MetricReport compute_report(const ExperimentConfig& cfg, const Stage3Result& result) {
  return report_from_frames(cfg, result.predictions, result.truth);
}

MetricReport run_experiment(const ExperimentConfig& cfg, const std::string& run_dir) {
  Pipeline pipeline(cfg);
  pipeline.run_stage1();
  pipeline.run_stage2();
  const Stage3Result result = pipeline.run_stage3();
  pipeline.save_run(run_dir);
  pipeline.write_stage3(run_dir, result);

  const MetricReport report = compute_report(cfg, result);
  std::ofstream os(fs::path(run_dir) / "metrics.json");
  os << report.to_json() << "\n";
  return report;
}

MetricReport report_from_run_dir(const std::string& run_dir) {
  std::ifstream mf(fs::path(run_dir) / "manifest.json");
  if (!mf) throw FormatError("missing manifest.json: " + run_dir);
  const RunManifest manifest = RunManifest::from_json(
      std::string((std::istreambuf_iterator<char>(mf)), std::istreambuf_iterator<char>()));
  const ExperimentConfig cfg = ExperimentConfig::from_json(manifest.config_json);

  const auto preds = read_f32(fs::path(run_dir) / "stage3" / "predictions.f32");
  const auto truths = read_f32(fs::path(run_dir) / "stage3" / "truth.f32");
  if (preds.size() != truths.size() || preds.empty())
    throw FormatError("prediction/truth payload mismatch");
  const int64_t frame = cfg.eval.m * cfg.data.side * cfg.data.side;
  if (static_cast<int64_t>(preds.size()) % frame != 0)
    throw FormatError("prediction payload is not a whole number of units");

  std::vector<Tensor> pred_frames, truth_frames;
  const auto units = static_cast<int64_t>(preds.size()) / frame;
  for (int64_t u = 0; u < units; ++u) {
    Tensor p({cfg.eval.m, 1, cfg.data.side, cfg.data.side});
    Tensor t({cfg.eval.m, 1, cfg.data.side, cfg.data.side});
    for (int64_t i = 0; i < frame; ++i) {
      p[i] = static_cast<double>(preds[static_cast<size_t>(u * frame + i)]);
      t[i] = static_cast<double>(truths[static_cast<size_t>(u * frame + i)]);
    }
    pred_frames.push_back(std::move(p));
    truth_frames.push_back(std::move(t));
  }
  return report_from_frames(cfg, pred_frames, truth_frames);
}

ExperimentConfig apply_sweep_value(const ExperimentConfig& base,
                                   const std::string& axis, double value) {
  ExperimentConfig cfg = base;
  if (axis == "p_t") {
    cfg.mae.p_t = value;
  } else if (axis == "p_s") {
    cfg.mae.p_s = value;
  } else if (axis == "trainable_layers") {
    const auto trainable = static_cast<int64_t>(std::llround(value));
    check_arg(trainable >= 0 && trainable <= cfg.backbone.layers,
              "trainable_layers outside [0, L]");
    cfg.backbone.frozen_layers = cfg.backbone.layers - trainable;
  } else if (axis == "n_channels") {
    const auto channels = static_cast<int64_t>(std::llround(value));
    check_arg(channels >= 1, "n_channels must be >= 1");
    cfg.data.channels = channels;
  } else {
    throw std::invalid_argument("unknown sweep axis: " + axis);
  }
  cfg.validate();
  return cfg;
}

std::vector<SweepRow> run_sweep(const SweepSpec& spec, const std::string& out_dir) {
  check_arg(!spec.values.empty(), "sweep needs at least one value");
  std::vector<double> values = spec.values;
  std::sort(values.begin(), values.end());

  fs::create_directories(out_dir);
  std::vector<SweepRow> rows;
  for (double v : values) {
    const ExperimentConfig cfg = apply_sweep_value(spec.base, spec.axis, v);
    std::ostringstream run_name;
    run_name << "run_" << spec.axis << "_" << v;
    const MetricReport report =
        run_experiment(cfg, (fs::path(out_dir) / run_name.str()).string());
    rows.push_back({v, report.mae, report.rmse});
  }

  std::ofstream csv(fs::path(out_dir) / "sweep.csv");
  csv << "# axis=" << spec.axis << " seed=" << spec.base.eval.seed << "\n";
  csv << spec.axis << ",mae,rmse\n";
  for (const auto& row : rows)
    csv << row.value << "," << row.mae << "," << row.rmse << "\n";
  emit_sweep_plots(rows, spec.axis, out_dir);
  return rows;
}

const std::vector<std::string>& ablation_switch_names() {
  static const std::vector<std::string> names = {
      "no_muffin_mae",       "no_temporal_mask",
      "no_spatial_mask",     "no_global_mask",
      "no_target_embedding", "no_multifaceted_embedding",
      "no_finetuning",       "no_adaptation"};
  return names;
}

ExperimentConfig apply_ablation(ExperimentConfig cfg, const std::string& switch_name) {
  AblationFlags& a = cfg.eval.ablation;
  if (switch_name == "no_muffin_mae") a.no_muffin_mae = true;
  else if (switch_name == "no_temporal_mask") a.no_temporal_mask = true;
  else if (switch_name == "no_spatial_mask") a.no_spatial_mask = true;
  else if (switch_name == "no_global_mask") a.no_global_mask = true;
  else if (switch_name == "no_target_embedding") a.no_target_embedding = true;
  else if (switch_name == "no_multifaceted_embedding") a.no_multifaceted_embedding = true;
  else if (switch_name == "no_finetuning") a.no_finetuning = true;
  else if (switch_name == "no_adaptation") a.no_adaptation = true;
  else throw std::invalid_argument("unknown ablation switch: " + switch_name);
  return cfg;
}

namespace {

// Minimal SVG line chart; one polyline per series.
void write_svg_chart(const fs::path& path, const std::string& title,
                     const std::vector<double>& xs,
                     const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  const int width = 640, height = 420, margin = 60;
  double xmin = xs.front(), xmax = xs.back();
  if (xmax == xmin) xmax = xmin + 1.0;
  double ymin = 0.0, ymax = 0.0;
  for (const auto& [_, ys] : series)
    for (double y : ys) ymax = std::max(ymax, y);
  if (ymax == 0.0) ymax = 1.0;
  ymax *= 1.1;

  auto px = [&](double x) {
    return margin + (x - xmin) / (xmax - xmin) * (width - 2 * margin);
  };
  auto py = [&](double y) {
    return height - margin - (y - ymin) / (ymax - ymin) * (height - 2 * margin);
  };

  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  std::ofstream os(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
     << "\" height=\"" << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" "
     << "font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\""
     << width - margin << "\" y2=\"" << height - margin << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin
     << "\" y2=\"" << height - margin << "\" stroke=\"black\"/>\n";
  int si = 0;
  for (const auto& [name, ys] : series) {
    std::ostringstream pts;
    for (size_t i = 0; i < xs.size(); ++i)
      pts << px(xs[i]) << "," << py(ys[i]) << " ";
    os << "<polyline fill=\"none\" stroke=\"" << colors[si % 4]
       << "\" stroke-width=\"2\" points=\"" << pts.str() << "\"/>\n";
    for (size_t i = 0; i < xs.size(); ++i)
      os << "<circle cx=\"" << px(xs[i]) << "\" cy=\"" << py(ys[i])
         << "\" r=\"3\" fill=\"" << colors[si % 4] << "\"/>\n";
    os << "<text x=\"" << width - margin + 6 << "\" y=\""
       << py(ys.back()) << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\""
       << colors[si % 4] << "\">" << name << "</text>\n";
    ++si;
  }
  for (size_t i = 0; i < xs.size(); ++i) {
    os << "<text x=\"" << px(xs[i]) << "\" y=\"" << height - margin + 18
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
       << xs[i] << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace

void emit_report_plots(const MetricReport& report, const std::string& out_dir) {
  check_arg(!report.rmse_per_step.empty(), "empty report");
  fs::create_directories(out_dir);
  std::vector<double> xs;
  for (int64_t s = 1; s <= report.horizon; ++s) xs.push_back(static_cast<double>(s));

  std::ofstream csv(fs::path(out_dir) / "horizon_errors.csv");
  csv << "step,mae,rmse\n";
  for (size_t i = 0; i < xs.size(); ++i)
    csv << xs[i] << "," << report.mae_per_step[i] << "," << report.rmse_per_step[i]
        << "\n";

  write_svg_chart(fs::path(out_dir) / "horizon_errors.svg",
                  report.city + " " + report.dynamics + " errors by horizon step", xs,
                  {{"mae", report.mae_per_step}, {"rmse", report.rmse_per_step}});
}

void emit_sweep_plots(const std::vector<SweepRow>& rows, const std::string& axis,
                      const std::string& out_dir) {
  check_arg(!rows.empty(), "empty sweep");
  fs::create_directories(out_dir);
  std::vector<double> xs, mae, rmse;
  for (const auto& r : rows) {
    xs.push_back(r.value);
    mae.push_back(r.mae);
    rmse.push_back(r.rmse);
  }
  write_svg_chart(fs::path(out_dir) / "sweep.svg", "errors vs " + axis, xs,
                  {{"mae", mae}, {"rmse", rmse}});
}

}  // namespace urbanmind
