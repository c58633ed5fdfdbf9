#pragma once

#include <string>
#include <vector>

#include "urbanmind/config.hpp"
#include "urbanmind/pipeline.hpp"

namespace urbanmind {

double mae_metric(const Tensor& pred, const Tensor& truth);
double rmse_metric(const Tensor& pred, const Tensor& truth);

// Per-(city, dynamics, horizon-step) errors on normalized values, plus
// aggregates over all cells and steps.
struct MetricReport {
  std::string city;
  std::string dynamics;
  std::string mode;
  int64_t horizon = 0;
  std::vector<double> mae_per_step;
  std::vector<double> rmse_per_step;
  double mae = 0.0;
  double rmse = 0.0;
  uint64_t config_fingerprint = 0;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
};

MetricReport compute_report(const ExperimentConfig& cfg, const Stage3Result& result);

// Full pipeline for one configuration; writes the run directory layout
// (manifest.json, stage1/, stage2/, stage3/predictions.f32, metrics.json).
MetricReport run_experiment(const ExperimentConfig& cfg, const std::string& run_dir);

// Recomputes the report from stage3/predictions.f32 + truth.f32 on disk.
MetricReport report_from_run_dir(const std::string& run_dir);

struct SweepSpec {
  std::string axis;  // p_t | p_s | trainable_layers | n_channels
  std::vector<double> values;
  ExperimentConfig base;
};

struct SweepRow {
  double value = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
};

ExperimentConfig apply_sweep_value(const ExperimentConfig& base,
                                   const std::string& axis, double value);

// One experiment per value with shared seeds; rows sorted by axis value.
// Writes sweep.csv and sweep.svg plus per-row run directories under out_dir.
std::vector<SweepRow> run_sweep(const SweepSpec& spec, const std::string& out_dir);

const std::vector<std::string>& ablation_switch_names();
ExperimentConfig apply_ablation(ExperimentConfig cfg, const std::string& switch_name);

// Per-horizon error curves for a report, or the sweep curve, as an SVG line
// chart with a CSV twin carrying the same points.
void emit_report_plots(const MetricReport& report, const std::string& out_dir);
void emit_sweep_plots(const std::vector<SweepRow>& rows, const std::string& axis,
                      const std::string& out_dir);

}  // namespace urbanmind
