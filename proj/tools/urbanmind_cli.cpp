#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "urbanmind/evalcli.hpp"

namespace fs = std::filesystem;
using namespace urbanmind;

namespace {

ExperimentConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return ExperimentConfig::from_file(path);
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(std::stod(part));
  return out;
}

int cmd_data_gen(const std::string& out_dir, uint64_t seed, int64_t n, int64_t t,
                 int64_t c, int side, int stride, int height, int width) {
  CityGrid grid{"synthia", height, width, 1.0};
  const auto regions = partition_city(grid, side, stride);
  std::vector<UrbanDynamicsTensor> tensors;
  for (const auto& r : regions) {
    auto tensor = generate_synthetic(r, n, t, c, seed);
    tensor.city = grid.name;
    tensors.push_back(std::move(tensor));
  }
  save_city_dump(tensors, out_dir);
  std::cout << "wrote " << regions.size() << " regions to " << out_dir << "\n";
  return 0;
}

int cmd_data_import(const std::string& dump_dir, const std::string& out_dir) {
  const auto regions = load_city_dump(dump_dir);
  for (size_t i = 0; i < regions.size(); ++i)
    save_dataset(regions[i], (fs::path(out_dir) / ("region" + std::to_string(i))).string());
  std::cout << "imported " << regions.size() << " region datasets into " << out_dir
            << "\n";
  return 0;
}

int cmd_data_split(const std::string& mode, int side, int stride, int height,
                   int width, double test_fraction, uint64_t seed) {
  CityGrid grid{"synthia", height, width, 1.0};
  const auto regions = partition_city(grid, side, stride);
  const auto split = make_splits(
      regions, mode == "zero_shot" ? SplitMode::kZeroShot : SplitMode::kStandard,
      test_fraction, seed);
  std::cout << "regions=" << regions.size() << " train=" << split.train_regions.size()
            << " test=" << split.test_regions.size() << "\n";
  for (const auto& r : split.test_regions)
    std::cout << "test region (" << r.top_i << "," << r.top_j << ") side " << r.side
              << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"urbanmind: masked-autoencoder urban dynamics pipeline"};
  app.require_subcommand(1);

  // data gen|import|split
  auto* data = app.add_subcommand("data", "dataset generation and ingestion");
  data->require_subcommand(1);
  std::string out_dir = "data_out", dump_dir, mode = "zero_shot";
  uint64_t seed = 7;
  int64_t n = 30, t = 12, c = 3;
  int side = 10, stride = 10, height = 20, width = 20;
  double test_fraction = 0.25;

  auto* gen = data->add_subcommand("gen", "generate a synthetic city dump");
  gen->add_option("--out", out_dir);
  gen->add_option("--seed", seed);
  gen->add_option("--n", n);
  gen->add_option("--t", t);
  gen->add_option("--c", c);
  gen->add_option("--side", side);
  gen->add_option("--stride", stride);
  gen->add_option("--height", height);
  gen->add_option("--width", width);

  auto* import = data->add_subcommand("import", "split a city dump into region datasets");
  import->add_option("--dump", dump_dir)->required();
  import->add_option("--out", out_dir);

  auto* split = data->add_subcommand("split", "print a train/test region split");
  split->add_option("--mode", mode);
  split->add_option("--side", side);
  split->add_option("--stride", stride);
  split->add_option("--height", height);
  split->add_option("--width", width);
  split->add_option("--test-fraction", test_fraction);
  split->add_option("--seed", seed);

  // mae train
  auto* mae = app.add_subcommand("mae", "masked autoencoder stage");
  auto* mae_train = mae->add_subcommand("train", "train the autoencoders (stage 1)");
  std::string config_path, run_dir = "run_out";
  mae_train->add_option("--config", config_path);
  mae_train->add_option("--out", run_dir);

  // run
  auto* run = app.add_subcommand("run", "run pipeline stages");
  std::string stage = "all";
  run->add_option("--config", config_path);
  run->add_option("--out", run_dir);
  run->add_option("--stage", stage)->check(CLI::IsMember({"1", "2", "3", "all"}));

  // eval
  auto* eval = app.add_subcommand("eval", "recompute metrics from a run directory");
  std::string eval_run;
  eval->add_option("--run", eval_run)->required();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "hyperparameter sweep");
  std::string axis = "p_t", values_csv = "0.15,0.25,0.33,0.45";
  sweep->add_option("--config", config_path);
  sweep->add_option("--axis", axis)
      ->check(CLI::IsMember({"p_t", "p_s", "trainable_layers", "n_channels"}));
  sweep->add_option("--values", values_csv);
  sweep->add_option("--out", run_dir);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "run one component ablation");
  std::string switch_name = "no_adaptation";
  ablate->add_option("--config", config_path);
  ablate->add_option("--switch", switch_name);
  ablate->add_option("--out", run_dir);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_data_gen(out_dir, seed, n, t, c, side, stride, height, width);
    if (import->parsed()) return cmd_data_import(dump_dir, out_dir);
    if (split->parsed())
      return cmd_data_split(mode, side, stride, height, width, test_fraction, seed);

    if (mae_train->parsed()) {
      Pipeline pipeline(load_config_or_default(config_path));
      pipeline.run_stage1();
      pipeline.save_run(run_dir);
      std::cout << "stage 1 complete; checkpoints in " << run_dir << "\n";
      return 0;
    }

    if (run->parsed()) {
      const ExperimentConfig cfg = load_config_or_default(config_path);
      if (stage == "all") {
        const MetricReport report = run_experiment(cfg, run_dir);
        emit_report_plots(report, (fs::path(run_dir) / "plots").string());
        std::cout << "mae=" << report.mae << " rmse=" << report.rmse << "\n";
        return 0;
      }
      Pipeline pipeline = fs::exists(fs::path(run_dir) / "manifest.json")
                              ? Pipeline::load_run(run_dir)
                              : Pipeline(cfg);
      if (stage == "1") {
        pipeline.run_stage1();
      } else if (stage == "2") {
        pipeline.run_stage2();
      } else {
        const Stage3Result result = pipeline.run_stage3();
        pipeline.write_stage3(run_dir, result);
        const MetricReport report = compute_report(pipeline.config(), result);
        std::ofstream os(fs::path(run_dir) / "metrics.json");
        os << report.to_json() << "\n";
        std::cout << "mae=" << report.mae << " rmse=" << report.rmse << "\n";
      }
      pipeline.save_run(run_dir);
      std::cout << "stage " << stage << " complete; run dir " << run_dir << "\n";
      return 0;
    }

    if (eval->parsed()) {
      const MetricReport report = report_from_run_dir(eval_run);
      std::cout << report.to_json() << "\n";
      return 0;
    }

    if (sweep->parsed()) {
      SweepSpec spec{axis, parse_values(values_csv), load_config_or_default(config_path)};
      const auto rows = run_sweep(spec, run_dir);
      for (const auto& row : rows)
        std::cout << axis << "=" << row.value << " mae=" << row.mae
                  << " rmse=" << row.rmse << "\n";
      return 0;
    }

    if (ablate->parsed()) {
      const ExperimentConfig cfg =
          apply_ablation(load_config_or_default(config_path), switch_name);
      const MetricReport report = run_experiment(cfg, run_dir);
      std::cout << switch_name << ": mae=" << report.mae << " rmse=" << report.rmse
                << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
