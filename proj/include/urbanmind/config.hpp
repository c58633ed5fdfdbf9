#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "urbanmind/grid_data.hpp"
#include "urbanmind/masking.hpp"

namespace urbanmind {

// Table-3 style component switches. Independent and composable.
struct AblationFlags {
  bool no_muffin_mae = false;
  bool no_temporal_mask = false;
  bool no_spatial_mask = false;
  bool no_global_mask = false;
  bool no_target_embedding = false;
  bool no_multifaceted_embedding = false;
  bool no_finetuning = false;
  bool no_adaptation = false;
};

struct DataSection {
  std::string city = "synthia";
  int grid_height = 20;
  int grid_width = 20;
  int side = 10;
  int stride = 10;
  int64_t days = 30;
  int64_t slots = 12;
  int64_t channels = 3;
  int target_channel = 0;
  std::string mode = "zero_shot";  // standard | zero_shot
  double test_fraction = 0.25;
  double train_day_fraction = 0.8;
  bool clip = false;
  SyntheticParams synth;
  // When set, test regions are generated with these parameters instead
  // (constructed distribution shift for adaptation studies).
  bool shift_test_regions = false;
  SyntheticParams shifted_synth;
  std::string import_dir;  // load a city dump instead of generating
};

struct MaeSection {
  int64_t d_v = 64;
  int64_t d_k = 32;
  std::vector<int64_t> conv_widths = {32, 64};
  double lr = -1.0;  // <0: resolved from the preset
  int64_t epochs = 200;
  int64_t batch_size = 16;
  double p_s = 0.25;
  double p_t = 0.33;
  std::vector<MaskStrategy> schedule = {MaskStrategy::kSpatial,
                                        MaskStrategy::kTemporal,
                                        MaskStrategy::kGlobal};
};

struct BackboneSection {
  int64_t layers = 6;
  int64_t frozen_layers = 4;
  int64_t hidden_dim = 128;
  int64_t n_heads = 4;
  int64_t ffn_dim = 512;
  int64_t max_seq_len = 96;
  double lr = -1.0;
  int64_t epochs = 100;
  int64_t batch_size = 8;
};

struct HeadsSection {
  int64_t trunk_layers = 2;
  int64_t predictor_layers = 1;
  int64_t reconstructor_layers = 1;
  int64_t fc_hidden = 128;
};

struct TtaSection {
  int64_t epochs = 5;
  double lr = -1.0;
  double p = 0.25;
  std::string scope = "per_batch";  // per_region | per_batch
  bool reset = true;
};

struct EvalSection {
  int64_t h = 8;
  int64_t m = 4;
  uint64_t seed = 7;
  std::string lr_preset = "small";  // small | large
  AblationFlags ablation;
};

struct ExperimentConfig {
  DataSection data;
  MaeSection mae;
  BackboneSection backbone;
  HeadsSection heads;
  TtaSection tta;
  EvalSection eval;

  // Learning rates with preset fallbacks applied.
  double mae_lr() const;
  double finetune_lr() const;
  double tta_lr() const;

  void validate() const;
  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig from_file(const std::string& path);
  // FNV-1a over the canonical JSON dump.
  uint64_t fingerprint() const;
};

}  // namespace urbanmind
