#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "urbanmind/config.hpp"
#include "urbanmind/grid_data.hpp"
#include "urbanmind/heads.hpp"
#include "urbanmind/muffin_mae.hpp"
#include "urbanmind/st_backbone.hpp"
#include "urbanmind/tokens_prompts.hpp"

namespace urbanmind {

// Test-time adaptation loop hyperparameters.
struct AdaptationPolicy {
  int64_t epochs = 5;
  double lr = 5e-4;
  double p = 0.25;
  enum Scope { kPerRegion, kPerBatch } scope = kPerBatch;
  bool reset = true;  // restore trunk/G to the fine-tuned weights per unit

  static AdaptationPolicy from_config(const ExperimentConfig& cfg);
};

// One prediction sample: a (region, day) pair.
struct Unit {
  int64_t region_index = 0;
  int64_t day = 0;
};

struct StageStatus {
  bool complete = false;
  uint64_t seed = 0;
  double wall_seconds = 0.0;
  std::string checkpoint;
};

struct RunManifest {
  std::string config_json;
  uint64_t master_seed = 0;
  StageStatus stage1, stage2, stage3;
  std::vector<double> stage1_mf_loss;
  std::vector<double> stage1_target_loss;
  std::vector<double> stage2_loss;
  int64_t stage2_epochs_done = 0;
  int64_t stage2_adam_t = 0;
  std::string stage2_order_rng;
  int64_t tta_fallbacks = 0;
  int64_t tta_steps_total = 0;
  int64_t tta_steps_decreasing = 0;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
};

struct Stage3Result {
  std::vector<Unit> units;
  std::vector<Tensor> predictions;      // adapted (m,1,l,l) per unit
  std::vector<Tensor> predictions_pre;  // before adaptation
  std::vector<Tensor> truth;
  std::vector<std::vector<double>> recon_losses;  // per unit, per epoch
  int64_t fallbacks = 0;
};

// Orchestrates the three training stages over one experiment configuration.
// All randomness flows from (config, eval.seed); reruns are bit-identical.
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig cfg);

  void prepare_data();
  void run_stage1();
  // Trains up to `epochs_total` cumulative epochs (config value when < 0).
  // Callable repeatedly; picks up where the last call stopped.
  void run_stage2(int64_t epochs_total = -1);
  Stage3Result run_stage3();

  // Full run-directory checkpoint: manifest.json + stage1/ + stage2/ (and the
  // caller may add stage3 outputs via write_stage3).
  void save_run(const std::string& dir) const;
  static Pipeline load_run(const std::string& dir);
  void write_stage3(const std::string& dir, const Stage3Result& result) const;

  const ExperimentConfig& config() const { return cfg_; }
  const RunManifest& manifest() const { return manifest_; }
  const SplitSpec& split() const { return split_; }
  const std::vector<UrbanDynamicsTensor>& regions() const { return regions_; }
  std::vector<Unit> train_units() const;
  std::vector<Unit> test_units() const;

  MAEModel& mae_multifaceted() { return *mae_mf_; }
  MAEModel& mae_target() { return *mae_tgt_; }
  BackboneState& backbone() { return *backbone_; }
  HeadsState& heads() { return *heads_; }
  const Vocab& vocab() const { return *vocab_; }

  // Fused tokens for a unit (uses the trained encoders; cached for training
  // units during stage 1).
  TokenSequence tokens_for(const Unit& u);
  PromptContext prompt_context_for(const Unit& u) const;
  // Ground-truth target frames (m,1,l,l) for a unit.
  Tensor target_frames(const Unit& u) const;
  // Backbone embedding sequence E for a unit.
  HiddenSequence embed_unit(const Unit& u);
  Tensor predict_unit(const Unit& u);

 private:
  void build_models();
  void require_stage(int which) const;
  int64_t token_width() const;
  Tensor unit_tokens_raw(const Unit& u);
  double stage2_epoch(Adam& adam, Rng& order_rng);
  void freeze_for_stage2();
  void freeze_for_stage3();

  ExperimentConfig cfg_;
  RunManifest manifest_;
  std::vector<UrbanDynamicsTensor> regions_;
  SplitSpec split_;
  std::vector<int64_t> train_region_idx_, test_region_idx_;

  std::unique_ptr<MAEModel> mae_mf_, mae_tgt_;
  std::unique_ptr<BackboneState> backbone_;
  std::unique_ptr<HeadsState> heads_;
  std::unique_ptr<Vocab> vocab_;
  std::map<std::pair<int64_t, int64_t>, Tensor> token_cache_;

  std::unique_ptr<Adam> stage2_adam_;
  std::string stage2_order_rng_state_;
  bool data_ready_ = false;
};

}  // namespace urbanmind
