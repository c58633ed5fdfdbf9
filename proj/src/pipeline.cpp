#include "urbanmind/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "urbanmind/common.hpp"

namespace urbanmind {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

ordered_json status_to_json(const StageStatus& s) {
  return ordered_json{{"complete", s.complete},
                      {"seed", s.seed},
                      {"wall_seconds", s.wall_seconds},
                      {"checkpoint", s.checkpoint}};
}

StageStatus status_from_json(const ordered_json& j) {
  StageStatus s;
  s.complete = j.at("complete");
  s.seed = j.at("seed");
  s.wall_seconds = j.at("wall_seconds");
  s.checkpoint = j.at("checkpoint");
  return s;
}

}  // namespace

AdaptationPolicy AdaptationPolicy::from_config(const ExperimentConfig& cfg) {
  AdaptationPolicy p;
  p.epochs = cfg.tta.epochs;
  p.lr = cfg.tta_lr();
  p.p = cfg.tta.p;
  p.scope = cfg.tta.scope == "per_region" ? kPerRegion : kPerBatch;
  p.reset = cfg.tta.reset;
  return p;
}

std::string RunManifest::to_json() const {
  ordered_json j;
  j["config"] = ordered_json::parse(config_json);
  j["master_seed"] = master_seed;
  j["stage1"] = status_to_json(stage1);
  j["stage2"] = status_to_json(stage2);
  j["stage3"] = status_to_json(stage3);
  j["stage1_mf_loss"] = stage1_mf_loss;
  j["stage1_target_loss"] = stage1_target_loss;
  j["stage2_loss"] = stage2_loss;
  j["stage2_epochs_done"] = stage2_epochs_done;
  j["stage2_adam_t"] = stage2_adam_t;
  j["stage2_order_rng"] = stage2_order_rng;
  j["tta_fallbacks"] = tta_fallbacks;
  j["tta_steps_total"] = tta_steps_total;
  j["tta_steps_decreasing"] = tta_steps_decreasing;
  return j.dump(2);
}

RunManifest RunManifest::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt manifest: ") + e.what());
  }
  RunManifest m;
  try {
    m.config_json = j.at("config").dump();
    m.master_seed = j.at("master_seed");
    m.stage1 = status_from_json(j.at("stage1"));
    m.stage2 = status_from_json(j.at("stage2"));
    m.stage3 = status_from_json(j.at("stage3"));
    m.stage1_mf_loss = j.at("stage1_mf_loss").get<std::vector<double>>();
    m.stage1_target_loss = j.at("stage1_target_loss").get<std::vector<double>>();
    m.stage2_loss = j.at("stage2_loss").get<std::vector<double>>();
    m.stage2_epochs_done = j.at("stage2_epochs_done");
    m.stage2_adam_t = j.at("stage2_adam_t");
    m.stage2_order_rng = j.at("stage2_order_rng");
    m.tta_fallbacks = j.at("tta_fallbacks");
    m.tta_steps_total = j.at("tta_steps_total");
    m.tta_steps_decreasing = j.at("tta_steps_decreasing");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt manifest: ") + e.what());
  }
  return m;
}

Pipeline::Pipeline(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  manifest_.config_json = cfg_.to_json();
  manifest_.master_seed = cfg_.eval.seed;
}

void Pipeline::prepare_data() {
  if (data_ready_) return;
  const auto& d = cfg_.data;

  std::vector<Region> region_list;
  if (!d.import_dir.empty()) {
    regions_ = load_city_dump(d.import_dir);
    for (const auto& r : regions_) region_list.push_back(r.region);
  } else {
    CityGrid grid{d.city, d.grid_height, d.grid_width, 1.0};
    region_list = partition_city(grid, d.side, d.stride);
  }

  const SplitMode mode =
      d.mode == "zero_shot" ? SplitMode::kZeroShot : SplitMode::kStandard;
  split_ = make_splits(region_list, mode, d.test_fraction,
                       Rng::derive(cfg_.eval.seed, 0x5147));
  split_.train_day_fraction = d.train_day_fraction;

  auto is_test_only = [&](const Region& r) {
    if (mode != SplitMode::kZeroShot) return false;
    return std::find(split_.test_regions.begin(), split_.test_regions.end(), r) !=
           split_.test_regions.end();
  };

  if (d.import_dir.empty()) {
    regions_.clear();
    for (const auto& r : region_list) {
      const SyntheticParams& params = (d.shift_test_regions && is_test_only(r))
                                          ? d.shifted_synth
                                          : d.synth;
      auto tensor = generate_synthetic(r, d.days, d.slots, d.channels,
                                       Rng::derive(cfg_.eval.seed, 0xDA7A), params);
      tensor.city = d.city;
      regions_.push_back(std::move(tensor));
    }
  }

  if (!regions_.empty() && !regions_.front().normalized) {
    if (d.clip) {
      const ClipPolicy policy =
          ClipPolicy::defaults_for(regions_.front().channel_names);
      for (auto& r : regions_) r = clip_outliers(r, policy);
    }
    const NormalizationScaler scaler = fit_scaler(regions_);
    for (auto& r : regions_) r = apply_scaler(r, scaler);
  }
  for (auto& r : regions_) r.validate();

  auto index_of = [&](const Region& r) {
    for (size_t i = 0; i < regions_.size(); ++i)
      if (regions_[i].region == r) return static_cast<int64_t>(i);
    throw std::logic_error("split region not found in data");
  };
  train_region_idx_.clear();
  test_region_idx_.clear();
  for (const auto& r : split_.train_regions) train_region_idx_.push_back(index_of(r));
  for (const auto& r : split_.test_regions) test_region_idx_.push_back(index_of(r));

  build_models();
  data_ready_ = true;
}

int64_t Pipeline::token_width() const {
  const auto& a = cfg_.eval.ablation;
  check_arg(!(a.no_target_embedding && a.no_multifaceted_embedding),
            "cannot ablate both embedding kinds");
  if (a.no_target_embedding) return cfg_.mae.d_v;
  if (a.no_multifaceted_embedding) return cfg_.mae.d_k;
  return cfg_.mae.d_v + cfg_.mae.d_k;
}

void Pipeline::build_models() {
  const uint64_t seed = cfg_.eval.seed;

  MAEConfig mf;
  mf.channels_in = cfg_.data.channels;
  mf.embed_dim = cfg_.mae.d_v;
  mf.side = cfg_.data.side;
  mf.conv_widths = cfg_.mae.conv_widths;
  mf.lr = cfg_.mae_lr();
  mf.epochs = cfg_.mae.epochs;
  mf.batch_size = cfg_.mae.batch_size;
  mf.p_s = cfg_.mae.p_s;
  mf.p_t = cfg_.mae.p_t;
  mf.strategy_schedule = cfg_.mae.schedule;
  const auto& a = cfg_.eval.ablation;
  if (a.no_spatial_mask || a.no_temporal_mask || a.no_global_mask) {
    mf.strategy_schedule.clear();
    if (!a.no_spatial_mask) mf.strategy_schedule.push_back(MaskStrategy::kSpatial);
    if (!a.no_temporal_mask) mf.strategy_schedule.push_back(MaskStrategy::kTemporal);
    if (!a.no_global_mask) mf.strategy_schedule.push_back(MaskStrategy::kGlobal);
    check_arg(!mf.strategy_schedule.empty(), "all masking strategies ablated");
  }

  MAEConfig tgt = mf;
  tgt.channels_in = 1;
  tgt.embed_dim = cfg_.mae.d_k;

  mae_mf_ = std::make_unique<MAEModel>(make_mae(mf, Rng::derive(seed, 0x3A31)));
  mae_tgt_ = std::make_unique<MAEModel>(make_mae(tgt, Rng::derive(seed, 0x3A32)));

  const std::vector<std::string> tasks = regions_.empty()
                                             ? std::vector<std::string>{"channel0"}
                                             : regions_.front().channel_names;
  const int max_int =
      std::max({cfg_.data.grid_height, cfg_.data.grid_width, cfg_.data.side,
                static_cast<int>(cfg_.data.slots), 64});
  vocab_ = std::make_unique<Vocab>(Vocab::build({cfg_.data.city}, tasks, max_int));

  BackboneConfig bc;
  bc.layers = cfg_.backbone.layers;
  bc.frozen_layers = a.no_finetuning ? cfg_.backbone.layers : cfg_.backbone.frozen_layers;
  bc.hidden_dim = cfg_.backbone.hidden_dim;
  bc.n_heads = cfg_.backbone.n_heads;
  bc.ffn_dim = cfg_.backbone.ffn_dim;
  bc.max_seq_len = cfg_.backbone.max_seq_len;
  bc.vocab_size = vocab_->size();
  bc.token_width = token_width();
  backbone_ = std::make_unique<BackboneState>(make_backbone(bc, Rng::derive(seed, 0x3A33)));

  HeadsConfig hc;
  hc.hidden_dim = cfg_.backbone.hidden_dim;
  hc.n_heads = cfg_.backbone.n_heads;
  hc.trunk_layers = cfg_.heads.trunk_layers;
  hc.predictor_layers = cfg_.heads.predictor_layers;
  hc.reconstructor_layers = cfg_.heads.reconstructor_layers;
  hc.fc_hidden = cfg_.heads.fc_hidden;
  hc.horizon = cfg_.eval.m;
  hc.side = cfg_.data.side;
  heads_ = std::make_unique<HeadsState>(make_heads(hc, Rng::derive(seed, 0x3A34)));
}

std::vector<Unit> Pipeline::train_units() const {
  std::vector<Unit> units;
  const int64_t N = cfg_.data.days;
  int64_t day_end = N;
  if (split_.mode == SplitMode::kStandard)
    day_end = std::max<int64_t>(
        1, static_cast<int64_t>(std::floor(split_.train_day_fraction *
                                           static_cast<double>(N))));
  for (int64_t r : train_region_idx_)
    for (int64_t n = 0; n < day_end; ++n) units.push_back({r, n});
  return units;
}

std::vector<Unit> Pipeline::test_units() const {
  std::vector<Unit> units;
  const int64_t N = cfg_.data.days;
  int64_t day_begin = 0;
  if (split_.mode == SplitMode::kStandard) {
    day_begin = std::max<int64_t>(
        1, static_cast<int64_t>(std::floor(split_.train_day_fraction *
                                           static_cast<double>(N))));
    if (day_begin >= N) day_begin = N - 1;
  }
  for (int64_t r : test_region_idx_)
    for (int64_t n = day_begin; n < N; ++n) units.push_back({r, n});
  return units;
}

PromptContext Pipeline::prompt_context_for(const Unit& u) const {
  const auto& region = regions_[static_cast<size_t>(u.region_index)];
  PromptContext ctx;
  ctx.city = cfg_.data.city;
  ctx.top_i = region.region.top_i;
  ctx.top_j = region.region.top_j;
  ctx.side = region.region.side;
  for (int64_t t = 1; t <= cfg_.eval.h; ++t) ctx.prior_hours.push_back(static_cast<int>(t));
  for (int64_t t = cfg_.eval.h + 1; t <= cfg_.eval.h + cfg_.eval.m; ++t)
    ctx.target_hours.push_back(static_cast<int>(t));
  ctx.task = region.channel_names[static_cast<size_t>(cfg_.data.target_channel)];
  return ctx;
}

Tensor Pipeline::target_frames(const Unit& u) const {
  const auto& region = regions_[static_cast<size_t>(u.region_index)];
  const int64_t l = region.side();
  Tensor out({cfg_.eval.m, 1, l, l});
  for (int64_t k = 0; k < cfg_.eval.m; ++k)
    for (int64_t i = 0; i < l; ++i)
      for (int64_t j = 0; j < l; ++j)
        out.at4(k, 0, i, j) =
            region.at(u.day, cfg_.eval.h + k, cfg_.data.target_channel, i, j);
  return out;
}

Tensor Pipeline::unit_tokens_raw(const Unit& u) {
  const auto& region = regions_[static_cast<size_t>(u.region_index)];
  const Tensor day = region.day_slice(u.day);
  const auto& a = cfg_.eval.ablation;

  auto encode_mf = [&] {
    EmbeddingSequence v = encode(*mae_mf_, day);
    v.source = EmbeddingSequence::kMultifaceted;
    v.region_index = u.region_index;
    v.day = u.day;
    return v;
  };
  auto encode_tgt = [&] {
    const Tensor one = regions_[static_cast<size_t>(u.region_index)]
                           .channel_slice(cfg_.data.target_channel)
                           .day_slice(u.day);
    EmbeddingSequence vk = encode(*mae_tgt_, one);
    vk.source = EmbeddingSequence::kTarget;
    vk.region_index = u.region_index;
    vk.day = u.day;
    return vk;
  };

  if (a.no_target_embedding) return encode_mf().vectors;
  if (a.no_multifaceted_embedding) return encode_tgt().vectors;
  return fuse_tokens(encode_mf(), encode_tgt()).tokens;
}

TokenSequence Pipeline::tokens_for(const Unit& u) {
  require_stage(1);
  const auto key = std::make_pair(u.region_index, u.day);
  auto it = token_cache_.find(key);
  if (it == token_cache_.end())
    it = token_cache_.emplace(key, unit_tokens_raw(u)).first;
  TokenSequence seq;
  seq.tokens = it->second;
  seq.region_index = u.region_index;
  seq.day = u.day;
  return seq;
}

void Pipeline::run_stage1() {
  prepare_data();
  const double t0 = now_seconds();
  manifest_.stage1.seed = Rng::derive(cfg_.eval.seed, 1);
  const auto& a = cfg_.eval.ablation;

  std::vector<Tensor> mf_samples, tgt_samples;
  for (const Unit& u : train_units()) {
    const auto& region = regions_[static_cast<size_t>(u.region_index)];
    mf_samples.push_back(region.day_slice(u.day));
    tgt_samples.push_back(
        region.channel_slice(cfg_.data.target_channel).day_slice(u.day));
  }

  if (!a.no_muffin_mae) {
    if (!a.no_multifaceted_embedding)
      manifest_.stage1_mf_loss =
          train_mae(*mae_mf_, mf_samples, Rng::derive(manifest_.stage1.seed, 11));
    if (!a.no_target_embedding)
      manifest_.stage1_target_loss =
          train_mae(*mae_tgt_, tgt_samples, Rng::derive(manifest_.stage1.seed, 12));
  }

  token_cache_.clear();
  for (const Unit& u : train_units()) tokens_for(u);

  manifest_.stage1.complete = true;
  manifest_.stage1.wall_seconds = now_seconds() - t0;
}

void Pipeline::require_stage(int which) const {
  if (which >= 1 && !manifest_.stage1.complete)
    throw std::logic_error("stage 1 has not completed");
  if (which >= 2 && !manifest_.stage2.complete)
    throw std::logic_error("stage 2 has not completed");
}

void Pipeline::freeze_for_stage2() {
  pfa_partition(*backbone_, backbone_->config.frozen_layers);
  for (size_t i = 0; i < heads_->params.count(); ++i) {
    Param& p = heads_->params[i];
    p.trainable = p.name.rfind("recon.", 0) != 0;
  }
}

void Pipeline::freeze_for_stage3() {
  for (size_t i = 0; i < backbone_->params.count(); ++i)
    backbone_->params[i].trainable = false;
  for (size_t i = 0; i < heads_->params.count(); ++i) {
    Param& p = heads_->params[i];
    p.trainable =
        p.name.rfind("recon.", 0) == 0 || p.name.rfind("trunk.", 0) == 0;
  }
}

double Pipeline::stage2_epoch(Adam& adam, Rng& order_rng) {
  std::vector<Unit> units = train_units();
  std::vector<size_t> order(units.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  order_rng.shuffle(order);

  const auto batch = static_cast<size_t>(cfg_.backbone.batch_size);
  double epoch_loss = 0.0;
  int64_t batches = 0;
  for (size_t pos = 0; pos < order.size(); pos += batch) {
    const size_t end = std::min(order.size(), pos + batch);
    const double loss = finetune_step(
        {&backbone_->params, &heads_->params}, adam, [&](Graph& g) {
          Var total{};
          for (size_t k = pos; k < end; ++k) {
            const Unit& u = units[order[k]];
            const TokenSequence seq = tokens_for(u);
            Tensor prior({cfg_.eval.h, seq.tokens.dim(1)});
            for (int64_t t = 0; t < cfg_.eval.h; ++t)
              for (int64_t j = 0; j < seq.tokens.dim(1); ++j)
                prior.at2(t, j) = seq.tokens.at2(t, j);
            Var in = assemble_input_graph(
                g, *vocab_, backbone_->params.at("embed.table"),
                backbone_->params.at("proj.w"), backbone_->params.at("proj.b"),
                build_prompt(prompt_context_for(u)), g.input(std::move(prior)));
            Var e = backbone_forward_graph(g, *backbone_, in);
            Var pred = predict_graph(g, *heads_, e, cfg_.eval.h);
            Var loss_u = prediction_loss_graph(g, pred, g.input(target_frames(u)));
            total = total.valid() ? g.add(total, loss_u) : loss_u;
          }
          return g.scale(total, 1.0 / static_cast<double>(end - pos));
        });
    epoch_loss += loss;
    ++batches;
  }
  return epoch_loss / static_cast<double>(batches);
}

void Pipeline::run_stage2(int64_t epochs_total) {
  require_stage(1);
  const double t0 = now_seconds();
  if (epochs_total < 0) epochs_total = cfg_.backbone.epochs;
  manifest_.stage2.seed = Rng::derive(cfg_.eval.seed, 2);

  freeze_for_stage2();
  if (!stage2_adam_) {
    stage2_adam_ = std::make_unique<Adam>(cfg_.finetune_lr());
    stage2_adam_->set_t(manifest_.stage2_adam_t);
  }
  Rng order_rng(Rng::derive(manifest_.stage2.seed, 21));
  if (!stage2_order_rng_state_.empty()) order_rng.set_state(stage2_order_rng_state_);

  auto frozen_before = backbone_->params.snapshot();
  auto heads_before = heads_->params.snapshot();

  for (int64_t epoch = manifest_.stage2_epochs_done; epoch < epochs_total; ++epoch) {
    manifest_.stage2_loss.push_back(stage2_epoch(*stage2_adam_, order_rng));
    manifest_.stage2_epochs_done = epoch + 1;
  }
  stage2_order_rng_state_ = order_rng.state();
  manifest_.stage2_adam_t = stage2_adam_->t();

  // Freeze contract audit: anything not trainable must be byte-identical.
  for (size_t i = 0; i < backbone_->params.count(); ++i) {
    const Param& p = backbone_->params[i];
    if (!p.trainable && !p.bytes_equal(frozen_before.at(p.name)))
      throw std::logic_error("freeze violation: " + p.name);
  }
  for (size_t i = 0; i < heads_->params.count(); ++i) {
    const Param& p = heads_->params[i];
    if (!p.trainable && !p.bytes_equal(heads_before.at(p.name)))
      throw std::logic_error("freeze violation: " + p.name);
  }

  manifest_.stage2.complete = true;
  manifest_.stage2.wall_seconds += now_seconds() - t0;
}

HiddenSequence Pipeline::embed_unit(const Unit& u) {
  const TokenSequence seq = tokens_for(u);
  Tensor prior({cfg_.eval.h, seq.tokens.dim(1)});
  for (int64_t t = 0; t < cfg_.eval.h; ++t)
    for (int64_t j = 0; j < seq.tokens.dim(1); ++j)
      prior.at2(t, j) = seq.tokens.at2(t, j);
  TokenSequence prior_seq;
  prior_seq.tokens = std::move(prior);
  prior_seq.region_index = u.region_index;
  prior_seq.day = u.day;
  const BackboneInput input = assemble_input(
      *vocab_, backbone_->params.at("embed.table"), backbone_->params.at("proj.w"),
      backbone_->params.at("proj.b"), build_prompt(prompt_context_for(u)), prior_seq);
  return backbone_forward(*backbone_, input);
}

Tensor Pipeline::predict_unit(const Unit& u) {
  const HiddenSequence e = embed_unit(u);
  return predict(*heads_, e, cfg_.eval.h, cfg_.eval.m);
}

Stage3Result Pipeline::run_stage3() {
  require_stage(2);
  const double t0 = now_seconds();
  manifest_.stage3.seed = Rng::derive(cfg_.eval.seed, 3);
  const AdaptationPolicy policy = AdaptationPolicy::from_config(cfg_);
  const auto& ablation = cfg_.eval.ablation;

  Stage3Result result;
  result.units = test_units();
  freeze_for_stage3();

  // Backbone embeddings are fixed at test time (the LLM is frozen during
  // adaptation); compute them once per unit.
  std::vector<Tensor> embeddings;
  for (const Unit& u : result.units) {
    embeddings.push_back(embed_unit(u).states);
    result.truth.push_back(target_frames(u));
  }
  const int64_t h = cfg_.eval.h, m = cfg_.eval.m;
  for (size_t i = 0; i < result.units.size(); ++i)
    result.predictions_pre.push_back(
        predict(*heads_, HiddenSequence{embeddings[i]}, h, m));

  if (ablation.no_adaptation) {
    result.predictions = result.predictions_pre;
    result.recon_losses.assign(result.units.size(), {});
    manifest_.stage3.complete = true;
    manifest_.stage3.wall_seconds = now_seconds() - t0;
    return result;
  }

  const auto tuned_snapshot = heads_->params.snapshot();
  auto restore_tuned = [&] {
    for (size_t i = 0; i < heads_->params.count(); ++i)
      heads_->params[i].value = tuned_snapshot.at(heads_->params[i].name);
  };

  Rng mask_rng(Rng::derive(manifest_.stage3.seed, 31));
  result.predictions.resize(result.units.size());
  result.recon_losses.resize(result.units.size());

  // Group units per the adaptation scope.
  std::vector<std::vector<size_t>> groups;
  if (policy.scope == AdaptationPolicy::kPerBatch) {
    for (size_t i = 0; i < result.units.size(); ++i) groups.push_back({i});
  } else {
    std::map<int64_t, std::vector<size_t>> by_region;
    for (size_t i = 0; i < result.units.size(); ++i)
      by_region[result.units[i].region_index].push_back(i);
    for (auto& [_, idx] : by_region) groups.push_back(idx);
  }

  std::unique_ptr<Adam> shared_adam;
  if (!policy.reset) shared_adam = std::make_unique<Adam>(policy.lr);

  for (const auto& group : groups) {
    if (policy.reset) restore_tuned();
    Adam local_adam(policy.lr);
    Adam& adam = policy.reset ? local_adam : *shared_adam;

    const auto pre_adapt = heads_->params.snapshot();
    bool failed = false;
    std::vector<std::vector<double>> curves(group.size());
    try {
      for (int64_t epoch = 0; epoch < policy.epochs; ++epoch) {
        for (size_t k = 0; k < group.size(); ++k) {
          const Tensor& e = embeddings[group[k]];
          auto [masked, mask] = mask_embeddings(e, policy.p, mask_rng);
          const double loss = finetune_step(
              {&heads_->params}, adam, [&](Graph& g) {
                return reconstruction_loss_graph(g, *heads_, g.input(masked),
                                                 g.input(e));
              });
          curves[k].push_back(loss);
        }
      }
    } catch (const TrainingFailure&) {
      failed = true;
    }

    if (failed) {
      // Fall back to the unadapted predictor for this group.
      for (size_t i = 0; i < heads_->params.count(); ++i)
        heads_->params[i].value = pre_adapt.at(heads_->params[i].name);
      ++result.fallbacks;
      ++manifest_.tta_fallbacks;
    }
    for (size_t k = 0; k < group.size(); ++k) {
      result.recon_losses[group[k]] = curves[k];
      for (size_t s = 1; s < curves[k].size(); ++s) {
        ++manifest_.tta_steps_total;
        if (curves[k][s] < curves[k][s - 1]) ++manifest_.tta_steps_decreasing;
      }
      result.predictions[group[k]] =
          predict(*heads_, HiddenSequence{embeddings[group[k]]}, h, m);
    }
  }

  restore_tuned();
  manifest_.stage3.complete = true;
  manifest_.stage3.wall_seconds = now_seconds() - t0;
  return result;
}

void Pipeline::save_run(const std::string& dir) const {
  fs::create_directories(dir);
  RunManifest m = manifest_;
  m.stage1.checkpoint = "stage1";
  m.stage2.checkpoint = "stage2";

  if (manifest_.stage1.complete) {
    mae_mf_->params.save((fs::path(dir) / "stage1" / "mae_multifaceted").string());
    mae_tgt_->params.save((fs::path(dir) / "stage1" / "mae_target").string());
    // Token cache: (region, day) -> (T, width) rows, one flat f32 payload.
    ordered_json tc;
    tc["entries"] = ordered_json::array();
    std::vector<float> payload;
    for (const auto& [key, tokens] : token_cache_) {
      tc["entries"].push_back({{"region_index", key.first},
                               {"day", key.second},
                               {"offset", payload.size()},
                               {"rows", tokens.dim(0)},
                               {"cols", tokens.dim(1)}});
      for (int64_t i = 0; i < tokens.size(); ++i)
        payload.push_back(static_cast<float>(tokens[i]));
    }
    std::ofstream tm(fs::path(dir) / "stage1" / "tokens.meta");
    tm << tc.dump(2) << "\n";
    std::ofstream tf(fs::path(dir) / "stage1" / "tokens.f32", std::ios::binary);
    tf.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size() * sizeof(float)));
  }
  if (manifest_.stage2_epochs_done > 0 || manifest_.stage2.complete) {
    backbone_->params.save((fs::path(dir) / "stage2" / "backbone").string());
    heads_->params.save((fs::path(dir) / "stage2" / "heads").string());
  }
  m.stage2_order_rng = stage2_order_rng_state_;
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << m.to_json() << "\n";
}

Pipeline Pipeline::load_run(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw FormatError("missing manifest.json: " + dir);
  std::string text((std::istreambuf_iterator<char>(mf)),
                   std::istreambuf_iterator<char>());
  RunManifest m = RunManifest::from_json(text);

  Pipeline p(ExperimentConfig::from_json(m.config_json));
  p.manifest_ = m;
  p.prepare_data();
  if (m.stage1.complete) {
    p.mae_mf_->params.load((fs::path(dir) / "stage1" / "mae_multifaceted").string());
    p.mae_tgt_->params.load((fs::path(dir) / "stage1" / "mae_target").string());
    std::ifstream tm(fs::path(dir) / "stage1" / "tokens.meta");
    if (tm) {
      ordered_json tc = ordered_json::parse(tm);
      std::ifstream tf(fs::path(dir) / "stage1" / "tokens.f32", std::ios::binary);
      tf.seekg(0, std::ios::end);
      std::vector<float> payload(static_cast<size_t>(tf.tellg()) / sizeof(float));
      tf.seekg(0);
      tf.read(reinterpret_cast<char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
      for (const auto& e : tc.at("entries")) {
        const int64_t region = e.at("region_index");
        const int64_t day = e.at("day");
        const int64_t rows = e.at("rows"), cols = e.at("cols");
        const size_t offset = e.at("offset");
        if (offset + static_cast<size_t>(rows * cols) > payload.size())
          throw FormatError("token cache payload too short");
        Tensor t({rows, cols});
        for (int64_t i = 0; i < rows * cols; ++i)
          t[i] = static_cast<double>(payload[offset + static_cast<size_t>(i)]);
        p.token_cache_[{region, day}] = std::move(t);
      }
    }
  }
  if (m.stage2_epochs_done > 0 || m.stage2.complete) {
    p.backbone_->params.load((fs::path(dir) / "stage2" / "backbone").string());
    p.heads_->params.load((fs::path(dir) / "stage2" / "heads").string());
    p.stage2_order_rng_state_ = m.stage2_order_rng;
  }
  return p;
}

void Pipeline::write_stage3(const std::string& dir, const Stage3Result& result) const {
  fs::create_directories(fs::path(dir) / "stage3");
  ordered_json meta;
  meta["units"] = ordered_json::array();
  std::vector<float> pred_payload, truth_payload;
  for (size_t i = 0; i < result.units.size(); ++i) {
    meta["units"].push_back({{"region_index", result.units[i].region_index},
                             {"day", result.units[i].day}});
    const Tensor& p = result.predictions[i];
    const Tensor& t = result.truth[i];
    for (int64_t k = 0; k < p.size(); ++k)
      pred_payload.push_back(static_cast<float>(p[k]));
    for (int64_t k = 0; k < t.size(); ++k)
      truth_payload.push_back(static_cast<float>(t[k]));
  }
  meta["m"] = cfg_.eval.m;
  meta["side"] = cfg_.data.side;
  meta["recon_losses"] = result.recon_losses;
  std::ofstream ms(fs::path(dir) / "stage3" / "meta");
  ms << meta.dump(2) << "\n";
  std::ofstream ps(fs::path(dir) / "stage3" / "predictions.f32", std::ios::binary);
  ps.write(reinterpret_cast<const char*>(pred_payload.data()),
           static_cast<std::streamsize>(pred_payload.size() * sizeof(float)));
  std::ofstream ts(fs::path(dir) / "stage3" / "truth.f32", std::ios::binary);
  ts.write(reinterpret_cast<const char*>(truth_payload.data()),
           static_cast<std::streamsize>(truth_payload.size() * sizeof(float)));
}

}  // namespace urbanmind
