#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "urbanmind/graph.hpp"
#include "urbanmind/masking.hpp"
#include "urbanmind/params.hpp"

namespace urbanmind {

struct MAEConfig {
  int64_t channels_in = 3;
  int64_t embed_dim = 64;            // d_v for the multifaceted MAE, d_k for the target MAE
  int64_t side = 10;                 // region window size the conv stack is built for
  std::vector<int64_t> conv_widths = {32, 64};  // intermediate widths; last conv emits embed_dim
  std::string activation = "gelu";
  double lr = 1e-4;
  int64_t epochs = 200;
  int64_t batch_size = 16;
  double p_s = 0.25;
  double p_t = 0.33;
  std::vector<MaskStrategy> strategy_schedule = {
      MaskStrategy::kSpatial, MaskStrategy::kTemporal, MaskStrategy::kGlobal};

  void validate() const;
};

// Per-time-slot embeddings (T, d).
struct EmbeddingSequence {
  Tensor vectors;
  enum Source { kMultifaceted, kTarget } source = kMultifaceted;
  int64_t region_index = -1;
  int64_t day = -1;
};

// Fused per-slot tokens u_t = concat(v_t, v^k_t), shape (T, d_v + d_k).
struct TokenSequence {
  Tensor tokens;
  int64_t region_index = -1;
  int64_t day = -1;
};

// Convolutional encoder/decoder pair applied per time slot. The encoder runs
// stride-2 3x3 convs through conv_widths then embed_dim channels and projects
// the flattened map to one embed_dim vector per slot; the decoder mirrors it
// with transposed convs sized to reproduce the input window exactly.
struct MAEModel {
  MAEConfig config;
  ParamStore params;
  std::vector<int64_t> spatial_sizes;  // per-stage map sizes, starting at side
};

MAEModel make_mae(const MAEConfig& config, uint64_t seed);

Var encode_graph(Graph& g, MAEModel& model, Var x);   // (T,C,l,l) -> (T,d)
Var decode_graph(Graph& g, MAEModel& model, Var v);   // (T,d) -> (T,C,l,l)

EmbeddingSequence encode(MAEModel& model, const Tensor& x_masked);
Tensor decode(MAEModel& model, const EmbeddingSequence& v);

// (1/T) sum_t mean squared error of slot t.
double mae_loss(const Tensor& x_hat, const Tensor& x);
Var mae_loss_graph(Graph& g, Var x_hat, Var x);

// Trains encoder+decoder in place over per-day samples of shape (T,C,l,l).
// Masking strategy rotates through the schedule per batch. Returns per-epoch
// mean losses. On a non-finite loss the parameters roll back to the last
// finished epoch and TrainingFailure is thrown.
std::vector<double> train_mae(MAEModel& model, const std::vector<Tensor>& samples,
                              uint64_t seed);

TokenSequence fuse_tokens(const EmbeddingSequence& v, const EmbeddingSequence& vk);

}  // namespace urbanmind
