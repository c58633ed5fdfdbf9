#pragma once

#include <functional>
#include <string>
#include <vector>

#include "urbanmind/graph.hpp"
#include "urbanmind/params.hpp"
#include "urbanmind/tokens_prompts.hpp"

namespace urbanmind {

struct BackboneConfig {
  int64_t layers = 6;        // L
  int64_t frozen_layers = 4; // l: layers 1..l fully frozen
  int64_t hidden_dim = 128;
  int64_t n_heads = 4;
  int64_t ffn_dim = 512;
  int64_t vocab_size = 0;    // filled from the prompt vocabulary
  int64_t max_seq_len = 64;
  int64_t token_width = 96;  // d_v + d_k feeding the projector

  void validate() const;
};

// Decoder-style transformer standing in for the LLM. Layer i computes
// h = LayerNorm(x + SA(x)) followed by LayerNorm(h + FFN(h)); attention is
// causal with rotary position encoding. Parameters live in `params` under
// layer{i}.{wq,wk,wv,wo,ffn.*,ln1.*,ln2.*} plus embed.table and proj.{w,b}.
struct BackboneState {
  BackboneConfig config;
  ParamStore params;
};

BackboneState make_backbone(const BackboneConfig& config, uint64_t seed);

struct HiddenSequence {
  Tensor states;  // (seq_len, hidden_dim)
};

Var backbone_forward_graph(Graph& g, BackboneState& state, Var input);
// Hidden states after every layer, for recurrence checks.
std::vector<Tensor> backbone_layer_outputs(BackboneState& state, const Tensor& input);
HiddenSequence backbone_forward(BackboneState& state, const BackboneInput& input);

struct PfaPartition {
  std::vector<std::string> frozen;
  std::vector<std::string> trainable;
};

// Freezes layers 1..l entirely; in layers l+1..L only the query matrices stay
// trainable (W_k/W_v/W_o, FFN and LayerNorm are frozen, as is the embedding
// table). The token projector remains trainable. Head parameters are managed
// by their own store.
PfaPartition pfa_partition(BackboneState& state, int64_t frozen_layers);

// One optimizer step over `stores`: builds the loss via `loss_builder`,
// backpropagates through everything, applies updates to trainable parameters
// only, and returns the loss value. Throws TrainingFailure on non-finite loss.
double finetune_step(std::vector<ParamStore*> stores, Adam& optimizer,
                     const std::function<Var(Graph&)>& loss_builder);

}  // namespace urbanmind
