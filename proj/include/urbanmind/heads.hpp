#pragma once

#include <string>
#include <vector>

#include "urbanmind/graph.hpp"
#include "urbanmind/params.hpp"
#include "urbanmind/rng.hpp"
#include "urbanmind/st_backbone.hpp"

namespace urbanmind {

struct HeadsConfig {
  int64_t hidden_dim = 128;
  int64_t n_heads = 4;
  int64_t trunk_layers = 2;          // attention layers shared by P and G
  int64_t predictor_layers = 1;      // P-private attention layers
  int64_t reconstructor_layers = 1;  // G-private attention layers
  int64_t fc_hidden = 128;
  int64_t horizon = 4;  // m
  int64_t side = 10;    // l

  void validate() const;
};

// Predictor P and reconstructor G over backbone hidden states. Both heads
// run the same trunk attention layers (identical parameter storage, so a
// trunk update made through G is visible to P), then their private stacks:
// P adds attention plus fully connected layers emitting (m, 1, l, l) through
// tanh; G adds attention plus a linear map back to embedding space.
struct HeadsState {
  HeadsConfig config;
  ParamStore params;  // trunk.* shared, pred.* P-private, recon.* G-private
};

HeadsState make_heads(const HeadsConfig& config, uint64_t seed);

std::vector<std::string> trunk_param_names(const HeadsState& heads);
std::vector<std::string> predictor_private_names(const HeadsState& heads);
std::vector<std::string> reconstructor_private_names(const HeadsState& heads);

// e_seq: (seq, hidden); the last h rows are the dynamics-token positions the
// predictor pools over. Output (m, 1, l, l) in [-1, 1].
Var predict_graph(Graph& g, HeadsState& heads, Var e_seq, int64_t h);
Tensor predict(HeadsState& heads, const HiddenSequence& e_seq, int64_t h, int64_t m);

// (1/m) sum over horizon steps of the cell-averaged squared error.
double prediction_loss(const Tensor& x_hat, const Tensor& x, int64_t m);
Var prediction_loss_graph(Graph& g, Var x_hat, Var x);

// Binary mask vectors, one per embedding; exactly max(1, round(p*d)) zeros
// per vector, sampled uniformly without replacement.
struct EmbeddingMask {
  Tensor bits;  // (n, d) of {0,1}
  double ratio = 0.0;
};

std::pair<Tensor, EmbeddingMask> mask_embeddings(const Tensor& e_seq, double p,
                                                 Rng& rng);

// G applied to a masked sequence: (n, hidden) -> (n, hidden).
Var reconstruct_graph(Graph& g, HeadsState& heads, Var masked_seq);
Tensor reconstruct(HeadsState& heads, const Tensor& masked_seq);

// (1/n) sum_i ||G(masked_i) - e_i||^2 with per-vector sum-of-squares norm.
double reconstruction_error(const Tensor& reconstructed, const Tensor& e_seq);
double reconstruction_loss(HeadsState& heads, const Tensor& masked_seq,
                           const Tensor& e_seq);
Var reconstruction_loss_graph(Graph& g, HeadsState& heads, Var masked_seq, Var e_seq);

}  // namespace urbanmind
