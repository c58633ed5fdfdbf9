#include "urbanmind/st_backbone.hpp"

#include <cmath>

#include "urbanmind/common.hpp"

namespace urbanmind {

void BackboneConfig::validate() const {
  check_arg(layers >= 0, "layer count must be >= 0");
  check_arg(frozen_layers >= 0 && frozen_layers <= layers,
            "frozen_layers must lie in [0, layers]");
  check_arg(hidden_dim >= 1 && n_heads >= 1 && hidden_dim % n_heads == 0,
            "hidden_dim must be divisible by n_heads");
  check_arg((hidden_dim / n_heads) % 2 == 0, "head dim must be even");
  check_arg(ffn_dim >= 1 && max_seq_len >= 1, "bad ffn_dim or max_seq_len");
  check_arg(vocab_size >= 1, "vocab_size must be set");
  check_arg(token_width >= 1, "token_width must be >= 1");
}

BackboneState make_backbone(const BackboneConfig& config, uint64_t seed) {
  config.validate();
  BackboneState s;
  s.config = config;
  Rng rng(Rng::derive(seed, 0xB0));

  s.params.add_normal("embed.table", {config.vocab_size, config.hidden_dim}, rng, 0.02);
  s.params.add_xavier("proj.w", {config.hidden_dim, config.token_width}, rng);
  s.params.add("proj.b", {config.hidden_dim});
  for (int64_t i = 0; i < config.layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    s.params.add_xavier(p + "wq", {config.hidden_dim, config.hidden_dim}, rng);
    s.params.add_xavier(p + "wk", {config.hidden_dim, config.hidden_dim}, rng);
    s.params.add_xavier(p + "wv", {config.hidden_dim, config.hidden_dim}, rng);
    s.params.add_xavier(p + "wo", {config.hidden_dim, config.hidden_dim}, rng);
    s.params.add_xavier(p + "ffn.w1", {config.ffn_dim, config.hidden_dim}, rng);
    s.params.add(p + "ffn.b1", {config.ffn_dim});
    s.params.add_xavier(p + "ffn.w2", {config.hidden_dim, config.ffn_dim}, rng);
    s.params.add(p + "ffn.b2", {config.hidden_dim});
    s.params.add(p + "ln1.g", {config.hidden_dim}, 1.0);
    s.params.add(p + "ln1.b", {config.hidden_dim});
    s.params.add(p + "ln2.g", {config.hidden_dim}, 1.0);
    s.params.add(p + "ln2.b", {config.hidden_dim});
  }
  return s;
}

namespace {

Var backbone_layer(Graph& g, BackboneState& s, Var x, int64_t i) {
  const std::string p = "layer" + std::to_string(i) + ".";
  auto& ps = s.params;
  Var sa = multihead_attention(g, x, g.param(ps.at(p + "wq")), g.param(ps.at(p + "wk")),
                               g.param(ps.at(p + "wv")), g.param(ps.at(p + "wo")),
                               static_cast<int>(s.config.n_heads), /*causal=*/true,
                               /*use_rope=*/true);
  Var h = g.layer_norm(g.add(x, sa), g.param(ps.at(p + "ln1.g")),
                       g.param(ps.at(p + "ln1.b")));
  Var f = g.linear(h, g.param(ps.at(p + "ffn.w1")), g.param(ps.at(p + "ffn.b1")));
  f = g.gelu(f);
  f = g.linear(f, g.param(ps.at(p + "ffn.w2")), g.param(ps.at(p + "ffn.b2")));
  return g.layer_norm(g.add(h, f), g.param(ps.at(p + "ln2.g")),
                      g.param(ps.at(p + "ln2.b")));
}

}  // namespace

Var backbone_forward_graph(Graph& g, BackboneState& state, Var input) {
  const Tensor& v = g.value(input);
  check_arg(v.rank() == 2 && v.dim(1) == state.config.hidden_dim,
            "backbone input must be (seq, hidden)");
  check_arg(v.dim(0) <= state.config.max_seq_len, "sequence exceeds max_seq_len");
  Var h = input;
  for (int64_t i = 0; i < state.config.layers; ++i) h = backbone_layer(g, state, h, i);
  return h;
}

std::vector<Tensor> backbone_layer_outputs(BackboneState& state, const Tensor& input) {
  Graph g;
  Var h = g.input(input);
  std::vector<Tensor> outs;
  for (int64_t i = 0; i < state.config.layers; ++i) {
    h = backbone_layer(g, state, h, i);
    outs.push_back(g.value(h));
  }
  return outs;
}

HiddenSequence backbone_forward(BackboneState& state, const BackboneInput& input) {
  Graph g;
  Var out = backbone_forward_graph(g, state, g.input(input.embedded));
  return HiddenSequence{g.value(out)};
}

PfaPartition pfa_partition(BackboneState& state, int64_t frozen_layers) {
  check_arg(frozen_layers >= 0 && frozen_layers <= state.config.layers,
            "frozen_layers must lie in [0, layers]");
  state.config.frozen_layers = frozen_layers;
  PfaPartition part;
  for (size_t i = 0; i < state.params.count(); ++i) {
    Param& p = state.params[i];
    bool trainable = false;
    if (p.name == "proj.w" || p.name == "proj.b") {
      trainable = true;
    } else if (p.name.rfind("layer", 0) == 0) {
      const size_t dot = p.name.find('.');
      const int64_t layer = std::stoll(p.name.substr(5, dot - 5));
      trainable = layer >= frozen_layers && p.name.substr(dot + 1) == "wq";
    }
    p.trainable = trainable;
    (trainable ? part.trainable : part.frozen).push_back(p.name);
  }
  return part;
}

double finetune_step(std::vector<ParamStore*> stores, Adam& optimizer,
                     const std::function<Var(Graph&)>& loss_builder) {
  Graph g;
  Var loss = loss_builder(g);
  const double value = g.value(loss)[0];
  if (!std::isfinite(value)) throw TrainingFailure("non-finite fine-tuning loss");
  g.backward(loss);

  std::vector<std::pair<Param*, Tensor>> grads;
  for (ParamStore* store : stores)
    for (size_t i = 0; i < store->count(); ++i) {
      Param& p = (*store)[i];
      if (p.trainable) grads.emplace_back(&p, g.grad_of(p));
    }
  optimizer.step(grads);
  return value;
}

}  // namespace urbanmind
