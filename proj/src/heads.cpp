#include "urbanmind/heads.hpp"

#include <cmath>

#include "urbanmind/common.hpp"
#include "urbanmind/masking.hpp"

namespace urbanmind {

void HeadsConfig::validate() const {
  check_arg(hidden_dim >= 1 && n_heads >= 1 && hidden_dim % n_heads == 0,
            "heads: hidden_dim must be divisible by n_heads");
  check_arg(trunk_layers >= 1, "heads: need at least one shared trunk layer");
  check_arg(predictor_layers >= 0 && reconstructor_layers >= 0, "bad layer counts");
  check_arg(fc_hidden >= 1 && horizon >= 1 && side >= 1, "bad head dimensions");
}

namespace {

void add_attn_layer(ParamStore& ps, const std::string& prefix, int64_t hidden,
                    Rng& rng) {
  ps.add_xavier(prefix + "wq", {hidden, hidden}, rng);
  ps.add_xavier(prefix + "wk", {hidden, hidden}, rng);
  ps.add_xavier(prefix + "wv", {hidden, hidden}, rng);
  ps.add_xavier(prefix + "wo", {hidden, hidden}, rng);
  ps.add(prefix + "ln.g", {hidden}, 1.0);
  ps.add(prefix + "ln.b", {hidden});
}

Var attn_layer(Graph& g, ParamStore& ps, const std::string& prefix, Var x,
               int n_heads) {
  Var sa = multihead_attention(g, x, g.param(ps.at(prefix + "wq")),
                               g.param(ps.at(prefix + "wk")),
                               g.param(ps.at(prefix + "wv")),
                               g.param(ps.at(prefix + "wo")), n_heads,
                               /*causal=*/false, /*use_rope=*/false);
  return g.layer_norm(g.add(x, sa), g.param(ps.at(prefix + "ln.g")),
                      g.param(ps.at(prefix + "ln.b")));
}

Var trunk_forward(Graph& g, HeadsState& heads, Var x) {
  for (int64_t i = 0; i < heads.config.trunk_layers; ++i)
    x = attn_layer(g, heads.params, "trunk.attn" + std::to_string(i) + ".", x,
                   static_cast<int>(heads.config.n_heads));
  return x;
}

}  // namespace

HeadsState make_heads(const HeadsConfig& config, uint64_t seed) {
  config.validate();
  HeadsState h;
  h.config = config;
  Rng rng(Rng::derive(seed, 0x4EAD));
  ParamStore& ps = h.params;

  for (int64_t i = 0; i < config.trunk_layers; ++i)
    add_attn_layer(ps, "trunk.attn" + std::to_string(i) + ".", config.hidden_dim, rng);

  for (int64_t i = 0; i < config.predictor_layers; ++i)
    add_attn_layer(ps, "pred.attn" + std::to_string(i) + ".", config.hidden_dim, rng);
  ps.add_xavier("pred.fc1.w", {config.fc_hidden, config.hidden_dim}, rng);
  ps.add("pred.fc1.b", {config.fc_hidden});
  ps.add_xavier("pred.fc2.w",
                {config.horizon * config.side * config.side, config.fc_hidden}, rng);
  ps.add("pred.fc2.b", {config.horizon * config.side * config.side});

  for (int64_t i = 0; i < config.reconstructor_layers; ++i)
    add_attn_layer(ps, "recon.attn" + std::to_string(i) + ".", config.hidden_dim, rng);
  ps.add_xavier("recon.out.w", {config.hidden_dim, config.hidden_dim}, rng);
  ps.add("recon.out.b", {config.hidden_dim});
  return h;
}

namespace {

std::vector<std::string> names_with_prefix(const HeadsState& heads,
                                           const std::string& prefix) {
  std::vector<std::string> out;
  for (size_t i = 0; i < heads.params.count(); ++i)
    if (heads.params[i].name.rfind(prefix, 0) == 0) out.push_back(heads.params[i].name);
  return out;
}

}  // namespace

std::vector<std::string> trunk_param_names(const HeadsState& heads) {
  return names_with_prefix(heads, "trunk.");
}
std::vector<std::string> predictor_private_names(const HeadsState& heads) {
  return names_with_prefix(heads, "pred.");
}
std::vector<std::string> reconstructor_private_names(const HeadsState& heads) {
  return names_with_prefix(heads, "recon.");
}

Var predict_graph(Graph& g, HeadsState& heads, Var e_seq, int64_t h) {
  const HeadsConfig& c = heads.config;
  const Tensor& v = g.value(e_seq);
  check_arg(v.rank() == 2 && v.dim(1) == c.hidden_dim,
            "predict: hidden dim mismatch");
  check_arg(h >= 1 && h <= v.dim(0), "predict: bad prior-slot count");

  Var x = trunk_forward(g, heads, e_seq);
  for (int64_t i = 0; i < c.predictor_layers; ++i)
    x = attn_layer(g, heads.params, "pred.attn" + std::to_string(i) + ".", x,
                   static_cast<int>(c.n_heads));
  // Pool over the dynamics-token positions (the final h rows).
  Var pooled = g.mean_rows(g.slice_rows(x, v.dim(0) - h, v.dim(0)));
  Var y = g.linear(pooled, g.param(heads.params.at("pred.fc1.w")),
                   g.param(heads.params.at("pred.fc1.b")));
  y = g.gelu(y);
  y = g.linear(y, g.param(heads.params.at("pred.fc2.w")),
               g.param(heads.params.at("pred.fc2.b")));
  y = g.tanh_op(y);
  return g.reshape(y, {c.horizon, 1, c.side, c.side});
}

Tensor predict(HeadsState& heads, const HiddenSequence& e_seq, int64_t h, int64_t m) {
  check_arg(m == heads.config.horizon, "predict: horizon mismatch with head");
  Graph g;
  Var out = predict_graph(g, heads, g.input(e_seq.states), h);
  return g.value(out);
}

double prediction_loss(const Tensor& x_hat, const Tensor& x, int64_t m) {
  check_arg(x_hat.same_shape(x), "prediction_loss: shape mismatch");
  check_arg(x.rank() == 4 && x.dim(0) == m, "prediction_loss: expects (m,1,l,l)");
  const int64_t cells = x.size() / m;
  double total = 0.0;
  for (int64_t t = 0; t < m; ++t) {
    double step = 0.0;
    for (int64_t i = 0; i < cells; ++i) {
      const double d = x_hat[t * cells + i] - x[t * cells + i];
      step += d * d;
    }
    total += step / static_cast<double>(cells);
  }
  return total / static_cast<double>(m);
}

Var prediction_loss_graph(Graph& g, Var x_hat, Var x) {
  check_arg(g.value(x_hat).same_shape(g.value(x)), "prediction_loss: shape mismatch");
  Var d = g.sub(x_hat, x);
  return g.mean_all(g.mul(d, d));
}

std::pair<Tensor, EmbeddingMask> mask_embeddings(const Tensor& e_seq, double p,
                                                 Rng& rng) {
  check_arg(p > 0.0 && p < 1.0, "embedding mask ratio must lie in (0,1)");
  check_arg(e_seq.rank() == 2, "mask_embeddings expects (n, d)");
  const int64_t n = e_seq.dim(0), d = e_seq.dim(1);
  const int64_t zeros = mask_count(p, d);

  EmbeddingMask mask;
  mask.ratio = p;
  mask.bits = Tensor({n, d}, 1.0);
  Tensor masked = e_seq;
  for (int64_t i = 0; i < n; ++i)
    for (uint64_t j : rng.sample_distinct(static_cast<uint64_t>(d),
                                          static_cast<uint64_t>(zeros))) {
      mask.bits.at2(i, static_cast<int64_t>(j)) = 0.0;
      masked.at2(i, static_cast<int64_t>(j)) = 0.0;
    }
  return {masked, mask};
}

Var reconstruct_graph(Graph& g, HeadsState& heads, Var masked_seq) {
  const HeadsConfig& c = heads.config;
  check_arg(g.value(masked_seq).rank() == 2 &&
                g.value(masked_seq).dim(1) == c.hidden_dim,
            "reconstruct: hidden dim mismatch");
  Var x = trunk_forward(g, heads, masked_seq);
  for (int64_t i = 0; i < c.reconstructor_layers; ++i)
    x = attn_layer(g, heads.params, "recon.attn" + std::to_string(i) + ".", x,
                   static_cast<int>(c.n_heads));
  return g.linear(x, g.param(heads.params.at("recon.out.w")),
                  g.param(heads.params.at("recon.out.b")));
}

Tensor reconstruct(HeadsState& heads, const Tensor& masked_seq) {
  Graph g;
  Var out = reconstruct_graph(g, heads, g.input(masked_seq));
  return g.value(out);
}

double reconstruction_error(const Tensor& reconstructed, const Tensor& e_seq) {
  check_arg(reconstructed.same_shape(e_seq), "reconstruction_loss: length mismatch");
  check_arg(e_seq.rank() == 2 && e_seq.dim(0) >= 1, "reconstruction_loss: bad shape");
  const int64_t n = e_seq.dim(0);
  double total = 0.0;
  for (int64_t i = 0; i < e_seq.size(); ++i) {
    const double d = reconstructed[i] - e_seq[i];
    total += d * d;
  }
  return total / static_cast<double>(n);
}

double reconstruction_loss(HeadsState& heads, const Tensor& masked_seq,
                           const Tensor& e_seq) {
  return reconstruction_error(reconstruct(heads, masked_seq), e_seq);
}

Var reconstruction_loss_graph(Graph& g, HeadsState& heads, Var masked_seq, Var e_seq) {
  check_arg(g.value(masked_seq).same_shape(g.value(e_seq)),
            "reconstruction_loss: length mismatch");
  Var rec = reconstruct_graph(g, heads, masked_seq);
  Var d = g.sub(rec, e_seq);
  const int64_t width = g.value(e_seq).dim(1);
  // mean over all elements times d = per-vector sum of squares averaged over n
  return g.scale(g.mean_all(g.mul(d, d)), static_cast<double>(width));
}

}  // namespace urbanmind
