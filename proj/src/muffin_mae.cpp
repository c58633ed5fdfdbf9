#include "urbanmind/muffin_mae.hpp"

#include <cmath>

#include "urbanmind/common.hpp"

namespace urbanmind {

namespace {

constexpr int kKernel = 3;
constexpr int kStride = 2;
constexpr int kPad = 1;

int64_t conv_size(int64_t n) { return (n + 2 * kPad - kKernel) / kStride + 1; }

std::vector<int64_t> full_widths(const MAEConfig& c) {
  std::vector<int64_t> w = c.conv_widths;
  w.push_back(c.embed_dim);
  return w;
}

}  // namespace

void MAEConfig::validate() const {
  check_arg(channels_in >= 1, "channels_in must be >= 1");
  check_arg(embed_dim >= 1, "embed_dim must be >= 1");
  check_arg(side >= 1, "side must be >= 1");
  check_arg(!conv_widths.empty(), "conv_widths must be non-empty");
  check_arg(lr >= 0.0, "lr must be non-negative");
  check_arg(epochs >= 1 && batch_size >= 1, "epochs and batch_size must be >= 1");
  check_arg(p_s > 0.0 && p_s < 1.0 && p_t > 0.0 && p_t < 1.0,
            "mask ratios must lie in (0,1)");
  check_arg(!strategy_schedule.empty(), "strategy schedule must be non-empty");
  check_arg(activation == "gelu", "unsupported activation: " + activation);
}

MAEModel make_mae(const MAEConfig& config, uint64_t seed) {
  config.validate();
  MAEModel m;
  m.config = config;
  Rng rng(Rng::derive(seed, 0xAE));

  m.spatial_sizes = {config.side};
  const auto widths = full_widths(config);
  int64_t ci = config.channels_in;
  for (size_t k = 0; k < widths.size(); ++k) {
    const int64_t co = widths[k];
    m.params.add_xavier("enc.conv" + std::to_string(k) + ".w", {co, ci, kKernel, kKernel}, rng);
    m.params.add("enc.conv" + std::to_string(k) + ".b", {co});
    m.spatial_sizes.push_back(conv_size(m.spatial_sizes.back()));
    check_arg(m.spatial_sizes.back() >= 1, "window too small for conv stack");
    ci = co;
  }
  const int64_t s_last = m.spatial_sizes.back();
  const int64_t flat = config.embed_dim * s_last * s_last;
  m.params.add_xavier("enc.head.w", {config.embed_dim, flat}, rng);
  m.params.add("enc.head.b", {config.embed_dim});

  m.params.add_xavier("dec.head.w", {flat, config.embed_dim}, rng);
  m.params.add("dec.head.b", {flat});
  // Transposed convs mirror the encoder stack back to (channels_in, side, side).
  for (size_t k = widths.size(); k-- > 0;) {
    const int64_t co = (k == 0) ? config.channels_in : widths[k - 1];
    m.params.add_xavier("dec.tconv" + std::to_string(k) + ".w", {widths[k], co, kKernel, kKernel}, rng);
    m.params.add("dec.tconv" + std::to_string(k) + ".b", {co});
  }
  return m;
}

Var encode_graph(Graph& g, MAEModel& model, Var x) {
  const MAEConfig& c = model.config;
  const Tensor& vx = g.value(x);
  check_arg(vx.rank() == 4 && vx.dim(1) == c.channels_in && vx.dim(2) == c.side &&
                vx.dim(3) == c.side,
            "encode: input shape does not match model config");
  const int64_t T = vx.dim(0);

  Var h = x;
  const auto widths = full_widths(c);
  for (size_t k = 0; k < widths.size(); ++k) {
    h = g.conv2d(h, g.param(model.params.at("enc.conv" + std::to_string(k) + ".w")),
                 g.param(model.params.at("enc.conv" + std::to_string(k) + ".b")),
                 kStride, kPad);
    h = g.gelu(h);
  }
  const int64_t s_last = model.spatial_sizes.back();
  h = g.reshape(h, {T, c.embed_dim * s_last * s_last});
  return g.linear(h, g.param(model.params.at("enc.head.w")),
                  g.param(model.params.at("enc.head.b")));
}

Var decode_graph(Graph& g, MAEModel& model, Var v) {
  const MAEConfig& c = model.config;
  const Tensor& vv = g.value(v);
  check_arg(vv.rank() == 2 && vv.dim(1) == c.embed_dim,
            "decode: embedding dim does not match model config");
  const int64_t T = vv.dim(0);
  const int64_t s_last = model.spatial_sizes.back();

  Var h = g.linear(v, g.param(model.params.at("dec.head.w")),
                   g.param(model.params.at("dec.head.b")));
  h = g.gelu(h);
  h = g.reshape(h, {T, c.embed_dim, s_last, s_last});

  const auto widths = full_widths(c);
  for (size_t k = widths.size(); k-- > 0;) {
    // Output padding chosen so each stage inverts the matching conv size.
    const int64_t target = model.spatial_sizes[k];
    const int64_t from = model.spatial_sizes[k + 1];
    const int64_t base = (from - 1) * kStride - 2 * kPad + kKernel;
    const auto out_pad = static_cast<int>(target - base);
    check_arg(out_pad >= 0 && out_pad < kStride, "decoder cannot invert conv sizing");
    h = g.conv_transpose2d(
        h, g.param(model.params.at("dec.tconv" + std::to_string(k) + ".w")),
        g.param(model.params.at("dec.tconv" + std::to_string(k) + ".b")), kStride,
        kPad, out_pad, out_pad);
    if (k > 0) h = g.gelu(h);
  }
  return h;
}

EmbeddingSequence encode(MAEModel& model, const Tensor& x_masked) {
  Graph g;
  Var out = encode_graph(g, model, g.input(x_masked));
  EmbeddingSequence seq;
  seq.vectors = g.value(out);
  return seq;
}

Tensor decode(MAEModel& model, const EmbeddingSequence& v) {
  Graph g;
  Var out = decode_graph(g, model, g.input(v.vectors));
  return g.value(out);
}

double mae_loss(const Tensor& x_hat, const Tensor& x) {
  check_arg(x_hat.same_shape(x), "mae_loss: shape mismatch");
  check_arg(x.rank() >= 1 && x.dim(0) >= 1, "mae_loss: empty tensor");
  const int64_t T = x.dim(0);
  const int64_t per_slot = x.size() / T;
  double total = 0.0;
  for (int64_t t = 0; t < T; ++t) {
    double slot = 0.0;
    for (int64_t i = 0; i < per_slot; ++i) {
      const double d = x_hat[t * per_slot + i] - x[t * per_slot + i];
      slot += d * d;
    }
    total += slot / static_cast<double>(per_slot);
  }
  return total / static_cast<double>(T);
}

Var mae_loss_graph(Graph& g, Var x_hat, Var x) {
  check_arg(g.value(x_hat).same_shape(g.value(x)), "mae_loss: shape mismatch");
  // Equal slot sizes make the per-slot mean-of-means equal the overall mean.
  Var d = g.sub(x_hat, x);
  return g.mean_all(g.mul(d, d));
}

std::vector<double> train_mae(MAEModel& model, const std::vector<Tensor>& samples,
                              uint64_t seed) {
  const MAEConfig& c = model.config;
  check_arg(!samples.empty(), "train_mae: no samples");
  const std::array<int64_t, 4> shape{samples[0].dim(0), c.channels_in, c.side, c.side};
  for (const auto& s : samples)
    check_arg(s.rank() == 4 && s.dim(0) == shape[0] && s.dim(1) == shape[1] &&
                  s.dim(2) == shape[2] && s.dim(3) == shape[3],
              "train_mae: sample shape mismatch");

  Rng order_rng(Rng::derive(seed, 1));
  Rng mask_rng(Rng::derive(seed, 2));
  Adam adam(c.lr);

  std::vector<double> history;
  auto last_good = model.params.snapshot();
  size_t step = 0;

  for (int64_t epoch = 0; epoch < c.epochs; ++epoch) {
    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);

    double epoch_loss = 0.0;
    int64_t batches = 0;
    for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(c.batch_size)) {
      const size_t end = std::min(order.size(), pos + static_cast<size_t>(c.batch_size));
      const MaskStrategy strategy = c.strategy_schedule[step % c.strategy_schedule.size()];
      ++step;

      Graph g;
      Var loss{};
      for (size_t b = pos; b < end; ++b) {
        const Tensor& x = samples[order[b]];
        MaskSpec mask;
        switch (strategy) {
          case MaskStrategy::kSpatial: mask = spatial_mask(shape, c.p_s, mask_rng); break;
          case MaskStrategy::kTemporal: mask = temporal_mask(shape, c.p_t, mask_rng); break;
          case MaskStrategy::kGlobal: mask = global_mask(shape, c.p_s, c.p_t, mask_rng); break;
        }
        Var x_in = g.input(apply_mask(x, mask));
        Var recon = decode_graph(g, model, encode_graph(g, model, x_in));
        Var sample_loss = mae_loss_graph(g, recon, g.input(x));
        loss = loss.valid() ? g.add(loss, sample_loss) : sample_loss;
      }
      loss = g.scale(loss, 1.0 / static_cast<double>(end - pos));
      const double loss_value = g.value(loss)[0];
      if (!std::isfinite(loss_value)) {
        for (size_t i = 0; i < model.params.count(); ++i)
          model.params[i].value = last_good.at(model.params[i].name);
        throw TrainingFailure("mae training diverged at epoch " + std::to_string(epoch));
      }
      g.backward(loss);

      std::vector<std::pair<Param*, Tensor>> grads;
      for (size_t i = 0; i < model.params.count(); ++i)
        grads.emplace_back(&model.params[i], g.grad_of(model.params[i]));
      adam.step(grads);

      epoch_loss += loss_value;
      ++batches;
    }
    history.push_back(epoch_loss / static_cast<double>(batches));
    last_good = model.params.snapshot();
  }
  return history;
}

TokenSequence fuse_tokens(const EmbeddingSequence& v, const EmbeddingSequence& vk) {
  check_arg(v.vectors.rank() == 2 && vk.vectors.rank() == 2 &&
                v.vectors.dim(0) == vk.vectors.dim(0),
            "fuse_tokens: slot count mismatch");
  check_arg(v.source == EmbeddingSequence::kMultifaceted &&
                vk.source == EmbeddingSequence::kTarget,
            "fuse_tokens expects (multifaceted, target) order");
  const int64_t T = v.vectors.dim(0);
  const int64_t dv = v.vectors.dim(1), dk = vk.vectors.dim(1);
  TokenSequence u;
  u.tokens = Tensor({T, dv + dk});
  for (int64_t t = 0; t < T; ++t) {
    for (int64_t j = 0; j < dv; ++j) u.tokens.at2(t, j) = v.vectors.at2(t, j);
    for (int64_t j = 0; j < dk; ++j) u.tokens.at2(t, dv + j) = vk.vectors.at2(t, j);
  }
  u.region_index = v.region_index;
  u.day = v.day;
  return u;
}

}  // namespace urbanmind
