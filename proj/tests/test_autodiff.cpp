#include <doctest.h>

#include <cmath>
#include <map>

#include "gradcheck.hpp"
#include "urbanmind/graph.hpp"

using namespace urbanmind;

namespace {

// FD check of a scalar graph built from a single parameter.
double op_grad_check(const std::function<Var(Graph&, Var)>& build,
                     std::vector<int64_t> shape, uint64_t seed, int coords = 8) {
  ParamStore store;
  Rng init(seed);
  Param& p = store.add_normal("p", std::move(shape), init, 0.5);

  auto loss_of = [&]() {
    Graph g;
    Var out = build(g, g.param(p));
    return g.value(out)[0];
  };
  Tensor analytic;
  {
    Graph g;
    Var out = build(g, g.param(p));
    g.backward(out);
    analytic = g.grad_of(p);
  }
  Rng pick(seed + 1);
  const auto res = umtest::finite_difference_check(
      {&p}, loss_of, [&](const Param&) { return analytic; }, coords, 1e-4, pick);
  return res.max_rel_error;
}

}  // namespace

TEST_CASE("matmul forward matches hand computation") {
  Graph g;
  Var a = g.input(Tensor::from_data({2, 2}, {1, 2, 3, 4}));
  Var b = g.input(Tensor::from_data({2, 2}, {5, 6, 7, 8}));
  const Tensor& c = g.value(g.matmul(a, b));
  CHECK(c.at2(0, 0) == doctest::Approx(19));
  CHECK(c.at2(0, 1) == doctest::Approx(22));
  CHECK(c.at2(1, 0) == doctest::Approx(43));
  CHECK(c.at2(1, 1) == doctest::Approx(50));
}

TEST_CASE("elementwise and reduction gradients match finite differences") {
  CHECK(op_grad_check([](Graph& g, Var x) { return g.mean_all(g.mul(x, x)); },
                      {3, 4}, 11) < 1e-5);
  CHECK(op_grad_check([](Graph& g, Var x) { return g.sum_all(g.gelu(x)); },
                      {4, 5}, 12) < 1e-5);
  CHECK(op_grad_check([](Graph& g, Var x) { return g.mean_all(g.tanh_op(x)); },
                      {6}, 13) < 1e-5);
  CHECK(op_grad_check(
            [](Graph& g, Var x) { return g.mean_all(g.softmax_rows(x)); },
            {3, 5}, 14) < 1e-4);
  CHECK(op_grad_check(
            [](Graph& g, Var x) {
              Var y = g.mul(x, x);
              return g.sum_all(g.mean_rows(y));
            },
            {4, 3}, 15) < 1e-5);
}

TEST_CASE("matmul family gradients match finite differences") {
  CHECK(op_grad_check(
            [](Graph& g, Var x) {
              Var y = g.matmul(x, x);
              return g.mean_all(g.mul(y, y));
            },
            {4, 4}, 21) < 1e-5);
  CHECK(op_grad_check(
            [](Graph& g, Var x) { return g.mean_all(g.matmul_nt(x, x)); },
            {3, 5}, 22) < 1e-5);
}

TEST_CASE("layer norm gradient matches finite differences") {
  ParamStore store;
  Rng init(31);
  Param& x = store.add_normal("x", {3, 8}, init, 1.0);
  Param& gmma = store.add_normal("g", {8}, init, 0.3);
  Param& beta = store.add_normal("b", {8}, init, 0.3);

  auto build = [&](Graph& g) {
    Var out = g.layer_norm(g.param(x), g.param(gmma), g.param(beta));
    return g.mean_all(g.mul(out, out));
  };
  auto loss_of = [&]() {
    Graph g;
    return g.value(build(g))[0];
  };
  Graph g;
  Var loss = build(g);
  g.backward(loss);
  const Tensor gx = g.grad_of(x), gg = g.grad_of(gmma), gb = g.grad_of(beta);
  Rng pick(32);
  auto res = umtest::finite_difference_check(
      {&x, &gmma, &beta}, loss_of,
      [&](const Param& p) {
        if (&p == &x) return gx;
        if (&p == &gmma) return gg;
        return gb;
      },
      6, 1e-4, pick);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("conv2d and conv_transpose2d gradients match finite differences") {
  ParamStore store;
  Rng init(41);
  Param& x = store.add_normal("x", {2, 2, 5, 5}, init, 0.8);
  Param& w = store.add_normal("w", {3, 2, 3, 3}, init, 0.4);
  Param& b = store.add_normal("b", {3}, init, 0.2);
  Param& wt = store.add_normal("wt", {3, 2, 3, 3}, init, 0.4);
  Param& bt = store.add_normal("bt", {2}, init, 0.2);

  auto build = [&](Graph& g) {
    Var h = g.conv2d(g.param(x), g.param(w), g.param(b), 2, 1);
    h = g.gelu(h);
    h = g.conv_transpose2d(h, g.param(wt), g.param(bt), 2, 1, 0, 0);
    return g.mean_all(g.mul(h, h));
  };
  auto loss_of = [&]() {
    Graph g;
    return g.value(build(g))[0];
  };
  Graph g;
  g.backward(build(g));
  std::map<const Param*, Tensor> grads;
  for (Param* p : {&x, &w, &b, &wt, &bt}) grads[p] = g.grad_of(*p);
  Rng pick(42);
  auto res = umtest::finite_difference_check(
      {&x, &w, &b, &wt, &bt}, loss_of,
      [&](const Param& p) { return grads.at(&p); }, 5, 1e-4, pick);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("conv2d output sizing") {
  Graph g;
  Var x = g.input(Tensor({1, 1, 10, 10}));
  Var w = g.input(Tensor({4, 1, 3, 3}));
  Var b = g.input(Tensor({4}));
  Var y = g.conv2d(x, w, b, 2, 1);
  CHECK(g.value(y).shape() == std::vector<int64_t>{1, 4, 5, 5});
  Var y2 = g.conv2d(y, g.input(Tensor({8, 4, 3, 3})), g.input(Tensor({8})), 2, 1);
  CHECK(g.value(y2).shape() == std::vector<int64_t>{1, 8, 3, 3});
}

TEST_CASE("attention block gradient matches finite differences") {
  ParamStore store;
  Rng init(51);
  Param& x = store.add_normal("x", {4, 8}, init, 0.7);
  Param& wq = store.add_normal("wq", {8, 8}, init, 0.35);
  Param& wk = store.add_normal("wk", {8, 8}, init, 0.35);
  Param& wv = store.add_normal("wv", {8, 8}, init, 0.35);
  Param& wo = store.add_normal("wo", {8, 8}, init, 0.35);

  for (const bool causal : {false, true}) {
    auto build = [&](Graph& g) {
      Var out = multihead_attention(g, g.param(x), g.param(wq), g.param(wk),
                                    g.param(wv), g.param(wo), 2, causal,
                                    /*use_rope=*/causal);
      return g.mean_all(g.mul(out, out));
    };
    auto loss_of = [&]() {
      Graph g;
      return g.value(build(g))[0];
    };
    Graph g;
    g.backward(build(g));
    std::map<const Param*, Tensor> grads;
    for (Param* p : {&x, &wq, &wk, &wv, &wo}) grads[p] = g.grad_of(*p);
    Rng pick(52);
    auto res = umtest::finite_difference_check(
        {&x, &wq, &wk, &wv, &wo}, loss_of,
        [&](const Param& p) { return grads.at(&p); }, 6, 1e-4, pick);
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("parameter used twice accumulates one gradient") {
  ParamStore store;
  Rng init(61);
  Param& w = store.add_normal("w", {3, 3}, init, 0.5);
  Graph g;
  Var v = g.param(w);
  Var y = g.matmul(v, v);  // same leaf twice
  Var loss = g.mean_all(g.mul(y, y));
  g.backward(loss);

  auto loss_of = [&]() {
    Graph g2;
    Var v2 = g2.param(w);
    Var y2 = g2.matmul(v2, v2);
    return g2.value(g2.mean_all(g2.mul(y2, y2)))[0];
  };
  const Tensor analytic = g.grad_of(w);
  Rng pick(62);
  auto res = umtest::finite_difference_check(
      {&w}, loss_of, [&](const Param&) { return analytic; }, 9, 1e-4, pick);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("slice and concat round trip values and gradients") {
  Graph g;
  Var a = g.input(Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var b = g.input(Tensor::from_data({1, 3}, {7, 8, 9}));
  Var cat = g.concat_rows(a, b);
  CHECK(g.value(cat).dim(0) == 3);
  Var back = g.slice_rows(cat, 2, 3);
  CHECK(g.value(back).at2(0, 2) == 9);

  Var cc = g.concat_cols(a, g.input(Tensor::from_data({2, 1}, {10, 11})));
  CHECK(g.value(cc).shape() == std::vector<int64_t>{2, 4});
  CHECK(g.value(cc).at2(1, 3) == 11);

  CHECK(op_grad_check(
            [](Graph& gg, Var x) {
              Var s = gg.slice_cols(x, 1, 3);
              Var c = gg.concat_cols(s, s);
              return gg.mean_all(gg.mul(c, c));
            },
            {3, 4}, 71) < 1e-5);
}

TEST_CASE("rope preserves norms and is position dependent") {
  Graph g;
  Rng rng(81);
  Tensor x({5, 6});
  for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  Var out = g.rope(g.input(x));
  const Tensor& y = g.value(out);
  for (int64_t p = 0; p < 5; ++p) {
    double nx = 0, ny = 0;
    for (int64_t j = 0; j < 6; ++j) {
      nx += x.at2(p, j) * x.at2(p, j);
      ny += y.at2(p, j) * y.at2(p, j);
    }
    CHECK(nx == doctest::Approx(ny));
  }
  // Row 0 is unrotated.
  for (int64_t j = 0; j < 6; ++j) CHECK(y.at2(0, j) == doctest::Approx(x.at2(0, j)));
}

TEST_CASE("embed_rows gathers and scatters") {
  ParamStore store;
  Rng init(91);
  Param& table = store.add_normal("t", {5, 3}, init, 1.0);
  Graph g;
  Var rows = g.embed_rows(g.param(table), {1, 1, 4});
  Var loss = g.sum_all(rows);
  g.backward(loss);
  const Tensor grad = g.grad_of(table);
  CHECK(grad.at2(1, 0) == doctest::Approx(2.0));  // used twice
  CHECK(grad.at2(4, 0) == doctest::Approx(1.0));
  CHECK(grad.at2(0, 0) == doctest::Approx(0.0));
}
