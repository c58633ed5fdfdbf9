#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "urbanmind/params.hpp"
#include "urbanmind/tensor.hpp"

namespace urbanmind {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff over Tensors. A Graph is built per forward pass;
// backward() walks the tape in reverse creation order. Parameter leaves are
// bound to their f32 storage (widened to double on entry) and deduplicated,
// so a parameter used twice in one graph accumulates one gradient.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Tensor v);
  Var param(Param& p);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_rowvec(Var m, Var v);  // (n,d) + (d,) broadcast over rows

  Var matmul(Var a, Var b);     // (n,k) x (k,m)
  Var matmul_nt(Var a, Var b);  // (n,k) x (m,k)^T -> (n,m)
  Var linear(Var x, Var w);     // x:(n,in), w:(out,in) -> (n,out)
  Var linear(Var x, Var w, Var b);

  Var gelu(Var a);
  Var tanh_op(Var a);
  Var softmax_rows(Var a);
  // Rotary position encoding over (seq, dh) with even dh; row p rotated by
  // angles p * base^(-2i/dh).
  Var rope(Var a, double base = 10000.0);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);

  // x:(B,Ci,H,W), w:(Co,Ci,k,k), b:(Co,)
  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  // x:(B,Ci,H,W), w:(Ci,Co,k,k); output H = (H-1)*stride - 2*pad + k + out_pad_h
  Var conv_transpose2d(Var x, Var w, Var b, int stride, int pad, int out_pad_h,
                       int out_pad_w);

  Var reshape(Var a, std::vector<int64_t> shape);
  Var slice_rows(Var a, int64_t r0, int64_t r1);
  Var slice_cols(Var a, int64_t c0, int64_t c1);
  Var concat_rows(Var a, Var b);
  Var concat_cols(Var a, Var b);

  Var sum_all(Var a);
  Var mean_all(Var a);
  Var mean_rows(Var a);  // (n,d) -> (1,d)

  // rows of table selected by ids; backward scatter-adds
  Var embed_rows(Var table, const std::vector<int>& ids);

  void backward(Var loss);

  const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  const Tensor& grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }
  // Zero tensor if the parameter does not appear in this graph.
  Tensor grad_of(const Param& p) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    std::function<void()> back;  // empty for leaves
  };

  Var make(Tensor value, bool needs_grad, std::function<void()> back);
  Tensor& grad_buf(int id);  // lazily allocated, zero-initialized
  bool wants(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }

  std::vector<Node> nodes_;
  std::unordered_map<const Param*, int> param_ids_;
};

// Multi-head self-attention block: softmax(QK^T/sqrt(dh) [+causal]) V, then
// output projection. Weights are (hidden, hidden), no biases. Rotary position
// encoding is applied to q/k per head when use_rope is set.
Var multihead_attention(Graph& g, Var x, Var wq, Var wk, Var wv, Var wo,
                        int n_heads, bool causal, bool use_rope = false);

}  // namespace urbanmind
