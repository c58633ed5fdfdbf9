#include "urbanmind/graph.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <utility>

namespace urbanmind {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                   Eigen::Dynamic, Eigen::RowMajor>>;

ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.data(), t.dim(0), t.dim(1));
}

MatMap as_mat(Tensor& t) { return MatMap(t.data(), t.dim(0), t.dim(1)); }

int64_t conv_out(int64_t n, int64_t k, int stride, int pad) {
  return (n + 2 * pad - k) / stride + 1;
}

}  // namespace

Var Graph::make(Tensor value, bool needs_grad, std::function<void()> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_buf(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty() && n.value.size() > 0) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Var Graph::input(Tensor v) { return make(std::move(v), false, nullptr); }

Var Graph::param(Param& p) {
  auto it = param_ids_.find(&p);
  if (it != param_ids_.end()) return Var{it->second};
  Var v = make(p.widen(), true, nullptr);
  param_ids_[&p] = v.id;
  return v;
}

Tensor Graph::grad_of(const Param& p) const {
  auto it = param_ids_.find(&p);
  if (it == param_ids_.end() ||
      nodes_[static_cast<size_t>(it->second)].grad.empty()) {
    return Tensor(p.shape);
  }
  return nodes_[static_cast<size_t>(it->second)].grad;
}

void Graph::backward(Var loss) {
  check_arg(loss.valid() && value(loss).size() == 1,
            "backward expects a scalar loss");
  grad_buf(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad || n.grad.empty() || !n.back) continue;
    n.back();
  }
}

Var Graph::add(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_arg(va.same_shape(vb), "add: shape mismatch");
  Tensor out = va;
  for (int64_t i = 0; i < out.size(); ++i) out[i] += vb[i];
  const bool ng = wants(a) || wants(b);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, b, o] {
      const Tensor& g = grad(o);
      if (wants(a)) {
        Tensor& ga = grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (wants(b)) {
        Tensor& gb = grad_buf(b.id);
        for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    };
  }
  return o;
}

Var Graph::sub(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_arg(va.same_shape(vb), "sub: shape mismatch");
  Tensor out = va;
  for (int64_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
  const bool ng = wants(a) || wants(b);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, b, o] {
      const Tensor& g = grad(o);
      if (wants(a)) {
        Tensor& ga = grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (wants(b)) {
        Tensor& gb = grad_buf(b.id);
        for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    };
  }
  return o;
}

Var Graph::mul(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_arg(va.same_shape(vb), "mul: shape mismatch");
  Tensor out = va;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
  const bool ng = wants(a) || wants(b);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, b, o] {
      const Tensor& g = grad(o);
      const Tensor& va2 = value(a);
      const Tensor& vb2 = value(b);
      if (wants(a)) {
        Tensor& ga = grad_buf(a.id);
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb2[i];
      }
      if (wants(b)) {
        Tensor& gb = grad_buf(b.id);
        for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va2[i];
      }
    };
  }
  return o;
}

Var Graph::scale(Var a, double s) {
  Tensor out = value(a);
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  const bool ng = wants(a);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, o, s] {
      const Tensor& g = grad(o);
      Tensor& ga = grad_buf(a.id);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    };
  }
  return o;
}

Var Graph::add_rowvec(Var m, Var v) {
  const Tensor& vm = value(m);
  const Tensor& vv = value(v);
  check_arg(vm.rank() == 2 && vv.size() == vm.dim(1), "add_rowvec: shape mismatch");
  Tensor out = vm;
  const int64_t n = vm.dim(0), d = vm.dim(1);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out.at2(i, j) += vv[j];
  const bool ng = wants(m) || wants(v);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, m, v, o, n, d] {
      const Tensor& g = grad(o);
      if (wants(m)) {
        Tensor& gm = grad_buf(m.id);
        for (int64_t i = 0; i < g.size(); ++i) gm[i] += g[i];
      }
      if (wants(v)) {
        Tensor& gv = grad_buf(v.id);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < d; ++j) gv[j] += g.at2(i, j);
      }
    };
  }
  return o;
}

Var Graph::matmul(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_arg(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(0),
            "matmul: shape mismatch");
  Tensor out({va.dim(0), vb.dim(1)});
  as_mat(out).noalias() = as_mat(va) * as_mat(vb);
  const bool ng = wants(a) || wants(b);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, b, o] {
      const Tensor& g = grad(o);
      if (wants(a))
        as_mat(grad_buf(a.id)).noalias() += as_mat(g) * as_mat(value(b)).transpose();
      if (wants(b))
        as_mat(grad_buf(b.id)).noalias() += as_mat(value(a)).transpose() * as_mat(g);
    };
  }
  return o;
}

Var Graph::matmul_nt(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_arg(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(1),
            "matmul_nt: shape mismatch");
  Tensor out({va.dim(0), vb.dim(0)});
  as_mat(out).noalias() = as_mat(va) * as_mat(vb).transpose();
  const bool ng = wants(a) || wants(b);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, b, o] {
      const Tensor& g = grad(o);
      if (wants(a))
        as_mat(grad_buf(a.id)).noalias() += as_mat(g) * as_mat(value(b));
      if (wants(b))
        as_mat(grad_buf(b.id)).noalias() += as_mat(g).transpose() * as_mat(value(a));
    };
  }
  return o;
}

Var Graph::linear(Var x, Var w) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  check_arg(vx.rank() == 2 && vw.rank() == 2 && vx.dim(1) == vw.dim(1),
            "linear: shape mismatch");
  return matmul_nt(x, w);
}

Var Graph::linear(Var x, Var w, Var b) { return add_rowvec(linear(x, w), b); }

Var Graph::gelu(Var a) {
  const Tensor& va = value(a);
  Tensor out = va;
  for (int64_t i = 0; i < out.size(); ++i) {
    const double x = va[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  }
  const bool ng = wants(a);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, o] {
      const Tensor& g = grad(o);
      const Tensor& va2 = value(a);
      Tensor& ga = grad_buf(a.id);
      const double inv_sqrt2pi = 0.3989422804014327;
      for (int64_t i = 0; i < g.size(); ++i) {
        const double x = va2[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        ga[i] += g[i] * (cdf + x * pdf);
      }
    };
  }
  return o;
}

Var Graph::tanh_op(Var a) {
  const Tensor& va = value(a);
  Tensor out = va;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(va[i]);
  const bool ng = wants(a);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, o] {
      const Tensor& g = grad(o);
      const Tensor& y = value(o);
      Tensor& ga = grad_buf(a.id);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    };
  }
  return o;
}

Var Graph::rope(Var a, double base) {
  const Tensor& va = value(a);
  check_arg(va.rank() == 2 && va.dim(1) % 2 == 0, "rope expects (seq, even dim)");
  const int64_t n = va.dim(0), d = va.dim(1);
  Tensor cs({n, d / 2}), sn({n, d / 2});
  for (int64_t p = 0; p < n; ++p)
    for (int64_t i = 0; i < d / 2; ++i) {
      const double theta =
          static_cast<double>(p) *
          std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      cs.at2(p, i) = std::cos(theta);
      sn.at2(p, i) = std::sin(theta);
    }
  Tensor out({n, d});
  for (int64_t p = 0; p < n; ++p)
    for (int64_t i = 0; i < d / 2; ++i) {
      const double x0 = va.at2(p, 2 * i), x1 = va.at2(p, 2 * i + 1);
      out.at2(p, 2 * i) = x0 * cs.at2(p, i) - x1 * sn.at2(p, i);
      out.at2(p, 2 * i + 1) = x0 * sn.at2(p, i) + x1 * cs.at2(p, i);
    }
  const bool ng = wants(a);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, o, n, d, cs = std::move(cs), sn = std::move(sn)] {
      const Tensor& g = grad(o);
      Tensor& ga = grad_buf(a.id);
      for (int64_t p = 0; p < n; ++p)
        for (int64_t i = 0; i < d / 2; ++i) {
          const double g0 = g.at2(p, 2 * i), g1 = g.at2(p, 2 * i + 1);
          ga.at2(p, 2 * i) += g0 * cs.at2(p, i) + g1 * sn.at2(p, i);
          ga.at2(p, 2 * i + 1) += -g0 * sn.at2(p, i) + g1 * cs.at2(p, i);
        }
    };
  }
  return o;
}

Var Graph::softmax_rows(Var a) {
  const Tensor& va = value(a);
  check_arg(va.rank() == 2, "softmax_rows expects a matrix");
  Tensor out = va;
  const int64_t n = va.dim(0), m = va.dim(1);
  for (int64_t i = 0; i < n; ++i) {
    double mx = out.at2(i, 0);
    for (int64_t j = 1; j < m; ++j) mx = std::max(mx, out.at2(i, j));
    double sum = 0.0;
    for (int64_t j = 0; j < m; ++j) {
      const double e = std::exp(out.at2(i, j) - mx);
      out.at2(i, j) = e;
      sum += e;
    }
    for (int64_t j = 0; j < m; ++j) out.at2(i, j) /= sum;
  }
  const bool ng = wants(a);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, o, n, m] {
      const Tensor& g = grad(o);
      const Tensor& p = value(o);
      Tensor& ga = grad_buf(a.id);
      for (int64_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < m; ++j) dot += g.at2(i, j) * p.at2(i, j);
        for (int64_t j = 0; j < m; ++j)
          ga.at2(i, j) += p.at2(i, j) * (g.at2(i, j) - dot);
      }
    };
  }
  return o;
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& vx = value(x);
  check_arg(vx.rank() == 2, "layer_norm expects a matrix");
  const int64_t n = vx.dim(0), d = vx.dim(1);
  const Tensor& vg = value(gamma);
  const Tensor& vb = value(beta);
  check_arg(vg.size() == d && vb.size() == d, "layer_norm: affine shape mismatch");

  Tensor out({n, d});
  Tensor xhat({n, d});
  Tensor rstd({n});
  for (int64_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += vx.at2(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = vx.at2(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[i] = r;
    for (int64_t j = 0; j < d; ++j) {
      const double h = (vx.at2(i, j) - mean) * r;
      xhat.at2(i, j) = h;
      out.at2(i, j) = h * vg[j] + vb[j];
    }
  }
  const bool ng = wants(x) || wants(gamma) || wants(beta);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, x, gamma, beta, o, n, d,
                          xhat = std::move(xhat), rstd = std::move(rstd)] {
      const Tensor& g = grad(o);
      const Tensor& vg2 = value(gamma);
      if (wants(gamma)) {
        Tensor& gg = grad_buf(gamma.id);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < d; ++j) gg[j] += g.at2(i, j) * xhat.at2(i, j);
      }
      if (wants(beta)) {
        Tensor& gb = grad_buf(beta.id);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < d; ++j) gb[j] += g.at2(i, j);
      }
      if (wants(x)) {
        Tensor& gx = grad_buf(x.id);
        for (int64_t i = 0; i < n; ++i) {
          double sum_gh = 0.0, sum_gh_xhat = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            const double gh = g.at2(i, j) * vg2[j];
            sum_gh += gh;
            sum_gh_xhat += gh * xhat.at2(i, j);
          }
          const double inv_d = 1.0 / static_cast<double>(d);
          for (int64_t j = 0; j < d; ++j) {
            const double gh = g.at2(i, j) * vg2[j];
            gx.at2(i, j) += rstd[i] * (gh - inv_d * sum_gh -
                                       xhat.at2(i, j) * inv_d * sum_gh_xhat);
          }
        }
      }
    };
  }
  return o;
}

Var Graph::conv2d(Var x, Var w, Var b, int stride, int pad) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  check_arg(vx.rank() == 4 && vw.rank() == 4 && vx.dim(1) == vw.dim(1),
            "conv2d: shape mismatch");
  const int64_t B = vx.dim(0), Ci = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  const int64_t Co = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
  const int64_t Ho = conv_out(H, kh, stride, pad);
  const int64_t Wo = conv_out(W, kw, stride, pad);
  check_arg(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");
  const Tensor& vb = value(b);
  check_arg(vb.size() == Co, "conv2d: bias shape mismatch");

  Tensor out({B, Co, Ho, Wo});
  for (int64_t n = 0; n < B; ++n)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = vb[co];
          for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t ki = 0; ki < kh; ++ki) {
              const int64_t ih = oh * stride - pad + ki;
              if (ih < 0 || ih >= H) continue;
              for (int64_t kj = 0; kj < kw; ++kj) {
                const int64_t iw = ow * stride - pad + kj;
                if (iw < 0 || iw >= W) continue;
                acc += vx.at4(n, ci, ih, iw) * vw.at4(co, ci, ki, kj);
              }
            }
          out.at4(n, co, oh, ow) = acc;
        }

  const bool ng = wants(x) || wants(w) || wants(b);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, x, w, b, o, B, Ci, H, W, Co, kh, kw, Ho, Wo,
                          stride, pad] {
      const Tensor& g = grad(o);
      const Tensor& vx2 = value(x);
      const Tensor& vw2 = value(w);
      const bool wx = wants(x), ww = wants(w), wb = wants(b);
      Tensor* gx = wx ? &grad_buf(x.id) : nullptr;
      Tensor* gw = ww ? &grad_buf(w.id) : nullptr;
      Tensor* gb = wb ? &grad_buf(b.id) : nullptr;
      for (int64_t n = 0; n < B; ++n)
        for (int64_t co = 0; co < Co; ++co)
          for (int64_t oh = 0; oh < Ho; ++oh)
            for (int64_t ow = 0; ow < Wo; ++ow) {
              const double go = g.at4(n, co, oh, ow);
              if (go == 0.0) continue;
              if (wb) (*gb)[co] += go;
              for (int64_t ci = 0; ci < Ci; ++ci)
                for (int64_t ki = 0; ki < kh; ++ki) {
                  const int64_t ih = oh * stride - pad + ki;
                  if (ih < 0 || ih >= H) continue;
                  for (int64_t kj = 0; kj < kw; ++kj) {
                    const int64_t iw = ow * stride - pad + kj;
                    if (iw < 0 || iw >= W) continue;
                    if (wx) gx->at4(n, ci, ih, iw) += go * vw2.at4(co, ci, ki, kj);
                    if (ww) gw->at4(co, ci, ki, kj) += go * vx2.at4(n, ci, ih, iw);
                  }
                }
            }
    };
  }
  return o;
}

Var Graph::conv_transpose2d(Var x, Var w, Var b, int stride, int pad,
                            int out_pad_h, int out_pad_w) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(w);
  check_arg(vx.rank() == 4 && vw.rank() == 4 && vx.dim(1) == vw.dim(0),
            "conv_transpose2d: shape mismatch");
  const int64_t B = vx.dim(0), Ci = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  const int64_t Co = vw.dim(1), kh = vw.dim(2), kw = vw.dim(3);
  const int64_t Ho = (H - 1) * stride - 2 * pad + kh + out_pad_h;
  const int64_t Wo = (W - 1) * stride - 2 * pad + kw + out_pad_w;
  check_arg(Ho >= 1 && Wo >= 1, "conv_transpose2d: empty output");
  const Tensor& vb = value(b);
  check_arg(vb.size() == Co, "conv_transpose2d: bias shape mismatch");

  Tensor out({B, Co, Ho, Wo});
  for (int64_t n = 0; n < B; ++n)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) out.at4(n, co, oh, ow) = vb[co];
  for (int64_t n = 0; n < B; ++n)
    for (int64_t ci = 0; ci < Ci; ++ci)
      for (int64_t ih = 0; ih < H; ++ih)
        for (int64_t iw = 0; iw < W; ++iw) {
          const double xv = vx.at4(n, ci, ih, iw);
          for (int64_t co = 0; co < Co; ++co)
            for (int64_t ki = 0; ki < kh; ++ki) {
              const int64_t oh = ih * stride - pad + ki;
              if (oh < 0 || oh >= Ho) continue;
              for (int64_t kj = 0; kj < kw; ++kj) {
                const int64_t ow = iw * stride - pad + kj;
                if (ow < 0 || ow >= Wo) continue;
                out.at4(n, co, oh, ow) += xv * vw.at4(ci, co, ki, kj);
              }
            }
        }

  const bool ng = wants(x) || wants(w) || wants(b);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, x, w, b, o, B, Ci, H, W, Co, kh, kw, Ho, Wo,
                          stride, pad] {
      const Tensor& g = grad(o);
      const Tensor& vx2 = value(x);
      const Tensor& vw2 = value(w);
      const bool wx = wants(x), ww = wants(w), wb = wants(b);
      Tensor* gx = wx ? &grad_buf(x.id) : nullptr;
      Tensor* gw = ww ? &grad_buf(w.id) : nullptr;
      Tensor* gb = wb ? &grad_buf(b.id) : nullptr;
      if (wb) {
        for (int64_t n = 0; n < B; ++n)
          for (int64_t co = 0; co < Co; ++co)
            for (int64_t oh = 0; oh < Ho; ++oh)
              for (int64_t ow = 0; ow < Wo; ++ow) (*gb)[co] += g.at4(n, co, oh, ow);
      }
      for (int64_t n = 0; n < B; ++n)
        for (int64_t ci = 0; ci < Ci; ++ci)
          for (int64_t ih = 0; ih < H; ++ih)
            for (int64_t iw = 0; iw < W; ++iw) {
              const double xv = vx2.at4(n, ci, ih, iw);
              double acc = 0.0;
              for (int64_t co = 0; co < Co; ++co)
                for (int64_t ki = 0; ki < kh; ++ki) {
                  const int64_t oh = ih * stride - pad + ki;
                  if (oh < 0 || oh >= Ho) continue;
                  for (int64_t kj = 0; kj < kw; ++kj) {
                    const int64_t ow = iw * stride - pad + kj;
                    if (ow < 0 || ow >= Wo) continue;
                    const double go = g.at4(n, co, oh, ow);
                    acc += go * vw2.at4(ci, co, ki, kj);
                    if (ww) gw->at4(ci, co, ki, kj) += go * xv;
                  }
                }
              if (wx) gx->at4(n, ci, ih, iw) += acc;
            }
    };
  }
  return o;
}

Var Graph::reshape(Var a, std::vector<int64_t> shape) {
  Tensor out = value(a).reshaped(shape);
  const bool ng = wants(a);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, o] {
      const Tensor& g = grad(o);
      Tensor& ga = grad_buf(a.id);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  }
  return o;
}

Var Graph::slice_rows(Var a, int64_t r0, int64_t r1) {
  const Tensor& va = value(a);
  check_arg(va.rank() == 2 && 0 <= r0 && r0 < r1 && r1 <= va.dim(0),
            "slice_rows: bad range");
  const int64_t d = va.dim(1);
  Tensor out({r1 - r0, d});
  for (int64_t i = r0; i < r1; ++i)
    for (int64_t j = 0; j < d; ++j) out.at2(i - r0, j) = va.at2(i, j);
  const bool ng = wants(a);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, o, r0, r1, d] {
      const Tensor& g = grad(o);
      Tensor& ga = grad_buf(a.id);
      for (int64_t i = r0; i < r1; ++i)
        for (int64_t j = 0; j < d; ++j) ga.at2(i, j) += g.at2(i - r0, j);
    };
  }
  return o;
}

Var Graph::slice_cols(Var a, int64_t c0, int64_t c1) {
  const Tensor& va = value(a);
  check_arg(va.rank() == 2 && 0 <= c0 && c0 < c1 && c1 <= va.dim(1),
            "slice_cols: bad range");
  const int64_t n = va.dim(0);
  Tensor out({n, c1 - c0});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = c0; j < c1; ++j) out.at2(i, j - c0) = va.at2(i, j);
  const bool ng = wants(a);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, o, c0, c1, n] {
      const Tensor& g = grad(o);
      Tensor& ga = grad_buf(a.id);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = c0; j < c1; ++j) ga.at2(i, j) += g.at2(i, j - c0);
    };
  }
  return o;
}

Var Graph::concat_rows(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_arg(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(1),
            "concat_rows: width mismatch");
  const int64_t na = va.dim(0), nb = vb.dim(0), d = va.dim(1);
  Tensor out({na + nb, d});
  for (int64_t i = 0; i < na; ++i)
    for (int64_t j = 0; j < d; ++j) out.at2(i, j) = va.at2(i, j);
  for (int64_t i = 0; i < nb; ++i)
    for (int64_t j = 0; j < d; ++j) out.at2(na + i, j) = vb.at2(i, j);
  const bool ng = wants(a) || wants(b);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, b, o, na, nb, d] {
      const Tensor& g = grad(o);
      if (wants(a)) {
        Tensor& ga = grad_buf(a.id);
        for (int64_t i = 0; i < na; ++i)
          for (int64_t j = 0; j < d; ++j) ga.at2(i, j) += g.at2(i, j);
      }
      if (wants(b)) {
        Tensor& gb = grad_buf(b.id);
        for (int64_t i = 0; i < nb; ++i)
          for (int64_t j = 0; j < d; ++j) gb.at2(i, j) += g.at2(na + i, j);
      }
    };
  }
  return o;
}

Var Graph::concat_cols(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_arg(va.rank() == 2 && vb.rank() == 2 && va.dim(0) == vb.dim(0),
            "concat_cols: height mismatch");
  const int64_t n = va.dim(0), da = va.dim(1), db = vb.dim(1);
  Tensor out({n, da + db});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < da; ++j) out.at2(i, j) = va.at2(i, j);
    for (int64_t j = 0; j < db; ++j) out.at2(i, da + j) = vb.at2(i, j);
  }
  const bool ng = wants(a) || wants(b);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, b, o, n, da, db] {
      const Tensor& g = grad(o);
      if (wants(a)) {
        Tensor& ga = grad_buf(a.id);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < da; ++j) ga.at2(i, j) += g.at2(i, j);
      }
      if (wants(b)) {
        Tensor& gb = grad_buf(b.id);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < db; ++j) gb.at2(i, j) += g.at2(i, da + j);
      }
    };
  }
  return o;
}

Var Graph::sum_all(Var a) {
  const Tensor& va = value(a);
  double s = 0.0;
  for (int64_t i = 0; i < va.size(); ++i) s += va[i];
  const bool ng = wants(a);
  Var o = make(Tensor::from_data({1}, {s}), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, o] {
      const double g = grad(o)[0];
      Tensor& ga = grad_buf(a.id);
      for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
    };
  }
  return o;
}

Var Graph::mean_all(Var a) {
  const int64_t n = value(a).size();
  check_arg(n > 0, "mean_all over empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var Graph::mean_rows(Var a) {
  const Tensor& va = value(a);
  check_arg(va.rank() == 2 && va.dim(0) > 0, "mean_rows expects a non-empty matrix");
  const int64_t n = va.dim(0), d = va.dim(1);
  Tensor out({1, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out.at2(0, j) += va.at2(i, j);
  for (int64_t j = 0; j < d; ++j) out.at2(0, j) /= static_cast<double>(n);
  const bool ng = wants(a);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, a, o, n, d] {
      const Tensor& g = grad(o);
      Tensor& ga = grad_buf(a.id);
      const double inv = 1.0 / static_cast<double>(n);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) ga.at2(i, j) += g.at2(0, j) * inv;
    };
  }
  return o;
}

Var Graph::embed_rows(Var table, const std::vector<int>& ids) {
  const Tensor& vt = value(table);
  check_arg(vt.rank() == 2, "embed_rows expects a matrix table");
  const int64_t v = vt.dim(0), d = vt.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  Tensor out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    check_arg(ids[static_cast<size_t>(i)] >= 0 && ids[static_cast<size_t>(i)] < v,
              "embed_rows: id out of range");
    for (int64_t j = 0; j < d; ++j)
      out.at2(i, j) = vt.at2(ids[static_cast<size_t>(i)], j);
  }
  const bool ng = wants(table);
  Var o = make(std::move(out), ng, nullptr);
  if (ng) {
    nodes_.back().back = [this, table, o, ids, n, d] {
      const Tensor& g = grad(o);
      Tensor& gt = grad_buf(table.id);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
          gt.at2(ids[static_cast<size_t>(i)], j) += g.at2(i, j);
    };
  }
  return o;
}

Var multihead_attention(Graph& g, Var x, Var wq, Var wk, Var wv, Var wo,
                        int n_heads, bool causal, bool use_rope) {
  const Tensor& vx = g.value(x);
  check_arg(vx.rank() == 2, "attention expects (seq, hidden)");
  const int64_t n = vx.dim(0), hidden = vx.dim(1);
  check_arg(hidden % n_heads == 0, "hidden not divisible by n_heads");
  const int64_t dh = hidden / n_heads;

  Var q = g.linear(x, wq);
  Var k = g.linear(x, wk);
  Var v = g.linear(x, wv);

  Var mask{};
  if (causal) {
    Tensor m({n, n});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = i + 1; j < n; ++j) m.at2(i, j) = -1e30;
    mask = g.input(std::move(m));
  }

  Var heads{};
  for (int h = 0; h < n_heads; ++h) {
    const int64_t c0 = h * dh, c1 = (h + 1) * dh;
    Var qh = g.slice_cols(q, c0, c1);
    Var kh = g.slice_cols(k, c0, c1);
    Var vh = g.slice_cols(v, c0, c1);
    if (use_rope) {
      qh = g.rope(qh);
      kh = g.rope(kh);
    }
    Var scores = g.scale(g.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (causal) scores = g.add(scores, mask);
    Var probs = g.softmax_rows(scores);
    Var oh = g.matmul(probs, vh);
    heads = heads.valid() ? g.concat_cols(heads, oh) : oh;
  }
  return g.linear(heads, wo);
}

}  // namespace urbanmind
