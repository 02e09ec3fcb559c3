#include "krcap/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include <memory>

#include "krcap/errors.hpp"

namespace krcap::ad {

namespace {
constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) {
  // log(1 + e^x) without overflow for large |x|.
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}
}  // namespace

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> pullback) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) {
    n.grad = Tensor(n.value.rows, n.value.cols);
    n.pullback = std::move(pullback);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, {}); }

Var Tape::leaf(Tensor value) { return push(std::move(value), true, {}); }

void Tape::backward(Var loss) {
  const Tensor& lv = nodes_[loss.id].value;
  if (lv.rows != 1 || lv.cols != 1) throw Error("backward requires a scalar loss");
  if (!nodes_[loss.id].requires_grad)
    throw Error("loss does not depend on any differentiable leaf");
  nodes_[loss.id].grad.a[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.pullback) n.pullback(*this);
  }
}

Var Tape::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) throw Error("add: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.size(); ++i) out.a[i] += bv.a[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, [a, b, self](Tape& t) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buf(b);
      for (size_t i = 0; i < g.size(); ++i) gb.a[i] += g.a[i];
    }
  });
}

Var Tape::sub(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) throw Error("sub: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.size(); ++i) out.a[i] -= bv.a[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, [a, b, self](Tape& t) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buf(b);
      for (size_t i = 0; i < g.size(); ++i) gb.a[i] -= g.a[i];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) throw Error("mul: shape mismatch");
  Tensor out = av;
  for (size_t i = 0; i < out.size(); ++i) out.a[i] *= bv.a[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, [a, b, self](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& av2 = t.value(a);
    const Tensor& bv2 = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i] * bv2.a[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buf(b);
      for (size_t i = 0; i < g.size(); ++i) gb.a[i] += g.a[i] * av2.a[i];
    }
  });
}

Var Tape::affine(Var x, double alpha, double beta) {
  Tensor out = value(x);
  for (double& v : out.a) v = alpha * v + beta;
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(x), [x, alpha, self](Tape& t) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_buf(x);
    for (size_t i = 0; i < g.size(); ++i) gx.a[i] += alpha * g.a[i];
  });
}

Var Tape::add_rowvec(Var m, Var row) {
  const Tensor& mv = value(m);
  const Tensor& rv = value(row);
  if (rv.rows != 1 || rv.cols != mv.cols) throw Error("add_rowvec: shape mismatch");
  Tensor out = mv;
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c) out(r, c) += rv(0, c);
  bool rg = requires_grad(m) || requires_grad(row);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, [m, row, self](Tape& t) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(m)) {
      Tensor& gm = t.grad_buf(m);
      for (size_t i = 0; i < g.size(); ++i) gm.a[i] += g.a[i];
    }
    if (t.requires_grad(row)) {
      Tensor& gr = t.grad_buf(row);
      for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) gr(0, c) += g(r, c);
    }
  });
}

Var Tape::add_const(Var m, const Tensor& c) {
  const Tensor& mv = value(m);
  if (!mv.same_shape(c)) throw Error("add_const: shape mismatch");
  Tensor out = mv;
  for (size_t i = 0; i < out.size(); ++i) out.a[i] += c.a[i];
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(m), [m, self](Tape& t) {
    const Tensor& g = t.grad(self);
    Tensor& gm = t.grad_buf(m);
    for (size_t i = 0; i < g.size(); ++i) gm.a[i] += g.a[i];
  });
}

Var Tape::slice_cols(Var m, int c0, int c1) {
  const Tensor& mv = value(m);
  if (c0 < 0 || c1 > mv.cols || c0 >= c1) throw Error("slice_cols: bad range");
  Tensor out(mv.rows, c1 - c0);
  for (int r = 0; r < mv.rows; ++r)
    for (int c = c0; c < c1; ++c) out(r, c - c0) = mv(r, c);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(m), [m, c0, self](Tape& t) {
    const Tensor& g = t.grad(self);
    Tensor& gm = t.grad_buf(m);
    for (int r = 0; r < g.rows; ++r)
      for (int c = 0; c < g.cols; ++c) gm(r, c0 + c) += g(r, c);
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_cols: empty");
  int rows = value(parts[0]).rows;
  int cols = 0;
  bool rg = false;
  for (Var p : parts) {
    if (value(p).rows != rows) throw Error("concat_cols: row mismatch");
    cols += value(p).cols;
    rg = rg || requires_grad(p);
  }
  Tensor out(rows, cols);
  int off = 0;
  for (Var p : parts) {
    const Tensor& pv = value(p);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < pv.cols; ++c) out(r, off + c) = pv(r, c);
    off += pv.cols;
  }
  Var self{static_cast<int>(nodes_.size())};
  std::vector<Var> ps = parts;
  return push(std::move(out), rg, [ps, self](Tape& t) {
    const Tensor& g = t.grad(self);
    int off2 = 0;
    for (Var p : ps) {
      const Tensor& pv = t.value(p);
      if (t.requires_grad(p)) {
        Tensor& gp = t.grad_buf(p);
        for (int r = 0; r < g.rows; ++r)
          for (int c = 0; c < pv.cols; ++c) gp(r, c) += g(r, off2 + c);
      }
      off2 += pv.cols;
    }
  });
}

Var Tape::gather_rows(Var table, std::vector<int> ids) {
  const Tensor& tv = value(table);
  Tensor out(static_cast<int>(ids.size()), tv.cols);
  for (size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || id >= tv.rows) throw Error("gather_rows: index out of range");
    for (int c = 0; c < tv.cols; ++c) out(static_cast<int>(i), c) = tv(id, c);
  }
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(table),
              [table, ids = std::move(ids), self](Tape& t) {
                const Tensor& g = t.grad(self);
                Tensor& gt = t.grad_buf(table);
                for (size_t i = 0; i < ids.size(); ++i)
                  for (int c = 0; c < g.cols; ++c)
                    gt(ids[i], c) += g(static_cast<int>(i), c);
              });
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.cols != bv.rows) throw Error("matmul: shape mismatch");
  Tensor out(av.rows, bv.cols);
  for (int r = 0; r < av.rows; ++r)
    for (int k = 0; k < av.cols; ++k) {
      double x = av(r, k);
      if (x == 0.0) continue;
      for (int c = 0; c < bv.cols; ++c) out(r, c) += x * bv(k, c);
    }
  bool rg = requires_grad(a) || requires_grad(b);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, [a, b, self](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& av2 = t.value(a);
    const Tensor& bv2 = t.value(b);
    if (t.requires_grad(a)) {
      // dA = dC * B^T
      Tensor& ga = t.grad_buf(a);
      for (int r = 0; r < av2.rows; ++r)
        for (int k = 0; k < av2.cols; ++k) {
          double s = 0.0;
          for (int c = 0; c < bv2.cols; ++c) s += g(r, c) * bv2(k, c);
          ga(r, k) += s;
        }
    }
    if (t.requires_grad(b)) {
      // dB = A^T * dC
      Tensor& gb = t.grad_buf(b);
      for (int k = 0; k < bv2.rows; ++k)
        for (int r = 0; r < av2.rows; ++r) {
          double x = av2(r, k);
          if (x == 0.0) continue;
          for (int c = 0; c < bv2.cols; ++c) gb(k, c) += x * g(r, c);
        }
    }
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.cols != bv.cols) throw Error("matmul_nt: shape mismatch");
  Tensor out(av.rows, bv.rows);
  for (int r = 0; r < av.rows; ++r)
    for (int c = 0; c < bv.rows; ++c) {
      double s = 0.0;
      for (int k = 0; k < av.cols; ++k) s += av(r, k) * bv(c, k);
      out(r, c) = s;
    }
  bool rg = requires_grad(a) || requires_grad(b);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, [a, b, self](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& av2 = t.value(a);
    const Tensor& bv2 = t.value(b);
    if (t.requires_grad(a)) {
      // dA = dC * B
      Tensor& ga = t.grad_buf(a);
      for (int r = 0; r < av2.rows; ++r)
        for (int c = 0; c < bv2.rows; ++c) {
          double gs = g(r, c);
          if (gs == 0.0) continue;
          for (int k = 0; k < av2.cols; ++k) ga(r, k) += gs * bv2(c, k);
        }
    }
    if (t.requires_grad(b)) {
      // dB = dC^T * A
      Tensor& gb = t.grad_buf(b);
      for (int c = 0; c < bv2.rows; ++c)
        for (int r = 0; r < av2.rows; ++r) {
          double gs = g(r, c);
          if (gs == 0.0) continue;
          for (int k = 0; k < av2.cols; ++k) gb(c, k) += gs * av2(r, k);
        }
    }
  });
}

Var Tape::gelu(Var x) {
  const Tensor& xv = value(x);
  Tensor out = xv;
  for (double& v : out.a) {
    double u = kGeluC * (v + kGeluK * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(x), [x, self](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& xv2 = t.value(x);
    Tensor& gx = t.grad_buf(x);
    for (size_t i = 0; i < g.size(); ++i) {
      double v = xv2.a[i];
      double u = kGeluC * (v + kGeluK * v * v * v);
      double th = std::tanh(u);
      double du = kGeluC * (1.0 + 3.0 * kGeluK * v * v);
      double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
      gx.a[i] += g.a[i] * d;
    }
  });
}

Var Tape::sigmoid(Var x) {
  Tensor out = value(x);
  for (double& v : out.a) v = sigmoid_scalar(v);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(x), [x, self](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buf(x);
    for (size_t i = 0; i < g.size(); ++i) gx.a[i] += g.a[i] * y.a[i] * (1.0 - y.a[i]);
  });
}

Var Tape::softplus(Var x) {
  Tensor out = value(x);
  for (double& v : out.a) v = softplus_scalar(v);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(x), [x, self](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& xv2 = t.value(x);
    Tensor& gx = t.grad_buf(x);
    for (size_t i = 0; i < g.size(); ++i)
      gx.a[i] += g.a[i] * sigmoid_scalar(xv2.a[i]);
  });
}

Var Tape::square(Var x) {
  Tensor out = value(x);
  for (double& v : out.a) v = v * v;
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(x), [x, self](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& xv2 = t.value(x);
    Tensor& gx = t.grad_buf(x);
    for (size_t i = 0; i < g.size(); ++i) gx.a[i] += g.a[i] * 2.0 * xv2.a[i];
  });
}

Var Tape::row_softmax(Var x) {
  const Tensor& xv = value(x);
  Tensor out(xv.rows, xv.cols);
  for (int r = 0; r < xv.rows; ++r) {
    double mx = -HUGE_VAL;
    for (int c = 0; c < xv.cols; ++c) mx = std::max(mx, xv(r, c));
    double sum = 0.0;
    for (int c = 0; c < xv.cols; ++c) {
      double e = std::exp(xv(r, c) - mx);
      out(r, c) = e;
      sum += e;
    }
    for (int c = 0; c < xv.cols; ++c) out(r, c) /= sum;
  }
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(x), [x, self](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& p = t.value(self);
    Tensor& gx = t.grad_buf(x);
    for (int r = 0; r < p.rows; ++r) {
      double dot = 0.0;
      for (int c = 0; c < p.cols; ++c) dot += g(r, c) * p(r, c);
      for (int c = 0; c < p.cols; ++c) gx(r, c) += p(r, c) * (g(r, c) - dot);
    }
  });
}

Var Tape::row_log_softmax(Var x) {
  const Tensor& xv = value(x);
  Tensor out(xv.rows, xv.cols);
  for (int r = 0; r < xv.rows; ++r) {
    double mx = -HUGE_VAL;
    for (int c = 0; c < xv.cols; ++c) mx = std::max(mx, xv(r, c));
    double sum = 0.0;
    for (int c = 0; c < xv.cols; ++c) sum += std::exp(xv(r, c) - mx);
    double lse = mx + std::log(sum);
    for (int c = 0; c < xv.cols; ++c) out(r, c) = xv(r, c) - lse;
  }
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(x), [x, self](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& ls = t.value(self);
    Tensor& gx = t.grad_buf(x);
    for (int r = 0; r < ls.rows; ++r) {
      double gsum = 0.0;
      for (int c = 0; c < ls.cols; ++c) gsum += g(r, c);
      for (int c = 0; c < ls.cols; ++c)
        gx(r, c) += g(r, c) - std::exp(ls(r, c)) * gsum;
    }
  });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = value(x);
  const Tensor& gv = value(gain);
  const Tensor& bv = value(bias);
  if (gv.rows != 1 || gv.cols != xv.cols || bv.rows != 1 || bv.cols != xv.cols)
    throw Error("layer_norm: shape mismatch");
  Tensor out(xv.rows, xv.cols);
  // Stash per-row mean and inverse stddev for the pullback.
  auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(xv.rows) * 2);
  for (int r = 0; r < xv.rows; ++r) {
    double mean = 0.0;
    for (int c = 0; c < xv.cols; ++c) mean += xv(r, c);
    mean /= xv.cols;
    double var = 0.0;
    for (int c = 0; c < xv.cols; ++c) {
      double d = xv(r, c) - mean;
      var += d * d;
    }
    var /= xv.cols;
    double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[2 * r] = mean;
    (*stats)[2 * r + 1] = inv;
    for (int c = 0; c < xv.cols; ++c)
      out(r, c) = (xv(r, c) - mean) * inv * gv(0, c) + bv(0, c);
  }
  bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), rg, [x, gain, bias, stats, self](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& xv2 = t.value(x);
    const Tensor& gv2 = t.value(gain);
    int cols = xv2.cols;
    for (int r = 0; r < xv2.rows; ++r) {
      double mean = (*stats)[2 * r];
      double inv = (*stats)[2 * r + 1];
      if (t.requires_grad(gain) || t.requires_grad(bias)) {
        for (int c = 0; c < cols; ++c) {
          double xhat = (xv2(r, c) - mean) * inv;
          if (t.requires_grad(gain)) t.grad_buf(gain)(0, c) += g(r, c) * xhat;
          if (t.requires_grad(bias)) t.grad_buf(bias)(0, c) += g(r, c);
        }
      }
      if (t.requires_grad(x)) {
        // d xhat = g * gain; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
        double s1 = 0.0, s2 = 0.0;
        for (int c = 0; c < cols; ++c) {
          double dxh = g(r, c) * gv2(0, c);
          double xhat = (xv2(r, c) - mean) * inv;
          s1 += dxh;
          s2 += dxh * xhat;
        }
        s1 /= cols;
        s2 /= cols;
        Tensor& gx = t.grad_buf(x);
        for (int c = 0; c < cols; ++c) {
          double dxh = g(r, c) * gv2(0, c);
          double xhat = (xv2(r, c) - mean) * inv;
          gx(r, c) += inv * (dxh - s1 - xhat * s2);
        }
      }
    }
  });
}

Var Tape::reduce_sum(Var x) {
  const Tensor& xv = value(x);
  double s = 0.0;
  for (double v : xv.a) s += v;
  Var self{static_cast<int>(nodes_.size())};
  return push(Tensor::scalar(s), requires_grad(x), [x, self](Tape& t) {
    double g = t.grad(self).a[0];
    Tensor& gx = t.grad_buf(x);
    for (double& v : gx.a) v += g;
  });
}

Var Tape::reduce_mean(Var x) {
  const Tensor& xv = value(x);
  double s = 0.0;
  for (double v : xv.a) s += v;
  double n = static_cast<double>(xv.size());
  Var self{static_cast<int>(nodes_.size())};
  return push(Tensor::scalar(s / n), requires_grad(x), [x, n, self](Tape& t) {
    double g = t.grad(self).a[0] / n;
    Tensor& gx = t.grad_buf(x);
    for (double& v : gx.a) v += g;
  });
}

Var Tape::reduce_max(Var x) {
  const Tensor& xv = value(x);
  size_t arg = 0;
  for (size_t i = 1; i < xv.size(); ++i)
    if (xv.a[i] > xv.a[arg]) arg = i;
  Var self{static_cast<int>(nodes_.size())};
  return push(Tensor::scalar(xv.a[arg]), requires_grad(x), [x, arg, self](Tape& t) {
    t.grad_buf(x).a[arg] += t.grad(self).a[0];
  });
}

Var Tape::select_column(Var m, int col) {
  const Tensor& mv = value(m);
  if (col < 0 || col >= mv.cols) throw Error("select_column: index out of range");
  Tensor out(mv.rows, 1);
  for (int r = 0; r < mv.rows; ++r) out(r, 0) = mv(r, col);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), requires_grad(m), [m, col, self](Tape& t) {
    const Tensor& g = t.grad(self);
    Tensor& gm = t.grad_buf(m);
    for (int r = 0; r < g.rows; ++r) gm(r, col) += g(r, 0);
  });
}

Var Tape::weighted_sum(Var x, const Tensor& w) {
  const Tensor& xv = value(x);
  if (!xv.same_shape(w)) throw Error("weighted_sum: shape mismatch");
  double s = 0.0;
  for (size_t i = 0; i < xv.size(); ++i) s += xv.a[i] * w.a[i];
  Var self{static_cast<int>(nodes_.size())};
  return push(Tensor::scalar(s), requires_grad(x), [x, w, self](Tape& t) {
    double g = t.grad(self).a[0];
    Tensor& gx = t.grad_buf(x);
    for (size_t i = 0; i < w.size(); ++i) gx.a[i] += g * w.a[i];
  });
}

}  // namespace krcap::ad
