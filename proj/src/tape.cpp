// SPDX-License-Identifier: Apache-2.0
#include "prophy/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prophy/linalg.hpp"

namespace prophy::ad {

using linalg::as_mat;

Val Tape::push(Tensor value, std::initializer_list<Val> ins, BackFn back, bool force_grad) {
  Node n;
  n.value = std::move(value);
  n.id = static_cast<std::int32_t>(nodes_.size());
  int i = 0;
  bool req = force_grad;
  for (Val v : ins) {
    require(i < 3, "tape: too many inputs");
    n.in[i++] = v.id;
    req = req || node(v).requires_grad;
  }
  n.requires_grad = req;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Val{nodes_.back().id};
}

Val Tape::input(Tensor value) { return push(std::move(value), {}, nullptr, false); }

Val Tape::param(Tensor value) { return push(std::move(value), {}, nullptr, true); }

Tensor* Tape::gbuf(std::int32_t id) {
  if (id < 0) return nullptr;
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return nullptr;
  auto& g = grads_[static_cast<std::size_t>(id)];
  if (g.empty()) g = Tensor(n.value.shape());
  return &g;
}

void Tape::accum(std::int32_t id, const Tensor& g) {
  Tensor* buf = gbuf(id);
  if (!buf) return;
  require_same_shape(*buf, g, "tape: gradient accumulate");
  for (std::int64_t i = 0; i < g.numel(); ++i) (*buf)[i] += g[i];
}

const Tensor& Tape::grad(Val v) {
  require(!grads_.empty(), "tape: backward() has not run");
  auto& g = grads_[static_cast<std::size_t>(node(v).id)];
  // Nodes that never received gradient report zeros of the right shape.
  if (g.empty()) g = Tensor(node(v).value.shape());
  return g;
}

void Tape::backward(Val root) {
  const Node& r = node(root);
  require(r.value.numel() == 1, "tape: backward root must be scalar");
  grads_.assign(nodes_.size(), Tensor());
  grads_[static_cast<std::size_t>(r.id)] = Tensor::scalar(1.0);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.back) continue;
    if (grads_[i].empty()) continue;
    n.back(*this, n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops.

Val Tape::add(Val a, Val b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same_shape(x, y, "tape: add");
  Tensor out = x;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += y[i];
  return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    t.accum(n.in[0], g);
    t.accum(n.in[1], g);
  });
}

Val Tape::sub(Val a, Val b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same_shape(x, y, "tape: sub");
  Tensor out = x;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= y[i];
  return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    t.accum(n.in[0], g);
    if (Tensor* gb = t.gbuf(n.in[1]))
      for (std::int64_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
  });
}

Val Tape::mul(Val a, Val b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same_shape(x, y, "tape: mul");
  Tensor out = x;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= y[i];
  return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    const Tensor& x = t.nodes_[static_cast<std::size_t>(n.in[0])].value;
    const Tensor& y = t.nodes_[static_cast<std::size_t>(n.in[1])].value;
    if (Tensor* ga = t.gbuf(n.in[0]))
      for (std::int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * y[i];
    if (Tensor* gb = t.gbuf(n.in[1]))
      for (std::int64_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * x[i];
  });
}

Val Tape::scale(Val a, double c) {
  Tensor out = value(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return push(std::move(out), {a}, [c](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    if (Tensor* ga = t.gbuf(n.in[0]))
      for (std::int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += c * g[i];
  });
}

Val Tape::add_const(Val a, Tensor c) {
  const Tensor& x = value(a);
  require_same_shape(x, c, "tape: add_const");
  Tensor out = x;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += c[i];
  return push(std::move(out), {a}, [](Tape& t, const Node& n) {
    t.accum(n.in[0], t.grads_[static_cast<std::size_t>(n.id)]);
  });
}

Val Tape::mul_const(Val a, Tensor c) {
  const Tensor& x = value(a);
  require_same_shape(x, c, "tape: mul_const");
  Tensor out = x;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
  Val v = push(std::move(out), {a}, nullptr);
  Node& n = nodes_.back();
  n.aux.push_back(std::move(c));
  n.back = [](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    const Tensor& c = n.aux[0];
    if (Tensor* ga = t.gbuf(n.in[0]))
      for (std::int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * c[i];
  };
  return v;
}

Val Tape::reshape(Val a, Shape shape) {
  Tensor out = value(a).reshaped(std::move(shape));
  return push(std::move(out), {a}, [](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    if (Tensor* ga = t.gbuf(n.in[0]))
      for (std::int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.

Val Tape::matmul(Val a, Val b) {
  Tensor out = linalg::matmul(value(a), value(b));
  return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    const Tensor& x = t.nodes_[static_cast<std::size_t>(n.in[0])].value;
    const Tensor& y = t.nodes_[static_cast<std::size_t>(n.in[1])].value;
    if (Tensor* ga = t.gbuf(n.in[0]))
      as_mat(*ga).noalias() += as_mat(g) * as_mat(y).transpose();
    if (Tensor* gb = t.gbuf(n.in[1]))
      as_mat(*gb).noalias() += as_mat(x).transpose() * as_mat(g);
  });
}

Val Tape::linear(Val x, Val w, Val b) {
  static const Tensor kNoBias;
  Tensor out = linalg::affine(value(x), value(w), b.valid() ? value(b) : kNoBias);
  BackFn back = [](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    const Tensor& x = t.nodes_[static_cast<std::size_t>(n.in[0])].value;
    const Tensor& w = t.nodes_[static_cast<std::size_t>(n.in[1])].value;
    if (Tensor* gx = t.gbuf(n.in[0])) as_mat(*gx).noalias() += as_mat(g) * as_mat(w);
    if (Tensor* gw = t.gbuf(n.in[1])) as_mat(*gw).noalias() += as_mat(g).transpose() * as_mat(x);
    if (n.in[2] >= 0)
      if (Tensor* gb = t.gbuf(n.in[2]))
        Eigen::Map<Eigen::RowVectorXd>(gb->data(), gb->numel()) += as_mat(g).colwise().sum();
  };
  if (b.valid()) return push(std::move(out), {x, w, b}, std::move(back));
  return push(std::move(out), {x, w}, std::move(back));
}

Val Tape::add_row_broadcast(Val x, Val rows, std::int64_t tokens_per_row) {
  const Tensor& xv = value(x);
  const Tensor& rv = value(rows);
  require(xv.ndim() == 2 && rv.ndim() == 2, "tape: add_row_broadcast expects 2-d values");
  require(xv.dim(1) == rv.dim(1), "tape: add_row_broadcast channel mismatch");
  require(xv.dim(0) == rv.dim(0) * tokens_per_row, "tape: add_row_broadcast row count mismatch");
  Tensor out = xv;
  const std::int64_t c = xv.dim(1);
  for (std::int64_t i = 0; i < xv.dim(0); ++i) {
    const std::int64_t b = i / tokens_per_row;
    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) += rv.at(b, j);
  }
  return push(std::move(out), {x, rows}, [tokens_per_row](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    t.accum(n.in[0], g);
    if (Tensor* gr = t.gbuf(n.in[1])) {
      const std::int64_t c = gr->dim(1);
      for (std::int64_t i = 0; i < g.dim(0); ++i) {
        const std::int64_t b = i / tokens_per_row;
        for (std::int64_t j = 0; j < c; ++j) gr->at(b, j) += g.at(i, j);
      }
    }
  });
}

Val Tape::rows_with_null(Tensor base, Val null_row, std::vector<std::uint8_t> use_null) {
  const Tensor& nr = value(null_row);
  require(base.ndim() == 2, "tape: rows_with_null expects 2-d base");
  require(nr.numel() == base.dim(1), "tape: rows_with_null width mismatch");
  require(static_cast<std::int64_t>(use_null.size()) == base.dim(0),
          "tape: rows_with_null flag count mismatch");
  Tensor out = base;
  for (std::int64_t i = 0; i < out.dim(0); ++i)
    if (use_null[static_cast<std::size_t>(i)])
      for (std::int64_t j = 0; j < out.dim(1); ++j) out.at(i, j) = nr[j];
  Val v = push(std::move(out), {null_row}, nullptr);
  Node& n = nodes_.back();
  n.iaux.reserve(use_null.size());
  for (auto f : use_null) n.iaux.push_back(f ? 1 : 0);
  n.back = [](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    if (Tensor* gn = t.gbuf(n.in[0]))
      for (std::int64_t i = 0; i < g.dim(0); ++i)
        if (n.iaux[static_cast<std::size_t>(i)])
          for (std::int64_t j = 0; j < g.dim(1); ++j) (*gn)[j] += g.at(i, j);
  };
  return v;
}

// ---------------------------------------------------------------------------
// Nonlinearities.

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Val Tape::gelu(Val a) {
  const Tensor& x = value(a);
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
  return push(std::move(out), {a}, [](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    const Tensor& x = t.nodes_[static_cast<std::size_t>(n.in[0])].value;
    if (Tensor* ga = t.gbuf(n.in[0]))
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        const double phi = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
        (*ga)[i] += g[i] * (phi + x[i] * pdf);
      }
  });
}

Val Tape::softmax_rows(Val a) {
  const Tensor& x = value(a);
  require(x.ndim() == 2, "tape: softmax_rows expects a 2-d value");
  Tensor out(x.shape());
  const std::int64_t rows = x.dim(0), cols = x.dim(1);
  for (std::int64_t i = 0; i < rows; ++i) {
    double mx = -INFINITY;
    for (std::int64_t j = 0; j < cols; ++j) mx = std::max(mx, x.at(i, j));
    require(std::isfinite(mx), "tape: softmax_rows got a non-finite row");
    double z = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) z += (out.at(i, j) = std::exp(x.at(i, j) - mx));
    for (std::int64_t j = 0; j < cols; ++j) out.at(i, j) /= z;
  }
  return push(std::move(out), {a}, [](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    const Tensor& y = n.value;
    if (Tensor* ga = t.gbuf(n.in[0])) {
      for (std::int64_t i = 0; i < y.dim(0); ++i) {
        double dot = 0.0;
        for (std::int64_t j = 0; j < y.dim(1); ++j) dot += g.at(i, j) * y.at(i, j);
        for (std::int64_t j = 0; j < y.dim(1); ++j)
          ga->at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
      }
    }
  });
}

Val Tape::layer_norm(Val x, Val gamma, Val beta, double eps) {
  const Tensor& xv = value(x);
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  require(xv.ndim() == 2, "tape: layer_norm expects a 2-d value");
  const std::int64_t rows = xv.dim(0), cols = xv.dim(1);
  require(gv.numel() == cols && bv.numel() == cols, "tape: layer_norm scale/shift size mismatch");
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  Tensor inv_std({rows});
  for (std::int64_t i = 0; i < rows; ++i) {
    double mu = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) mu += xv.at(i, j);
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
      const double d = xv.at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::int64_t j = 0; j < cols; ++j) {
      xhat.at(i, j) = (xv.at(i, j) - mu) * is;
      out.at(i, j) = gv[j] * xhat.at(i, j) + bv[j];
    }
  }
  Val v = push(std::move(out), {x, gamma, beta}, nullptr);
  Node& n = nodes_.back();
  n.aux.push_back(std::move(xhat));
  n.aux.push_back(std::move(inv_std));
  n.back = [](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    const Tensor& gv = t.nodes_[static_cast<std::size_t>(n.in[1])].value;
    const Tensor& xhat = n.aux[0];
    const Tensor& inv_std = n.aux[1];
    const std::int64_t rows = g.dim(0), cols = g.dim(1);
    Tensor* gx = t.gbuf(n.in[0]);
    Tensor* gg = t.gbuf(n.in[1]);
    Tensor* gb = t.gbuf(n.in[2]);
    for (std::int64_t i = 0; i < rows; ++i) {
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::int64_t j = 0; j < cols; ++j) {
        const double dxhat = g.at(i, j) * gv[j];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat.at(i, j);
      }
      mean_dxhat /= static_cast<double>(cols);
      mean_dxhat_xhat /= static_cast<double>(cols);
      for (std::int64_t j = 0; j < cols; ++j) {
        if (gx) {
          const double dxhat = g.at(i, j) * gv[j];
          gx->at(i, j) += inv_std[i] * (dxhat - mean_dxhat - xhat.at(i, j) * mean_dxhat_xhat);
        }
        if (gg) (*gg)[j] += g.at(i, j) * xhat.at(i, j);
        if (gb) (*gb)[j] += g.at(i, j);
      }
    }
  };
  return v;
}

Val Tape::attention(Val q, Val k, Val v, std::int64_t batch, std::int64_t heads) {
  const Tensor& qv = value(q);
  const Tensor& kv = value(k);
  const Tensor& vv = value(v);
  require_same_shape(qv, kv, "tape: attention q/k");
  require_same_shape(qv, vv, "tape: attention q/v");
  require(qv.ndim() == 2, "tape: attention expects 2-d values");
  const std::int64_t t_total = qv.dim(0), c = qv.dim(1);
  require(batch > 0 && t_total % batch == 0, "tape: attention batch does not divide rows");
  require(heads > 0 && c % heads == 0, "tape: attention heads do not divide channels");
  const std::int64_t n = t_total / batch, dh = c / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out(qv.shape());
  Tensor attn({batch * heads, n, n});
  auto qm = as_mat(qv);
  auto km = as_mat(kv);
  auto vm = as_mat(vv);
  auto om = as_mat(out);
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      auto qh = qm.block(b * n, h * dh, n, dh);
      auto kh = km.block(b * n, h * dh, n, dh);
      auto vh = vm.block(b * n, h * dh, n, dh);
      linalg::Map am(attn.data() + (b * heads + h) * n * n, n, n);
      am.noalias() = att_scale * (qh * kh.transpose());
      for (std::int64_t i = 0; i < n; ++i) {
        double mx = am.row(i).maxCoeff();
        require(std::isfinite(mx), "tape: attention scores non-finite");
        am.row(i) = (am.row(i).array() - mx).exp();
        am.row(i) /= am.row(i).sum();
      }
      om.block(b * n, h * dh, n, dh).noalias() = am * vh;
    }
  }
  Val outv = push(std::move(out), {q, k, v}, nullptr);
  Node& node_ref = nodes_.back();
  node_ref.aux.push_back(std::move(attn));
  node_ref.back = [batch, heads, att_scale](Tape& t, const Node& nd) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(nd.id)];
    const Tensor& qv = t.nodes_[static_cast<std::size_t>(nd.in[0])].value;
    const Tensor& kv = t.nodes_[static_cast<std::size_t>(nd.in[1])].value;
    const Tensor& vv = t.nodes_[static_cast<std::size_t>(nd.in[2])].value;
    const Tensor& attn = nd.aux[0];
    const std::int64_t t_total = qv.dim(0), c = qv.dim(1);
    const std::int64_t n = t_total / batch, dh = c / heads;
    Tensor* gq = t.gbuf(nd.in[0]);
    Tensor* gk = t.gbuf(nd.in[1]);
    Tensor* gv = t.gbuf(nd.in[2]);
    auto gm = as_mat(g);
    auto qm = as_mat(qv);
    auto km = as_mat(kv);
    auto vm = as_mat(vv);
    linalg::EMat da(n, n), ds(n, n);
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t h = 0; h < heads; ++h) {
        linalg::CMap am(attn.data() + (b * heads + h) * n * n, n, n);
        auto go = gm.block(b * n, h * dh, n, dh);
        auto qh = qm.block(b * n, h * dh, n, dh);
        auto kh = km.block(b * n, h * dh, n, dh);
        auto vh = vm.block(b * n, h * dh, n, dh);
        da.noalias() = go * vh.transpose();
        for (std::int64_t i = 0; i < n; ++i) {
          const double dot = da.row(i).dot(am.row(i));
          ds.row(i) = am.row(i).array() * (da.row(i).array() - dot);
        }
        if (gv) as_mat(*gv).block(b * n, h * dh, n, dh).noalias() += am.transpose() * go;
        if (gq) as_mat(*gq).block(b * n, h * dh, n, dh).noalias() += att_scale * (ds * kh);
        if (gk) as_mat(*gk).block(b * n, h * dh, n, dh).noalias() += att_scale * (ds.transpose() * qh);
      }
    }
  };
  return outv;
}

// ---------------------------------------------------------------------------
// Reductions.

Val Tape::sum(Val a) {
  const Tensor& x = value(a);
  double s = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) s += x[i];
  return push(Tensor::scalar(s), {a}, [](Tape& t, const Node& n) {
    const double g = t.grads_[static_cast<std::size_t>(n.id)][0];
    if (Tensor* ga = t.gbuf(n.in[0]))
      for (std::int64_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g;
  });
}

Val Tape::mean(Val a) {
  const Tensor& x = value(a);
  require(x.numel() > 0, "tape: mean of empty value");
  double s = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) s += x[i];
  const double inv = 1.0 / static_cast<double>(x.numel());
  return push(Tensor::scalar(s * inv), {a}, [inv](Tape& t, const Node& n) {
    const double g = t.grads_[static_cast<std::size_t>(n.id)][0] * inv;
    if (Tensor* ga = t.gbuf(n.in[0]))
      for (std::int64_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g;
  });
}

Val Tape::col_mean(Val a) {
  const Tensor& x = value(a);
  require(x.ndim() == 2, "tape: col_mean expects a 2-d value");
  const std::int64_t rows = x.dim(0), cols = x.dim(1);
  require(rows > 0, "tape: col_mean of empty value");
  Tensor out({cols});
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) out[j] += x.at(i, j);
  const double inv = 1.0 / static_cast<double>(rows);
  for (std::int64_t j = 0; j < cols; ++j) out[j] *= inv;
  return push(std::move(out), {a}, [inv](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    if (Tensor* ga = t.gbuf(n.in[0]))
      for (std::int64_t i = 0; i < ga->dim(0); ++i)
        for (std::int64_t j = 0; j < ga->dim(1); ++j) ga->at(i, j) += g[j] * inv;
  });
}

Val Tape::dot_const(Val a, Tensor w) {
  const Tensor& x = value(a);
  require_same_shape(x, w, "tape: dot_const");
  double s = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) s += x[i] * w[i];
  Val v = push(Tensor::scalar(s), {a}, nullptr);
  Node& n = nodes_.back();
  n.aux.push_back(std::move(w));
  n.back = [](Tape& t, const Node& n) {
    const double g = t.grads_[static_cast<std::size_t>(n.id)][0];
    const Tensor& w = n.aux[0];
    if (Tensor* ga = t.gbuf(n.in[0]))
      for (std::int64_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g * w[i];
  };
  return v;
}

// ---------------------------------------------------------------------------
// Expert mixture.

Tape::MoeOut Tape::moe_apply(Val x, Val probs, Val w, Val b, int k, bool renormalize) {
  const Tensor& xv = value(x);
  const Tensor& pv = value(probs);
  const Tensor& wv = value(w);
  const Tensor& bv = value(b);
  require(xv.ndim() == 2 && pv.ndim() == 2, "tape: moe_apply expects 2-d x and probs");
  const std::int64_t tt = xv.dim(0), c = xv.dim(1), e = pv.dim(1);
  require(pv.dim(0) == tt, "tape: moe_apply token count mismatch");
  require(wv.ndim() == 3 && wv.dim(0) == e && wv.dim(1) == c && wv.dim(2) == c,
          "tape: moe_apply expert weights must be [e, c, c]");
  require(bv.ndim() == 2 && bv.dim(0) == e && bv.dim(1) == c,
          "tape: moe_apply expert biases must be [e, c]");
  require(k >= 1 && k <= e && k <= 64, "tape: moe_apply k out of range");

  std::vector<std::int32_t> idx(static_cast<std::size_t>(tt * k));
  Tensor selw({tt, static_cast<std::int64_t>(k)});
  Tensor selsum({tt});
  std::vector<std::int32_t> order(static_cast<std::size_t>(e));
  for (std::int64_t i = 0; i < tt; ++i) {
    std::iota(order.begin(), order.end(), 0);
    const double* row = pv.data() + i * e;
    std::stable_sort(order.begin(), order.end(),
                     [row](std::int32_t a, std::int32_t b) { return row[a] > row[b]; });
    double s = 0.0;
    for (int a = 0; a < k; ++a) {
      idx[static_cast<std::size_t>(i * k + a)] = order[static_cast<std::size_t>(a)];
      s += row[order[static_cast<std::size_t>(a)]];
    }
    require(!renormalize || s > 0.0, "tape: moe_apply selected probabilities sum to zero");
    selsum[i] = s;
    for (int a = 0; a < k; ++a) {
      const double p = row[idx[static_cast<std::size_t>(i * k + a)]];
      selw.at(i, a) = renormalize ? p / s : p;
    }
  }

  // Group tokens by expert so each expert runs one matmul.
  std::vector<std::vector<std::int64_t>> slots(static_cast<std::size_t>(e));
  for (std::int64_t i = 0; i < tt; ++i)
    for (int a = 0; a < k; ++a)
      slots[static_cast<std::size_t>(idx[static_cast<std::size_t>(i * k + a)])].push_back(i * k + a);

  Tensor out({tt, c});
  Tensor expert_out({tt * k, c});
  auto xm = as_mat(xv);
  auto outm = as_mat(out);
  auto em = as_mat(expert_out);
  for (std::int64_t ex = 0; ex < e; ++ex) {
    const auto& list = slots[static_cast<std::size_t>(ex)];
    if (list.empty()) continue;
    const std::int64_t ne = static_cast<std::int64_t>(list.size());
    linalg::EMat xe(ne, c), ye(ne, c);
    for (std::int64_t r = 0; r < ne; ++r) xe.row(r) = xm.row(list[static_cast<std::size_t>(r)] / k);
    linalg::CMap we(wv.data() + ex * c * c, c, c);
    ye.noalias() = xe * we.transpose();
    ye.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data() + ex * c, c);
    for (std::int64_t r = 0; r < ne; ++r) {
      const std::int64_t slot = list[static_cast<std::size_t>(r)];
      em.row(slot) = ye.row(r);
      outm.row(slot / k) += selw[slot] * ye.row(r);
    }
  }

  Val v = push(std::move(out), {x, probs, w}, nullptr);
  // Nodes carry at most three inputs; the bias id rides in the closure.
  Node& n = nodes_.back();
  n.iaux = idx;
  n.aux.push_back(std::move(expert_out));
  n.aux.push_back(std::move(selw));
  n.aux.push_back(std::move(selsum));
  const std::int32_t bias_id = b.id;
  n.requires_grad = n.requires_grad || node(b).requires_grad;
  n.back = [k, renormalize, bias_id](Tape& t, const Node& n) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(n.id)];
    const Tensor& xv = t.nodes_[static_cast<std::size_t>(n.in[0])].value;
    const Tensor& wv = t.nodes_[static_cast<std::size_t>(n.in[2])].value;
    const Tensor& expert_out = n.aux[0];
    const Tensor& selw = n.aux[1];
    const Tensor& selsum = n.aux[2];
    const std::int64_t tt = xv.dim(0), c = xv.dim(1), e = wv.dim(0);
    Tensor* gx = t.gbuf(n.in[0]);
    Tensor* gp = t.gbuf(n.in[1]);
    Tensor* gw = t.gbuf(n.in[2]);
    Tensor* gb = t.gbuf(bias_id);
    auto gm = as_mat(g);
    auto xm = as_mat(xv);
    auto eom = as_mat(expert_out);

    if (gp) {
      for (std::int64_t i = 0; i < tt; ++i) {
        double gsel[64];
        double wdot = 0.0;
        for (int a = 0; a < k; ++a) {
          gsel[a] = gm.row(i).dot(eom.row(i * k + a));
          wdot += gsel[a] * selw.at(i, a);
        }
        for (int a = 0; a < k; ++a) {
          const std::int32_t ex = n.iaux[static_cast<std::size_t>(i * k + a)];
          const double d = renormalize ? (gsel[a] - wdot) / selsum[i] : gsel[a];
          gp->at(i, ex) += d;
        }
      }
    }

    if (gx || gw || gb) {
      std::vector<std::vector<std::int64_t>> slots(static_cast<std::size_t>(e));
      for (std::int64_t i = 0; i < tt; ++i)
        for (int a = 0; a < k; ++a)
          slots[static_cast<std::size_t>(n.iaux[static_cast<std::size_t>(i * k + a)])].push_back(
              i * k + a);
      for (std::int64_t ex = 0; ex < e; ++ex) {
        const auto& list = slots[static_cast<std::size_t>(ex)];
        if (list.empty()) continue;
        const std::int64_t ne = static_cast<std::int64_t>(list.size());
        linalg::EMat dye(ne, c), xe(ne, c);
        for (std::int64_t r = 0; r < ne; ++r) {
          const std::int64_t slot = list[static_cast<std::size_t>(r)];
          dye.row(r) = selw[slot] * gm.row(slot / k);
          xe.row(r) = xm.row(slot / k);
        }
        linalg::CMap we(wv.data() + ex * c * c, c, c);
        if (gw) {
          linalg::Map gwe(gw->data() + ex * c * c, c, c);
          gwe.noalias() += dye.transpose() * xe;
        }
        if (gb)
          Eigen::Map<Eigen::RowVectorXd>(gb->data() + ex * c, c) += dye.colwise().sum();
        if (gx) {
          linalg::EMat dxe = dye * we;
          auto gxm = as_mat(*gx);
          for (std::int64_t r = 0; r < ne; ++r)
            gxm.row(list[static_cast<std::size_t>(r)] / k) += dxe.row(r);
        }
      }
    }
  };
  return MoeOut{v, std::move(idx)};
}

// ---------------------------------------------------------------------------
// Coarse alignment loss.

Val Tape::coarse_cosine(Val v, Tensor q, double eps) {
  const Tensor& x = value(v);
  require(x.ndim() == 2, "tape: coarse_cosine expects 2-d value");
  const std::int64_t bsz = x.dim(0), d = x.dim(1);
  require(q.ndim() == 2 && q.dim(0) == bsz && q.dim(1) == bsz,
          "tape: coarse_cosine target must be [b, b]");
  require(bsz >= 2, "tape: coarse_cosine needs at least two rows");

  Tensor norms({bsz});
  for (std::int64_t i = 0; i < bsz; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) s += x.at(i, j) * x.at(i, j);
    norms[i] = std::sqrt(s);
  }
  Tensor cosm({bsz, bsz});
  for (std::int64_t i = 0; i < bsz; ++i) {
    cosm.at(i, i) = 1.0;
    for (std::int64_t j = i + 1; j < bsz; ++j) {
      double cij = 0.0;
      if (norms[i] >= eps && norms[j] >= eps) {
        double dotv = 0.0;
        for (std::int64_t l = 0; l < d; ++l) dotv += x.at(i, l) * x.at(j, l);
        cij = dotv / (norms[i] * norms[j]);
      }
      cosm.at(i, j) = cij;
      cosm.at(j, i) = cij;
    }
  }
  double loss = 0.0;
  for (std::int64_t i = 0; i < bsz; ++i)
    for (std::int64_t j = i + 1; j < bsz; ++j) {
      const double r = cosm.at(i, j) - q.at(i, j);
      loss += r * r;
    }

  Val out = push(Tensor::scalar(loss), {v}, nullptr);
  Node& n = nodes_.back();
  n.aux.push_back(std::move(q));
  n.aux.push_back(std::move(norms));
  n.aux.push_back(std::move(cosm));
  n.back = [eps](Tape& t, const Node& n) {
    const double g = t.grads_[static_cast<std::size_t>(n.id)][0];
    const Tensor& x = t.nodes_[static_cast<std::size_t>(n.in[0])].value;
    const Tensor& q = n.aux[0];
    const Tensor& norms = n.aux[1];
    const Tensor& cosm = n.aux[2];
    Tensor* gx = t.gbuf(n.in[0]);
    if (!gx) return;
    const std::int64_t bsz = x.dim(0), d = x.dim(1);
    for (std::int64_t i = 0; i < bsz; ++i) {
      for (std::int64_t j = i + 1; j < bsz; ++j) {
        if (norms[i] < eps || norms[j] < eps) continue;
        const double r = 2.0 * g * (cosm.at(i, j) - q.at(i, j));
        const double inv_ij = 1.0 / (norms[i] * norms[j]);
        const double ci = cosm.at(i, j) / (norms[i] * norms[i]);
        const double cj = cosm.at(i, j) / (norms[j] * norms[j]);
        for (std::int64_t l = 0; l < d; ++l) {
          gx->at(i, l) += r * (x.at(j, l) * inv_ij - ci * x.at(i, l));
          gx->at(j, l) += r * (x.at(i, l) * inv_ij - cj * x.at(j, l));
        }
      }
    }
  };
  return out;
}

}  // namespace prophy::ad
