#include "mtl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace mtl {

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) n *= static_cast<std::size_t>(e);
  return n;
}

void check_rank12(const Shape& s, const char* op) {
  if (s.empty() || s.size() > 2)
    throw ShapeError(std::string(op) + ": rank must be 1 or 2, got shape " +
                     shape_str(s));
  for (int e : s)
    if (e <= 0)
      throw ShapeError(std::string(op) + ": non-positive extent in " +
                       shape_str(s));
}

NodePtr make_node(Shape shape, const char* op) {
  auto n = std::make_shared<TensorNode>();
  check_rank12(shape, op);
  n->shape = std::move(shape);
  n->value.assign(shape_numel(n->shape), 0.0);
  n->op = op;
  return n;
}

void link(const NodePtr& out, std::vector<NodePtr> inputs,
          std::function<void(TensorNode&)> bw) {
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in->requires_grad;
  if (!needs) return;
  out->requires_grad = true;
  out->inputs = std::move(inputs);
  out->backward = std::move(bw);
}

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

int nrows(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
int ncols(const Shape& s) { return s.size() == 2 ? s[1] : s[0]; }

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = make_node(std::move(shape), "leaf");
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.n_->value.begin(), t.n_->value.end(), v);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = make_node(std::move(shape), "leaf");
  if (data.size() != n->numel())
    throw ShapeError("from: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(n->shape));
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1)
    throw ValueError("item: tensor has " + std::to_string(numel()) +
                     " elements, expected 1");
  return n_->value[0];
}

double Tensor::at(int r, int c) const {
  return n_->value[static_cast<std::size_t>(r) *
                       static_cast<std::size_t>(ncols(n_->shape)) +
                   static_cast<std::size_t>(c)];
}

void Tensor::set_grad(const std::vector<double>& g) {
  if (g.size() != numel())
    throw ShapeError("set_grad: length " + std::to_string(g.size()) +
                     " does not match tensor " + shape_str(shape()));
  n_->grad = g;
}

Tensor Tensor::detach() const {
  return Tensor::from(n_->shape, n_->value, false);
}

Tensor Tensor::clone() const {
  return Tensor::from(n_->shape, n_->value, n_->requires_grad);
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "add");
  auto out = make_node(a.shape(), "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
  auto an = a.node(), bn = b.node();
  link(out, {an, bn}, [an, bn](TensorNode& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) bn->accumulate(self.grad);
  });
  return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "sub");
  auto out = make_node(a.shape(), "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] - bv[i];
  auto an = a.node(), bn = b.node();
  link(out, {an, bn}, [an, bn](TensorNode& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] -= self.grad[i];
    }
  });
  return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "mul");
  auto out = make_node(a.shape(), "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  link(out, {an, bn}, [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
  return Tensor(out);
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1 || v.dim(0) != m.dim(1))
    throw ShapeError("add_rowvec: incompatible shapes " + shape_str(m.shape()) +
                     " and " + shape_str(v.shape()));
  const int rows = m.dim(0), cols = m.dim(1);
  auto out = make_node(m.shape(), "add_rowvec");
  const auto& mv = m.values();
  const auto& vv = v.values();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out->value[static_cast<std::size_t>(r) * cols + c] =
          mv[static_cast<std::size_t>(r) * cols + c] + vv[static_cast<std::size_t>(c)];
  auto mn = m.node(), vn = v.node();
  link(out, {mn, vn}, [mn, vn, rows, cols](TensorNode& self) {
    if (mn->requires_grad) mn->accumulate(self.grad);
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (int c = 0; c < cols; ++c) {
        double g = 0.0;
        for (int r = 0; r < rows; ++r)
          g += self.grad[static_cast<std::size_t>(r) * cols + c];
        vn->grad[static_cast<std::size_t>(c)] += g;
      }
    }
  });
  return Tensor(out);
}

Tensor scale(const Tensor& a, double s) {
  auto out = make_node(a.shape(), "scale");
  const auto& av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * s;
  auto an = a.node();
  link(out, {an}, [an, s](TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * s;
  });
  return Tensor(out);
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  auto out = make_node(a.shape(), "exp");
  const auto& av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = std::exp(av[i]);
  auto an = a.node();
  auto on = out;
  link(out, {an}, [an, on](TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * on->value[i];
  });
  return Tensor(out);
}

Tensor relu(const Tensor& a) {
  auto out = make_node(a.shape(), "relu");
  const auto& av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i)
    out->value[i] = av[i] > 0.0 ? av[i] : 0.0;
  auto an = a.node();
  link(out, {an}, [an](TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (an->value[i] > 0.0) an->grad[i] += self.grad[i];
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_node({m, n}, "matmul");
  const auto& av = a.values();
  const auto& bv = b.values();
  // i-p-j order: accumulation over p is ascending for every output element
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double aip = av[static_cast<std::size_t>(i) * k + p];
      const double* brow = &bv[static_cast<std::size_t>(p) * n];
      double* crow = &out->value[static_cast<std::size_t>(i) * n];
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  auto an = a.node(), bn = b.node();
  link(out, {an, bn}, [an, bn, m, k, n](TensorNode& self) {
    if (an->requires_grad) {
      // dA = dC * B^T
      an->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double g = 0.0;
          const double* crow = &self.grad[static_cast<std::size_t>(i) * n];
          const double* brow = &bn->value[static_cast<std::size_t>(p) * n];
          for (int j = 0; j < n; ++j) g += crow[j] * brow[j];
          an->grad[static_cast<std::size_t>(i) * k + p] += g;
        }
    }
    if (bn->requires_grad) {
      // dB = A^T * dC
      bn->ensure_grad();
      for (int p = 0; p < k; ++p)
        for (int i = 0; i < m; ++i) {
          const double aip = an->value[static_cast<std::size_t>(i) * k + p];
          const double* crow = &self.grad[static_cast<std::size_t>(i) * n];
          double* brow = &bn->grad[static_cast<std::size_t>(p) * n];
          for (int j = 0; j < n; ++j) brow[j] += aip * crow[j];
        }
    }
  });
  return Tensor(out);
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2)
    throw ShapeError("transpose: rank-2 tensor required, got " +
                     shape_str(a.shape()));
  const int r = a.dim(0), c = a.dim(1);
  auto out = make_node({c, r}, "transpose");
  const auto& av = a.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out->value[static_cast<std::size_t>(j) * r + i] =
          av[static_cast<std::size_t>(i) * c + j];
  auto an = a.node();
  link(out, {an}, [an, r, c](TensorNode& self) {
    an->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        an->grad[static_cast<std::size_t>(i) * c + j] +=
            self.grad[static_cast<std::size_t>(j) * r + i];
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Normalization and losses
// ---------------------------------------------------------------------------

namespace {

struct AxisSlices {
  int count;    // number of independent slices
  int len;      // elements per slice
  int stride;   // distance between consecutive slice elements
  int step;     // distance between consecutive slice bases
};

AxisSlices axis_slices(const Shape& s, int axis) {
  const int rank = static_cast<int>(s.size());
  if (axis < 0 || axis >= rank)
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  if (rank == 1) return {1, s[0], 1, 0};
  if (axis == 1) return {s[0], s[1], 1, s[1]};
  return {s[1], s[0], s[1], 1};
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  const AxisSlices sl = axis_slices(a.shape(), axis);
  auto out = make_node(a.shape(), "softmax");
  const auto& av = a.values();
  for (int s = 0; s < sl.count; ++s) {
    const std::size_t base = static_cast<std::size_t>(s) * sl.step;
    double mx = av[base];
    for (int i = 1; i < sl.len; ++i)
      mx = std::max(mx, av[base + static_cast<std::size_t>(i) * sl.stride]);
    double denom = 0.0;
    for (int i = 0; i < sl.len; ++i) {
      const std::size_t ix = base + static_cast<std::size_t>(i) * sl.stride;
      out->value[ix] = std::exp(av[ix] - mx);
      denom += out->value[ix];
    }
    for (int i = 0; i < sl.len; ++i)
      out->value[base + static_cast<std::size_t>(i) * sl.stride] /= denom;
  }
  auto an = a.node();
  auto on = out;
  link(out, {an}, [an, on, sl](TensorNode& self) {
    an->ensure_grad();
    for (int s = 0; s < sl.count; ++s) {
      const std::size_t base = static_cast<std::size_t>(s) * sl.step;
      double dot = 0.0;
      for (int i = 0; i < sl.len; ++i) {
        const std::size_t ix = base + static_cast<std::size_t>(i) * sl.stride;
        dot += self.grad[ix] * on->value[ix];
      }
      for (int i = 0; i < sl.len; ++i) {
        const std::size_t ix = base + static_cast<std::size_t>(i) * sl.stride;
        an->grad[ix] += on->value[ix] * (self.grad[ix] - dot);
      }
    }
  });
  return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const int cols = ncols(x.shape());
  const int rows = nrows(x.shape());
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != cols ||
      bias.dim(0) != cols)
    throw ShapeError("layer_norm: gain/bias must match last extent " +
                     std::to_string(cols) + ", got " + shape_str(gain.shape()) +
                     " and " + shape_str(bias.shape()));
  auto out = make_node(x.shape(), "layer_norm");
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  std::vector<double> xhat(xv.size());
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    double mu = 0.0;
    for (int c = 0; c < cols; ++c) mu += xv[base + c];
    mu /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double d = xv[base + c] - mu;
      var += d * d;
    }
    var /= cols;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (int c = 0; c < cols; ++c) {
      xhat[base + c] = (xv[base + c] - mu) * is;
      out->value[base + c] = gv[static_cast<std::size_t>(c)] * xhat[base + c] +
                             bv[static_cast<std::size_t>(c)];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  link(out, {xn, gn, bn},
       [xn, gn, bn, rows, cols, inv_std = std::move(inv_std),
        xhat = std::move(xhat)](TensorNode& self) {
         for (int r = 0; r < rows; ++r) {
           const std::size_t base = static_cast<std::size_t>(r) * cols;
           if (gn->requires_grad) {
             gn->ensure_grad();
             for (int c = 0; c < cols; ++c)
               gn->grad[static_cast<std::size_t>(c)] +=
                   self.grad[base + c] * xhat[base + c];
           }
           if (bn->requires_grad) {
             bn->ensure_grad();
             for (int c = 0; c < cols; ++c)
               bn->grad[static_cast<std::size_t>(c)] += self.grad[base + c];
           }
           if (xn->requires_grad) {
             xn->ensure_grad();
             double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
             for (int c = 0; c < cols; ++c) {
               const double dxhat =
                   self.grad[base + c] * gn->value[static_cast<std::size_t>(c)];
               mean_dxhat += dxhat;
               mean_dxhat_xhat += dxhat * xhat[base + c];
             }
             mean_dxhat /= cols;
             mean_dxhat_xhat /= cols;
             const double is = inv_std[static_cast<std::size_t>(r)];
             for (int c = 0; c < cols; ++c) {
               const double dxhat =
                   self.grad[base + c] * gn->value[static_cast<std::size_t>(c)];
               xn->grad[base + c] +=
                   is * (dxhat - mean_dxhat - xhat[base + c] * mean_dxhat_xhat);
             }
           }
         }
       });
  return Tensor(out);
}

Tensor cross_entropy(const Tensor& logits, int label) {
  const std::size_t classes = logits.numel();
  if (classes < 2)
    throw ShapeError("cross_entropy: need at least 2 classes, got " +
                     std::to_string(classes));
  if (label < 0 || static_cast<std::size_t>(label) >= classes)
    throw ValueError("cross_entropy: label " + std::to_string(label) +
                     " out of range [0," + std::to_string(classes) + ")");
  const auto& z = logits.values();
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double lse = 0.0;
  for (double v : z) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  auto out = make_node({1}, "cross_entropy");
  out->value[0] = lse - z[static_cast<std::size_t>(label)];
  auto ln = logits.node();
  link(out, {ln}, [ln, label, lse](TensorNode& self) {
    ln->ensure_grad();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < ln->value.size(); ++i) {
      const double p = std::exp(ln->value[i] - lse);
      ln->grad[i] += g * (p - (i == static_cast<std::size_t>(label) ? 1.0 : 0.0));
    }
  });
  return Tensor(out);
}

Tensor mse(const Tensor& pred, double target) {
  if (pred.numel() != 1)
    throw ShapeError("mse: scalar prediction required, got " +
                     shape_str(pred.shape()));
  auto out = make_node({1}, "mse");
  const double d = pred.values()[0] - target;
  out->value[0] = d * d;
  auto pn = pred.node();
  link(out, {pn}, [pn, d](TensorNode& self) {
    pn->ensure_grad();
    pn->grad[0] += self.grad[0] * 2.0 * d;
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  auto out = make_node({1}, "sum");
  double acc = 0.0;
  for (double v : a.values()) acc += v;  // fixed left-to-right order
  out->value[0] = acc;
  auto an = a.node();
  link(out, {an}, [an](TensorNode& self) {
    an->ensure_grad();
    for (double& g : an->grad) g += self.grad[0];
  });
  return Tensor(out);
}

Tensor mean(const Tensor& a) {
  auto out = make_node({1}, "mean");
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  const double n = static_cast<double>(a.numel());
  out->value[0] = acc / n;
  auto an = a.node();
  link(out, {an}, [an, n](TensorNode& self) {
    an->ensure_grad();
    for (double& g : an->grad) g += self.grad[0] / n;
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Slicing and concatenation
// ---------------------------------------------------------------------------

Tensor slice_cols(const Tensor& a, int start, int len) {
  if (a.rank() != 2 || start < 0 || len <= 0 || start + len > a.dim(1))
    throw ShapeError("slice_cols: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") invalid for " +
                     shape_str(a.shape()));
  const int rows = a.dim(0), cols = a.dim(1);
  auto out = make_node({rows, len}, "slice_cols");
  const auto& av = a.values();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < len; ++c)
      out->value[static_cast<std::size_t>(r) * len + c] =
          av[static_cast<std::size_t>(r) * cols + start + c];
  auto an = a.node();
  link(out, {an}, [an, rows, cols, start, len](TensorNode& self) {
    an->ensure_grad();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < len; ++c)
        an->grad[static_cast<std::size_t>(r) * cols + start + c] +=
            self.grad[static_cast<std::size_t>(r) * len + c];
  });
  return Tensor(out);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int rows = parts[0].rank() == 2 ? parts[0].dim(0) : 1;
  int cols = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows)
      throw ShapeError("concat_cols: row mismatch at " + shape_str(p.shape()));
    cols += p.dim(1);
  }
  auto out = make_node({rows, cols}, "concat_cols");
  std::vector<NodePtr> ins;
  int off = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int w = p.dim(1);
    const auto& pv = p.values();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c)
        out->value[static_cast<std::size_t>(r) * cols + off + c] =
            pv[static_cast<std::size_t>(r) * w + c];
    ins.push_back(p.node());
    off += w;
  }
  link(out, ins, [ins, offsets, rows, cols](TensorNode& self) {
    for (std::size_t k = 0; k < ins.size(); ++k) {
      if (!ins[k]->requires_grad) continue;
      ins[k]->ensure_grad();
      const int w = ins[k]->shape[1];
      const int o = offsets[k];
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c)
          ins[k]->grad[static_cast<std::size_t>(r) * w + c] +=
              self.grad[static_cast<std::size_t>(r) * cols + o + c];
    }
  });
  return Tensor(out);
}

Tensor slice_rows(const Tensor& a, int start, int len) {
  if (a.rank() != 2 || start < 0 || len <= 0 || start + len > a.dim(0))
    throw ShapeError("slice_rows: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") invalid for " +
                     shape_str(a.shape()));
  const int cols = a.dim(1);
  auto out = make_node({len, cols}, "slice_rows");
  const auto& av = a.values();
  std::copy(av.begin() + static_cast<std::size_t>(start) * cols,
            av.begin() + static_cast<std::size_t>(start + len) * cols,
            out->value.begin());
  auto an = a.node();
  link(out, {an}, [an, start, len, cols](TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < static_cast<std::size_t>(len) * cols; ++i)
      an->grad[static_cast<std::size_t>(start) * cols + i] += self.grad[i];
  });
  return Tensor(out);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int cols = parts[0].rank() == 2 ? parts[0].dim(1) : parts[0].dim(0);
  int rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols)
      throw ShapeError("concat_rows: column mismatch at " +
                       shape_str(p.shape()));
    rows += p.dim(0);
  }
  auto out = make_node({rows, cols}, "concat_rows");
  std::vector<NodePtr> ins;
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto& pv = p.values();
    std::copy(pv.begin(), pv.end(),
              out->value.begin() + static_cast<std::size_t>(off) * cols);
    ins.push_back(p.node());
    off += p.dim(0);
  }
  link(out, ins, [ins, offsets, cols](TensorNode& self) {
    for (std::size_t k = 0; k < ins.size(); ++k) {
      if (!ins[k]->requires_grad) continue;
      ins[k]->ensure_grad();
      const std::size_t n = ins[k]->numel();
      const std::size_t base = static_cast<std::size_t>(offsets[k]) * cols;
      for (std::size_t i = 0; i < n; ++i)
        ins[k]->grad[i] += self.grad[base + i];
    }
  });
  return Tensor(out);
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ValueError("dropout: rate must be in [0,1), got " +
                     std::to_string(rate));
  if (rate == 0.0) return a;
  auto out = make_node(a.shape(), "dropout");
  const auto& av = a.values();
  const double keep = 1.0 - rate;
  std::vector<double> mask(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    out->value[i] = av[i] * mask[i];
  }
  auto an = a.node();
  link(out, {an}, [an, mask = std::move(mask)](TensorNode& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * mask[i];
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ValueError("backward: loss must be a scalar tensor");
  auto root = loss.node();
  if (!root->requires_grad) return;  // nothing trainable is reachable

  // Iterative post-order DFS; the resulting list is a topological order of
  // the operation records reachable from the loss.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* node;
    std::size_t child;
  };
  std::vector<Frame> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.child < f.node->inputs.size()) {
      TensorNode* next = f.node->inputs[f.child++].get();
      if (visited.insert(next).second) stack.push_back({next, 0});
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }

  // Interior gradients are scratch space for this sweep; leaf gradients
  // persist so that repeated backward calls accumulate.
  for (TensorNode* n : topo)
    if (n->backward && !n->grad.empty()) n->grad.assign(n->numel(), 0.0);

  root->ensure_grad();
  root->grad[0] += 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Flat views
// ---------------------------------------------------------------------------

std::size_t param_count(const std::vector<Tensor>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

std::vector<double> flatten_values(const std::vector<Tensor>& params) {
  std::vector<double> flat;
  flat.reserve(param_count(params));
  for (const auto& p : params)
    flat.insert(flat.end(), p.values().begin(), p.values().end());
  return flat;
}

std::vector<double> flatten_grads(const std::vector<Tensor>& params) {
  std::vector<double> flat;
  flat.reserve(param_count(params));
  for (const auto& p : params) {
    const auto& g = p.grad();
    flat.insert(flat.end(), g.begin(), g.end());
  }
  return flat;
}

void unflatten_values(const std::vector<Tensor>& params,
                      const std::vector<double>& flat) {
  if (flat.size() != param_count(params))
    throw ShapeError("unflatten_values: length " + std::to_string(flat.size()) +
                     " does not match parameter count " +
                     std::to_string(param_count(params)));
  std::size_t off = 0;
  for (const auto& p : params) {
    auto& v = const_cast<Tensor&>(p).mutable_values();
    std::copy(flat.begin() + off, flat.begin() + off + v.size(), v.begin());
    off += v.size();
  }
}

void install_grads(const std::vector<Tensor>& params,
                   const std::vector<double>& flat) {
  if (flat.size() != param_count(params))
    throw ShapeError("install_grads: length " + std::to_string(flat.size()) +
                     " does not match parameter count " +
                     std::to_string(param_count(params)));
  std::size_t off = 0;
  for (const auto& p : params) {
    std::vector<double> g(flat.begin() + off, flat.begin() + off + p.numel());
    const_cast<Tensor&>(p).set_grad(g);
    off += p.numel();
  }
}

}  // namespace mtl
