// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/ad.hpp"

#include <Eigen/Core>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "ntf3d/errors.hpp"

namespace ntf3d::ad {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw InvalidInput(fmt::format("{}: {}", op, what));
}

bool is_suffix_broadcast(const Shape& a, const Shape& b) {
  if (numel_of(b) == 1) return true;
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    double* gx = grad_target(self, 0);
    if (!gx) return;
    const auto& xin = self.inputs[0]->value;
    for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * df(xin[i], self.value[i]);
  });
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, ", ")); }

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != static_cast<std::int64_t>(values.size())) {
    throw InvalidInput(fmt::format("Tensor::from: shape {} does not match {} values", shape_str(shape),
                                   values.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value) {
  const auto n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(static_cast<size_t>(n), value));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

std::int64_t Tensor::size(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw InvalidInput(fmt::format("Tensor::size: axis out of range for {}", shape_str(shape())));
  return shape()[static_cast<size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw InvalidInput(fmt::format("item() on tensor of shape {}", shape_str(shape())));
  return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

void Tensor::backward() const {
  if (numel() != 1) throw ContractError("backward() requires a scalar output");
  if (!node_->requires_grad) throw ContractError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS over nodes that require grad.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require(is_suffix_broadcast(a.shape(), b.shape()), "add",
          fmt::format("cannot broadcast {} onto {}", shape_str(b.shape()), shape_str(a.shape())));
  const auto av = a.values();
  const auto bv = b.values();
  const size_t nb = bv.size();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % nb];
  return make_result(a.shape(), std::move(out), {a, b}, [nb](Node& self) {
    if (double* ga = grad_target(self, 0)) {
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    }
    if (double* gb = grad_target(self, 1)) {
      for (size_t i = 0; i < self.grad.size(); ++i) gb[i % nb] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require(is_suffix_broadcast(a.shape(), b.shape()), "mul",
          fmt::format("cannot broadcast {} onto {}", shape_str(b.shape()), shape_str(a.shape())));
  const auto av = a.values();
  const auto bv = b.values();
  const size_t nb = bv.size();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % nb];
  return make_result(a.shape(), std::move(out), {a, b}, [nb](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (double* ga = grad_target(self, 0)) {
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * bv[i % nb];
    }
    if (double* gb = grad_target(self, 1)) {
      for (size_t i = 0; i < self.grad.size(); ++i) gb[i % nb] += self.grad[i] * av[i];
    }
  });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double s) {
  return unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary(x, stable_softplus, [](double v, double) { return stable_sigmoid(v); });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v * stable_sigmoid(v); },
      [](double v, double) {
        const double s = stable_sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel_of(shape) == x.numel(), "reshape",
          fmt::format("{} -> {} changes element count", shape_str(x.shape()), shape_str(shape)));
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    if (double* gx = grad_target(self, 0)) {
      for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    }
  });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_last", "no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  const std::int64_t rows = numel_of(lead);
  std::vector<std::int64_t> widths;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    const auto w = l.back();
    l.pop_back();
    require(l == lead, "concat_last", fmt::format("leading dims {} vs {}", shape_str(l), shape_str(lead)));
    widths.push_back(w);
    total += w;
  }
  std::vector<double> out(static_cast<size_t>(rows * total));
  std::int64_t offset = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].values();
    for (std::int64_t r = 0; r < rows; ++r) {
      std::copy_n(pv.begin() + r * widths[k], widths[k], out.begin() + r * total + offset);
    }
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_result(std::move(shape), std::move(out), parts, [widths, rows, total](Node& self) {
    std::int64_t off = 0;
    for (size_t k = 0; k < widths.size(); ++k) {
      if (double* g = grad_target(self, k)) {
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t c = 0; c < widths[k]; ++c) g[r * widths[k] + c] += self.grad[r * total + off + c];
        }
      }
      off += widths[k];
    }
  });
}

Tensor concat_first(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_first", "no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::int64_t rows = 0;
  std::vector<double> out;
  std::vector<size_t> sizes;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    require(t == tail, "concat_first", fmt::format("trailing dims {} vs {}", shape_str(t), shape_str(tail)));
    rows += p.shape()[0];
    out.insert(out.end(), p.values().begin(), p.values().end());
    sizes.push_back(p.values().size());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result(std::move(shape), std::move(out), parts, [sizes](Node& self) {
    size_t off = 0;
    for (size_t k = 0; k < sizes.size(); ++k) {
      if (double* g = grad_target(self, k)) {
        for (size_t i = 0; i < sizes[k]; ++i) g[i] += self.grad[off + i];
      }
      off += sizes[k];
    }
  });
}

Tensor slice_last(const Tensor& x, std::int64_t begin, std::int64_t end) {
  const auto width = x.shape().back();
  require(0 <= begin && begin < end && end <= width, "slice_last",
          fmt::format("range [{}, {}) outside width {}", begin, end, width));
  const std::int64_t rows = x.numel() / width;
  const std::int64_t w = end - begin;
  std::vector<double> out(static_cast<size_t>(rows * w));
  const auto xv = x.values();
  for (std::int64_t r = 0; r < rows; ++r) std::copy_n(xv.begin() + r * width + begin, w, out.begin() + r * w);
  Shape shape = x.shape();
  shape.back() = w;
  return make_result(std::move(shape), std::move(out), {x}, [rows, width, begin, w](Node& self) {
    if (double* g = grad_target(self, 0)) {
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < w; ++c) g[r * width + begin + c] += self.grad[r * w + c];
      }
    }
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& rows) {
  require(x.rank() == 2, "gather_rows", "expects a rank-2 tensor");
  const auto n = x.shape()[0];
  const auto m = x.shape()[1];
  std::vector<double> out(rows.size() * static_cast<size_t>(m));
  const auto xv = x.values();
  for (size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < n, "gather_rows", fmt::format("row {} out of range {}", rows[i], n));
    std::copy_n(xv.begin() + rows[i] * m, m, out.begin() + static_cast<std::int64_t>(i) * m);
  }
  return make_result({static_cast<std::int64_t>(rows.size()), m}, std::move(out), {x}, [rows, m](Node& self) {
    if (double* g = grad_target(self, 0)) {
      for (size_t i = 0; i < rows.size(); ++i) {
        for (std::int64_t c = 0; c < m; ++c) g[rows[i] * m + c] += self.grad[i * m + c];
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  require(x.rank() == 2, "transpose", "expects a rank-2 tensor");
  const auto n = x.shape()[0];
  const auto m = x.shape()[1];
  std::vector<double> out(static_cast<size_t>(n * m));
  MapMat(out.data(), m, n) = ConstMapMat(x.values().data(), n, m).transpose();
  return make_result({m, n}, std::move(out), {x}, [n, m](Node& self) {
    if (double* g = grad_target(self, 0)) {
      MapMat(g, n, m) += ConstMapMat(self.grad.data(), m, n).transpose();
    }
  });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result({}, {s}, {x}, [](Node& self) {
    if (double* g = grad_target(self, 0)) {
      const size_t n = self.inputs[0]->value.size();
      for (size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean", "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_rows(const Tensor& x) {
  require(x.rank() == 2, "sum_rows", "expects a rank-2 tensor");
  const auto n = x.shape()[0];
  const auto m = x.shape()[1];
  std::vector<double> out(static_cast<size_t>(m), 0.0);
  const auto xv = x.values();
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t c = 0; c < m; ++c) out[c] += xv[r * m + c];
  }
  return make_result({m}, std::move(out), {x}, [n, m](Node& self) {
    if (double* g = grad_target(self, 0)) {
      for (std::int64_t r = 0; r < n; ++r) {
        for (std::int64_t c = 0; c < m; ++c) g[r * m + c] += self.grad[c];
      }
    }
  });
}

Tensor row_sums(const Tensor& x) {
  require(x.rank() == 2, "row_sums", "expects a rank-2 tensor");
  const auto n = x.shape()[0];
  const auto m = x.shape()[1];
  std::vector<double> out(static_cast<size_t>(n), 0.0);
  const auto xv = x.values();
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t c = 0; c < m; ++c) out[r] += xv[r * m + c];
  }
  return make_result({n}, std::move(out), {x}, [n, m](Node& self) {
    if (double* g = grad_target(self, 0)) {
      for (std::int64_t r = 0; r < n; ++r) {
        for (std::int64_t c = 0; c < m; ++c) g[r * m + c] += self.grad[r];
      }
    }
  });
}

Tensor row_norms(const Tensor& x) {
  require(x.rank() == 2, "row_norms", "expects a rank-2 tensor");
  const auto n = x.shape()[0];
  const auto m = x.shape()[1];
  std::vector<double> out(static_cast<size_t>(n), 0.0);
  const auto xv = x.values();
  for (std::int64_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::int64_t c = 0; c < m; ++c) s += xv[r * m + c] * xv[r * m + c];
    out[r] = std::sqrt(s);
  }
  return make_result({n}, std::move(out), {x}, [n, m](Node& self) {
    if (double* g = grad_target(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      for (std::int64_t r = 0; r < n; ++r) {
        const double norm = self.value[r];
        if (norm == 0.0) continue;
        for (std::int64_t c = 0; c < m; ++c) g[r * m + c] += self.grad[r] * xv[r * m + c] / norm;
      }
    }
  });
}

Tensor normalize_rows(const Tensor& x) {
  require(x.rank() == 2, "normalize_rows", "expects a rank-2 tensor");
  const auto n = x.shape()[0];
  const auto m = x.shape()[1];
  std::vector<double> out(static_cast<size_t>(n * m));
  std::vector<double> norms(static_cast<size_t>(n));
  const auto xv = x.values();
  for (std::int64_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::int64_t c = 0; c < m; ++c) s += xv[r * m + c] * xv[r * m + c];
    const double norm = std::sqrt(s);
    if (!(norm > 0.0)) throw NumericError("normalize_rows: zero or non-finite row norm");
    norms[r] = norm;
    for (std::int64_t c = 0; c < m; ++c) out[r * m + c] = xv[r * m + c] / norm;
  }
  return make_result(x.shape(), std::move(out), {x}, [n, m, norms](Node& self) {
    if (double* g = grad_target(self, 0)) {
      for (std::int64_t r = 0; r < n; ++r) {
        const double* y = self.value.data() + r * m;
        const double* gy = self.grad.data() + r * m;
        double dot = 0.0;
        for (std::int64_t c = 0; c < m; ++c) dot += gy[c] * y[c];
        for (std::int64_t c = 0; c < m; ++c) g[r * m + c] += (gy[c] - dot * y[c]) / norms[r];
      }
    }
  });
}

Tensor mul_rowwise(const Tensor& x, const Tensor& s) {
  require(x.rank() == 2 && s.rank() == 1 && s.shape()[0] == x.shape()[0], "mul_rowwise",
          fmt::format("shapes {} and {}", shape_str(x.shape()), shape_str(s.shape())));
  const auto n = x.shape()[0];
  const auto m = x.shape()[1];
  std::vector<double> out(static_cast<size_t>(n * m));
  const auto xv = x.values();
  const auto sv = s.values();
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t c = 0; c < m; ++c) out[r * m + c] = xv[r * m + c] * sv[r];
  }
  return make_result(x.shape(), std::move(out), {x, s}, [n, m](Node& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& sv = self.inputs[1]->value;
    double* gx = grad_target(self, 0);
    double* gs = grad_target(self, 1);
    for (std::int64_t r = 0; r < n; ++r) {
      for (std::int64_t c = 0; c < m; ++c) {
        const double gy = self.grad[r * m + c];
        if (gx) gx[r * m + c] += gy * sv[r];
        if (gs) gs[r] += gy * xv[r * m + c];
      }
    }
  });
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0], "matmul",
          fmt::format("shapes {} x {}", shape_str(a.shape()), shape_str(b.shape())));
  const auto n = a.shape()[0];
  const auto k = a.shape()[1];
  const auto m = b.shape()[1];
  std::vector<double> out(static_cast<size_t>(n * m));
  MapMat(out.data(), n, m).noalias() = ConstMapMat(a.values().data(), n, k) * ConstMapMat(b.values().data(), k, m);
  return make_result({n, m}, std::move(out), {a, b}, [n, k, m](Node& self) {
    ConstMapMat gy(self.grad.data(), n, m);
    if (double* ga = grad_target(self, 0)) {
      MapMat(ga, n, k).noalias() += gy * ConstMapMat(self.inputs[1]->value.data(), k, m).transpose();
    }
    if (double* gb = grad_target(self, 1)) {
      MapMat(gb, k, m).noalias() += ConstMapMat(self.inputs[0]->value.data(), n, k).transpose() * gy;
    }
  });
}

Tensor outer_add(const Tensor& a, const Tensor& c) {
  require(a.rank() == 2 && c.rank() == 2 && a.shape()[1] == c.shape()[1], "outer_add",
          fmt::format("shapes {} and {}", shape_str(a.shape()), shape_str(c.shape())));
  const auto v = a.shape()[0];
  const auto h = a.shape()[1];
  const auto b = c.shape()[0];
  std::vector<double> out(static_cast<size_t>(b * v * h));
  const auto av = a.values();
  const auto cv = c.values();
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t j = 0; j < v; ++j) {
      double* o = out.data() + (i * v + j) * h;
      for (std::int64_t q = 0; q < h; ++q) o[q] = av[j * h + q] + cv[i * h + q];
    }
  }
  return make_result({b * v, h}, std::move(out), {a, c}, [v, h, b](Node& self) {
    double* ga = grad_target(self, 0);
    double* gc = grad_target(self, 1);
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t j = 0; j < v; ++j) {
        const double* gy = self.grad.data() + (i * v + j) * h;
        for (std::int64_t q = 0; q < h; ++q) {
          if (ga) ga[j * h + q] += gy[q];
          if (gc) gc[i * h + q] += gy[q];
        }
      }
    }
  });
}

Tensor cross_entropy_diag(const Tensor& logits) {
  require(logits.rank() == 2 && logits.shape()[0] == logits.shape()[1], "cross_entropy_diag",
          fmt::format("expects a square matrix, got {}", shape_str(logits.shape())));
  const auto b = logits.shape()[0];
  const auto lv = logits.values();
  for (double v : lv) {
    if (!std::isfinite(v)) throw NumericError("cross_entropy_diag: non-finite logit");
  }
  // Row softmax kept for the backward pass.
  std::vector<double> soft(static_cast<size_t>(b * b));
  double total = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    const double* row = lv.data() + i * b;
    const double mx = *std::max_element(row, row + b);
    double s = 0.0;
    for (std::int64_t j = 0; j < b; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::int64_t j = 0; j < b; ++j) soft[i * b + j] = std::exp(row[j] - lse);
    total += lse - row[i];
  }
  return make_result({}, {total / static_cast<double>(b)}, {logits}, [b, soft](Node& self) {
    if (double* g = grad_target(self, 0)) {
      const double gy = self.grad[0] / static_cast<double>(b);
      for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t j = 0; j < b; ++j) g[i * b + j] += gy * (soft[i * b + j] - (i == j ? 1.0 : 0.0));
      }
    }
  });
}

// ---- image / point ops -----------------------------------------------------

namespace {

// [B, H, W, C] -> [B * H * W, 9 * C], column index = (ky * 3 + kx) * C + c.
void im2col3x3(const double* x, std::int64_t b, std::int64_t h, std::int64_t w, std::int64_t c, double* col) {
  const std::int64_t kc = 9 * c;
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t xx = 0; xx < w; ++xx) {
        double* row = col + ((n * h + y) * w + xx) * kc;
        for (int ky = 0; ky < 3; ++ky) {
          const std::int64_t sy = y + ky - 1;
          for (int kx = 0; kx < 3; ++kx) {
            const std::int64_t sx = xx + kx - 1;
            double* dst = row + (ky * 3 + kx) * c;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
              std::fill_n(dst, c, 0.0);
            } else {
              std::copy_n(x + ((n * h + sy) * w + sx) * c, c, dst);
            }
          }
        }
      }
    }
  }
}

void col2im3x3(const double* col, std::int64_t b, std::int64_t h, std::int64_t w, std::int64_t c, double* gx) {
  const std::int64_t kc = 9 * c;
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t xx = 0; xx < w; ++xx) {
        const double* row = col + ((n * h + y) * w + xx) * kc;
        for (int ky = 0; ky < 3; ++ky) {
          const std::int64_t sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const std::int64_t sx = xx + kx - 1;
            if (sx < 0 || sx >= w) continue;
            const double* src = row + (ky * 3 + kx) * c;
            double* dst = gx + ((n * h + sy) * w + sx) * c;
            for (std::int64_t q = 0; q < c; ++q) dst[q] += src[q];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.rank() == 4, "conv3x3", fmt::format("expects NHWC input, got {}", shape_str(x.shape())));
  const auto b = x.shape()[0];
  const auto h = x.shape()[1];
  const auto w = x.shape()[2];
  const auto c = x.shape()[3];
  require(weight.rank() == 2 && weight.shape()[0] == 9 * c, "conv3x3",
          fmt::format("weight {} does not match {} input channels", shape_str(weight.shape()), c));
  const auto o = weight.shape()[1];
  require(bias.numel() == o, "conv3x3", "bias size mismatch");
  const std::int64_t rows = b * h * w;
  std::vector<double> col(static_cast<size_t>(rows * 9 * c));
  im2col3x3(x.values().data(), b, h, w, c, col.data());
  std::vector<double> out(static_cast<size_t>(rows * o));
  MapMat y(out.data(), rows, o);
  y.noalias() = ConstMapMat(col.data(), rows, 9 * c) * ConstMapMat(weight.values().data(), 9 * c, o);
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), o);
  return make_result({b, h, w, o}, std::move(out), {x, weight, bias},
                     [b, h, w, c, o, rows, col = std::move(col)](Node& self) {
                       ConstMapMat gy(self.grad.data(), rows, o);
                       if (double* gw = grad_target(self, 1)) {
                         MapMat(gw, 9 * c, o).noalias() += ConstMapMat(col.data(), rows, 9 * c).transpose() * gy;
                       }
                       if (double* gb = grad_target(self, 2)) {
                         Eigen::Map<Eigen::RowVectorXd>(gb, o) += gy.colwise().sum();
                       }
                       if (double* gx = grad_target(self, 0)) {
                         std::vector<double> gcol(static_cast<size_t>(rows * 9 * c));
                         MapMat(gcol.data(), rows, 9 * c).noalias() =
                             gy * ConstMapMat(self.inputs[1]->value.data(), 9 * c, o).transpose();
                         col2im3x3(gcol.data(), b, h, w, c, gx);
                       }
                     });
}

Tensor avg_pool(const Tensor& x, int k) {
  require(x.rank() == 4 && k >= 1, "avg_pool", fmt::format("expects NHWC input, got {}", shape_str(x.shape())));
  const auto b = x.shape()[0];
  const auto h = x.shape()[1];
  const auto w = x.shape()[2];
  const auto c = x.shape()[3];
  require(h % k == 0 && w % k == 0, "avg_pool", fmt::format("{}x{} not divisible by {}", h, w, k));
  const auto oh = h / k;
  const auto ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(static_cast<size_t>(b * oh * ow * c), 0.0);
  const auto xv = x.values();
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t xx = 0; xx < w; ++xx) {
        const double* src = xv.data() + ((n * h + y) * w + xx) * c;
        double* dst = out.data() + ((n * oh + y / k) * ow + xx / k) * c;
        for (std::int64_t q = 0; q < c; ++q) dst[q] += src[q] * inv;
      }
    }
  }
  return make_result({b, oh, ow, c}, std::move(out), {x}, [b, h, w, c, k, oh, ow, inv](Node& self) {
    if (double* g = grad_target(self, 0)) {
      for (std::int64_t n = 0; n < b; ++n) {
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t xx = 0; xx < w; ++xx) {
            const double* src = self.grad.data() + ((n * oh + y / k) * ow + xx / k) * c;
            double* dst = g + ((n * h + y) * w + xx) * c;
            for (std::int64_t q = 0; q < c; ++q) dst[q] += src[q] * inv;
          }
        }
      }
    }
  });
}

Tensor max_groups(const Tensor& x, std::int64_t groups) {
  require(x.rank() == 2 && groups > 0 && x.shape()[0] % groups == 0, "max_groups",
          fmt::format("cannot split {} into {} groups", shape_str(x.shape()), groups));
  const auto per = x.shape()[0] / groups;
  const auto c = x.shape()[1];
  std::vector<double> out(static_cast<size_t>(groups * c), -std::numeric_limits<double>::infinity());
  std::vector<std::int64_t> arg(static_cast<size_t>(groups * c), 0);
  const auto xv = x.values();
  for (std::int64_t g = 0; g < groups; ++g) {
    for (std::int64_t r = 0; r < per; ++r) {
      const std::int64_t row = g * per + r;
      for (std::int64_t q = 0; q < c; ++q) {
        const double v = xv[row * c + q];
        if (v > out[g * c + q]) {
          out[g * c + q] = v;
          arg[g * c + q] = row;
        }
      }
    }
  }
  return make_result({groups, c}, std::move(out), {x}, [c, arg](Node& self) {
    if (double* gx = grad_target(self, 0)) {
      for (size_t i = 0; i < arg.size(); ++i) {
        const auto q = static_cast<std::int64_t>(i) % c;
        gx[arg[i] * c + q] += self.grad[i];
      }
    }
  });
}

}  // namespace ntf3d::ad
