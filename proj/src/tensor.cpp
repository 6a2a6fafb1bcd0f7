#include "jreg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "jreg/errors.hpp"

namespace jreg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

using detail::TensorImpl;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

bool wants_grad(const TensorImpl& p) { return p.requires_grad; }

// Applies fn(parent_grad_buffer) for parent i if it is tracked.
template <class Fn>
void accumulate(TensorImpl& self, std::size_t i, Fn&& fn) {
  TensorImpl& p = *self.parents[i];
  if (wants_grad(p)) fn(p.grad_buffer());
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& detail::TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const auto n = values.size();
  return from({n}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw RangeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  require_defined(*this, "set_requires_grad");
  if (!impl_->is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
}

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "mutable_grad");
  return impl_->grad_buffer();
}

void Tensor::zero_grad() {
  if (defined()) impl_->grad.clear();
}

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

Tensor Tensor::clone() const { return from(shape(), impl_->data, requires_grad() && impl_->is_leaf()); }

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar root, got shape " + shape_str(shape()));
  }
  if (!impl_->requires_grad) throw ContractError("backward() root does not require grad");

  // Iterative post-order DFS over tracked nodes.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (!node->is_leaf()) node->grad.clear();
  }
  impl_->grad_buffer()[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->is_leaf()) continue;
    if (!node->grad.empty()) node->backward_fn(*node);
    std::vector<double>().swap(node->grad);
  }
}

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(TensorImpl&)> backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  const bool track = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                                   [](const Tensor& p) { return p.requires_grad(); });
  if (track) {
    impl->requires_grad = true;
    impl->parents.reserve(parents.size());
    for (auto& p : parents) impl->parents.push_back(p.shared_impl());
    impl->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(impl));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- elementwise --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& s) {
    for (std::size_t p = 0; p < 2; ++p) {
      accumulate(s, p, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
      });
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& s) {
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
    });
    accumulate(s, 1, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= s.grad[i];
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& s) {
    const auto& x = s.parents[0]->data;
    const auto& y = s.parents[1]->data;
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i] * y[i];
    });
    accumulate(s, 1, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i] * x[i];
    });
  });
}

Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += c;
  return make_result(x.shape(), std::move(out), {x}, [](TensorImpl& s) {
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
    });
  });
}

Tensor mul_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= c;
  return make_result(x.shape(), std::move(out), {x}, [c](TensorImpl& s) {
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * s.grad[i];
    });
  });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor silu(const Tensor& x) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] / (1.0 + std::exp(-in[i]));
  return make_result(x.shape(), std::move(out), {x}, [](TensorImpl& s) {
    const auto& in = s.parents[0]->data;
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double sig = 1.0 / (1.0 + std::exp(-in[i]));
        g[i] += s.grad[i] * sig * (1.0 + in[i] * (1.0 - sig));
      }
    });
  });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator*(const Tensor& x, double c) { return mul_scalar(x, c); }
Tensor operator*(double c, const Tensor& x) { return mul_scalar(x, c); }
Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
Tensor operator+(double c, const Tensor& x) { return add_scalar(x, c); }
Tensor operator-(double c, const Tensor& x) { return add_scalar(neg(x), c); }
Tensor operator-(const Tensor& x) { return neg(x); }

// ---- reductions ---------------------------------------------------------

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({}, {total}, {x}, [](TensorImpl& s) {
    const double g0 = s.grad[0];
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (auto& v : g) v += g0;
    });
  });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
  if (weights.size() != x.numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for tensor " +
                         shape_str(x.shape()));
  }
  double total = 0.0;
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) total += in[i] * weights[i];
  std::vector<double> w(weights.begin(), weights.end());
  return make_result({}, {total}, {x}, [w = std::move(w)](TensorImpl& s) {
    const double g0 = s.grad[0];
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * w[i];
    });
  });
}

// ---- matrix products ----------------------------------------------------

namespace {

struct MatmulDims {
  std::size_t batch, m, k, n;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool b_transposed, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  auto fail = [&] {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(sa) + " and " +
                         shape_str(sb));
  };
  if (sa.size() != sb.size() || (sa.size() != 2 && sa.size() != 3)) fail();
  const std::size_t off = sa.size() - 2;
  if (off == 1 && sa[0] != sb[0]) fail();
  MatmulDims d{off ? sa[0] : 1, sa[off], sa[off + 1], b_transposed ? sb[off] : sb[off + 1]};
  const std::size_t bk = b_transposed ? sb[off + 1] : sb[off];
  if (bk != d.k) fail();
  return d;
}

Shape matmul_shape(const MatmulDims& d, bool batched) {
  return batched ? Shape{d.batch, d.m, d.n} : Shape{d.m, d.n};
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto d = matmul_dims(a, b, false, "matmul");
  std::vector<double> out(d.batch * d.m * d.n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < d.batch; ++i) {
    MutMap(out.data() + i * d.m * d.n, d.m, d.n).noalias() =
        ConstMap(pa + i * d.m * d.k, d.m, d.k) * ConstMap(pb + i * d.k * d.n, d.k, d.n);
  }
  return make_result(matmul_shape(d, a.rank() == 3), std::move(out), {a, b}, [d](TensorImpl& s) {
    const double* pa = s.parents[0]->data.data();
    const double* pb = s.parents[1]->data.data();
    const double* go = s.grad.data();
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < d.batch; ++i) {
        MutMap(g.data() + i * d.m * d.k, d.m, d.k).noalias() +=
            ConstMap(go + i * d.m * d.n, d.m, d.n) * ConstMap(pb + i * d.k * d.n, d.k, d.n).transpose();
      }
    });
    accumulate(s, 1, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < d.batch; ++i) {
        MutMap(g.data() + i * d.k * d.n, d.k, d.n).noalias() +=
            ConstMap(pa + i * d.m * d.k, d.m, d.k).transpose() * ConstMap(go + i * d.m * d.n, d.m, d.n);
      }
    });
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const auto d = matmul_dims(a, b, true, "matmul_nt");
  std::vector<double> out(d.batch * d.m * d.n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < d.batch; ++i) {
    MutMap(out.data() + i * d.m * d.n, d.m, d.n).noalias() =
        ConstMap(pa + i * d.m * d.k, d.m, d.k) * ConstMap(pb + i * d.n * d.k, d.n, d.k).transpose();
  }
  return make_result(matmul_shape(d, a.rank() == 3), std::move(out), {a, b}, [d](TensorImpl& s) {
    const double* pa = s.parents[0]->data.data();
    const double* pb = s.parents[1]->data.data();
    const double* go = s.grad.data();
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < d.batch; ++i) {
        MutMap(g.data() + i * d.m * d.k, d.m, d.k).noalias() +=
            ConstMap(go + i * d.m * d.n, d.m, d.n) * ConstMap(pb + i * d.n * d.k, d.n, d.k);
      }
    });
    accumulate(s, 1, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < d.batch; ++i) {
        MutMap(g.data() + i * d.n * d.k, d.n, d.k).noalias() +=
            ConstMap(go + i * d.m * d.n, d.m, d.n).transpose() * ConstMap(pa + i * d.m * d.k, d.m, d.k);
      }
    });
  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.empty() || sw.size() != 2 || sx.back() != sw[1]) {
    throw DimensionError("linear: input " + shape_str(sx) + " incompatible with weight " + shape_str(sw));
  }
  const std::size_t in = sw[1], outdim = sw[0], rows = x.numel() / in;
  std::vector<double> out(rows * outdim);
  MutMap(out.data(), rows, outdim).noalias() =
      ConstMap(x.data().data(), rows, in) * ConstMap(w.data().data(), outdim, in).transpose();
  Shape so = sx;
  so.back() = outdim;
  return make_result(std::move(so), std::move(out), {x, w}, [rows, in, outdim](TensorImpl& s) {
    const ConstMap xm(s.parents[0]->data.data(), rows, in);
    const ConstMap wm(s.parents[1]->data.data(), outdim, in);
    const ConstMap gm(s.grad.data(), rows, outdim);
    accumulate(s, 0, [&](std::vector<double>& g) { MutMap(g.data(), rows, in).noalias() += gm * wm; });
    accumulate(s, 1, [&](std::vector<double>& g) {
      MutMap(g.data(), outdim, in).noalias() += gm.transpose() * xm;
    });
  });
}

// ---- layout -------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](TensorImpl& s) {
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
    });
  });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const auto& sx = x.shape();
  const std::size_t r = sx.size();
  if (axes.size() != r) throw DimensionError("permute: axis list does not match rank of " + shape_str(sx));
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw DimensionError("permute: invalid axis list for " + shape_str(sx));
    seen[a] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * sx[i];
  Shape so(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    so[i] = sx[axes[i]];
    src_stride[i] = in_stride[axes[i]];
  }
  // map[out_flat] = in_flat
  const std::size_t n = x.numel();
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    map[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < so[d]) {
        src += src_stride[d];
        break;
      }
      src -= src_stride[d] * (so[d] - 1);
      idx[d] = 0;
    }
  }
  const auto in = x.data();
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = in[map[o]];
  return make_result(std::move(so), std::move(out), {x}, [map = std::move(map)](TensorImpl& s) {
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t o = 0; o < map.size(); ++o) g[map[o]] += s.grad[o];
    });
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> rows) {
  if (table.rank() != 2) throw DimensionError("gather_rows: expected a matrix, got " + shape_str(table.shape()));
  if (rows.empty()) throw ContractError("gather_rows: empty row selection");
  const std::size_t n_rows = table.dim(0), width = table.dim(1);
  const auto src = table.data();
  std::vector<double> out(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || static_cast<std::size_t>(rows[r]) >= n_rows) {
      throw RangeError("gather_rows: row " + std::to_string(rows[r]) + " outside [0, " +
                       std::to_string(n_rows) + ")");
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width, out.begin() + r * width);
  }
  std::vector<std::int32_t> idx(rows.begin(), rows.end());
  return make_result({rows.size(), width}, std::move(out), {table}, [idx = std::move(idx), width](TensorImpl& s) {
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        double* dst = g.data() + static_cast<std::size_t>(idx[r]) * width;
        const double* gr = s.grad.data() + r * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += gr[j];
      }
    });
  });
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  const std::size_t vocab = table.dim(0);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(vocab));
    }
  }
  return gather_rows(table, ids);
}

Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double value) {
  const std::size_t n = x.numel(), m = mask.size();
  // mask must cover a suffix of the shape exactly
  std::size_t suffix = 1;
  bool ok = (m == 1);
  for (std::size_t i = x.rank(); i-- > 0 && !ok;) {
    suffix *= x.shape()[i];
    ok = (suffix == m);
  }
  if (!ok || m == 0) {
    throw DimensionError("masked_fill: mask of " + std::to_string(m) + " entries does not cover trailing dims of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t o = 0; o < n; o += m) {
    for (std::size_t i = 0; i < m; ++i) {
      if (mask[i]) out[o + i] = value;
    }
  }
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  return make_result(x.shape(), std::move(out), {x}, [keep = std::move(keep)](TensorImpl& s) {
    const std::size_t m = keep.size();
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t o = 0; o < g.size(); o += m) {
        for (std::size_t i = 0; i < m; ++i) {
          if (!keep[i]) g[o + i] += s.grad[o + i];
        }
      }
    });
  });
}

// ---- normalisation ------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  const auto& sx = x.shape();
  const int r = static_cast<int>(sx.size());
  if (r == 0) throw DimensionError("softmax: scalar input");
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw RangeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(sx));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= sx[i];
  for (int i = ax + 1; i < r; ++i) inner *= sx[i];
  const std::size_t n = sx[ax];
  const auto in = x.data();
  for (double v : in) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  }
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      double mx = in[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, in[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(in[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] *= inv;
    }
  }
  return make_result(sx, std::move(out), {x}, [outer, inner, n](TensorImpl& s) {
    const auto& y = s.data;
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
          const std::size_t base = o * n * inner + j;
          double dot = 0.0;
          for (std::size_t k = 0; k < n; ++k) dot += s.grad[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < n; ++k) {
            const std::size_t i = base + k * inner;
            g[i] += y[i] * (s.grad[i] - dot);
          }
        }
      }
    });
  });
}

Tensor causal_softmax(const Tensor& x, double scale) {
  const auto& sx = x.shape();
  if (sx.size() < 2 || sx[sx.size() - 1] != sx[sx.size() - 2]) {
    throw DimensionError("causal_softmax: expected trailing [T x T], got " + shape_str(sx));
  }
  const std::size_t t = sx.back(), blocks = x.numel() / (t * t);
  const auto in = x.data();
  for (double v : in) {
    if (!std::isfinite(v)) throw NumericError("causal_softmax: non-finite input");
  }
  std::vector<double> out(in.size(), 0.0);
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t i = 0; i < t; ++i) {
      const double* row = in.data() + (b * t + i) * t;
      double* y = out.data() + (b * t + i) * t;
      double mx = row[0] * scale;
      for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, row[j] * scale);
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        y[j] = std::exp(row[j] * scale - mx);
        z += y[j];
      }
      const double inv = 1.0 / z;
      for (std::size_t j = 0; j <= i; ++j) y[j] *= inv;
    }
  }
  return make_result(sx, std::move(out), {x}, [blocks, t, scale](TensorImpl& s) {
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < blocks * t; ++r) {
        const std::size_t i = r % t, off = r * t;
        const double* y = s.data.data() + off;
        const double* gy = s.grad.data() + off;
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j <= i; ++j) g[off + j] += scale * y[j] * (gy[j] - dot);
      }
    });
  });
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  if (gain.rank() != 1 || x.rank() == 0 || x.shape().back() != gain.dim(0)) {
    throw DimensionError("rmsnorm: input " + shape_str(x.shape()) + " incompatible with gain " +
                         shape_str(gain.shape()));
  }
  const std::size_t d = gain.dim(0), rows = x.numel() / d;
  const auto in = x.data();
  const auto gv = gain.data();
  std::vector<double> out(in.size());
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * d;
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * inv * gv[j];
  }
  return make_result(x.shape(), std::move(out), {x, gain}, [d, rows, inv_rms = std::move(inv_rms)](TensorImpl& s) {
    const auto& xin = s.parents[0]->data;
    const auto& gv = s.parents[1]->data;
    const auto& go = s.grad;
    accumulate(s, 1, [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) g[j] += go[r * d + j] * xin[r * d + j] * inv_rms[r];
      }
    });
    accumulate(s, 0, [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double inv = inv_rms[r];
        double proj = 0.0;
        for (std::size_t j = 0; j < d; ++j) proj += go[r * d + j] * gv[j] * xin[r * d + j] * inv;
        proj /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t i = r * d + j;
          g[i] += inv * (go[i] * gv[j] - xin[i] * inv * proj);
        }
      }
    });
  });
}

Tensor rope(const Tensor& x, double base) {
  if (x.rank() != 3 || x.dim(2) % 2 != 0) {
    throw DimensionError("rope: expected [n x T x d] with even d, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), t_len = x.dim(1), d = x.dim(2), half = d / 2;
  std::vector<double> cs(t_len * half), sn(t_len * half);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(t) * freq;
      cs[t * half + i] = std::cos(angle);
      sn[t * half + i] = std::sin(angle);
    }
  }
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t t = 0; t < t_len; ++t) {
      const std::size_t row = (b * t_len + t) * d;
      for (std::size_t i = 0; i < half; ++i) {
        const double c = cs[t * half + i], s = sn[t * half + i];
        const double x0 = in[row + 2 * i], x1 = in[row + 2 * i + 1];
        out[row + 2 * i] = x0 * c - x1 * s;
        out[row + 2 * i + 1] = x0 * s + x1 * c;
      }
    }
  }
  return make_result(x.shape(), std::move(out), {x},
                     [n, t_len, d, half, cs = std::move(cs), sn = std::move(sn)](TensorImpl& self) {
                       accumulate(self, 0, [&](std::vector<double>& g) {
                         const auto& go = self.grad;
                         for (std::size_t b = 0; b < n; ++b) {
                           for (std::size_t t = 0; t < t_len; ++t) {
                             const std::size_t row = (b * t_len + t) * d;
                             for (std::size_t i = 0; i < half; ++i) {
                               const double c = cs[t * half + i], s = sn[t * half + i];
                               const double g0 = go[row + 2 * i], g1 = go[row + 2 * i + 1];
                               g[row + 2 * i] += g0 * c + g1 * s;
                               g[row + 2 * i + 1] += -g0 * s + g1 * c;
                             }
                           }
                         }
                       });
                     });
}

// ---- cosine similarity --------------------------------------------------

namespace {

Tensor cosine_kernel(const Tensor& a, const Tensor& b, std::size_t rows, std::size_t width, Shape out_shape) {
  const auto pa = a.data(), pb = b.data();
  std::vector<double> out(rows);
  std::vector<double> dots(rows), na(rows), nb(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      const double x = pa[r * width + j], y = pb[r * width + j];
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    if (sa == 0.0 && sb == 0.0) {
      throw DegenerateInputError("cosine similarity of two zero vectors (row " + std::to_string(r) + ")");
    }
    dots[r] = dot;
    na[r] = std::sqrt(sa);
    nb[r] = std::sqrt(sb);
    out[r] = dot / (na[r] * nb[r] + kCosineEpsilon);
  }
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [rows, width, dots = std::move(dots), na = std::move(na), nb = std::move(nb)](TensorImpl& s) {
                       const auto& xa = s.parents[0]->data;
                       const auto& xb = s.parents[1]->data;
                       // d c / d u = v / den − dot · ‖v‖ / den² · u / ‖u‖
                       auto grad_into = [&](std::vector<double>& g, const std::vector<double>& u,
                                            const std::vector<double>& v, const std::vector<double>& nu,
                                            const std::vector<double>& nv) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           const double den = nu[r] * nv[r] + kCosineEpsilon;
                           const double go = s.grad[r];
                           const double radial = nu[r] > 0.0 ? dots[r] * nv[r] / (den * den * nu[r]) : 0.0;
                           for (std::size_t j = 0; j < width; ++j) {
                             const std::size_t i = r * width + j;
                             g[i] += go * (v[i] / den - radial * u[i]);
                           }
                         }
                       };
                       accumulate(s, 0, [&](std::vector<double>& g) { grad_into(g, xa, xb, na, nb); });
                       accumulate(s, 1, [&](std::vector<double>& g) { grad_into(g, xb, xa, nb, na); });
                     });
}

}  // namespace

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel()) {
    throw DimensionError("cosine_similarity: expected two vectors of equal length, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  return cosine_kernel(a, b, 1, a.numel(), {});
}

Tensor cosine_similarity_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw DimensionError("cosine_similarity_rows: expected two matrices of equal shape, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  return cosine_kernel(a, b, a.dim(0), a.dim(1), {a.dim(0)});
}

// ---- cross-entropy ------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask) {
  if (logits.rank() == 0) throw DimensionError("cross_entropy: scalar logits");
  const std::size_t vocab = logits.shape().back(), rows = logits.numel() / vocab;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " logit rows");
  }
  if (!mask.empty() && mask.size() != rows) {
    throw DimensionError("cross_entropy: mask has " + std::to_string(mask.size()) + " entries for " +
                         std::to_string(rows) + " rows");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask.empty() && !mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw RangeError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: every position is padding");

  const auto in = logits.data();
  std::vector<double> probs(in.size(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask.empty() && !mask[r]) continue;
    const double* z = in.data() + r * vocab;
    double mx = z[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, z[j]);
    double se = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const double e = std::exp(z[j] - mx);
      probs[r * vocab + j] = e;
      se += e;
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= se;
    total += (mx + std::log(se)) - z[targets[r]];
  }
  if (!std::isfinite(total)) throw NumericError("cross_entropy: non-finite loss");
  const double inv_count = 1.0 / static_cast<double>(count);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return make_result({}, {total * inv_count}, {logits},
                     [vocab, rows, inv_count, probs = std::move(probs), tgt = std::move(tgt),
                      msk = std::move(msk)](TensorImpl& s) {
                       const double scale = s.grad[0] * inv_count;
                       accumulate(s, 0, [&](std::vector<double>& g) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           if (!msk.empty() && !msk[r]) continue;
                           for (std::size_t j = 0; j < vocab; ++j) g[r * vocab + j] += scale * probs[r * vocab + j];
                           g[r * vocab + static_cast<std::size_t>(tgt[r])] -= scale;
                         }
                       });
                     });
}

// ---- gradient check -----------------------------------------------------

GradCheckReport finite_diff_report(const std::function<Tensor()>& f, std::span<Tensor> params, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  for (auto& p : params) {
    if (!p.requires_grad()) throw ContractError("finite_diff_check: parameter does not require grad");
    p.zero_grad();
  }
  {
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: non-finite loss");
    loss.backward();
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                       : std::vector<double>(p.numel(), 0.0));
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double fp = f().item();
      values[i] = original - h;
      const double fm = f().item();
      values[i] = original;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("finite_diff_check: non-finite loss while probing parameter " + std::to_string(pi) +
                           " element " + std::to_string(i));
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > report.max_rel_error || (pi == 0 && i == 0)) {
        report = {err, pi, i, analytic[pi][i], numeric};
      }
    }
  }
  return report;
}

double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params, double h) {
  return finite_diff_report(f, params, h).max_rel_error;
}

}  // namespace jreg
