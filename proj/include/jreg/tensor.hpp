#pragma once

// Dense float64 tensors with eager reverse-mode differentiation.
//
// A Tensor is a shared handle to an immutable value. Operations on tensors
// that require gradients record a backward closure and the parent handles,
// so the graph lives exactly as long as the outputs that reference it.
// Calling backward() on a scalar walks the graph in reverse topological
// order and accumulates into the grad buffer of every tracked leaf.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace jreg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads self.grad and accumulates into the parents.
  std::function<void(TensorImpl& self)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access for parameter updates and test fixtures. Mutating a
  // tensor that is part of a live graph invalidates that graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same values, no graph history.
  Tensor detach() const;
  Tensor clone() const;

  void backward() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& shared_impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(detail::TensorImpl&)>);
};

// Builds an op output. The closure and parents are recorded only when grad
// mode is enabled and at least one parent requires grad.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(detail::TensorImpl&)> backward_fn);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- operations ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor silu(const Tensor& x);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& x, double c);
Tensor operator*(double c, const Tensor& x);
Tensor operator+(const Tensor& x, double c);
Tensor operator+(double c, const Tensor& x);
Tensor operator-(double c, const Tensor& x);
Tensor operator-(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Σ_i x_i · w_i with constant weights w (no gradient to w).
Tensor weighted_sum(const Tensor& x, std::span<const double> weights);

// [m×k]·[k×n], or batched [b×m×k]·[b×k×n].
Tensor matmul(const Tensor& a, const Tensor& b);
// a·bᵀ: [m×k]·[n×k]ᵀ, or batched [b×m×k]·[b×n×k]ᵀ.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x·wᵀ over the last axis of x; w has shape [out×in].
Tensor linear(const Tensor& x, const Tensor& w);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);

// Rows of a 2-D table selected by index; embedding() additionally reports
// out-of-range ids as vocabulary errors.
Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> rows);
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

// mask covers the trailing dimensions of x and is broadcast over the rest.
// Positions where mask != 0 are replaced by value and receive no gradient.
Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double value);

Tensor softmax(const Tensor& x, int axis = -1);
// softmax(scale·x) over the last axis of x[…×T×T], with entry (i, j) masked
// for j > i. Equal to softmax(masked_fill(scale·x, upper, −∞)).
Tensor causal_softmax(const Tensor& x, double scale);

inline constexpr double kRmsEpsilon = 1e-5;
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = kRmsEpsilon);

// Rotary embedding on [n×T×d] (d even); position = index along axis 1.
// Consecutive pairs (2i, 2i+1) are rotated by t·base^(−2i/d).
Tensor rope(const Tensor& x, double base);

inline constexpr double kCosineEpsilon = 1e-12;
// aᵀb / (‖a‖‖b‖ + ε) for two vectors of equal length; scalar result.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// Row-wise cosine similarity of two [n×d] matrices; result has shape [n].
Tensor cosine_similarity_rows(const Tensor& a, const Tensor& b);

// Mean of −log softmax(logits)[target] over positions with mask != 0.
// logits has shape [..., V]; targets and mask have one entry per row. An
// empty mask means every position counts.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask = {});

// ---- finite-difference verification -------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares the gradient of f() w.r.t. every element of params against central
// differences with step h. Relative error is |analytic − numeric| /
// max(1, |numeric|). params must be leaves that require grad.
GradCheckReport finite_diff_report(const std::function<Tensor()>& f, std::span<Tensor> params,
                                   double h = 1e-5);
double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                         double h = 1e-5);

}  // namespace jreg
