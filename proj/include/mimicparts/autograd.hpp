#pragma once

#include <deque>
#include <functional>
#include <optional>
#include <vector>

#include "mimicparts/tensor.hpp"

namespace mimicparts {

class Tape;

// Lightweight handle to a tape node. Copying is free; the tape owns the data.
struct Var {
  int id = -1;
  Tape* tape = nullptr;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
};

// Gradients keyed by tape node id, as returned by Tape::backward.
class GradMap {
 public:
  explicit GradMap(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  // Gradient of the loss w.r.t. the given variable; zeros if the variable
  // did not influence the loss.
  Tensor at(Var v) const;
  bool has(Var v) const;

 private:
  std::vector<Tensor> grads_;
};

// Records primitive operations and replays them in exact reverse order on
// backward(). Single-owner: a tape must not be shared across threads.
class Tape {
 public:
  using VjpFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

  // record_grads=false skips storing backward closures (inference mode).
  explicit Tape(bool record_grads = true) : record_(record_grads) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Escape hatch for composing custom primitives (also used by tests to
  // inject deliberately wrong backward rules).
  Var custom(Tensor value, const std::vector<Var>& parents, VjpFn vjp);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

  // Reverse pass from a scalar loss. Gradients accumulate additively at
  // fan-out. The tape is consumed; a second call is an error.
  GradMap backward(Var loss);

 private:
  friend struct Var;
  struct Node {
    Tensor value;
    std::vector<int> parents;
    VjpFn vjp;
    bool needs_grad = false;
  };
  Var push(Tensor value, std::vector<int> parents, VjpFn vjp);
  // deque: node references stay valid while new nodes are recorded
  std::deque<Node> nodes_;
  bool record_ = true;
  bool consumed_ = false;
};

// Autograd primitives. All validate shapes and (in checked builds) reject
// non-finite values eagerly.
Var matmul(Var a, Var b);
Var bmm(Var a, Var b, bool trans_a = false, bool trans_b = false);
Var transpose2d(Var a);
Var reshape(Var a, Shape shape);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var neg(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var sin(Var a);
Var gelu(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var sum_all(Var a);
Var mean_all(Var a);
Var sum_axis0(Var a);
Var mean_axis0(Var a);
Var mean_axis1(Var a);
Var concat(const std::vector<Var>& parts, int axis);
std::vector<Var> split(Var a, int axis, const std::vector<int>& sizes);
Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);
Var l2_normalize_rows(Var x);
Var smooth_l1(Var a, Var b);
Var l1_loss(Var a, Var b);
Var conv1d(Var x, Var w, Var b, int stride, int pad);
Var upsample2(Var x);

// Composites.
Var mse(Var a, Var b);
// Row-wise cosine similarity matrix between rows of a [m,d] and b [n,d].
Var cosine_similarity_matrix(Var a, Var b);

// Finite-difference gradient verification.
struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  int64_t n_checked = 0;
};

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Compares reverse-mode gradients of fn at `point` against central finite
// differences with step h. fn must return a scalar; h must lie in
// [1e-7, 1e-3]. Relative error uses denominator max(1, |analytic|, |fd|).
GradCheckReport grad_check(const ScalarFn& fn, const std::vector<Tensor>& point,
                           double h, double tol = 1e-4);

}  // namespace mimicparts
