#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mimicparts/common.hpp"

namespace mimicparts {

using Shape = std::vector<int>;

enum class Dtype : uint8_t { f64 = 0, f32 = 1 };

// Immutable dense row-major tensor of doubles. Copies are cheap (shared
// storage). The dtype tag only affects on-disk storage; in-memory compute is
// always 64-bit.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, Dtype dtype = Dtype::f64);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, Rng& rng, double stdev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);
  // Identity matrix.
  static Tensor eye(int n);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  int64_t numel() const;
  bool empty() const { return !data_; }
  Dtype dtype() const { return dtype_; }
  Tensor as_dtype(Dtype dt) const;

  std::span<const double> data() const;
  double at(int64_t flat_index) const;
  double operator()(int i) const;
  double operator()(int i, int j) const;
  double operator()(int i, int j, int k) const;
  double scalar_value() const;

  // Shares storage; numel must match.
  Tensor reshaped(Shape shape) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  std::string shape_str() const;

  // "MPT1" little-endian framing: magic, u8 dtype, u8 rank, u64 extents,
  // raw row-major payload.
  void save(std::ostream& os) const;
  static Tensor load(std::istream& is);

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Dtype dtype_ = Dtype::f64;
};

int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Throws if any element is NaN/Inf. Enabled in checked/test builds.
void check_finite(const Tensor& t, const char* where);

namespace ops {

// Forward kernels shared by the autograd layer and its backward rules.
// Shape validation lives here so both paths agree.
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched matmul over the leading axis of rank-3 tensors, with optional
// transposition of the trailing two axes.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b);
Tensor transpose2d(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);  // equal shapes or row-broadcast b
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, equal shapes
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);      // softmax over the last axis
Tensor log_softmax_rows(const Tensor& a);  // numerically stable
Tensor sum_all(const Tensor& a);           // -> scalar
Tensor mean_all(const Tensor& a);          // -> scalar
Tensor sum_axis0(const Tensor& a);         // [n, ...] -> [...]
Tensor mean_axis0(const Tensor& a);
Tensor mean_axis1(const Tensor& a);        // [B, T, d] -> [B, d]
Tensor concat(const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<int>& sizes);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& x);
Tensor smooth_l1(const Tensor& a, const Tensor& b);  // mean Huber, delta = 1
Tensor l1_loss(const Tensor& a, const Tensor& b);    // mean |a - b|
// x: [B, T, Cin], w: [K, Cin, Cout], b: [Cout]. Zero padding on both ends.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample2(const Tensor& x);  // [B, T, C] -> [B, 2T, C] nearest
double cosine_similarity(const Tensor& a, const Tensor& b);  // flat vectors
double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);

}  // namespace ops

}  // namespace mimicparts
