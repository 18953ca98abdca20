#include "mimicparts/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

namespace mimicparts {

namespace {

using MatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                              Eigen::RowMajor>>;
using MutMatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                           Eigen::RowMajor>>;

#ifdef NDEBUG
constexpr bool kCheckFinite = false;
#else
constexpr bool kCheckFinite = true;
#endif

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, Dtype dtype)
    : shape_(std::move(shape)), dtype_(dtype) {
  for (int d : shape_) MP_REQUIRE(d > 0, "tensor extents must be positive, got " + shape_to_string(shape_));
  MP_REQUIRE(static_cast<int64_t>(data.size()) == shape_numel(shape_),
             "tensor data length " + std::to_string(data.size()) +
                 " does not match shape " + shape_to_string(shape_));
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) {
  int64_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
  int64_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stdev) {
  int64_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (auto& v : d) v = rng.normal() * stdev;
  return Tensor(std::move(shape), std::move(d));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  int64_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(d));
}

Tensor Tensor::eye(int n) {
  std::vector<double> d(static_cast<int64_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) d[static_cast<int64_t>(i) * n + i] = 1.0;
  return Tensor({n, n}, std::move(d));
}

int Tensor::dim(int axis) const {
  MP_REQUIRE(axis >= 0 && axis < rank(), "axis out of range");
  return shape_[axis];
}

int64_t Tensor::numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

Tensor Tensor::as_dtype(Dtype dt) const {
  Tensor t = *this;
  t.dtype_ = dt;
  return t;
}

std::span<const double> Tensor::data() const {
  MP_REQUIRE(data_, "tensor is empty");
  return {data_->data(), data_->size()};
}

double Tensor::at(int64_t flat_index) const { return (*data_)[flat_index]; }

double Tensor::operator()(int i) const { return (*data_)[i]; }

double Tensor::operator()(int i, int j) const {
  return (*data_)[static_cast<int64_t>(i) * shape_.back() + j];
}

double Tensor::operator()(int i, int j, int k) const {
  int64_t stride1 = shape_[2];
  int64_t stride0 = static_cast<int64_t>(shape_[1]) * stride1;
  return (*data_)[i * stride0 + j * stride1 + k];
}

double Tensor::scalar_value() const {
  MP_REQUIRE(numel() == 1, "expected scalar tensor, got shape " + shape_str());
  return (*data_)[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  MP_REQUIRE(shape_numel(shape) == numel(),
             "reshape " + shape_str() + " -> " + shape_to_string(shape) + " changes element count");
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

bool Tensor::all_finite() const {
  if (!data_) return true;
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

void check_finite(const Tensor& t, const char* where) {
  if constexpr (kCheckFinite) {
    if (!t.all_finite()) {
      throw Error::internal(std::string("non-finite values produced by ") + where);
    }
  } else {
    (void)t;
    (void)where;
  }
}

namespace {

void write_raw(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_raw(std::istream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw Error::io("truncated tensor stream");
}

}  // namespace

void Tensor::save(std::ostream& os) const {
  MP_REQUIRE(data_, "cannot save empty tensor");
  write_raw(os, "MPT1", 4);
  uint8_t code = static_cast<uint8_t>(dtype_);
  uint8_t rank8 = static_cast<uint8_t>(rank());
  write_raw(os, &code, 1);
  write_raw(os, &rank8, 1);
  for (int d : shape_) {
    uint64_t e = static_cast<uint64_t>(d);
    write_raw(os, &e, 8);
  }
  if (dtype_ == Dtype::f64) {
    write_raw(os, data_->data(), data_->size() * sizeof(double));
  } else {
    std::vector<float> narrow(data_->begin(), data_->end());
    write_raw(os, narrow.data(), narrow.size() * sizeof(float));
  }
}

Tensor Tensor::load(std::istream& is) {
  char magic[4];
  read_raw(is, magic, 4);
  if (std::memcmp(magic, "MPT1", 4) != 0) throw Error::io("bad tensor magic");
  uint8_t code = 0, rank8 = 0;
  read_raw(is, &code, 1);
  read_raw(is, &rank8, 1);
  if (code > 1) throw Error::io("unknown tensor dtype code " + std::to_string(code));
  Shape shape(rank8);
  for (auto& d : shape) {
    uint64_t e = 0;
    read_raw(is, &e, 8);
    if (e == 0 || e > (1ULL << 31)) throw Error::io("bad tensor extent");
    d = static_cast<int>(e);
  }
  int64_t n = shape_numel(shape);
  std::vector<double> data(n);
  if (static_cast<Dtype>(code) == Dtype::f64) {
    read_raw(is, data.data(), n * sizeof(double));
  } else {
    std::vector<float> narrow(n);
    read_raw(is, narrow.data(), n * sizeof(float));
    std::copy(narrow.begin(), narrow.end(), data.begin());
  }
  return Tensor(std::move(shape), std::move(data), static_cast<Dtype>(code));
}

namespace ops {

namespace {

void require_finite_inputs(const Tensor& t, const char* op) {
  if constexpr (kCheckFinite) {
    if (!t.all_finite()) throw Error::validation(std::string("non-finite input to ") + op);
  }
}

Tensor make(Shape shape, std::vector<double> data, const char* op) {
  Tensor t(std::move(shape), std::move(data));
  check_finite(t, op);
  return t;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  MP_REQUIRE(a.rank() == 2 && b.rank() == 2,
             "matmul expects rank-2 operands, got " + a.shape_str() + " and " + b.shape_str());
  MP_REQUIRE(a.dim(1) == b.dim(0),
             "matmul inner dims differ: " + a.shape_str() + " vs " + b.shape_str());
  require_finite_inputs(a, "matmul");
  require_finite_inputs(b, "matmul");
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<int64_t>(m) * n);
  MatMap am(a.data().data(), m, k);
  MatMap bm(b.data().data(), k, n);
  MutMatMap cm(out.data(), m, n);
  cm.noalias() = am * bm;
  return make({m, n}, std::move(out), "matmul");
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  MP_REQUIRE(a.rank() == 3 && b.rank() == 3, "bmm expects rank-3 operands");
  MP_REQUIRE(a.dim(0) == b.dim(0), "bmm batch dims differ");
  require_finite_inputs(a, "bmm");
  require_finite_inputs(b, "bmm");
  int batch = a.dim(0);
  int m = trans_a ? a.dim(2) : a.dim(1);
  int ka = trans_a ? a.dim(1) : a.dim(2);
  int kb = trans_b ? b.dim(2) : b.dim(1);
  int n = trans_b ? b.dim(1) : b.dim(2);
  MP_REQUIRE(ka == kb, "bmm inner dims differ: " + a.shape_str() + " vs " + b.shape_str());
  std::vector<double> out(static_cast<int64_t>(batch) * m * n);
  int64_t sa = static_cast<int64_t>(a.dim(1)) * a.dim(2);
  int64_t sb = static_cast<int64_t>(b.dim(1)) * b.dim(2);
  for (int i = 0; i < batch; ++i) {
    MatMap am(a.data().data() + i * sa, a.dim(1), a.dim(2));
    MatMap bm(b.data().data() + i * sb, b.dim(1), b.dim(2));
    MutMatMap cm(out.data() + static_cast<int64_t>(i) * m * n, m, n);
    if (!trans_a && !trans_b)
      cm.noalias() = am * bm;
    else if (trans_a && !trans_b)
      cm.noalias() = am.transpose() * bm;
    else if (!trans_a && trans_b)
      cm.noalias() = am * bm.transpose();
    else
      cm.noalias() = am.transpose() * bm.transpose();
  }
  return make({batch, m, n}, std::move(out), "bmm");
}

Tensor transpose2d(const Tensor& a) {
  MP_REQUIRE(a.rank() == 2, "transpose expects rank-2");
  int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<int64_t>(m) * n);
  MatMap am(a.data().data(), m, n);
  MutMatMap cm(out.data(), n, m);
  cm = am.transpose();
  return make({n, m}, std::move(out), "transpose");
}

namespace {

// b may equal a's shape, or broadcast over a's leading axes: after dropping
// leading 1-extents, b's shape must equal a trailing slice of a's shape.
enum class AddMode { same, row };

AddMode add_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return AddMode::same;
  Shape bs = b.shape();
  while (!bs.empty() && bs.front() == 1) bs.erase(bs.begin());
  const Shape& as = a.shape();
  bool ok = !bs.empty() && bs.size() < as.size();
  if (ok) {
    for (size_t i = 0; i < bs.size(); ++i) {
      if (bs[i] != as[as.size() - bs.size() + i]) ok = false;
    }
  }
  MP_REQUIRE(ok, std::string(op) + " shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
  return AddMode::row;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_finite_inputs(a, "add");
  require_finite_inputs(b, "add");
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(av.begin(), av.end());
  if (add_mode(a, b, "add") == AddMode::same) {
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  } else {
    size_t d = bv.size();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i % d];
  }
  return make(a.shape(), std::move(out), "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_finite_inputs(a, "sub");
  require_finite_inputs(b, "sub");
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(av.begin(), av.end());
  if (add_mode(a, b, "sub") == AddMode::same) {
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  } else {
    size_t d = bv.size();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i % d];
  }
  return make(a.shape(), std::move(out), "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  MP_REQUIRE(a.same_shape(b), "mul shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
  require_finite_inputs(a, "mul");
  require_finite_inputs(b, "mul");
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make(a.shape(), std::move(out), "mul");
}

Tensor scale(const Tensor& a, double c) {
  require_finite_inputs(a, "scale");
  MP_REQUIRE(std::isfinite(c), "scale factor must be finite");
  auto av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return make(a.shape(), std::move(out), "scale");
}

Tensor add_scalar(const Tensor& a, double c) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  return make(a.shape(), std::move(out), "add_scalar");
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  require_finite_inputs(a, "exp");
  auto av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  return make(a.shape(), std::move(out), "exp");
}

Tensor log(const Tensor& a) {
  require_finite_inputs(a, "log");
  auto av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
  return make(a.shape(), std::move(out), "log");
}

Tensor sqrt(const Tensor& a) {
  require_finite_inputs(a, "sqrt");
  auto av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(av[i]);
  return make(a.shape(), std::move(out), "sqrt");
}

Tensor sin(const Tensor& a) {
  require_finite_inputs(a, "sin");
  auto av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::sin(av[i]);
  return make(a.shape(), std::move(out), "sin");
}

Tensor gelu(const Tensor& a) {
  require_finite_inputs(a, "gelu");
  auto av = a.data();
  std::vector<double> out(av.size());
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
  }
  return make(a.shape(), std::move(out), "gelu");
}

Tensor softmax_rows(const Tensor& a) {
  require_finite_inputs(a, "softmax");
  int d = a.shape().back();
  auto av = a.data();
  std::vector<double> out(av.size());
  for (size_t r = 0; r < av.size(); r += d) {
    double mx = av[r];
    for (int j = 1; j < d; ++j) mx = std::max(mx, av[r + j]);
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      out[r + j] = std::exp(av[r + j] - mx);
      sum += out[r + j];
    }
    for (int j = 0; j < d; ++j) out[r + j] /= sum;
  }
  return make(a.shape(), std::move(out), "softmax");
}

Tensor log_softmax_rows(const Tensor& a) {
  require_finite_inputs(a, "log_softmax");
  int d = a.shape().back();
  auto av = a.data();
  std::vector<double> out(av.size());
  for (size_t r = 0; r < av.size(); r += d) {
    double mx = av[r];
    for (int j = 1; j < d; ++j) mx = std::max(mx, av[r + j]);
    double sum = 0.0;
    for (int j = 0; j < d; ++j) sum += std::exp(av[r + j] - mx);
    double lse = mx + std::log(sum);
    for (int j = 0; j < d; ++j) out[r + j] = av[r + j] - lse;
  }
  return make(a.shape(), std::move(out), "log_softmax");
}

Tensor sum_all(const Tensor& a) {
  require_finite_inputs(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make({1}, {s}, "sum");
}

Tensor mean_all(const Tensor& a) {
  require_finite_inputs(a, "mean");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make({1}, {s / static_cast<double>(a.numel())}, "mean");
}

Tensor sum_axis0(const Tensor& a) {
  MP_REQUIRE(a.rank() >= 2, "sum_axis0 expects rank >= 2");
  require_finite_inputs(a, "sum_axis0");
  int n = a.dim(0);
  int64_t inner = a.numel() / n;
  auto av = a.data();
  std::vector<double> out(inner, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int64_t j = 0; j < inner; ++j) out[j] += av[i * inner + j];
  }
  Shape s(a.shape().begin() + 1, a.shape().end());
  return make(std::move(s), std::move(out), "sum_axis0");
}

Tensor mean_axis0(const Tensor& a) {
  Tensor s = sum_axis0(a);
  return scale(s, 1.0 / a.dim(0));
}

Tensor mean_axis1(const Tensor& a) {
  MP_REQUIRE(a.rank() == 3, "mean_axis1 expects rank-3");
  require_finite_inputs(a, "mean_axis1");
  int B = a.dim(0), T = a.dim(1), d = a.dim(2);
  auto av = a.data();
  std::vector<double> out(static_cast<int64_t>(B) * d, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < T; ++t) {
      const double* src = av.data() + (static_cast<int64_t>(b) * T + t) * d;
      double* dst = out.data() + static_cast<int64_t>(b) * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  }
  for (auto& v : out) v /= T;
  return make({B, d}, std::move(out), "mean_axis1");
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  MP_REQUIRE(!parts.empty(), "concat of zero tensors");
  int rank = parts[0].rank();
  MP_REQUIRE(axis >= 0 && axis < rank, "concat axis out of range");
  for (const auto& p : parts) {
    MP_REQUIRE(p.rank() == rank, "concat rank mismatch");
    for (int ax = 0; ax < rank; ++ax) {
      MP_REQUIRE(ax == axis || p.dim(ax) == parts[0].dim(ax),
                 "concat off-axis extent mismatch: " + p.shape_str() + " vs " +
                     parts[0].shape_str());
    }
    require_finite_inputs(p, "concat");
  }
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) total += p.dim(axis);
  out_shape[axis] = total;

  int64_t outer = 1;
  for (int ax = 0; ax < axis; ++ax) outer *= out_shape[ax];
  int64_t inner = 1;
  for (int ax = axis + 1; ax < rank; ++ax) inner *= out_shape[ax];

  std::vector<double> out(shape_numel(out_shape));
  int64_t out_row = static_cast<int64_t>(total) * inner;
  int64_t offset = 0;
  for (const auto& p : parts) {
    int64_t chunk = static_cast<int64_t>(p.dim(axis)) * inner;
    auto pv = p.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(pv.begin() + o * chunk, pv.begin() + (o + 1) * chunk,
                out.begin() + o * out_row + offset);
    }
    offset += chunk;
  }
  return make(std::move(out_shape), std::move(out), "concat");
}

std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<int>& sizes) {
  MP_REQUIRE(axis >= 0 && axis < a.rank(), "split axis out of range");
  int total = 0;
  for (int s : sizes) {
    MP_REQUIRE(s > 0, "split sizes must be positive");
    total += s;
  }
  MP_REQUIRE(total == a.dim(axis),
             "split sizes sum to " + std::to_string(total) + " but axis extent is " +
                 std::to_string(a.dim(axis)));
  int64_t outer = 1;
  for (int ax = 0; ax < axis; ++ax) outer *= a.dim(ax);
  int64_t inner = 1;
  for (int ax = axis + 1; ax < a.rank(); ++ax) inner *= a.dim(ax);
  int64_t in_row = static_cast<int64_t>(a.dim(axis)) * inner;

  auto av = a.data();
  std::vector<Tensor> out;
  out.reserve(sizes.size());
  int64_t offset = 0;
  for (int s : sizes) {
    Shape shp = a.shape();
    shp[axis] = s;
    int64_t chunk = static_cast<int64_t>(s) * inner;
    std::vector<double> d(outer * chunk);
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(av.begin() + o * in_row + offset, av.begin() + o * in_row + offset + chunk,
                d.begin() + o * chunk);
    }
    out.push_back(make(std::move(shp), std::move(d), "split"));
    offset += chunk;
  }
  return out;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  int d = x.shape().back();
  MP_REQUIRE(gain.numel() == d && bias.numel() == d,
             "layer_norm gain/bias must have " + std::to_string(d) + " elements");
  require_finite_inputs(x, "layer_norm");
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<double> out(xv.size());
  for (size_t r = 0; r < xv.size(); r += d) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xv[r + j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = xv[r + j] - mean;
      var += c * c;
    }
    var /= d;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) {
      out[r + j] = gv[j] * ((xv[r + j] - mean) * inv) + bv[j];
    }
  }
  return make(x.shape(), std::move(out), "layer_norm");
}

Tensor l2_normalize_rows(const Tensor& x) {
  require_finite_inputs(x, "l2_normalize");
  int d = x.shape().back();
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (size_t r = 0; r < xv.size(); r += d) {
    double ss = 0.0;
    for (int j = 0; j < d; ++j) ss += xv[r + j] * xv[r + j];
    if (ss == 0.0) throw Error::validation("l2_normalize: zero-norm row");
    double inv = 1.0 / std::sqrt(ss);
    for (int j = 0; j < d; ++j) out[r + j] = xv[r + j] * inv;
  }
  return make(x.shape(), std::move(out), "l2_normalize");
}

Tensor smooth_l1(const Tensor& a, const Tensor& b) {
  MP_REQUIRE(a.same_shape(b), "smooth_l1 shape mismatch");
  require_finite_inputs(a, "smooth_l1");
  require_finite_inputs(b, "smooth_l1");
  auto av = a.data();
  auto bv = b.data();
  double s = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    double d = av[i] - bv[i];
    double ad = std::abs(d);
    s += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
  }
  return make({1}, {s / static_cast<double>(av.size())}, "smooth_l1");
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
  MP_REQUIRE(a.same_shape(b), "l1_loss shape mismatch");
  require_finite_inputs(a, "l1_loss");
  require_finite_inputs(b, "l1_loss");
  auto av = a.data();
  auto bv = b.data();
  double s = 0.0;
  for (size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  return make({1}, {s / static_cast<double>(av.size())}, "l1_loss");
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  MP_REQUIRE(x.rank() == 3, "conv1d expects input [B, T, Cin]");
  MP_REQUIRE(w.rank() == 3, "conv1d expects kernel [K, Cin, Cout]");
  MP_REQUIRE(stride >= 1 && pad >= 0, "conv1d stride/pad invalid");
  int B = x.dim(0), T = x.dim(1), cin = x.dim(2);
  int K = w.dim(0), cout = w.dim(2);
  MP_REQUIRE(w.dim(1) == cin, "conv1d channel mismatch: input " + x.shape_str() +
                                  " kernel " + w.shape_str());
  MP_REQUIRE(b.numel() == cout, "conv1d bias size mismatch");
  int t_out = (T + 2 * pad - K) / stride + 1;
  MP_REQUIRE(t_out >= 1, "conv1d output length would be empty");
  require_finite_inputs(x, "conv1d");
  require_finite_inputs(w, "conv1d");
  require_finite_inputs(b, "conv1d");

  // im2col + one GEMM over the whole batch.
  int64_t rows = static_cast<int64_t>(B) * t_out;
  int64_t cols = static_cast<int64_t>(K) * cin;
  std::vector<double> col(rows * cols, 0.0);
  auto xv = x.data();
  for (int bi = 0; bi < B; ++bi) {
    const double* xb = xv.data() + static_cast<int64_t>(bi) * T * cin;
    for (int t = 0; t < t_out; ++t) {
      double* dst = col.data() + (static_cast<int64_t>(bi) * t_out + t) * cols;
      int t0 = t * stride - pad;
      for (int k = 0; k < K; ++k) {
        int src = t0 + k;
        if (src < 0 || src >= T) continue;
        std::memcpy(dst + static_cast<int64_t>(k) * cin, xb + static_cast<int64_t>(src) * cin,
                    sizeof(double) * cin);
      }
    }
  }
  std::vector<double> out(rows * cout);
  {
    MatMap cm(col.data(), rows, cols);
    MatMap wm(w.data().data(), cols, cout);
    MutMatMap om(out.data(), rows, cout);
    om.noalias() = cm * wm;
  }
  auto bv = b.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int c = 0; c < cout; ++c) out[r * cout + c] += bv[c];
  }
  return make({B, t_out, cout}, std::move(out), "conv1d");
}

Tensor upsample2(const Tensor& x) {
  MP_REQUIRE(x.rank() == 3, "upsample2 expects [B, T, C]");
  int B = x.dim(0), T = x.dim(1), C = x.dim(2);
  auto xv = x.data();
  std::vector<double> out(static_cast<int64_t>(B) * 2 * T * C);
  for (int bi = 0; bi < B; ++bi) {
    for (int t = 0; t < T; ++t) {
      const double* src = xv.data() + (static_cast<int64_t>(bi) * T + t) * C;
      double* d0 = out.data() + (static_cast<int64_t>(bi) * 2 * T + 2 * t) * C;
      std::memcpy(d0, src, sizeof(double) * C);
      std::memcpy(d0 + C, src, sizeof(double) * C);
    }
  }
  return make({B, 2 * T, C}, std::move(out), "upsample2");
}

double dot(const Tensor& a, const Tensor& b) {
  MP_REQUIRE(a.numel() == b.numel(), "dot length mismatch");
  auto av = a.data();
  auto bv = b.data();
  double s = 0.0;
  for (size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return s;
}

double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double cosine_similarity(const Tensor& a, const Tensor& b) {
  double na = l2_norm(a), nb = l2_norm(b);
  MP_REQUIRE(na > 0.0 && nb > 0.0, "cosine similarity undefined for zero-norm input");
  return dot(a, b) / (na * nb);
}

}  // namespace ops

}  // namespace mimicparts
