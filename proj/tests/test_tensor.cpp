#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mimicparts/tensor.hpp"
#include "test_util.hpp"

using namespace mimicparts;

TEST_CASE("smooth_l1 branch values") {
  Tensor x = Tensor::scalar(0.5), y = Tensor::scalar(0.0);
  CHECK(ops::smooth_l1(x, y).scalar_value() == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(ops::smooth_l1(Tensor::scalar(3.0), y).scalar_value() ==
        doctest::Approx(2.5).epsilon(1e-12));
  // Symmetric in sign of the difference.
  CHECK(ops::smooth_l1(y, Tensor::scalar(3.0)).scalar_value() ==
        doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("softmax of a constant row is uniform and rows sum to one") {
  Tensor p = ops::softmax_rows(Tensor({3}, {0.0, 0.0, 0.0}));
  for (int j = 0; j < 3; ++j) CHECK(p(j) == doctest::Approx(1.0 / 3).epsilon(1e-15));

  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = Tensor::randn({4, 9}, rng, 3.0);
    Tensor s = ops::softmax_rows(x);
    for (int i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (int j = 0; j < 9; ++j) sum += s(i, j);
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("matmul with identity is exact") {
  Rng rng(11);
  Tensor a = Tensor::randn({5, 8}, rng);
  Tensor out = ops::matmul(a, Tensor::eye(8));
  CHECK(mptest::bitwise_equal(a, out));
}

TEST_CASE("matmul shape validation") {
  Rng rng(1);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({5, 2}, rng);
  CHECK_THROWS_AS((void)ops::matmul(a, b), Error);
}

TEST_CASE("concat then split is the identity for any valid spec") {
  Rng rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    int axis = rng.uniform_int(0, 1);
    int n_parts = rng.uniform_int(1, 4);
    std::vector<int> sizes;
    for (int i = 0; i < n_parts; ++i) sizes.push_back(rng.uniform_int(1, 5));
    int other = rng.uniform_int(1, 6);
    std::vector<Tensor> parts;
    for (int s : sizes) {
      Shape shape = axis == 0 ? Shape{s, other} : Shape{other, s};
      parts.push_back(Tensor::randn(shape, rng));
    }
    Tensor whole = ops::concat(parts, axis);
    auto back = ops::split(whole, axis, sizes);
    REQUIRE(back.size() == parts.size());
    for (size_t i = 0; i < parts.size(); ++i) CHECK(mptest::bitwise_equal(parts[i], back[i]));
  }
}

TEST_CASE("bmm matches per-item matmul") {
  Rng rng(3);
  Tensor a = Tensor::randn({4, 3, 5}, rng);
  Tensor b = Tensor::randn({4, 5, 2}, rng);
  Tensor c = ops::bmm(a, b, false, false);
  for (int i = 0; i < 4; ++i) {
    auto ai = ops::split(a, 0, {1, 1, 1, 1})[i].reshaped({3, 5});
    auto bi = ops::split(b, 0, {1, 1, 1, 1})[i].reshaped({5, 2});
    Tensor ci = ops::matmul(ai, bi);
    auto got = ops::split(c, 0, {1, 1, 1, 1})[i].reshaped({3, 2});
    CHECK(mptest::max_abs_diff(ci, got) == 0.0);
  }
  // Transposed variants agree with explicit transposition.
  Tensor at = Tensor::randn({2, 5, 3}, rng);
  Tensor bt = Tensor::randn({2, 5, 4}, rng);
  Tensor r1 = ops::bmm(at, bt, true, false);
  CHECK(r1.shape() == Shape{2, 3, 4});
}

TEST_CASE("layer_norm normalizes rows") {
  Rng rng(5);
  Tensor x = Tensor::randn({6, 16}, rng, 4.0);
  Tensor gain = Tensor::full({16}, 1.0);
  Tensor bias = Tensor::zeros({16});
  Tensor y = ops::layer_norm_rows(x, gain, bias);
  for (int i = 0; i < 6; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 16; ++j) mean += y(i, j);
    mean /= 16;
    for (int j = 0; j < 16; ++j) var += (y(i, j) - mean) * (y(i, j) - mean);
    var /= 16;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("l2_normalize rejects zero rows") {
  Tensor x({2, 3}, {1, 2, 3, 0, 0, 0});
  CHECK_THROWS_AS((void)ops::l2_normalize_rows(x), Error);
}

TEST_CASE("non-finite values detected eagerly in checked builds") {
  std::vector<double> d{1.0, std::numeric_limits<double>::quiet_NaN()};
  Tensor with_nan({2}, d);
  Tensor ok({2}, {1.0, 2.0});
  CHECK_THROWS_AS((void)ops::add(with_nan, ok), Error);
  // Overflow is caught on the output side.
  CHECK_THROWS_AS((void)ops::exp(Tensor({1}, {1e9})), Error);
}

TEST_CASE("MPT1 round-trip preserves f64 payload bitwise") {
  Rng rng(9);
  Tensor t = Tensor::randn({3, 4, 2}, rng);
  std::stringstream ss;
  t.save(ss);
  Tensor back = Tensor::load(ss);
  CHECK(back.shape() == t.shape());
  CHECK(mptest::bitwise_equal(t, back));
  CHECK(back.dtype() == Dtype::f64);
}

TEST_CASE("MPT1 f32 mode narrows storage") {
  Rng rng(10);
  Tensor t = Tensor::randn({5, 5}, rng).as_dtype(Dtype::f32);
  std::stringstream ss;
  t.save(ss);
  Tensor back = Tensor::load(ss);
  CHECK(back.dtype() == Dtype::f32);
  CHECK(mptest::max_abs_diff(t, back) < 1e-6);
  // f32 stream is smaller than the f64 one.
  std::stringstream ss64;
  t.as_dtype(Dtype::f64).save(ss64);
  CHECK(ss.str().size() < ss64.str().size());
}

TEST_CASE("MPT1 rejects bad magic and truncation") {
  std::stringstream ss("XXXXgarbage");
  CHECK_THROWS_AS((void)Tensor::load(ss), Error);

  Rng rng(2);
  Tensor t = Tensor::randn({4, 4}, rng);
  std::stringstream full;
  t.save(full);
  std::string bytes = full.str();
  std::stringstream cut(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS((void)Tensor::load(cut), Error);
}

TEST_CASE("reshape shares data and validates element count") {
  Rng rng(4);
  Tensor t = Tensor::randn({2, 6}, rng);
  Tensor r = t.reshaped({3, 4});
  CHECK(r(2, 3) == t(1, 5));
  CHECK_THROWS_AS((void)t.reshaped({5, 5}), Error);
}

TEST_CASE("conv1d shapes and padding") {
  Rng rng(6);
  Tensor x = Tensor::randn({2, 8, 3}, rng);
  Tensor w = Tensor::randn({3, 3, 5}, rng);
  Tensor b = Tensor::zeros({5});
  CHECK(ops::conv1d(x, w, b, 1, 1).shape() == Shape{2, 8, 5});
  CHECK(ops::conv1d(x, w, b, 2, 1).shape() == Shape{2, 4, 5});

  // Hand-checked single-channel case: kernel [1,2,1], x = ramp.
  Tensor x1({1, 4, 1}, {1, 2, 3, 4});
  Tensor w1({3, 1, 1}, {1, 2, 1});
  Tensor out = ops::conv1d(x1, w1, Tensor::zeros({1}), 1, 1);
  CHECK(out(0, 0, 0) == doctest::Approx(4));   // 0*1 + 1*2 + 2*1
  CHECK(out(0, 1, 0) == doctest::Approx(8));   // 1 + 4 + 3
  CHECK(out(0, 3, 0) == doctest::Approx(11));  // 3 + 8 + 0
}

TEST_CASE("upsample2 doubles length") {
  Tensor x({1, 2, 2}, {1, 2, 3, 4});
  Tensor u = ops::upsample2(x);
  CHECK(u.shape() == Shape{1, 4, 2});
  CHECK(u(0, 0, 0) == 1);
  CHECK(u(0, 1, 0) == 1);
  CHECK(u(0, 2, 1) == 4);
}
