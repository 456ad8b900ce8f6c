#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "poolbert/error.hpp"
#include "poolbert/ops.hpp"
#include "poolbert/tensor.hpp"

using namespace poolbert;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, float scale = 1.0f, bool requires_grad = true) {
  std::vector<float> values(shape_numel(shape));
  for (float& v : values) v = static_cast<float>(rng.normal()) * scale;
  return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

}  // namespace

TEST_SUITE("core-tensor") {

TEST_CASE("tensor construction checks element count") {
  CHECK_THROWS_AS(Tensor::from({2, 3}, std::vector<float>(5)), DimensionError);
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    Rng rng(1);
    Tensor a = random_tensor({3, 4}, rng, 1.0f, false);
    std::vector<float> eye(16, 0.0f);
    for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0f;
    Tensor c = ops::matmul(a, Tensor::from({4, 4}, eye));
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(c.at(i) == a.at(i));
  }
  SUBCASE("hand product") {
    Tensor c = ops::matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {1, 1}));
    CHECK(c.shape() == Shape{2, 1});
    CHECK(c.at(0) == 3.0f);
    CHECK(c.at(1) == 7.0f);
  }
  SUBCASE("inner dimension mismatch") {
    CHECK_THROWS_AS(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})), DimensionError);
  }
}

TEST_CASE("softmax") {
  SUBCASE("uniform logits") {
    Tensor y = ops::softmax(Tensor::from({3}, {0, 0, 0}), 0);
    for (float v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
  }
  SUBCASE("closed form [0, ln 3]") {
    Tensor y = ops::softmax(Tensor::from({2}, {0.0f, std::log(3.0f)}), 0);
    CHECK(y.at(0) == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(y.at(1) == doctest::Approx(0.75).epsilon(1e-6));
  }
  SUBCASE("rows sum to one and shift invariance") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
      Tensor x = random_tensor({4, 9}, rng, 5.0f, false);
      Tensor y = ops::softmax(x, 1);
      std::vector<float> shifted(x.data().begin(), x.data().end());
      const float c = static_cast<float>(rng.normal() * 10.0);
      for (float& v : shifted) v += c;
      Tensor ys = ops::softmax(Tensor::from({4, 9}, shifted), 1);
      for (std::size_t r = 0; r < 4; ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
          CHECK(y.at(r * 9 + j) >= 0.0f);
          total += y.at(r * 9 + j);
          CHECK(ys.at(r * 9 + j) == doctest::Approx(y.at(r * 9 + j)).epsilon(1e-5));
        }
        CHECK(std::abs(total - 1.0) <= 1e-6);
      }
    }
  }
  SUBCASE("non-last axis") {
    Tensor y = ops::softmax(Tensor::from({2, 2}, {0.0f, 5.0f, std::log(3.0f), 5.0f}), 0);
    CHECK(y.at(0) == doctest::Approx(0.25));
    CHECK(y.at(2) == doctest::Approx(0.75));
    CHECK(y.at(1) == doctest::Approx(0.5));
  }
  SUBCASE("extreme logits stay finite") {
    CheckedModeScope checked;
    Tensor y = ops::softmax(Tensor::from({3}, {1000.0f, -1000.0f, 999.0f}), 0);
    CHECK(y.at(1) == 0.0f);
  }
}

TEST_CASE("layer_norm") {
  Tensor ones = Tensor::full({4}, 1.0f);
  SUBCASE("constant row normalises to zero") {
    Tensor y = ops::layer_norm(Tensor::full({1, 4}, 5.0f), ones, Tensor::zeros({4}), 1e-12f);
    for (float v : y.data()) CHECK(v == 0.0f);
  }
  SUBCASE("constant row returns beta") {
    Tensor y = ops::layer_norm(Tensor::full({1, 4}, 5.0f), ones, Tensor::from({4}, {1, 2, 3, 4}), 1e-12f);
    CHECK(std::vector<float>(y.data().begin(), y.data().end()) == std::vector<float>{1, 2, 3, 4});
  }
  SUBCASE("two-element row") {
    Tensor y = ops::layer_norm(Tensor::from({1, 2}, {1, 3}), Tensor::full({2}, 1.0f),
                               Tensor::zeros({2}), 1e-12f);
    CHECK(y.at(0) == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("parameter checks") {
    CHECK_THROWS_AS(ops::layer_norm(Tensor::zeros({1, 4}), ones, Tensor::zeros({4}), 0.0f), ParameterError);
    CHECK_THROWS_AS(ops::layer_norm(Tensor::zeros({1, 3}), ones, Tensor::zeros({4}), 1e-5f), DimensionError);
  }
}

TEST_CASE("gelu") {
  const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));  // Gaussian CDF at 1
  for (auto kind : {ops::GeluKind::tanh_approx, ops::GeluKind::exact_erf}) {
    Tensor y = ops::gelu(Tensor::from({3}, {0.0f, 10.0f, 1.0f}), kind);
    CHECK(y.at(0) == 0.0f);
    CHECK(std::abs(y.at(1) - 10.0f) < 1e-4);
    const double tol = kind == ops::GeluKind::exact_erf ? 1e-6 : 1e-3;
    CHECK(std::abs(y.at(2) - phi1) < tol);
  }
  CHECK(std::abs(phi1 - 0.841345) < 1e-6);
}

TEST_CASE("dropout") {
  Rng rng(3);
  Tensor x = Tensor::full({100000}, 2.0f);
  SUBCASE("rate zero is identity") {
    Tensor y = ops::dropout(x, 0.0f, true, rng);
    CHECK(std::equal(y.data().begin(), y.data().end(), x.data().begin()));
  }
  SUBCASE("eval mode is identity") {
    Tensor y = ops::dropout(x, 0.7f, false, rng);
    CHECK(std::equal(y.data().begin(), y.data().end(), x.data().begin()));
  }
  SUBCASE("inverted scaling preserves the mean") {
    Tensor y = ops::dropout(x, 0.5f, true, rng);
    double total = 0.0;
    std::size_t zeros = 0;
    for (float v : y.data()) {
      total += v;
      zeros += v == 0.0f;
    }
    CHECK(std::abs(total / 100000.0 - 2.0) / 2.0 < 0.05);
    CHECK(zeros > 45000);
    CHECK(zeros < 55000);
  }
  SUBCASE("invalid rate") {
    CHECK_THROWS_AS(ops::dropout(x, 1.0f, true, rng), ParameterError);
    CHECK_THROWS_AS(ops::dropout(x, -0.1f, true, rng), ParameterError);
  }
}

TEST_CASE("backward") {
  SUBCASE("sum gives ones") {
    Tensor x = Tensor::from({2, 3}, {1, -2, 3, 4, 5, -6}, true);
    Tape tape;
    {
      TapeScope scope(tape);
      backward(ops::sum(x), tape);
    }
    for (float g : x.grad()) CHECK(g == 1.0f);
  }
  SUBCASE("sum of squares gives 2x") {
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = ops::sum(ops::mul(x, x));
    tape.backward(loss);
    CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{2, 4, 6});
  }
  SUBCASE("reuse accumulates") {
    Tensor x = Tensor::from({4}, {1, 2, 3, 4}, true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::add(x, x)));
    for (float g : x.grad()) CHECK(g == 2.0f);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    CHECK_THROWS_AS(tape.backward(ops::scale(x, 2.0f)), ContractError);
  }
  SUBCASE("second backward on the same tape is rejected") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = ops::sum(ops::mul(x, x));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
    CHECK(x.grad()[1] == 4.0f);  // unchanged by the rejected call
  }
  SUBCASE("no tape means no recording") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor y = ops::mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_CASE("checked mode flags non-finite values") {
  CheckedModeScope checked;
  CHECK_THROWS_AS(ops::log(Tensor::from({2}, {1.0f, 0.0f})), NumericError);
  CHECK_NOTHROW(ops::log(Tensor::from({2}, {1.0f, 2.0f})));
}

TEST_CASE("concat and gather route gradients to their sources") {
  Tensor p = Tensor::from({2, 1}, {1, 2}, true);
  Tensor q = Tensor::from({2, 2}, {3, 4, 5, 6}, true);
  Tape tape;
  TapeScope scope(tape);
  std::vector<Tensor> parts{p, q};
  Tensor c = ops::concat_last(parts);
  CHECK(std::vector<float>(c.data().begin(), c.data().end()) == std::vector<float>{1, 3, 4, 2, 5, 6});
  std::vector<std::size_t> rows{1, 1};
  Tensor g = ops::gather_rows(c, rows);
  tape.backward(ops::sum(g));
  CHECK(std::vector<float>(p.grad().begin(), p.grad().end()) == std::vector<float>{0, 2});
  CHECK(std::vector<float>(q.grad().begin(), q.grad().end()) == std::vector<float>{0, 0, 2, 2});
}

}  // TEST_SUITE
