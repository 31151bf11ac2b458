#include <doctest.h>

#include <cmath>

#include "permfree/tensor.hpp"

using namespace permfree;

namespace {

Tensor rand_tensor(const Shape& s, SplitRng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform(s, lo, hi, rng);
}

}  // namespace

TEST_CASE("construction and shape invariants") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 6.0);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), NumericError);
  CHECK(Tensor::scalar(5.0).item() == 5.0);
}

TEST_CASE("logsumexp of two ln(0.5) terms is zero") {
  Tensor x({2}, {std::log(0.5), std::log(0.5)});
  CHECK(logsumexp(x).item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("softmax of constants is uniform and rows sum to one") {
  Tensor x({3}, {0, 0, 0});
  Tensor s = softmax(x);
  for (int i = 0; i < 3; ++i) CHECK(s.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  SplitRng rng(7);
  Tensor m = rand_tensor({4, 5}, rng, -3, 3);
  Tensor sm = softmax(m);
  for (int r = 0; r < 4; ++r) {
    double rowsum = 0;
    for (int c = 0; c < 5; ++c) rowsum += sm.at(r, c);
    CHECK(std::abs(rowsum - 1.0) < 1e-12);
  }
  // log_softmax agrees with log of softmax
  Tensor lsm = log_softmax(m);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 5; ++c) {
      CHECK(std::abs(lsm.at(r, c) - std::log(sm.at(r, c))) < 1e-9);
    }
  }
}

TEST_CASE("matmul of ones") {
  Tensor a = Tensor::full({2, 3}, 1.0);
  Tensor b = Tensor::full({3, 2}, 1.0);
  Tensor c = matmul(a, b);
  for (int i = 0; i < 4; ++i) CHECK(c.value()[i] == 3.0);
  CHECK_THROWS_WITH_AS(matmul(a, a), doctest::Contains("matmul"), NumericError);
}

TEST_CASE("backward of sum gives ones") {
  clear_tape();
  Tensor x({3}, {4, 5, 6}, true);
  backward(sum(x));
  CHECK(x.grad() == std::vector<double>{1, 1, 1});
}

TEST_CASE("backward of sum of squares gives 2x") {
  clear_tape();
  Tensor x({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  CHECK(x.grad() == std::vector<double>{2, 4});
}

TEST_CASE("backward errors") {
  clear_tape();
  Tensor x({2}, {1, 2}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), NumericError);  // not scalar
  Tensor loss = sum(y);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), NumericError);  // tape consumed
  clear_tape();
}

TEST_CASE("gradient accumulation equals duplicated-leaf construction") {
  clear_tape();
  Tensor x({3}, {0.3, -0.7, 1.1}, true);
  backward(sum(mul(x, tanh(x))));
  std::vector<double> shared_grad = x.grad();

  clear_tape();
  Tensor x1({3}, {0.3, -0.7, 1.1}, true);
  Tensor x2({3}, {0.3, -0.7, 1.1}, true);
  backward(sum(mul(x1, tanh(x2))));
  for (int i = 0; i < 3; ++i) {
    CHECK(shared_grad[i] == doctest::Approx(x1.grad()[i] + x2.grad()[i]).epsilon(1e-12));
  }
}

TEST_CASE("non-finite forward output raises") {
  Tensor z = Tensor::zeros({2});
  CHECK_THROWS_AS(log(z), NumericError);
}

TEST_CASE("grad_check on linear function is exact") {
  SplitRng rng(11);
  Tensor x = rand_tensor({4}, rng);
  CHECK(grad_check([](const Tensor& t) { return sum(t); }, x) < 1e-10);
}

TEST_CASE("grad_check on sum of tanh") {
  SplitRng rng(12);
  Tensor x = rand_tensor({6}, rng);
  CHECK(grad_check([](const Tensor& t) { return sum(tanh(t)); }, x) < 1e-6);
}

TEST_CASE("grad_check across every op") {
  SplitRng rng(13);
  auto check = [&](const char* name, const std::function<Tensor(const Tensor&)>& f,
                   const Tensor& x, double tol = 1e-6) {
    INFO(name);
    CHECK(grad_check(f, x) < tol);
  };

  check("add.same", [&](const Tensor& t) { return sum(add(t, scale(t, 0.5))); },
        rand_tensor({3, 2}, rng));
  {
    Tensor m = rand_tensor({3, 4}, rng);
    check("add.rowvec.bias", [&](const Tensor& t) { return sum(tanh(add(m, t))); },
          rand_tensor({4}, rng));
  }
  check("add.scalar", [&](const Tensor& t) { return sum(mul(t, t)); }, rand_tensor({}, rng));
  check("sub", [&](const Tensor& t) { return sum(mul(sub(t, scale(t, 2.0)), t)); },
        rand_tensor({5}, rng));
  check("mul", [&](const Tensor& t) { return sum(mul(t, sigmoid(t))); }, rand_tensor({7}, rng));
  check("tanh", [&](const Tensor& t) { return mean(tanh(t)); }, rand_tensor({4, 3}, rng));
  check("sigmoid", [&](const Tensor& t) { return mean(sigmoid(t)); }, rand_tensor({6}, rng));
  check("relu", [&](const Tensor& t) { return sum(relu(t)); },
        rand_tensor({8}, rng, 0.2, 1.0));  // keep clear of the kink
  check("exp", [&](const Tensor& t) { return sum(exp(t)); }, rand_tensor({5}, rng));
  check("log", [&](const Tensor& t) { return sum(log(t)); }, rand_tensor({5}, rng, 0.5, 2.0));
  {
    Tensor b = rand_tensor({3, 2}, rng);
    check("matmul", [&](const Tensor& t) { return sum(tanh(matmul(t, b))); },
          rand_tensor({2, 3}, rng));
    check("matmul.rhs", [&](const Tensor& t) { return sum(tanh(matmul(b, t))); },
          rand_tensor({2, 3}, rng));
  }
  {
    Tensor v = rand_tensor({3}, rng);
    check("matvec", [&](const Tensor& t) { return sum(sigmoid(matvec(t, v))); },
          rand_tensor({4, 3}, rng));
  }
  {
    Tensor b = rand_tensor({2, 3}, rng);
    check("concat.axis0", [&](const Tensor& t) { return sum(tanh(concat(t, b, 0))); },
          rand_tensor({2, 3}, rng));
    check("concat.axis1", [&](const Tensor& t) { return sum(tanh(concat(b, t, 1))); },
          rand_tensor({2, 2}, rng));
    check("concat.1d", [&](const Tensor& t) { return logsumexp(concat(t, row(b, 0), 0)); },
          rand_tensor({3}, rng));
  }
  check("stack_rows", [&](const Tensor& t) {
    std::vector<Tensor> rows = {row(t, 0), row(t, 1), row(t, 0)};
    return sum(tanh(stack_rows(rows)));
  }, rand_tensor({2, 3}, rng));
  check("slice.rows", [&](const Tensor& t) { return sum(mul(slice(t, 0, 1, 2), slice(t, 0, 0, 2))); },
        rand_tensor({3, 2}, rng));
  check("slice.cols", [&](const Tensor& t) { return sum(tanh(slice(t, 1, 1, 2))); },
        rand_tensor({2, 4}, rng));
  check("row.elem", [&](const Tensor& t) { return elem(tanh(row(t, 1)), 2); },
        rand_tensor({3, 4}, rng));
  check("reshape", [&](const Tensor& t) { return sum(mul(reshape(t, {6}), reshape(t, {6}))); },
        rand_tensor({2, 3}, rng));
  check("softmax", [&](const Tensor& t) { return sum(mul(softmax(t), t)); },
        rand_tensor({2, 4}, rng));
  check("log_softmax", [&](const Tensor& t) { return mean(log_softmax(t)); },
        rand_tensor({5}, rng));
  check("logsumexp.1d", [&](const Tensor& t) { return logsumexp(t); }, rand_tensor({6}, rng));
  check("logsumexp.2d", [&](const Tensor& t) { return sum(logsumexp(t)); },
        rand_tensor({3, 4}, rng));
  check("mean", [&](const Tensor& t) { return mean(mul(t, t)); }, rand_tensor({5}, rng));
  {
    Tensor w = rand_tensor({2, 1, 3, 3}, rng, -0.5, 0.5);
    Tensor b = rand_tensor({2}, rng);
    check("conv2d.x", [&](const Tensor& t) { return sum(tanh(conv2d(t, w, b))); },
          rand_tensor({1, 4, 5}, rng), 1e-5);
    Tensor img = rand_tensor({1, 4, 5}, rng);
    check("conv2d.w", [&](const Tensor& t) { return sum(tanh(conv2d(img, t, b))); }, w, 1e-5);
    check("conv2d.b", [&](const Tensor& t) { return sum(tanh(conv2d(img, w, t))); }, b, 1e-5);
  }
  check("maxpool2d", [&](const Tensor& t) { return sum(maxpool2d(t, 2, 2, 2, 2)); },
        rand_tensor({2, 5, 5}, rng));
  {
    Tensor f = rand_tensor({3, 5}, rng);
    check("conv1d.x", [&](const Tensor& t) { return sum(tanh(conv1d_same(t, f))); },
          rand_tensor({7}, rng));
    Tensor a = rand_tensor({7}, rng);
    check("conv1d.f", [&](const Tensor& t) { return sum(tanh(conv1d_same(a, t))); }, f);
  }
  check("image_to_frames", [&](const Tensor& t) { return sum(mul(image_to_frames(t), image_to_frames(t))); },
        rand_tensor({2, 3, 4}, rng));
  check("embed_lookup", [&](const Tensor& t) { return sum(tanh(embed_lookup(t, {0, 2, 2, 1}))); },
        rand_tensor({3, 4}, rng));
}

TEST_CASE("maxpool2d ceil semantics") {
  SplitRng rng(3);
  Tensor x = Tensor::uniform({1, 5, 5}, -1, 1, rng);
  Tensor p = maxpool2d(x, 2, 2, 2, 2);
  CHECK(p.dim(1) == 3);
  CHECK(p.dim(2) == 3);
}

TEST_CASE("sliced composite graph matches finite differences") {
  SplitRng rng(21);
  Tensor x = rand_tensor({4, 3}, rng);
  auto f = [](const Tensor& t) {
    Tensor a = tanh(matmul(t, reshape(slice(t, 0, 0, 3), {3, 3})));
    Tensor b = softmax(row(a, 1));
    return add(logsumexp(row(a, 0)), sum(mul(b, b)));
  };
  CHECK(grad_check(f, x) < 1e-4);
}

TEST_CASE("no-grad guard suppresses taping") {
  clear_tape();
  Tensor x({2}, {1, 2}, true);
  {
    NoGradGuard ng;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(Tape::active().size() == 0);
}
