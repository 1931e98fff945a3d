#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mtl/rng.hpp"
#include "mtl/tensor.hpp"
#include "oracles.hpp"

using namespace mtl;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.mutable_values()) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("matmul identity and dot product") {
  Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(id, a);
  CHECK(c.values() == std::vector<double>{1, 2, 3, 4});

  Tensor row = Tensor::from({1, 2}, {1, 2});
  Tensor col = Tensor::from({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == doctest::Approx(11.0).epsilon(0));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       doctest::Contains("(2x3)"), ShapeError);
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  const double err = oracles::max_grad_error(
      {a, b}, [&] { return sum(matmul(a, b)); });
  CHECK(err < 1e-6);
}

TEST_CASE("softmax values") {
  Tensor sym = softmax(Tensor::from({2}, {0, 0}), 0);
  CHECK(sym.at(0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(sym.at(1) == doctest::Approx(0.5).epsilon(1e-14));

  Tensor stable = softmax(Tensor::from({2}, {1000, 0}), 0);
  CHECK(stable.at(0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(stable.at(1) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(std::isfinite(stable.at(0)));

  Tensor s = softmax(Tensor::from({3}, {1, 2, 3}), 0);
  CHECK(s.at(0) == doctest::Approx(0.09003057).epsilon(1e-6));
  CHECK(s.at(1) == doctest::Approx(0.24472847).epsilon(1e-6));
  CHECK(s.at(2) == doctest::Approx(0.66524096).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one and axis handling") {
  Rng rng(11);
  Tensor x = random_tensor({5, 7}, rng, false);
  for (int axis : {0, 1}) {
    Tensor s = softmax(x, axis);
    const int slices = axis == 1 ? 5 : 7;
    const int len = axis == 1 ? 7 : 5;
    for (int i = 0; i < slices; ++i) {
      double total = 0.0;
      for (int j = 0; j < len; ++j)
        total += axis == 1 ? s.at(i, j) : s.at(j, i);
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(softmax(x, 2), ShapeError);
}

TEST_CASE("softmax gradient matches finite differences") {
  Rng rng(13);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor w = random_tensor({4, 3}, rng, false);
  const double err = oracles::max_grad_error(
      {x}, [&] { return sum(mul(softmax(x, 1), w)); });
  CHECK(err < 1e-6);
}

TEST_CASE("layer_norm values") {
  Tensor gain = Tensor::from({3}, {1, 1, 1});
  Tensor bias = Tensor::from({3}, {0, 0, 0});
  Tensor constant = layer_norm(Tensor::from({1, 3}, {5, 5, 5}), gain, bias, 1e-5);
  for (int c = 0; c < 3; ++c) CHECK(constant.at(0, c) == doctest::Approx(0.0));

  Tensor g2 = Tensor::from({2}, {1, 1});
  Tensor b2 = Tensor::from({2}, {0, 0});
  Tensor two = layer_norm(Tensor::from({1, 2}, {1, 3}), g2, b2, 0.0);
  CHECK(two.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(two.at(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("layer_norm gradient matches finite differences") {
  Rng rng(17);
  Tensor x = random_tensor({3, 5}, rng);
  Tensor gain = random_tensor({5}, rng);
  Tensor bias = random_tensor({5}, rng);
  Tensor w = random_tensor({3, 5}, rng, false);
  const double err = oracles::max_grad_error({x, gain, bias}, [&] {
    return sum(mul(layer_norm(x, gain, bias, 1e-5), w));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("cross_entropy values and gradient identity") {
  CHECK(cross_entropy(Tensor::from({2}, {0, 0}), 0).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(cross_entropy(Tensor::from({2}, {10, -10}), 0).item() ==
        doctest::Approx(2.061153622438558e-9).epsilon(1e-6));
  CHECK_THROWS_AS(cross_entropy(Tensor::from({2}, {0, 0}), 2), ValueError);
  CHECK_THROWS_AS(cross_entropy(Tensor::from({2}, {0, 0}), -1), ValueError);

  // gradient equals softmax(logits) - onehot(label)
  Tensor logits = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
  backward(cross_entropy(logits, 1));
  Tensor probs = softmax(logits.detach(), 0);
  for (int i = 0; i < 3; ++i) {
    const double expected = probs.at(i) - (i == 1 ? 1.0 : 0.0);
    CHECK(logits.grad()[static_cast<std::size_t>(i)] ==
          doctest::Approx(expected).epsilon(1e-12));
  }

  // non-negativity over random logits
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor z = random_tensor({4}, rng, false);
    CHECK(cross_entropy(z, static_cast<int>(rng.below(4))).item() >= 0.0);
  }
}

TEST_CASE("mse values and derivative") {
  CHECK(mse(Tensor::scalar(1.0), 0.0).item() == doctest::Approx(1.0));
  CHECK(mse(Tensor::scalar(0.73), 0.73).item() == doctest::Approx(0.0));

  Tensor pred = Tensor::scalar(2.0, true);
  backward(mse(pred, 0.5));
  CHECK(pred.grad()[0] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("backward on x squared") {
  Tensor x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward requires scalar loss") {
  Tensor x = Tensor::zeros({2, 2}, true);
  CHECK_THROWS_AS(backward(add(x, x)), ValueError);
}

TEST_CASE("unreachable leaf keeps zero gradient") {
  Tensor x = Tensor::scalar(1.0, true);
  Tensor unused = Tensor::scalar(5.0, true);
  backward(mul(x, x));
  CHECK(unused.grad() == std::vector<double>{0.0});
}

TEST_CASE("repeated backward accumulates until cleared") {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor loss = mul(x, x);
  backward(loss);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(12.0));
  x.zero_grad();
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("two-layer MLP gradients match finite differences") {
  Rng rng(29);
  Tensor x = random_tensor({2, 6}, rng, false);
  Tensor w1 = random_tensor({6, 4}, rng);
  Tensor b1 = random_tensor({4}, rng);
  Tensor w2 = random_tensor({4, 3}, rng);
  Tensor b2 = random_tensor({3}, rng);
  auto loss = [&] {
    Tensor h = relu(add_rowvec(matmul(x, w1), b1));
    Tensor out = add_rowvec(matmul(h, w2), b2);
    return mean(mul(out, out));
  };
  CHECK(oracles::max_grad_error({w1, b1, w2, b2}, loss) < 1e-5);
}

TEST_CASE("backward is deterministic bit for bit") {
  auto run = [] {
    Rng rng(31);
    Tensor x = random_tensor({3, 3}, rng);
    Tensor w = random_tensor({3, 3}, rng);
    backward(sum(matmul(relu(x), softmax(w, 1))));
    auto gx = x.grad();
    auto gw = w.grad();
    gx.insert(gx.end(), gw.begin(), gw.end());
    return gx;
  };
  CHECK(run() == run());
}

TEST_CASE("slice and concat round trips") {
  Rng rng(37);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor back = concat_cols({slice_cols(x, 0, 2), slice_cols(x, 2, 4)});
  CHECK(back.values() == x.values());
  Tensor rows = concat_rows({slice_rows(x, 0, 1), slice_rows(x, 1, 3)});
  CHECK(rows.values() == x.values());

  const double err = oracles::max_grad_error({x}, [&] {
    return sum(concat_cols({slice_cols(x, 1, 3), slice_cols(x, 0, 1)}));
  });
  CHECK(err < 1e-8);
}

TEST_CASE("exp and elementwise gradients") {
  Rng rng(41);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({2, 3}, rng);
  const double err = oracles::max_grad_error(
      {a, b}, [&] { return mean(mul(exp(neg(a)), add(b, scale(a, 0.5)))); });
  CHECK(err < 1e-6);
}

TEST_CASE("dropout determinism and identity cases") {
  Rng rng(43);
  Tensor x = random_tensor({8, 8}, rng, false);
  CHECK(dropout(x, 0.0, rng).values() == x.values());

  Rng d1(99), d2(99);
  CHECK(dropout(x, 0.4, d1).values() == dropout(x, 0.4, d2).values());
  CHECK_THROWS_AS(dropout(x, 1.0, rng), ValueError);
}

TEST_CASE("flatten and unflatten round trip with stable ordering") {
  Rng rng(47);
  std::vector<Tensor> params{random_tensor({3, 2}, rng), random_tensor({4}, rng),
                             random_tensor({1}, rng)};
  const auto flat = flatten_values(params);
  CHECK(flat.size() == param_count(params));

  std::vector<Tensor> fresh{Tensor::zeros({3, 2}, true), Tensor::zeros({4}, true),
                            Tensor::zeros({1}, true)};
  unflatten_values(fresh, flat);
  CHECK(flatten_values(fresh) == flat);

  CHECK_THROWS_AS(unflatten_values(fresh, std::vector<double>(3, 0.0)),
                  ShapeError);

  std::vector<double> grads(flat.size(), 0.5);
  install_grads(fresh, grads);
  CHECK(flatten_grads(fresh) == grads);
}
