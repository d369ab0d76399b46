#include <doctest.h>

#include <cmath>

#include "cdmm/autodiff.hpp"
#include "cdmm/error.hpp"
#include "cdmm/rng.hpp"
#include "oracles.hpp"

using namespace cdmm;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double sd = 1.0) { return random_normal(std::move(s), sd, rng); }

// Keeps relu/abs-like kinks away from the finite-difference stencil.
Tensor away_from_zero(Shape s, Rng& rng) {
  Tensor t = random_tensor(std::move(s), rng);
  for (double& v : t.values()) v += v >= 0 ? 0.1 : -0.1;
  return t;
}

}  // namespace

TEST_CASE("conv1d output lengths") {
  CHECK(ad::conv_out_length(8, 3, 1, 1) == 8);
  CHECK(ad::conv_out_length(8, 4, 2, 1) == 4);
  CHECK_THROWS_AS(ad::conv_out_length(1, 4, 1, 1), DimensionError);

  ad::Graph g;
  Rng rng(1);
  for (std::size_t len = 1; len <= 24; ++len)
    for (std::size_t k = 1; k <= 5; ++k)
      for (std::size_t stride = 1; stride <= 3; ++stride)
        for (std::size_t pad = 0; pad <= 2; ++pad) {
          if (len + 2 * pad < k) continue;
          ad::Var x = g.constant(Tensor({len, 2}, 1.0));
          ad::Var w = g.constant(Tensor({3, 2, k}, 0.5));
          ad::Var b = g.constant(Tensor({3}));
          const auto out = ad::conv1d(x, w, b, stride, pad);
          REQUIRE(out.value().rows() == (len + 2 * pad - k) / stride + 1);
        }
}

TEST_CASE("conv1d identity kernel and naive oracle") {
  ad::Graph g;
  ad::Var x = g.constant(Tensor({3, 1}, {1, 2, 3}));
  ad::Var w = g.constant(Tensor({1, 1, 3}, {0, 1, 0}));
  ad::Var b = g.constant(Tensor({1}));
  CHECK(ad::conv1d(x, w, b, 1, 1).value() == Tensor({3, 1}, {1, 2, 3}));

  Rng rng(7);
  const Tensor xv = random_tensor({11, 3}, rng), wv = random_tensor({4, 3, 4}, rng), bv = random_tensor({4}, rng);
  const Tensor y = ad::conv1d(g.constant(xv), g.constant(wv), g.constant(bv), 2, 1).value();
  const Tensor ref = oracle::naive_conv1d(xv, wv, bv, 2, 1);
  REQUIRE(y.same_shape(ref));
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  CHECK_THROWS_AS(ad::conv1d(g.constant(Tensor({5, 2})), g.constant(wv), g.constant(bv), 1, 1), DimensionError);
}

TEST_CASE("elementwise values") {
  ad::Graph g;
  CHECK(ad::softplus(g.scalar(0.0)).value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(ad::tanh(g.scalar(0.0)).value().item() == 0.0);
  // Extended-precision reference for log(1 + e^40).
  const long double ref = std::log1p(std::exp(40.0L));
  CHECK(std::abs(ad::softplus(g.scalar(40.0)).value().item() - static_cast<double>(ref)) <= 1e-12);
  CHECK(std::isfinite(ad::softplus(g.scalar(1000.0)).value().item()));
  CHECK(ad::softplus(g.scalar(-1000.0)).value().item() >= 0.0);
  CHECK_THROWS_AS(ad::add(g.constant(Tensor({2, 2})), g.constant(Tensor({3}))), DimensionError);
  CHECK(ad::mul(g.scalar(2.0), g.constant(Tensor({3}, 1.5))).value() == Tensor({3}, 3.0));
}

TEST_CASE("matmul") {
  ad::Graph g;
  const Tensor b = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(ad::matmul(g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1})), g.constant(b)).value() == b);
  CHECK(ad::matmul(g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4})), g.constant(Tensor::matrix(2, 1, {1, 1}))).value() ==
        Tensor::matrix(2, 1, {3, 7}));
  Rng rng(3);
  const Tensor a = random_tensor({3, 4}, rng), c = random_tensor({4, 2}, rng);
  const Tensor out = ad::matmul(g.constant(a), g.constant(c)).value();
  const auto ref = oracle::naive_matmul(a, c);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out[i] - ref[i]) <= 1e-12);
  CHECK_THROWS_AS(ad::matmul(g.constant(a), g.constant(a)), DimensionError);
}

TEST_CASE("backward basics") {
  ad::Graph g;
  ad::Var x = g.input(Tensor::scalar(2.0), true);
  ad::Var y = g.input(Tensor::scalar(3.0), true);
  g.backward(ad::mul(x, y));
  CHECK(g.grad(x)->item() == 3.0);
  CHECK(g.grad(y)->item() == 2.0);

  // A constant loss: the leaf is untouched and reports no (i.e. zero) gradient.
  ad::Graph h;
  ad::Var p = h.input(Tensor({2}, 1.0), true);
  ad::Var loss = ad::add_scalar(h.scalar(4.0), 1.0);
  h.backward(loss);
  CHECK(h.grad(p) == nullptr);

  ad::Graph k;
  ad::Var q = k.input(Tensor({2}, 1.0), true);
  CHECK_THROWS_AS(k.backward(ad::scale(q, 2.0)), ContractError);

  ad::Graph n;
  ad::Var frozen = n.input(Tensor({2}, 1.0), false);
  ad::Var live = n.input(Tensor({2}, 2.0), true);
  n.backward(ad::sum(ad::mul(frozen, live)));
  CHECK(n.grad(frozen) == nullptr);
  CHECK(n.grad(live)->values()[0] == 1.0);
}

TEST_CASE("backward twice after zeroing is deterministic") {
  Rng rng(11);
  ad::Graph g;
  ad::Var x = g.input(random_tensor({6, 3}, rng), true);
  ad::Var w = g.input(random_tensor({4, 3, 3}, rng), true);
  ad::Var b = g.input(random_tensor({4}, rng), true);
  ad::Var loss = ad::sum(ad::tanh(ad::conv1d(x, w, b, 1, 1)));
  g.backward(loss);
  const Tensor first = *g.grad(w);
  g.zero_grad();
  g.backward(loss);
  CHECK(*g.grad(w) == first);
}

TEST_CASE("gradcheck every primitive") {
  Rng rng(2024);
  using Leaves = std::span<const ad::Var>;
  auto check = [](const char* name, const oracle::GradcheckResult& r) {
    INFO(name << ": " << r.worst);
    CHECK(r.max_rel_error <= 1e-4);
  };
  const Tensor a = away_from_zero({3, 4}, rng), b = away_from_zero({3, 4}, rng);
  const Tensor pos = [&] {
    Tensor t = random_tensor({3, 4}, rng);
    for (double& v : t.values()) v = 0.5 + std::abs(v);
    return t;
  }();
  // Weighted sums make the upstream gradient non-uniform.
  const Tensor wts = random_tensor({3, 4}, rng);
  const Tensor wts32 = random_tensor({3, 2}, rng), wts54 = random_tensor({5, 4}, rng);
  auto weighted = [&](ad::Graph& g, ad::Var v) { return ad::sum(ad::mul(v, g.constant(wts))); };

  check("add", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::add(l[0], l[1])); }, {a, b}));
  check("sub", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::sub(l[0], l[1])); }, {a, b}));
  check("mul", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::mul(l[0], l[1])); }, {a, b}));
  check("mul-scalar", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::mul(l[1], l[0])); },
                                        {Tensor::scalar(0.7), b}));
  check("scale", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::scale(l[0], -1.7)); }, {a}));
  check("tanh", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::tanh(l[0])); }, {a}));
  check("sigmoid", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::sigmoid(l[0])); }, {a}));
  check("softplus", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::softplus(l[0])); }, {a}));
  check("relu", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::relu(l[0])); }, {a}));
  check("exp", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::exp(l[0])); }, {a}));
  check("log", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::log(l[0])); }, {pos}));
  check("square", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::square(l[0])); }, {a}));
  check("matmul", oracle::gradcheck(
                      [&](ad::Graph& g, Leaves l) {
                        return ad::sum(ad::mul(ad::matmul(l[0], l[1]), g.constant(wts32)));
                      },
                      {a, random_tensor({4, 2}, rng)}));
  check("add_rowwise", oracle::gradcheck([&](ad::Graph& g, Leaves l) { return weighted(g, ad::add_rowwise(l[0], l[1])); },
                                         {a, random_tensor({4}, rng)}));
  check("conv1d", oracle::gradcheck(
                      [&](ad::Graph&, Leaves l) { return ad::sum(ad::square(ad::conv1d(l[0], l[1], l[2], 2, 1))); },
                      {random_tensor({8, 3}, rng), random_tensor({2, 3, 4}, rng), random_tensor({2}, rng)}));
  check("row/stack/repeat", oracle::gradcheck(
                                [&](ad::Graph& g, Leaves l) {
                                  std::vector<ad::Var> rows{ad::row(l[0], 2), ad::row(l[0], 0)};
                                  ad::Var m = ad::repeat_rows(ad::stack_rows(rows), 3);
                                  return ad::sum(ad::mul(ad::first_rows(m, 5), g.constant(wts54)));
                                },
                                {a}));
  check("log_softmax/pick", oracle::gradcheck(
                                [&](ad::Graph&, Leaves l) {
                                  const int idx[] = {1, 3, 0};
                                  return ad::sum(ad::pick(ad::log_softmax_rows(l[0]), idx));
                                },
                                {a}));
}
