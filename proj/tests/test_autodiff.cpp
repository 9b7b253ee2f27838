#include <catch2/catch_amalgamated.hpp>

#include "fairwell/autodiff.hpp"
#include "fairwell/rng.hpp"

#include "support/gen.hpp"

using namespace fairwell;
using Catch::Approx;

TEST_CASE("identity graph returns its input", "[autodiff]") {
  ad::Graph g;
  g.input("x", {3}, true);
  Tensor out = g.forward({{"x", Tensor::vector({1, 2, 3})}});
  REQUIRE(out.data() == std::vector<double>{1, 2, 3});
}

TEST_CASE("mean over all elements", "[autodiff]") {
  ad::Graph g;
  auto x = g.input("x", {3}, false);
  g.mean(x);
  REQUIRE(g.forward({{"x", Tensor::vector({2, 4, 6})}}).item() == 4.0);
}

TEST_CASE("squared euclidean distance via subtract/square/sum", "[autodiff]") {
  ad::Graph g;
  auto a = g.input("a", {2}, true);
  auto b = g.input("b", {2}, true);
  g.sum(g.square(g.subtract(a, b)));
  double v = g.forward({{"a", Tensor::vector({0, 0})}, {"b", Tensor::vector({3, 4})}}).item();
  REQUIRE(v == 25.0);
}

TEST_CASE("gradient of sum is all ones", "[autodiff]") {
  ad::Graph g;
  auto x = g.input("x", {4}, true);
  g.sum(x);
  g.forward({{"x", Tensor::vector({3, -1, 7, 0.5})}});
  auto grads = g.backward();
  REQUIRE(grads.at("x").data() == std::vector<double>{1, 1, 1, 1});
}

TEST_CASE("gradient of x^2 at 3 is 6", "[autodiff]") {
  ad::Graph g;
  auto x = g.input("x", {}, true);
  g.square(x);
  g.forward({{"x", Tensor::scalar(3.0)}});
  REQUIRE(g.backward().at("x").item() == 6.0);
}

TEST_CASE("backward before forward is a state error", "[autodiff]") {
  ad::Graph g;
  auto x = g.input("x", {2}, true);
  g.sum(x);
  REQUIRE_THROWS_AS(g.backward(), StateError);
}

TEST_CASE("shape mismatches name the op and shapes", "[autodiff]") {
  ad::Graph g;
  auto a = g.input("a", {2}, false);
  auto b = g.input("b", {3}, false);
  REQUIRE_THROWS_WITH(g.add(a, b),
                      Catch::Matchers::ContainsSubstring("add") &&
                          Catch::Matchers::ContainsSubstring("[2]") &&
                          Catch::Matchers::ContainsSubstring("[3]"));
  auto m = g.input("m", {2, 3}, false);
  auto n = g.input("n", {2, 3}, false);
  REQUIRE_THROWS_AS(g.matmul(m, n), ShapeError);
  REQUIRE_NOTHROW(g.matmul(m, n, false, true));
}

TEST_CASE("binding a wrong shape fails at forward", "[autodiff]") {
  ad::Graph g;
  g.input("x", {2}, false);
  REQUIRE_THROWS_AS(g.forward({{"x", Tensor::vector({1, 2, 3})}}), ShapeError);
  REQUIRE_THROWS_AS(g.forward({}), StateError);
}

TEST_CASE("non-finite values are caught at the producing node", "[autodiff]") {
  ad::Graph g;
  auto x = g.input("x", {}, false);
  g.sqrt_eps(x, 1e-4);
  REQUIRE_THROWS_AS(g.forward({{"x", Tensor::scalar(-1.0)}}), NumericError);

  ad::Graph g2;
  auto y = g2.input("y", {}, false);
  g2.square(g2.square(y));
  REQUIRE_THROWS_WITH(g2.forward({{"y", Tensor::scalar(1e200)}}),
                      Catch::Matchers::ContainsSubstring("square"));
}

TEST_CASE("forward is deterministic bit for bit", "[autodiff]") {
  Rng rng(99);
  ad::Graph g;
  auto x = g.input("x", {4, 3}, true);
  auto w = g.input("w", {3, 2}, true);
  auto h = g.relu(g.matmul(x, w));
  g.mean(g.square(h));
  auto xv = Tensor::matrix(4, 3, gen::random_vec(rng, 12));
  auto wv = Tensor::matrix(3, 2, gen::random_vec(rng, 6));
  double a = g.forward({{"x", xv}, {"w", wv}}).item();
  double b = g.forward({{"x", xv}, {"w", wv}}).item();
  REQUIRE(std::memcmp(&a, &b, sizeof(double)) == 0);
}

TEST_CASE("finite differences: quadratic graph passes tightly", "[autodiff]") {
  ad::Graph g;
  auto x = g.input("x", {3}, true);
  auto sq = g.square(x);
  g.sum(sq);
  auto report = ad::finite_difference_check(g, {{"x", Tensor::vector({1.5, -2.0, 0.25})}},
                                            1e-5, 1e-6);
  REQUIRE(report.pass);
  REQUIRE(report.max_rel_error < 1e-6);
  REQUIRE(report.total_skipped == 0);
}

TEST_CASE("finite differences: constant graph has zero gradients", "[autodiff]") {
  ad::Graph g;
  g.input("x", {2}, true);
  g.constant(Tensor::scalar(5.0));  // output independent of x
  auto report = ad::finite_difference_check(g, {{"x", Tensor::vector({1, 2})}}, 1e-5, 1e-6);
  REQUIRE(report.pass);
  REQUIRE(report.max_rel_error == 0.0);
}

TEST_CASE("finite differences: hinge kink is flagged and excluded", "[autodiff]") {
  ad::Graph g;
  auto x = g.input("x", {2}, true);
  g.sum(g.relu(x));
  // first coordinate sits exactly on the kink
  auto report =
      ad::finite_difference_check(g, {{"x", Tensor::vector({0.0, 3.0})}}, 1e-5, 1e-6);
  REQUIRE(report.total_skipped == 1);
  REQUIRE(report.entries.at(0).checked == 1);
  REQUIRE(report.pass);
}

TEST_CASE("finite differences require a scalar output", "[autodiff]") {
  ad::Graph g;
  auto x = g.input("x", {2}, true);
  g.square(x);
  REQUIRE_THROWS_AS(
      ad::finite_difference_check(g, {{"x", Tensor::vector({1, 2})}}, 1e-5, 1e-4),
      ShapeError);
}

namespace {

// Wraps a node into a scalar via a fixed random projection so every
// primitive can be checked through the same scalar-output harness.
fairwell::ad::NodeId to_scalar(fairwell::ad::Graph& g, fairwell::ad::NodeId id,
                               fairwell::Rng& rng) {
  const auto& shape = g.node(id).shape;
  if (shape.empty()) return id;
  auto proj = fairwell::Tensor(shape, gen::random_vec(rng, fairwell::Tensor::numel_of(shape)));
  return g.sum(g.multiply(id, g.constant(proj)));
}

}  // namespace

TEST_CASE("every primitive matches central finite differences on random inputs",
          "[autodiff][property]") {
  Rng rng(2024);
  int cases = 0;
  for (int rep = 0; rep < 100; ++rep) {
    size_t n = 2 + size_t(rng.uniform_int(3));
    size_t d = 1 + size_t(rng.uniform_int(4));
    std::map<std::string, Tensor> inputs;
    ad::Graph g;
    auto a = g.input("a", {n, d}, true);
    auto b = g.input("b", {n, d}, true);
    inputs.emplace("a", Tensor::matrix(n, d, gen::random_vec(rng, n * d)));
    inputs.emplace("b", Tensor::matrix(n, d, gen::random_vec(rng, n * d)));

    ad::NodeId node{};
    switch (rep % 11) {
      case 0: node = g.matmul(a, b, false, true); break;
      case 1: node = g.add(a, b); break;
      case 2: node = g.subtract(a, b); break;
      case 3: node = g.multiply(a, b); break;
      case 4: node = g.mean(a, ad::Axis::Rows); break;
      case 5: node = g.sum(a, ad::Axis::Cols); break;
      case 6: node = g.relu(a); break;
      case 7: node = g.square(a); break;
      case 8: node = g.sqrt_eps(g.square(a), 1e-3); break;
      case 9: node = g.max_const(a, 0.1); break;
      case 10: {
        auto v = g.input("v", {d}, true);
        inputs.emplace("v", Tensor::vector(gen::random_vec(rng, d)));
        node = g.multiply(g.broadcast(v, {n, d}), b);
        break;
      }
    }
    g.set_output(to_scalar(g, node, rng));
    auto report = ad::finite_difference_check(g, inputs, 1e-5, 1e-4);
    INFO("rep " << rep << " primitive " << rep % 11 << " max_rel "
                << report.max_rel_error);
    REQUIRE(report.pass);
    ++cases;
  }
  REQUIRE(cases == 100);
}

TEST_CASE("matmul transpose variants agree with manual composition", "[autodiff]") {
  Rng rng(5);
  auto av = Tensor::matrix(3, 2, gen::random_vec(rng, 6));
  auto bv = Tensor::matrix(3, 4, gen::random_vec(rng, 12));
  ad::Graph g;
  auto a = g.input("a", {3, 2}, true);
  auto b = g.input("b", {3, 4}, true);
  g.sum(g.matmul(a, b, true, false));  // (2x3)(3x4)
  double got = g.forward({{"a", av}, {"b", bv}}).item();
  double want = 0.0;
  for (size_t i = 0; i < 2; ++i)
    for (size_t j = 0; j < 4; ++j)
      for (size_t k = 0; k < 3; ++k) want += av.at(k, i) * bv.at(k, j);
  REQUIRE(got == Approx(want).epsilon(1e-12));
  auto report = ad::finite_difference_check(g, {{"a", av}, {"b", bv}}, 1e-6, 1e-6);
  REQUIRE(report.pass);
}
