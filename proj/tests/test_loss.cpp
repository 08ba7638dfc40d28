#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "simr/loss.hpp"

using namespace simr;
using namespace simr::testing;

namespace {

double t2i(const Tensor<double>& s) {
  Graph<double> g;
  return infonce_t2i(g.leaf(s)).value()[0];
}

double i2t(const Tensor<double>& s) {
  Graph<double> g;
  return infonce_i2t(g.leaf(s)).value()[0];
}

Tensor<double> transposed(const Tensor<double>& s) {
  Tensor<double> out(Shape{s.shape[1], s.shape[0]});
  for (std::size_t r = 0; r < s.shape[0]; ++r)
    for (std::size_t c = 0; c < s.shape[1]; ++c) out.at({c, r}) = s.at({r, c});
  return out;
}

}  // namespace

TEST_CASE("closed-form InfoNCE values") {
  for (std::size_t n : {2, 3, 5}) {
    Tensor<double> zeros(Shape{n, n});
    CHECK(std::abs(t2i(zeros) - 2 * std::log(static_cast<double>(n))) < 1e-6);
    CHECK(std::abs(i2t(zeros) - 2 * std::log(static_cast<double>(n))) < 1e-6);
  }
  CHECK(t2i(Tensor<double>({1, 1}, {3.7})) == 0.0);
  CHECK(i2t(Tensor<double>({1, 1}, {-12.0})) == 0.0);
  CHECK(t2i(Tensor<double>({2, 2}, {10, 0, 0, 10})) < 1e-3);

  double previous = t2i(Tensor<double>(Shape{2, 2}));
  for (double c : {1.0, 2.0, 4.0, 8.0}) {
    const double now = t2i(Tensor<double>({2, 2}, {c, 0, 0, c}));
    CHECK(now < previous);
    previous = now;
  }
}

TEST_CASE("total loss") {
  Graph<double> g;
  auto z = Tensor<double>(Shape{2, 2});
  auto terms = total_loss(g.leaf(z), g.leaf(z));
  auto b = terms.breakdown();
  CHECK(b.total == doctest::Approx(4 * std::log(2.0)).epsilon(1e-12));
  CHECK(b.total == doctest::Approx(b.l_t2i + b.l_i2t).epsilon(1e-12));
  CHECK(b.batch_size == 2);

  Graph<double> g1;
  auto one = total_loss(g1.leaf(Tensor<double>({1, 1}, {0.0})), g1.leaf(Tensor<double>({1, 1}, {0.0})));
  CHECK(one.breakdown().total == 0.0);
}

TEST_CASE("non-square similarity is rejected") {
  Graph<double> g;
  CHECK_THROWS_AS(infonce_t2i(g.leaf(Tensor<double>(Shape{2, 3}))), ContractError);
  CHECK_THROWS_AS(infonce_i2t(g.leaf(Tensor<double>(Shape{3, 2}))), ContractError);
}

TEST_CASE("InfoNCE properties on random matrices") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 5);
    auto s = random_tensor(rng, {n, n}, -3.0, 3.0);

    CHECK(std::abs(i2t(s) - t2i(transposed(s))) < 1e-12);

    auto shifted = s;
    const double c = shift(rng);
    for (auto& v : shifted.data) v += c;
    CHECK(std::abs(t2i(shifted) - t2i(s)) < 1e-5);
    CHECK(std::abs(i2t(shifted) - i2t(s)) < 1e-5);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<double> relabeled(Shape{n, n});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t col = 0; col < n; ++col) relabeled.at({r, col}) = s.at({perm[r], perm[col]});
    CHECK(std::abs(t2i(relabeled) - t2i(s)) < 1e-6);

    double previous = t2i(s);
    auto boosted = s;
    for (int step = 0; step < 3; ++step) {
      for (std::size_t i = 0; i < n; ++i) boosted.at({i, i}) += 0.5;
      const double now = t2i(boosted);
      CHECK(now < previous);
      previous = now;
    }
  }
}

TEST_CASE("total loss gradient matches finite differences") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 4);
    auto result = check_gradients({random_tensor(rng, {n, n}, -2, 2), random_tensor(rng, {n, n}, -2, 2)},
                                  [](Graph<double>&, const std::vector<Var<double>>& in) {
                                    return total_loss(in[0], in[1]).total;
                                  });
    CHECK(result.max_rel_error < 1e-4);
  }
}
