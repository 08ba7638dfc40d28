#include <cmath>

#include "doctest.h"
#include "simr/optim.hpp"

using namespace simr;

namespace {

ParamStore<double> single(double value, double grad) {
  ParamStore<double> store;
  auto& p = store.add("p", {1});
  p.data[0] = value;
  p.grad = {grad};
  return store;
}

}  // namespace

TEST_CASE("sgd step") {
  SUBCASE("single step") {
    auto store = single(1.0, 1.0);
    Sgd<double>(0.1).step(store);
    CHECK(store.get("p").data[0] == doctest::Approx(0.9));
    CHECK(store.get("p").grad[0] == 0.0);
  }
  SUBCASE("zero gradient leaves the parameter unchanged") {
    auto store = single(1.0, 0.0);
    Sgd<double>(0.1).step(store);
    CHECK(store.get("p").data[0] == 1.0);
  }
  SUBCASE("non-positive learning rate") {
    CHECK_THROWS_AS(Sgd<double>(0.0), ConfigError);
    CHECK_THROWS_AS(Sgd<double>(-1.0), ConfigError);
    CHECK_THROWS_AS(Adam<double>(0.0), ConfigError);
  }
}

TEST_CASE("adam first step matches the hand-computed update") {
  // m1 = 0.1 g, v1 = 0.001 g^2, bias-corrected to g and g^2:
  // p1 = p0 - lr * g / (|g| + eps)
  const double p0 = 1.0, g = 0.5, lr = 0.1, eps = 1e-8;
  auto store = single(p0, g);
  Adam<double> adam(lr);
  adam.step(store);
  CHECK(store.get("p").data[0] == doctest::Approx(p0 - lr * g / (g + eps)).epsilon(1e-14));
  CHECK(adam.steps() == 1);

  SUBCASE("second step uses accumulated moments") {
    store.get("p").grad = {-0.25};
    adam.step(store);
    const double m = 0.9 * (0.1 * g) + 0.1 * -0.25;
    const double v = 0.999 * (0.001 * g * g) + 0.001 * 0.0625;
    const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.999 * 0.999);
    const double p1 = p0 - lr * g / (g + eps);
    CHECK(store.get("p").data[0] == doctest::Approx(p1 - lr * m_hat / (std::sqrt(v_hat) + eps)).epsilon(1e-12));
  }
}

TEST_CASE("params without gradients are skipped") {
  ParamStore<float> store;
  auto& p = store.add("w", {2});
  p.data = {1.0f, 2.0f};
  p.grad.clear();
  Adam<float>(0.1f).step(store);
  CHECK(p.data == std::vector<float>{1.0f, 2.0f});
  CHECK_THROWS_AS(store.add("w", {1}), ContractError);
}

TEST_CASE("optimizer names") {
  CHECK(parse_optimizer("adam") == OptimizerKind::Adam);
  CHECK(parse_optimizer("sgd") == OptimizerKind::Sgd);
  CHECK_THROWS_AS(parse_optimizer("rmsprop"), ConfigError);
}
