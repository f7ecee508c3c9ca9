#include <doctest.h>

#include <cmath>

#include "alws/param_vector.hpp"
#include "alws/rng.hpp"

using namespace alws;

TEST_CASE("rng: same seed gives identical streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.u01() == b.u01());
    CHECK(a.normal() == b.normal());
    CHECK(a.gamma(0.7, 2.0) == b.gamma(0.7, 2.0));
  }
}

TEST_CASE("rng: moments of the basic distributions") {
  Rng rng(7);
  const int n = 200000;

  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    sum += x;
    sum2 += x * x;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sum2 / n - 1.0) < 0.02);

  sum = 0;
  sum2 = 0;
  for (int i = 0; i < n; ++i) {
    double x = rng.gamma(1.0 / (0.1 * 0.1), 0.1 * 0.1);  // mean 1, var 0.01
    sum += x;
    sum2 += x * x;
  }
  double mean = sum / n;
  CHECK(std::abs(mean - 1.0) < 0.005);
  CHECK(std::abs((sum2 / n - mean * mean) - 0.01) < 0.002);

  sum = 0;
  sum2 = 0;
  for (int i = 0; i < n; ++i) {
    double x = rng.laplace(0.0, 1.0);
    sum += x;
    sum2 += x * x;
  }
  CHECK(std::abs(sum / n) < 0.02);
  CHECK(std::abs(sum2 / n - 2.0) < 0.05);  // Laplace(0,1) variance is 2
}

TEST_CASE("rng: categorical respects probabilities") {
  Rng rng(3);
  Vec p(3);
  p << 0.2, 0.5, 0.3;
  int counts[3] = {0, 0, 0};
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[rng.categorical(p)]++;
  CHECK(std::abs(counts[0] / double(n) - 0.2) < 0.01);
  CHECK(std::abs(counts[1] / double(n) - 0.5) < 0.01);
  CHECK(std::abs(counts[2] / double(n) - 0.3) < 0.01);
}

TEST_CASE("param vector: slices tile the flat vector and round-trip") {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("W", 3, 2);
  layout->add("b", 3);
  layout->add("log_s", 1);
  CHECK(layout->total_size() == 10);

  ParamVector pv(layout);
  Mat W(3, 2);
  W << 1, 2, 3, 4, 5, 6;
  pv.set("W", W);
  Vec b(3);
  b << -1, 0.5, 2;
  pv.set("b", b);
  pv.set_scalar("log_s", -2.302585092994046);

  CHECK(pv.matrix("W") == W);
  CHECK(pv.vector("b") == b);
  CHECK(pv.scalar("log_s") == -2.302585092994046);

  // pack -> json -> unpack is bit-exact
  ParamVector back = ParamVector::from_json(pv.to_json("demo"));
  REQUIRE(back.size() == pv.size());
  for (int i = 0; i < pv.size(); ++i) CHECK(back.data()[i] == pv.data()[i]);
}

TEST_CASE("param vector: duplicate or missing slices are errors") {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("a", 2);
  CHECK_THROWS_AS(layout->add("a", 3), Error);
  ParamVector pv(layout);
  CHECK_THROWS_AS(pv.vector("nope"), Error);
}
