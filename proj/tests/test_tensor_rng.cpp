#include <doctest.h>

#include <set>

#include "urbanmind/rng.hpp"
#include "urbanmind/tensor.hpp"

using namespace urbanmind;

TEST_CASE("tensor shape and indexing") {
  Tensor t({2, 3}, 0.0);
  CHECK(t.size() == 6);
  t.at2(1, 2) = 5.0;
  CHECK(t[5] == 5.0);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  CHECK_THROWS_AS(t.reshaped({4, 2}), std::invalid_argument);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
}

TEST_CASE("rng determinism and state round trip") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  const std::string state = a.state();
  const double next = a.uniform();
  Rng c(0);
  c.set_state(state);
  CHECK(c.uniform() == next);
}

TEST_CASE("rng uniform and below bounds") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(rng.below(7) < 7);
  }
}

TEST_CASE("rng normal moments") {
  Rng rng(3);
  const int n = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("sample_distinct yields k unique in-range values") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const uint64_t n = 1 + rng.below(40);
    const uint64_t k = 1 + rng.below(n);
    const auto sample = rng.sample_distinct(n, k);
    CHECK(sample.size() == k);
    std::set<uint64_t> uniq(sample.begin(), sample.end());
    CHECK(uniq.size() == k);
    for (uint64_t v : sample) CHECK(v < n);
  }
}

TEST_CASE("derived streams differ") {
  CHECK(Rng::derive(1, 0) != Rng::derive(1, 1));
  CHECK(Rng::derive(1, 0) != Rng::derive(2, 0));
  CHECK(Rng::derive(1, 5) == Rng::derive(1, 5));
}
