#include "coral/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using coral::Rng;

TEST_CASE("streams are deterministic and independent") {
  Rng a = Rng::stream(41, "augment");
  Rng b = Rng::stream(41, "augment");
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng m1 = Rng::stream(41, "masking");
  Rng m2 = Rng::stream(41, "masking");
  Rng aug = Rng::stream(41, "augment");
  for (int i = 0; i < 50; ++i) (void)aug.next_u64();  // consuming one stream
  for (int i = 0; i < 100; ++i) CHECK(m1.next_u64() == m2.next_u64());

  CHECK(Rng::stream(41, "x").next_u64() != Rng::stream(42, "x").next_u64());
  CHECK(Rng::stream(41, "x").next_u64() != Rng::stream(41, "y").next_u64());
}

TEST_CASE("uniform_below has no obvious bias and respects bounds") {
  Rng rng(7);
  int counts[5] = {0, 0, 0, 0, 0};
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto v = rng.uniform_below(5);
    REQUIRE(v < 5);
    ++counts[v];
  }
  for (int c : counts) CHECK(std::abs(c - n / 5) < 4 * std::sqrt(n / 5.0));
  CHECK_THROWS(rng.uniform_below(0));
}

TEST_CASE("normal moments are sane") {
  Rng rng(11);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double v = rng.normal();
    sum += v;
    sq += v * v;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("sample_without_replacement yields sorted distinct indices") {
  Rng rng(3);
  for (int k = 0; k <= 10; ++k) {
    auto idx = rng.sample_without_replacement(10, k);
    REQUIRE(static_cast<int>(idx.size()) == k);
    std::set<int> s(idx.begin(), idx.end());
    CHECK(static_cast<int>(s.size()) == k);
    for (std::size_t i = 1; i < idx.size(); ++i) CHECK(idx[i - 1] < idx[i]);
    for (int v : idx) CHECK((v >= 0 && v < 10));
  }
  CHECK_THROWS(rng.sample_without_replacement(3, 4));
}

TEST_CASE("permutation covers the range") {
  Rng rng(5);
  auto p = rng.permutation(64);
  std::set<int> s(p.begin(), p.end());
  CHECK(s.size() == 64);
}
