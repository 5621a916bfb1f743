#include <doctest.h>

#include "galite/rng.hpp"
#include "galite/scan.hpp"
#include "oracles.hpp"

#include <cmath>

using namespace galite;
using scan::ScanElement;

namespace {

ScanElement<double> random_element(Index n, Rng& rng) {
  return {random_uniform(n, 1, -1.2, 1.2, rng), random_normal(n, 1, rng)};
}

double max_dev(const Mat& a, const Mat& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("combine identities and associativity") {
  Rng rng(1);
  const auto e = random_element(5, rng);
  const auto id = scan::identity_element<double>(5);
  const auto left = scan::combine(id, e);
  const auto right = scan::combine(e, id);
  CHECK(left.a == e.a);
  CHECK(left.b == e.b);
  CHECK(right.a == e.a);
  CHECK(right.b == e.b);
  for (int i = 0; i < 100; ++i) {
    const auto x = random_element(7, rng), y = random_element(7, rng), z = random_element(7, rng);
    const auto p = scan::combine(scan::combine(x, y), z);
    const auto q = scan::combine(x, scan::combine(y, z));
    CHECK((p.a - q.a).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((p.b - q.b).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK_THROWS_AS(scan::combine(random_element(3, rng), random_element(4, rng)), ShapeError);
}

TEST_CASE("sequential scan examples") {
  Rng rng(2);
  const Mat b = random_normal(9, 4, rng);
  const Vec h0 = random_normal(4, 1, rng);
  CHECK(scan::scan_sequential<double>(Mat::Zero(9, 4), b, h0) == b);

  const Vec c = random_normal(4, 1, rng);
  const Mat bc = c.transpose().replicate(9, 1);
  const Mat sums = scan::scan_sequential<double>(Mat::Ones(9, 4), bc, h0);
  for (Index t = 0; t < 9; ++t) CHECK((sums.row(t).transpose() - (h0 + double(t + 1) * c)).cwiseAbs().maxCoeff() < 1e-12);

  const Mat a = random_uniform(17, 6, -1, 1, rng);
  const Mat in = random_normal(17, 6, rng);
  const Vec z = random_normal(6, 1, rng);
  CHECK(max_dev(scan::scan_sequential<double>(a, in, z), oracle::scan_bruteforce(a, in, z)) < 1e-12);
}

TEST_CASE("parallel scan matches sequential") {
  Rng rng(3);
  for (Index steps : {1, 2, 3, 5, 8, 17, 64, 1000, 1024, 4096}) {
    const Index n = steps > 1000 ? 64 : 8;
    const Mat a = random_uniform(steps, n, -1, 1, rng);
    const Mat b = random_normal(steps, n, rng);
    const Vec h0 = random_normal(n, 1, rng);
    const Mat seq = scan::scan_sequential<double>(a, b, h0);
    scan::ScanStats stats;
    const Mat par = scan::scan_parallel<double>(a, b, h0, 1, &stats);
    CHECK(max_dev(seq, par) < 1e-12);
    if (steps == 1) CHECK(seq == par);
    CHECK(stats.combines <= static_cast<std::size_t>(2 * steps));
    const auto log2 = static_cast<std::size_t>(std::ceil(std::log2(static_cast<double>(steps))));
    CHECK(stats.depth <= 2 * log2);
  }
}

TEST_CASE("parallel scan is bit identical across worker counts") {
  Rng rng(4);
  const Mat a = random_uniform(1000, 32, -1, 1, rng);
  const Mat b = random_normal(1000, 32, rng);
  const Vec h0 = random_normal(32, 1, rng);
  const Mat one = scan::scan_parallel<double>(a, b, h0, 1);
  CHECK(scan::scan_parallel<double>(a, b, h0, 2) == one);
  CHECK(scan::scan_parallel<double>(a, b, h0, 4) == one);
}

TEST_CASE("element-list overloads") {
  Rng rng(5);
  std::vector<ScanElement<double>> elems;
  for (int i = 0; i < 33; ++i) elems.push_back(random_element(3, rng));
  const Vec h0 = random_normal(3, 1, rng);
  const auto s = scan::scan_sequential(elems, h0);
  const auto p = scan::scan_parallel(elems, h0);
  REQUIRE(s.size() == 33);
  for (std::size_t t = 0; t < s.size(); ++t) CHECK((s[t] - p[t]).cwiseAbs().maxCoeff() < 1e-12);
}
