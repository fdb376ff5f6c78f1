#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "prnpe/core.hpp"

using namespace prnpe;
using Catch::Approx;

namespace {

// Brute-force weighted moments, kept deliberately naive.
std::pair<double, double> naive_weighted_moments(const std::vector<double>& x,
                                                 const std::vector<double>& w) {
  double wsum = 0.0;
  for (double v : w) wsum += v;
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m += w[i] / wsum * x[i];
  double v = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) v += w[i] / wsum * (x[i] - m) * (x[i] - m);
  return {m, std::sqrt(v)};
}

Matrix column(std::initializer_list<double> values) {
  Matrix m(static_cast<Index>(values.size()), 1);
  Index i = 0;
  for (double v : values) m(i++, 0) = v;
  return m;
}

}  // namespace

TEST_CASE("rng: identical streams reproduce, distinct streams differ") {
  Rng a(42, 7), b(42, 7), c(42, 8);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    REQUIRE(x == b.next_u64());
    (void)c;
  }
  Rng d(42, 7), e(42, 8);
  int equal = 0;
  for (int i = 0; i < 100; ++i) equal += d.next_u64() == e.next_u64();
  CHECK(equal == 0);

  Rng parent(1, 0);
  const auto before = Rng(1, 0).next_u64();
  Rng child = parent.split("stage");
  CHECK(parent.next_u64() == before);
  CHECK(child.next_u64() != Rng(1, 0).split("other").next_u64());
  CHECK(Rng(1, 0).split(3).next_u64() == Rng(1, 0).split(3).next_u64());
}

TEST_CASE("rng: uniform and normal moments") {
  Rng rng(2024, 0);
  const int n = 200000;
  double su = 0.0, sz = 0.0, szz = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u > 0.0);
    REQUIRE(u < 1.0);
    su += u;
    const double z = rng.normal();
    sz += z;
    szz += z * z;
  }
  CHECK(su / n == Approx(0.5).margin(0.005));
  CHECK(sz / n == Approx(0.0).margin(0.01));
  CHECK(szz / n == Approx(1.0).margin(0.02));

  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[static_cast<std::size_t>(rng.uniform_index(7))];
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("fit_standardiser: examples") {
  SECTION("symmetric two-point set") {
    const Standardiser s = fit_standardiser(column({0.0, 2.0}), Vector::Constant(2, 0.5));
    CHECK(s.mean[0] == Approx(1.0));
    CHECK(s.sd[0] == Approx(1.0));
  }
  SECTION("degenerate coordinate names the coordinate") {
    Matrix rows(2, 2);
    rows << 1.0, 0.0, 2.0, 0.0;
    REQUIRE_THROWS_WITH(fit_standardiser(rows, Vector::Constant(2, 1.0)),
                        Catch::Matchers::ContainsSubstring("coordinate 1"));
  }
  SECTION("weighted three-point set against naive moments") {
    Vector w(3);
    w << 0.5, 0.25, 0.25;
    const Standardiser s = fit_standardiser(column({1.0, 2.0, 4.0}), w);
    const auto [m, sd] = naive_weighted_moments({1.0, 2.0, 4.0}, {0.5, 0.25, 0.25});
    CHECK(s.mean[0] == Approx(2.0).epsilon(1e-14));
    CHECK(s.mean[0] == Approx(m).epsilon(1e-14));
    CHECK(s.sd[0] == Approx(sd).epsilon(1e-14));
  }
  SECTION("fewer than two positive weights") {
    Vector w(3);
    w << 1.0, 0.0, 0.0;
    CHECK_THROWS_AS(fit_standardiser(column({1.0, 2.0, 4.0}), w), Error);
  }
}

TEST_CASE("fit_standardiser: huge finite values do not overflow") {
  Matrix rows(3, 1);
  rows << 0.0, 1e200, 2e200;
  const Standardiser s = fit_standardiser(rows, Vector::Ones(3));
  CHECK(s.mean[0] == Approx(1e200));
  CHECK(s.sd[0] == Approx(std::sqrt(2.0 / 3.0) * 1e200));
}

TEST_CASE("fit_standardiser: standardised data has weighted mean 0 and sd 1") {
  Rng rng(5, 1);
  Matrix rows(300, 4);
  Vector w(300);
  for (Index i = 0; i < rows.rows(); ++i) {
    for (Index k = 0; k < rows.cols(); ++k) rows(i, k) = 3.0 * k + (k + 1) * rng.normal();
    w[i] = rng.uniform();
  }
  const Standardiser s = fit_standardiser(rows, w);
  const Matrix z = s.transform_rows(rows);
  const Vector wn = normalise_weights(w);
  for (Index k = 0; k < rows.cols(); ++k) {
    const double mean = wn.dot(z.col(k));
    const double var = wn.dot((z.col(k).array() - mean).square().matrix());
    CHECK(std::abs(mean) < 1e-8);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-8);
  }
  // Round trip.
  for (int t = 0; t < 50; ++t) {
    Vector x(4);
    for (Index k = 0; k < 4; ++k) x[k] = 100.0 * rng.normal();
    const Vector back = s.inverse(s.transform(x));
    for (Index k = 0; k < 4; ++k) CHECK(std::abs(back[k] - x[k]) < 1e-10 * std::max(1.0, std::abs(x[k])));
  }
}

TEST_CASE("ess: examples and properties") {
  CHECK(ess(Vector::Constant(4, 1.0)) == Approx(4.0));
  Vector point = Vector::Zero(4);
  point[0] = 1.0;
  CHECK(ess(point) == Approx(1.0));
  Vector w(3);
  w << 2.0, 1.0, 1.0;
  CHECK(ess(w) == Approx(1.0 / (0.25 + 0.0625 + 0.0625)));
  CHECK(ess(w) == Approx(8.0 / 3.0));
  CHECK_THROWS_AS(ess(Vector::Zero(3)), Error);

  Rng rng(9, 9);
  for (int t = 0; t < 100; ++t) {
    Vector v(20);
    for (Index i = 0; i < v.size(); ++i) v[i] = rng.uniform() < 0.3 ? 0.0 : rng.uniform();
    if (v.sum() == 0.0) v[0] = 1.0;
    const double e = ess(v);
    CHECK(e >= 1.0 - 1e-12);
    CHECK(e <= 20.0 + 1e-12);
    CHECK(ess(7.5 * v) == Approx(e).epsilon(1e-12));
  }
}

TEST_CASE("categorical_resample: examples") {
  Rng rng(1, 2);
  Vector w(2);
  w << 1.0, 0.0;
  const auto idx = categorical_resample(w, 5, rng);
  REQUIRE(idx.size() == 5);
  for (Index i : idx) CHECK(i == 0);

  const auto many = categorical_resample(Vector::Constant(2, 1.0), 100000, rng);
  double zeros = 0.0;
  for (Index i : many) zeros += i == 0;
  CHECK(zeros / 1e5 >= 0.49);
  CHECK(zeros / 1e5 <= 0.51);

  CHECK_THROWS_AS(categorical_resample(Vector::Zero(2), 3, rng), Error);
}

TEST_CASE("categorical_resample: chi-square goodness of fit and reproducibility") {
  Vector w(5);
  w << 0.1, 0.4, 0.0, 0.3, 0.2;
  Rng rng(77, 3);
  const Index m = 100000;
  const auto idx = categorical_resample(w, m, rng);
  std::vector<double> counts(5, 0.0);
  for (Index i : idx) counts[static_cast<std::size_t>(i)] += 1.0;
  CHECK(counts[2] == 0.0);
  double chi2 = 0.0;
  for (std::size_t k = 0; k < 5; ++k) {
    if (w[static_cast<Index>(k)] == 0.0) continue;
    const double expected = w[static_cast<Index>(k)] * static_cast<double>(m);
    chi2 += (counts[k] - expected) * (counts[k] - expected) / expected;
  }
  // 3 degrees of freedom, α = 0.01.
  CHECK(chi2 < 11.345);

  Rng again(77, 3);
  CHECK(categorical_resample(w, m, again) == idx);
}

TEST_CASE("filter_invalid: examples and idempotence") {
  SimDataset d;
  d.thetas = Matrix(3, 1);
  d.thetas << 1.0, 2.0, 3.0;
  d.summaries = Matrix(3, 2);
  d.summaries << 1.0, 2.0, std::numeric_limits<double>::quiet_NaN(), 0.0, 5.0,
      std::numeric_limits<double>::infinity();
  const FilterResult r = filter_invalid(d);
  REQUIRE(r.removed == 2);
  REQUIRE(r.dataset.size() == 1);
  CHECK(r.dataset.thetas(0, 0) == 1.0);
  CHECK(r.dataset.summaries(0, 1) == 2.0);

  const FilterResult again = filter_invalid(r.dataset);
  CHECK(again.removed == 0);
  CHECK(again.dataset.thetas == r.dataset.thetas);
  CHECK(again.dataset.summaries == r.dataset.summaries);

  SimDataset bad;
  bad.thetas = Matrix::Zero(1, 1);
  bad.summaries = Matrix::Constant(1, 1, std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(filter_invalid(bad), Error);
}

TEST_CASE("SimDataset: weights normalise and validate") {
  SimDataset d;
  d.thetas = Matrix::Zero(3, 1);
  d.summaries = Matrix::Zero(3, 1);
  d.weights = Vector(3);
  *d.weights << 2.0, 1.0, 1.0;
  CHECK(std::abs(d.normalised_weights().sum() - 1.0) < 1e-12);
  (*d.weights)[1] = -1.0;
  CHECK_THROWS_AS(d.validate(), Error);
  d.weights.reset();
  CHECK(d.normalised_weights()[0] == Approx(1.0 / 3.0));
  d.summaries = Matrix::Zero(2, 1);
  CHECK_THROWS_AS(d.validate(), Error);
}
