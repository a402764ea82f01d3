#include <catch2/catch_amalgamated.hpp>

#include "targetkit/mht.hpp"
#include "test_helpers.hpp"

using namespace targetkit;
using Catch::Approx;

namespace {

// Two-arm null experiment: binary outcome with identical rates in both arms,
// plus `k` binary covariates defining subgroups.
ExperimentTable null_experiment(std::size_t n, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  ExperimentTable t;
  t.arms.labels = {"c", "t"};
  t.arms.control_index = 0;
  t.covariates = Matrix(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    t.arm.push_back(int(i % 2));
    t.outcome.push_back(rng.bernoulli(0.3) ? 1.0 : 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      t.covariates(i, j) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
  }
  for (std::size_t j = 0; j < k; ++j) {
    t.covariate_names.push_back("x" + std::to_string(j));
    t.covariate_kinds.push_back(ColumnKind::binary);
  }
  return t;
}

Hypothesis subgroup_of(const ExperimentTable& t, std::size_t col, const std::string& label) {
  Hypothesis h;
  h.label = label;
  h.subset.resize(t.n_rows());
  for (std::size_t i = 0; i < t.n_rows(); ++i) {
    h.subset[i] = t.covariates(i, col) == 1.0 ? 1 : 0;
  }
  return h;
}

}  // namespace

TEST_CASE("a family of one: adjusted equals unadjusted p-value") {
  const auto t = null_experiment(300, 3, 10);
  HypothesisFamily fam;
  fam.items.push_back(subgroup_of(t, 0, "x0"));
  fam.b_replications = 2000;
  fam.seed = 5;
  const auto res = romano_wolf(t, fam, "t", "c");
  REQUIRE(res.rows.size() == 1);
  CHECK(res.rows[0].p_adjusted == res.rows[0].p_unadjusted);
  CHECK(res.rows[0].p_adjusted > 0.0);
  CHECK(res.rows[0].p_adjusted <= 1.0);
}

TEST_CASE("duplicated hypotheses share the single-hypothesis p-value") {
  const auto t = null_experiment(300, 3, 21);
  HypothesisFamily lone;
  lone.items.push_back(subgroup_of(t, 1, "x1"));
  lone.b_replications = 2000;
  lone.seed = 9;

  HypothesisFamily dup = lone;
  dup.items.push_back(subgroup_of(t, 1, "x1 again"));

  const auto solo = romano_wolf(t, lone, "t", "c");
  const auto both = romano_wolf(t, dup, "t", "c");
  // The duplicate contributes an identical max-t path, so the adjustment is a
  // no-op and all three p-values coincide.
  CHECK(both.rows[0].p_adjusted == Approx(solo.rows[0].p_adjusted).margin(1e-12));
  CHECK(both.rows[1].p_adjusted == Approx(solo.rows[0].p_adjusted).margin(1e-12));
}

TEST_CASE("stepdown output is monotone and dominates unadjusted p-values") {
  const auto t = null_experiment(400, 8, 33);
  HypothesisFamily fam;
  for (std::size_t j = 0; j < 8; ++j) {
    fam.items.push_back(subgroup_of(t, j, "x" + std::to_string(j)));
  }
  fam.b_replications = 500;
  fam.seed = 13;
  const auto res = romano_wolf(t, fam, "t", "c");

  for (const auto& r : res.rows) {
    CHECK(r.p_adjusted >= r.p_unadjusted);
    CHECK(r.p_adjusted <= 1.0);
  }
  // Sorted by |t| descending, adjusted p-values never decrease.
  std::vector<std::size_t> order(res.rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::fabs(res.rows[a].t_stat) > std::fabs(res.rows[b].t_stat);
  });
  for (std::size_t k = 1; k < order.size(); ++k) {
    CHECK(res.rows[order[k]].p_adjusted >= res.rows[order[k - 1]].p_adjusted);
  }
}

TEST_CASE("romano_wolf is deterministic given the family seed") {
  const auto t = null_experiment(200, 4, 55);
  HypothesisFamily fam;
  for (std::size_t j = 0; j < 4; ++j) {
    fam.items.push_back(subgroup_of(t, j, "x" + std::to_string(j)));
  }
  fam.b_replications = 300;
  fam.seed = 77;
  const auto a = romano_wolf(t, fam, "t", "c");
  const auto b = romano_wolf(t, fam, "t", "c");
  for (std::size_t h = 0; h < a.rows.size(); ++h) {
    CHECK(a.rows[h].p_adjusted == b.rows[h].p_adjusted);
    CHECK(a.rows[h].estimate == b.rows[h].estimate);
  }
}

TEST_CASE("family-wise error rate stays controlled on null data") {
  // Desk-scale version of the FWER oracle; the acceptance suite runs the
  // full-size configuration.
  const int datasets = 60;
  const double alpha = 0.05;
  int any_rejection = 0;
  for (int d = 0; d < datasets; ++d) {
    const auto t = null_experiment(240, 6, 9000 + std::uint64_t(d));
    HypothesisFamily fam;
    for (std::size_t j = 0; j < 6; ++j) {
      fam.items.push_back(subgroup_of(t, j, "x" + std::to_string(j)));
    }
    fam.b_replications = 250;
    fam.seed = 100 + std::uint64_t(d);
    const auto res = romano_wolf(t, fam, "t", "c");
    for (const auto& r : res.rows) {
      if (r.p_adjusted <= alpha) {
        ++any_rejection;
        break;
      }
    }
  }
  CHECK(double(any_rejection) / datasets <= 0.15);
}

TEST_CASE("subgroups that cannot be bootstrapped fail loudly") {
  auto t = null_experiment(40, 1, 3);
  // Subgroup with no treated rows at all: rejected before bootstrapping.
  Hypothesis empty;
  empty.label = "no treated";
  empty.subset.assign(t.n_rows(), 0);
  for (std::size_t i = 0; i < t.n_rows(); ++i) {
    if (t.arm[i] == 0) empty.subset[i] = 1;
  }
  HypothesisFamily fam;
  fam.items.push_back(empty);
  fam.b_replications = 100;
  CHECK_THROWS_AS(romano_wolf(t, fam, "t", "c"), domain_error);

  // Three singleton subgroups: each bootstrap draw misses one of them often
  // enough that the 10*B redraw budget is exhausted.
  HypothesisFamily tiny;
  for (int k = 0; k < 3; ++k) {
    Hypothesis h;
    h.label = "singleton " + std::to_string(k);
    h.subset.assign(t.n_rows(), 0);
    h.subset[std::size_t(2 * k)] = 1;      // one treated row
    h.subset[std::size_t(2 * k + 1)] = 1;  // one control row
    tiny.items.push_back(h);
  }
  tiny.b_replications = 100;
  tiny.seed = 4;
  CHECK_THROWS_AS(romano_wolf(t, tiny, "t", "c"), domain_error);
}

TEST_CASE("pair bootstrap path runs when pair ids are present") {
  const std::size_t n = 120;
  auto t = null_experiment(n, 2, 8);
  t.pair_id.assign(n, -1);
  for (std::size_t i = 0; i + 1 < n; i += 2) {
    t.pair_id[i] = long(i / 2);
    t.pair_id[i + 1] = long(i / 2);
  }
  HypothesisFamily fam;
  fam.items.push_back(subgroup_of(t, 0, "x0"));
  fam.items.push_back(subgroup_of(t, 1, "x1"));
  fam.b_replications = 400;
  fam.seed = 19;
  const auto res = romano_wolf(t, fam, "t", "c");
  for (const auto& r : res.rows) {
    CHECK(r.p_adjusted > 0.0);
    CHECK(r.p_adjusted <= 1.0);
    CHECK(r.p_adjusted >= r.p_unadjusted);
  }
}

TEST_CASE("difference hypotheses can join a family") {
  const auto t = null_experiment(300, 2, 45);
  Hypothesis diff;
  diff.label = "x0 vs not-x0";
  diff.subset.resize(t.n_rows());
  diff.subset_b.resize(t.n_rows());
  for (std::size_t i = 0; i < t.n_rows(); ++i) {
    diff.subset[i] = t.covariates(i, 0) == 1.0;
    diff.subset_b[i] = t.covariates(i, 0) == 0.0;
  }
  HypothesisFamily fam;
  fam.items.push_back(subgroup_of(t, 0, "x0"));
  fam.items.push_back(diff);
  fam.b_replications = 400;
  fam.seed = 3;
  const auto res = romano_wolf(t, fam, "t", "c");
  REQUIRE(res.rows.size() == 2);
  CHECK(res.rows[1].p_adjusted >= res.rows[1].p_unadjusted);
}

TEST_CASE("two-group z-test combines standard errors") {
  const auto a = make_estimate(0.3, 0.1);
  const auto b = make_estimate(0.1, 0.1);
  const auto test = two_group_difference(a, b);
  CHECK(test.difference.point == Approx(0.2));
  CHECK(test.difference.se == Approx(std::sqrt(0.02)));
  CHECK(test.z == Approx(0.2 / std::sqrt(0.02)));
  CHECK(test.p_value == Approx(0.157).margin(0.005));
}

TEST_CASE("family validation rejects malformed input") {
  const auto t = null_experiment(50, 1, 2);
  HypothesisFamily fam;
  CHECK_THROWS_AS(romano_wolf(t, fam, "t", "c"), config_error);  // empty

  fam.items.push_back(subgroup_of(t, 0, "x0"));
  fam.b_replications = 10;  // below the B >= 100 floor
  CHECK_THROWS_AS(romano_wolf(t, fam, "t", "c"), config_error);
}
