#include <catch2/catch_amalgamated.hpp>

#include "targetkit/dr_engine.hpp"
#include "test_helpers.hpp"

using namespace targetkit;
using Catch::Approx;

namespace {

LearnerSpec ridge_spec(std::uint64_t seed = 1) {
  LearnerSpec s;
  s.kind = LearnerKind::regularized_linear;
  s.seed = seed;
  return s;
}

LearnerSpec logit_spec(std::uint64_t seed = 2) {
  LearnerSpec s;
  s.kind = LearnerKind::regularized_multinomial_logit;
  s.seed = seed;
  return s;
}

double clamp01(double v) { return std::clamp(v, 0.02, 0.98); }

struct RctDraw {
  ExperimentTable table;
  Matrix true_mu;    // n x 2
  Matrix true_prop;  // n x 2
};

// Two-arm experiment with binary covariate x1 and numeric x2. Assignment is
// Bernoulli(e(x)); outcomes are Bernoulli(mu_w(x)).
RctDraw draw_rct(std::size_t n, double tau_x0, double tau_x1, bool confounded,
                 std::uint64_t seed) {
  Rng rng(seed);
  RctDraw d;
  auto& t = d.table;
  t.arms.labels = {"control", "treated"};
  t.arms.control_index = 0;
  t.covariates = Matrix(n, 2);
  t.covariate_names = {"x1", "x2"};
  t.covariate_kinds = {ColumnKind::binary, ColumnKind::numeric};
  t.outcome_binary = true;
  d.true_mu = Matrix(n, 2);
  d.true_prop = Matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const double x1 = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const double x2 = rng.normal();
    t.covariates(i, 0) = x1;
    t.covariates(i, 1) = x2;
    const double e1 =
        confounded ? 1.0 / (1.0 + std::exp(-(0.6 * x1 - 0.4 * x2))) : 0.5;
    const double mu0 = clamp01(0.25 + 0.1 * x1 + 0.05 * x2);
    const double mu1 = clamp01(mu0 + (x1 == 1.0 ? tau_x1 : tau_x0));
    d.true_prop(i, 0) = 1.0 - e1;
    d.true_prop(i, 1) = e1;
    d.true_mu(i, 0) = mu0;
    d.true_mu(i, 1) = mu1;
    const int w = rng.bernoulli(e1) ? 1 : 0;
    t.arm.push_back(w);
    t.outcome.push_back(rng.bernoulli(w == 1 ? mu1 : mu0) ? 1.0 : 0.0);
  }
  return d;
}

}  // namespace

TEST_CASE("oracle nuisances recover the true ATE on a randomized design") {
  const auto d = draw_rct(2000, 0.10, 0.10, false, 927);
  const auto scores = aipw_scores_from_nuisance(d.table, d.true_mu, d.true_prop);
  const auto est = aipw_ate(scores, std::size_t(1));
  CHECK(est.point == Approx(0.10).margin(0.02));
  CHECK(est.se > 0.0);
}

TEST_CASE("zero outcome model and marginal propensities reduce to Horvitz-Thompson") {
  const auto d = draw_rct(500, 0.1, 0.1, false, 33);
  const std::size_t n = d.table.n_rows();
  double share1 = 0.0;
  for (int a : d.table.arm) share1 += a;
  share1 /= double(n);

  Matrix mu(n, 2);  // identically zero
  Matrix prop(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    prop(i, 0) = 1.0 - share1;
    prop(i, 1) = share1;
  }
  const auto scores = aipw_scores_from_nuisance(d.table, mu, prop);
  const auto est = aipw_ate(scores, std::size_t(1));

  double ht = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = d.table.outcome[i];
    ht += d.table.arm[i] == 1 ? y / share1 : -y / (1.0 - share1);
  }
  ht /= double(n);
  CHECK(est.point == Approx(ht).margin(1e-12));
}

TEST_CASE("aipw_ate degenerate cases") {
  // Constant scores: point equals the constant, se collapses.
  const std::size_t n = 50;
  DrScores s;
  s.arms.labels = {"control", "treated"};
  s.arms.control_index = 0;
  s.contrast = Matrix(n, 2);
  s.baseline.assign(n, 0.3);
  for (std::size_t i = 0; i < n; ++i) s.contrast(i, 1) = 0.129;
  auto est = aipw_ate(s, std::size_t(1));
  CHECK(est.point == Approx(0.129));
  CHECK(est.se == Approx(0.0).margin(1e-12));

  // Contrast of control with itself is identically zero.
  est = aipw_ate(s, std::size_t(0));
  CHECK(est.point == 0.0);
  CHECK(est.se == 0.0);
}

TEST_CASE("cross-fitted AIPW covers the truth at nominal rate") {
  const double tau = 0.129;
  const int reps = 200;
  int covered = 0;
  for (int r = 0; r < reps; ++r) {
    const auto d = draw_rct(400, tau, tau, false, 7000 + std::uint64_t(r));
    const auto plan = CrossFitPlan::make(d.table, 5, 11 + std::uint64_t(r));
    const auto scores = aipw_scores(d.table, ridge_spec(), logit_spec(), plan);
    const auto est = aipw_ate(scores, std::size_t(1));
    covered += est.ci_low <= tau && tau <= est.ci_high;
  }
  const double rate = double(covered) / reps;
  CHECK(rate >= 0.90);
  CHECK(rate <= 0.99);
}

TEST_CASE("double robustness: one nuisance may be arbitrary") {
  const double tau = 0.10;
  const int reps = 60;
  const std::size_t n = 4000;

  double bias_bad_prop = 0.0;
  double bias_bad_mu = 0.0;
  for (int r = 0; r < reps; ++r) {
    const auto d = draw_rct(n, tau, tau, true, 5200 + std::uint64_t(r));

    // Correct mu, wrong (flat) propensity.
    Matrix flat_prop(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
      flat_prop(i, 0) = 0.5;
      flat_prop(i, 1) = 0.5;
    }
    bias_bad_prop +=
        aipw_ate(aipw_scores_from_nuisance(d.table, d.true_mu, flat_prop), std::size_t(1))
            .point -
        tau;

    // Correct propensity, wrong (zero) outcome model.
    Matrix zero_mu(n, 2);
    bias_bad_mu +=
        aipw_ate(aipw_scores_from_nuisance(d.table, zero_mu, d.true_prop), std::size_t(1))
            .point -
        tau;
  }
  CHECK(std::fabs(bias_bad_prop / reps) < 0.015);
  CHECK(std::fabs(bias_bad_mu / reps) < 0.015);
}

TEST_CASE("group ATEs: partition identity and degenerate groups") {
  const auto d = draw_rct(600, 0.05, 0.35, false, 246);
  const auto scores = aipw_scores_from_nuisance(d.table, d.true_mu, d.true_prop);

  // A single group containing all rows reproduces the pooled ATE.
  GroupAssignmentLabels all;
  all.label.assign(d.table.n_rows(), 1);
  all.n_groups = 1;
  const auto single = group_ate(scores, all, 1);
  REQUIRE(single.groups[0].has_value());
  CHECK(single.groups[0]->point == single.pooled.point);
  CHECK(single.groups[0]->se == Approx(single.pooled.se).margin(1e-15));

  // Random 3-group partition: share-weighted group means equal the pooled
  // mean to near machine precision.
  Rng rng(9);
  GroupAssignmentLabels g3;
  g3.n_groups = 3;
  for (std::size_t i = 0; i < d.table.n_rows(); ++i) {
    g3.label.push_back(1 + int(rng.below(3)));
  }
  const auto parts = group_ate(scores, g3, 1);
  double combined = 0.0;
  for (int g = 0; g < 3; ++g) {
    REQUIRE(parts.groups[std::size_t(g)].has_value());
    combined += parts.shares[std::size_t(g)] * parts.groups[std::size_t(g)]->point;
  }
  CHECK(combined == Approx(parts.pooled.point).margin(1e-12));

  // A singleton group is skipped with a warning.
  GroupAssignmentLabels lone = g3;
  lone.n_groups = 4;
  lone.label[0] = 4;
  const auto with_lone = group_ate(scores, lone, 1);
  CHECK_FALSE(with_lone.groups[3].has_value());
  REQUIRE_FALSE(with_lone.warnings.empty());
}

TEST_CASE("group ATE finds a calibrated high-effect subgroup") {
  // x1 = 1 carries a 0.35 effect, x1 = 0 only 0.05.
  const auto d = draw_rct(3000, 0.05, 0.35, false, 5555);
  const auto scores = aipw_scores_from_nuisance(d.table, d.true_mu, d.true_prop);
  GroupAssignmentLabels g;
  g.n_groups = 2;
  for (std::size_t i = 0; i < d.table.n_rows(); ++i) {
    g.label.push_back(d.table.covariates(i, 0) == 1.0 ? 1 : 2);
  }
  const auto res = group_ate(scores, g, 1);
  REQUIRE(res.groups[0].has_value());
  CHECK(res.groups[0]->point == Approx(0.35).margin(0.07));
  CHECK(res.groups[1]->point == Approx(0.05).margin(0.07));
}

TEST_CASE("hajek value: constant weights reduce to the subset mean") {
  const auto d = draw_rct(200, 0.1, 0.1, false, 62);
  Matrix uniform(d.table.n_rows(), 2);
  for (std::size_t i = 0; i < d.table.n_rows(); ++i) {
    uniform(i, 0) = 0.5;
    uniform(i, 1) = 0.5;
  }
  const auto treated = split_by_arm(d.table, "treated");
  const auto est = hajek_value(d.table, uniform, treated, 1);
  double mean = 0.0;
  for (std::size_t i : treated) mean += d.table.outcome[i];
  mean /= double(treated.size());
  CHECK(est.point == Approx(mean).margin(1e-12));

  // Single-row subset: the point is that outcome with zero se.
  const std::vector<std::size_t> one{treated[0]};
  const auto single = hajek_value(d.table, uniform, one, 1);
  CHECK(single.point == d.table.outcome[treated[0]]);
  CHECK(single.se == 0.0);

  CHECK_THROWS_AS(hajek_value(d.table, uniform, {}, 1), domain_error);
  const auto control = split_by_arm(d.table, "control");
  CHECK_THROWS_AS(hajek_value(d.table, uniform, control, 1), domain_error);
}

TEST_CASE("hajek value corrects confounded selection into the observed arm") {
  const std::size_t n = 2000;
  const auto d = draw_rct(n, 0.2, 0.2, true, 8181);
  // Target group: everyone. Observed treated rows over-represent x1 = 1, so
  // the raw mean is biased; weighting by 1/e recovers E[mu_1(x)].
  const auto treated = split_by_arm(d.table, "treated");
  const auto est = hajek_value(d.table, d.true_prop, treated, 1);
  double truth = 0.0;
  for (std::size_t i = 0; i < n; ++i) truth += d.true_mu(i, 1);
  truth /= double(n);
  CHECK(est.point == Approx(truth).margin(0.02));
}

TEST_CASE("adding a constant to outcomes leaves contrasts unchanged") {
  const auto d = draw_rct(300, 0.1, 0.1, false, 77);
  ExperimentTable shifted = d.table;
  shifted.outcome_binary = false;
  ExperimentTable base = d.table;
  base.outcome_binary = false;
  for (auto& y : shifted.outcome) y += 5.0;

  const auto plan = CrossFitPlan::make(base, 5, 4);
  const auto plan2 = CrossFitPlan::make(shifted, 5, 4);
  const auto s0 = aipw_scores(base, ridge_spec(), logit_spec(), plan);
  const auto s1 = aipw_scores(shifted, ridge_spec(), logit_spec(), plan2);
  for (std::size_t i = 0; i < base.n_rows(); ++i) {
    CHECK(s0.contrast(i, 1) == Approx(s1.contrast(i, 1)).margin(1e-9));
    CHECK(s1.baseline[i] - s0.baseline[i] == Approx(5.0).margin(1e-9));
  }
}

TEST_CASE("aipw input validation") {
  const auto d = draw_rct(50, 0.1, 0.1, false, 3);
  Matrix bad_prop(50, 2);  // zeros: outside (0,1)
  CHECK_THROWS_AS(aipw_scores_from_nuisance(d.table, d.true_mu, bad_prop), domain_error);

  // Missing control arm.
  ExperimentTable no_control = d.table;
  for (auto& a : no_control.arm) a = 1;
  CHECK_THROWS_AS(aipw_scores_from_nuisance(no_control, d.true_mu, d.true_prop),
                  domain_error);
}

TEST_CASE("scores CSV export lists one line per row") {
  const auto d = draw_rct(20, 0.1, 0.1, false, 12);
  const auto scores = aipw_scores_from_nuisance(d.table, d.true_mu, d.true_prop);
  const auto path = testutil::write_temp_file("scores", "");
  write_scores_csv(scores, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "row,baseline,score_treated");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 20);
}

TEST_CASE("pooling treatment arms relabels non-control rows") {
  ExperimentTable t = testutil::make_table({"control", "m", "c"}, 0, {0, 1, 2, 0, 2},
                                           {0, 1, 0, 1, 1});
  const auto pooled = pool_treatment_arms(t);
  CHECK(pooled.arms.labels == std::vector<std::string>{"control", "any-program"});
  CHECK(pooled.arm == std::vector<int>{0, 1, 1, 0, 1});
}

TEST_CASE("cross-fitted pipeline behaves on a challenges-scale pooled draw") {
  // Confounded three-group design similar to pooling the experiment with
  // late applicants; AIPW stays near the truth.
  const double tau = 0.08;
  const auto d = draw_rct(600, tau, tau, true, 4242);
  const auto plan = CrossFitPlan::make(d.table, 5, 21);
  const auto scores = aipw_scores(d.table, ridge_spec(), logit_spec(), plan);
  const auto est = aipw_ate(scores, std::size_t(1));
  CHECK(est.point == Approx(tau).margin(3.5 * est.se));
}
