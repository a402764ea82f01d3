#pragma once

#include <optional>
#include <string>
#include <vector>

#include "targetkit/core_stats.hpp"
#include "targetkit/nuisance.hpp"

namespace targetkit {

// Priority-group labels over rows: contiguous 1..G, every row labelled.
struct GroupAssignmentLabels {
  std::vector<int> label;
  int n_groups = 0;

  void validate(std::size_t n) const {
    if (label.size() != n) throw config_error("group labels: length mismatch");
    if (n_groups < 1) throw config_error("group labels: need >= 1 group");
    for (int g : label) {
      if (g < 1 || g > n_groups) {
        throw config_error("group labels must be contiguous from 1");
      }
    }
  }
};

// Per-row doubly-robust scores. contrast(i, p) is the AIPW transformed
// outcome for arm p versus control (zero in the control column); baseline[i]
// is the DR score for the untreated potential outcome, so
// baseline + contrast(., p) scores Y(p).
struct DrScores {
  ArmSet arms;
  Matrix contrast;    // n x n_arms
  std::vector<double> baseline;
  Matrix mu_hat;      // n x n_arms out-of-fold outcome predictions
  Matrix propensity;  // n x n_arms out-of-fold, clipped
  std::vector<std::string> warnings;

  std::size_t n_rows() const { return baseline.size(); }
};

// Assembles AIPW scores from given nuisance predictions. Exposed separately
// so oracle nuisances (the true mu and e of a simulation) can be injected.
inline DrScores aipw_scores_from_nuisance(const ExperimentTable& table,
                                          const Matrix& mu_hat,
                                          const Matrix& propensity) {
  const std::size_t n = table.n_rows();
  const std::size_t n_arms = table.arms.size();
  if (mu_hat.rows() != n || mu_hat.cols() != n_arms || propensity.rows() != n ||
      propensity.cols() != n_arms) {
    throw config_error("aipw_scores: nuisance matrix shape mismatch");
  }
  const std::size_t c = table.arms.control_index;
  bool control_seen = false;
  for (std::size_t i = 0; i < n; ++i) control_seen |= std::size_t(table.arm[i]) == c;
  if (!control_seen) throw domain_error("aipw_scores: control arm has no rows");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < n_arms; ++a) {
      if (!(propensity(i, a) > 0.0 && propensity(i, a) < 1.0)) {
        throw domain_error("aipw_scores: propensities must lie strictly in (0,1)");
      }
    }
  }

  DrScores s;
  s.arms = table.arms;
  s.mu_hat = mu_hat;
  s.propensity = propensity;
  s.contrast = Matrix(n, n_arms);
  s.baseline.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t w = std::size_t(table.arm[i]);
    const double y = table.outcome[i];
    const double control_term =
        w == c ? (y - mu_hat(i, c)) / propensity(i, c) : 0.0;
    s.baseline[i] = mu_hat(i, c) + control_term;
    for (std::size_t p = 0; p < n_arms; ++p) {
      if (p == c) continue;
      const double treat_term = w == p ? (y - mu_hat(i, p)) / propensity(i, p) : 0.0;
      s.contrast(i, p) = mu_hat(i, p) - mu_hat(i, c) + treat_term - control_term;
    }
  }
  return s;
}

// Full AIPW pipeline: cross-fitted per-arm outcome models and cross-fitted,
// clipped propensities.
inline DrScores aipw_scores(const ExperimentTable& table, const LearnerSpec& outcome_spec,
                            const LearnerSpec& propensity_spec, const CrossFitPlan& plan,
                            double eps_clip = 0.01) {
  auto outcomes = fit_outcome_models_oof(table, outcome_spec, plan);
  auto prop = fit_propensity(table, propensity_spec, plan, eps_clip);
  DrScores s = aipw_scores_from_nuisance(table, outcomes.mu, prop.prob);
  s.warnings = std::move(outcomes.warnings);
  s.warnings.insert(s.warnings.end(), prop.warnings.begin(), prop.warnings.end());
  return s;
}

// ATE for arm p versus control: the mean score with se = sd / sqrt(n).
inline Estimate aipw_ate(const DrScores& scores, std::size_t p, double level = 0.95) {
  const std::size_t n = scores.n_rows();
  if (p >= scores.arms.size()) throw domain_error("aipw_ate: arm index out of range");
  if (p == scores.arms.control_index) {
    return make_estimate(0.0, 0.0, 0, long(n), level);
  }
  std::vector<double> col(n);
  for (std::size_t i = 0; i < n; ++i) col[i] = scores.contrast(i, p);
  const double point = mean_of(col);
  const double se = std::sqrt(sample_variance(col) / double(n));
  return make_estimate(point, se, long(n), long(n), level);
}

inline Estimate aipw_ate(const DrScores& scores, const std::string& arm,
                         double level = 0.95) {
  return aipw_ate(scores, scores.arms.index_of(arm), level);
}

// Per-priority-group AIPW ATEs plus the pooled ATE as the comparison line.
// Groups of fewer than 2 rows cannot carry an se and are skipped with a
// warning.
struct GroupAteResult {
  std::vector<std::optional<Estimate>> groups;  // index g-1
  std::vector<double> shares;
  Estimate pooled;
  std::vector<std::string> warnings;
};

inline GroupAteResult group_ate(const DrScores& scores,
                                const GroupAssignmentLabels& labels, std::size_t p,
                                double level = 0.95) {
  const std::size_t n = scores.n_rows();
  labels.validate(n);
  if (p >= scores.arms.size() || p == scores.arms.control_index) {
    throw domain_error("group_ate: p must be a non-control arm");
  }
  GroupAteResult out;
  out.pooled = aipw_ate(scores, p, level);
  bool any = false;
  for (int g = 1; g <= labels.n_groups; ++g) {
    std::vector<double> vals;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels.label[i] == g) vals.push_back(scores.contrast(i, p));
    }
    if (vals.size() < 2) {
      out.groups.emplace_back(std::nullopt);
      out.shares.push_back(double(vals.size()) / double(n));
      out.warnings.push_back("group " + std::to_string(g) +
                             " has fewer than 2 rows; skipped");
      continue;
    }
    any = true;
    const double point = mean_of(vals);
    const double se = std::sqrt(sample_variance(vals) / double(vals.size()));
    out.groups.emplace_back(
        make_estimate(point, se, long(vals.size()), long(vals.size()), level));
    out.shares.push_back(double(vals.size()) / double(n));
  }
  if (!any) throw domain_error("group_ate: every group is empty or degenerate");
  return out;
}

// Hajek (self-normalized inverse propensity weighted) mean outcome of a
// subset whose rows were all observed in arm p. The se is the linearized
// weighted-mean variance.
inline Estimate hajek_value(const ExperimentTable& table, const Matrix& propensity,
                            const std::vector<std::size_t>& subset, std::size_t p,
                            double level = 0.95) {
  if (subset.empty()) throw domain_error("hajek_value: empty subset");
  if (p >= table.arms.size()) throw domain_error("hajek_value: arm index out of range");
  double wsum = 0.0, wy = 0.0;
  for (std::size_t i : subset) {
    if (std::size_t(table.arm[i]) != p) {
      throw domain_error("hajek_value: subset row not observed in the target arm");
    }
    const double e = propensity(i, p);
    if (!(e > 0.0)) throw domain_error("hajek_value: nonpositive propensity");
    const double w = 1.0 / e;
    wsum += w;
    wy += w * table.outcome[i];
  }
  const double v = wy / wsum;
  double var = 0.0;
  for (std::size_t i : subset) {
    const double w = 1.0 / propensity(i, p);
    const double r = table.outcome[i] - v;
    var += w * w * r * r;
  }
  var /= wsum * wsum;
  return make_estimate(v, std::sqrt(var), long(subset.size()), 0, level);
}

// Scores export for external auditing: one row per unit with per-arm
// contrasts and the baseline score.
inline void write_scores_csv(const DrScores& scores, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw config_error("cannot open output file: " + path);
  out << "row,baseline";
  for (std::size_t a = 0; a < scores.arms.size(); ++a) {
    if (a == scores.arms.control_index) continue;
    out << ",score_" << scores.arms.labels[a];
  }
  out << '\n';
  for (std::size_t i = 0; i < scores.n_rows(); ++i) {
    out << i << ',' << detail::format_double(scores.baseline[i]);
    for (std::size_t a = 0; a < scores.arms.size(); ++a) {
      if (a == scores.arms.control_index) continue;
      out << ',' << detail::format_double(scores.contrast(i, a));
    }
    out << '\n';
  }
}

// Relabels every non-control arm to a single pooled label, for analyses where
// the treatment is "admitted to any program".
inline ExperimentTable pool_treatment_arms(const ExperimentTable& table,
                                           const std::string& pooled_label = "any-program") {
  ExperimentTable out = table;
  const std::size_t c = table.arms.control_index;
  out.arms.labels = {table.arms.labels[c], pooled_label};
  out.arms.control_index = 0;
  for (std::size_t i = 0; i < out.n_rows(); ++i) {
    out.arm[i] = std::size_t(table.arm[i]) == c ? 0 : 1;
  }
  return out;
}

}  // namespace targetkit
