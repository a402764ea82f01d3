#pragma once

#include <map>
#include <string>
#include <vector>

#include "targetkit/dataset.hpp"
#include "targetkit/estimate.hpp"

namespace targetkit {

namespace detail {

struct ArmMoments {
  double mean = 0.0;
  double var = 0.0;  // unbiased sample variance
  long n = 0;
};

inline ArmMoments arm_moments(std::span<const double> values,
                              const std::vector<std::size_t>& rows) {
  ArmMoments m;
  m.n = long(rows.size());
  if (m.n == 0) return m;
  double s = 0.0;
  for (std::size_t i : rows) s += values[i];
  m.mean = s / double(m.n);
  if (m.n > 1) {
    double ss = 0.0;
    for (std::size_t i : rows) ss += (values[i] - m.mean) * (values[i] - m.mean);
    m.var = ss / double(m.n - 1);
  }
  return m;
}

}  // namespace detail

// Difference in means over an arbitrary per-row outcome vector; the Neyman
// variance s_t^2/n_t + s_c^2/n_c uses unbiased sample variances.
inline Estimate diff_in_means_values(const ExperimentTable& table,
                                     std::span<const double> values,
                                     const std::string& treat_arm,
                                     const std::string& control_arm,
                                     double level = 0.95) {
  const auto ti = split_by_arm(table, treat_arm);
  const auto ci = split_by_arm(table, control_arm);
  if (ti.empty() || ci.empty()) {
    throw domain_error("diff_in_means: empty arm '" +
                       (ti.empty() ? treat_arm : control_arm) + "'");
  }
  const auto t = detail::arm_moments(values, ti);
  const auto c = detail::arm_moments(values, ci);
  const double se = std::sqrt(t.var / double(t.n) + c.var / double(c.n));
  return make_estimate(t.mean - c.mean, se, t.n, c.n, level);
}

inline Estimate diff_in_means(const ExperimentTable& table, const std::string& treat_arm,
                              const std::string& control_arm, double level = 0.95) {
  return diff_in_means_values(table, table.outcome, treat_arm, control_arm, level);
}

// ATE as a percentage of the control-group mean. The standard error comes
// from the delta method for the ratio of the two independent arm means;
// control_se = 0 treats the baseline as known and rescales est.se only.
inline Estimate ate_pct_baseline(const Estimate& est, double control_mean,
                                 double control_se = 0.0) {
  if (!(control_mean > 0.0)) {
    throw domain_error("ate_pct_baseline: control mean must be positive");
  }
  const double point = 100.0 * est.point / control_mean;
  const double var_c = control_se * control_se;
  double var_t = est.se * est.se - var_c;
  if (var_t < 0.0) var_t = 0.0;
  const double treat_mean = est.point + control_mean;
  const double c2 = control_mean * control_mean;
  const double var_ratio = var_t / c2 + treat_mean * treat_mean * var_c / (c2 * c2);
  return make_estimate(point, 100.0 * std::sqrt(var_ratio), est.n_treat, est.n_control,
                       est.level);
}

// Which pair-level statistic enters the dispersion formula
// V = 1/(J(J-1)) sum_j (t_j - tbar)^2. The treated-minus-control difference is
// the default; the pair-mean-outcome reading is kept behind this switch.
enum class PairStatistic { treated_minus_control, pair_mean_outcome };

struct PairedAteResult {
  Estimate estimate;
  long complete_pairs = 0;
  long incomplete_pairs = 0;
};

// Paired ATE over complete (one treated, one control) pairs. The variance is
// the conservative pair-dispersion estimator; incomplete pairs are excluded
// and counted.
inline PairedAteResult paired_ate(const ExperimentTable& table,
                                  const std::string& treat_arm,
                                  const std::string& control_arm,
                                  PairStatistic stat = PairStatistic::treated_minus_control,
                                  double level = 0.95) {
  if (!table.has_pairs()) throw domain_error("paired_ate: table has no pair_id");
  const std::size_t t = table.arms.index_of(treat_arm);
  const std::size_t c = table.arms.index_of(control_arm);
  std::map<long, std::pair<int, int>> pairs;  // pair -> (treated row, control row)
  for (std::size_t i = 0; i < table.n_rows(); ++i) {
    if (table.pair_id[i] < 0) continue;
    auto [it, inserted] = pairs.try_emplace(table.pair_id[i], -1, -1);
    if (std::size_t(table.arm[i]) == t) it->second.first = int(i);
    if (std::size_t(table.arm[i]) == c) it->second.second = int(i);
    (void)inserted;
  }
  std::vector<double> diffs, pair_means;
  long incomplete = 0;
  for (const auto& [pid, rows] : pairs) {
    (void)pid;
    if (rows.first < 0 || rows.second < 0) {
      ++incomplete;
      continue;
    }
    const double yt = table.outcome[rows.first];
    const double yc = table.outcome[rows.second];
    diffs.push_back(yt - yc);
    pair_means.push_back(0.5 * (yt + yc));
  }
  const long J = long(diffs.size());
  if (J < 2) throw domain_error("paired_ate: fewer than 2 complete pairs");
  const double point = mean_of(diffs);
  const std::vector<double>& stat_values =
      stat == PairStatistic::treated_minus_control ? diffs : pair_means;
  const double center = mean_of(stat_values);
  double v = 0.0;
  for (double s : stat_values) v += (s - center) * (s - center);
  v /= double(J) * double(J - 1);
  PairedAteResult out;
  out.estimate = make_estimate(point, std::sqrt(v), J, J, level);
  out.complete_pairs = J;
  out.incomplete_pairs = incomplete;
  return out;
}

// One covariate-balance row: standardized mean difference and a two-sample
// z-test p-value. Zero-variance covariates report smd 0, p 1.
struct BalanceRow {
  std::string covariate;
  double mean_treat = 0.0;
  double mean_control = 0.0;
  double smd = 0.0;
  double p_value = 1.0;
};

inline std::vector<BalanceRow> balance_table(const ExperimentTable& table,
                                             const std::string& treat_arm,
                                             const std::string& control_arm) {
  const auto ti = split_by_arm(table, treat_arm);
  const auto ci = split_by_arm(table, control_arm);
  if (ti.empty() || ci.empty()) {
    throw domain_error("balance_table: empty arm");
  }
  std::vector<BalanceRow> rows;
  rows.reserve(table.n_covariates());
  std::vector<double> col(table.n_rows());
  for (std::size_t j = 0; j < table.n_covariates(); ++j) {
    for (std::size_t i = 0; i < table.n_rows(); ++i) col[i] = table.covariates(i, j);
    const auto t = detail::arm_moments(col, ti);
    const auto c = detail::arm_moments(col, ci);
    BalanceRow r;
    r.covariate = table.covariate_names[j];
    r.mean_treat = t.mean;
    r.mean_control = c.mean;
    const double pooled = t.var + c.var;
    if (pooled > 0.0) {
      r.smd = std::fabs(t.mean - c.mean) / std::sqrt(pooled);
      const double se = std::sqrt(t.var / double(t.n) + c.var / double(c.n));
      r.p_value = se > 0.0 ? two_sided_p((t.mean - c.mean) / se) : 1.0;
    } else {
      r.smd = 0.0;
      r.p_value = 1.0;
    }
    rows.push_back(r);
  }
  return rows;
}

// Cumulative-outcome ATE: one diff-in-means per month, where column m of
// outcome_by_month is the 0/1 "success observed by month m" indicator.
// Rows must be monotone nondecreasing across months.
inline std::vector<Estimate> cumulative_ate(const ExperimentTable& table,
                                            const Matrix& outcome_by_month,
                                            const std::vector<std::string>& months,
                                            const std::string& treat_arm,
                                            const std::string& control_arm,
                                            double level = 0.95) {
  if (outcome_by_month.rows() != table.n_rows() ||
      outcome_by_month.cols() != months.size()) {
    throw config_error("cumulative_ate: matrix shape does not match table/months");
  }
  for (std::size_t i = 0; i < outcome_by_month.rows(); ++i) {
    double prev = 0.0;
    for (std::size_t m = 0; m < outcome_by_month.cols(); ++m) {
      const double v = outcome_by_month(i, m);
      if (v != 0.0 && v != 1.0) {
        throw config_error("cumulative_ate: entries must be 0/1 (row " +
                           std::to_string(i) + ")");
      }
      if (v < prev) {
        throw config_error("cumulative_ate: non-monotone row " + std::to_string(i));
      }
      prev = v;
    }
  }
  std::vector<Estimate> out;
  out.reserve(months.size());
  std::vector<double> col(table.n_rows());
  for (std::size_t m = 0; m < months.size(); ++m) {
    for (std::size_t i = 0; i < table.n_rows(); ++i) col[i] = outcome_by_month(i, m);
    out.push_back(diff_in_means_values(table, col, treat_arm, control_arm, level));
  }
  return out;
}

inline nlohmann::json to_json(const BalanceRow& r) {
  return {{"covariate", r.covariate},
          {"mean_treat", r.mean_treat},
          {"mean_control", r.mean_control},
          {"smd", r.smd},
          {"p_value", r.p_value}};
}

inline nlohmann::json balance_to_json(const std::vector<BalanceRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) arr.push_back(to_json(r));
  return arr;
}

}  // namespace targetkit
