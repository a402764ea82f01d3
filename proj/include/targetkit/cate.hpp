#pragma once

#include <string>
#include <vector>

#include "targetkit/dr_engine.hpp"

namespace targetkit {

// Per-unit multi-arm treatment-effect predictions, produced out of fold.
// tau(i, p) estimates E[Y(p) - Y(0) | X = x_i]; the control column is zero.
struct CatePredictions {
  ArmSet arms;
  Matrix tau;  // n x n_arms
  LearnerSpec spec;
  int k_folds = 0;
  std::vector<std::string> warnings;

  std::size_t n_rows() const { return tau.rows(); }
};

struct ModelSelection {
  LearnerSpec chosen;
  std::size_t chosen_index = 0;
  std::vector<double> oof_mse;  // per candidate, in input order
};

// Picks the candidate with the smallest out-of-fold squared error on the
// outcome; exact ties keep the earlier-listed candidate.
inline ModelSelection select_outcome_model(const ExperimentTable& table,
                                           const std::vector<LearnerSpec>& candidates,
                                           const CrossFitPlan& plan) {
  if (candidates.size() < 2) {
    throw config_error("select_outcome_model: need at least 2 candidates");
  }
  ModelSelection sel;
  for (const auto& cand : candidates) {
    const auto oof = fit_predict_oof(table, table.outcome, cand, plan);
    double mse = 0.0;
    for (std::size_t i = 0; i < table.n_rows(); ++i) {
      const double r = table.outcome[i] - oof.pred[i];
      mse += r * r;
    }
    sel.oof_mse.push_back(mse / double(table.n_rows()));
  }
  for (std::size_t c = 1; c < candidates.size(); ++c) {
    if (sel.oof_mse[c] < sel.oof_mse[sel.chosen_index]) sel.chosen_index = c;
  }
  sel.chosen = candidates[sel.chosen_index];
  return sel;
}

enum class CateMethod { t_learner, dr_learner };

struct CateOptions {
  CateMethod method = CateMethod::dr_learner;
  // Propensity model for the dr-learner's scores; multinomial logit unless
  // overridden.
  LearnerSpec propensity{LearnerKind::regularized_multinomial_logit};
  double eps_clip = 0.01;
};

// T-learner: per-arm outcome models, differenced against control.
// DR-learner: AIPW contrast scores regressed on covariates, predicted out of
// fold (so the predictions average back to the AIPW ATE up to smoothing).
inline CatePredictions fit_cate(const ExperimentTable& table, const LearnerSpec& spec,
                                const CrossFitPlan& plan, const CateOptions& options = {}) {
  const std::size_t n = table.n_rows();
  const std::size_t n_arms = table.arms.size();
  const std::size_t c = table.arms.control_index;
  for (std::size_t a = 0; a < n_arms; ++a) {
    if (split_by_arm(table, a).empty()) {
      throw domain_error("fit_cate: arm '" + table.arms.labels[a] + "' has no rows");
    }
  }
  CatePredictions out;
  out.arms = table.arms;
  out.spec = spec;
  out.k_folds = plan.k_folds;
  out.tau = Matrix(n, n_arms);

  if (options.method == CateMethod::t_learner) {
    auto mu = fit_outcome_models_oof(table, spec, plan);
    out.warnings = std::move(mu.warnings);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < n_arms; ++p) {
        if (p == c) continue;
        out.tau(i, p) = mu.mu(i, p) - mu.mu(i, c);
      }
    }
    return out;
  }

  const auto scores = aipw_scores(table, spec, options.propensity, plan, options.eps_clip);
  out.warnings = scores.warnings;
  std::vector<double> col(n);
  for (std::size_t p = 0; p < n_arms; ++p) {
    if (p == c) continue;
    for (std::size_t i = 0; i < n; ++i) col[i] = scores.contrast(i, p);
    LearnerSpec stage2 = spec;
    stage2.seed = derive_seed(spec.seed, "dr-stage2-" + table.arms.labels[p]);
    const auto oof = fit_predict_oof(table, col, stage2, plan);
    for (std::size_t i = 0; i < n; ++i) out.tau(i, p) = oof.pred[i];
  }
  return out;
}

// CSV contract consumed by the assignment solver when run as a separate CLI
// step: row index plus one tau column per non-control arm.
inline void write_cate_csv(const CatePredictions& cates, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw config_error("cannot open output file: " + path);
  out << "row";
  for (std::size_t a = 0; a < cates.arms.size(); ++a) {
    if (a == cates.arms.control_index) continue;
    out << ",tau_" << cates.arms.labels[a];
  }
  out << '\n';
  for (std::size_t i = 0; i < cates.n_rows(); ++i) {
    out << i;
    for (std::size_t a = 0; a < cates.arms.size(); ++a) {
      if (a == cates.arms.control_index) continue;
      out << ',' << detail::format_double(cates.tau(i, a));
    }
    out << '\n';
  }
}

inline CatePredictions read_cate_csv(const std::string& path, const ArmSet& arms) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open cate file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw config_error("empty cate file: " + path);
  const auto header = detail::split_csv_line(line, 1);
  if (header.empty() || header[0] != "row") {
    throw config_error("cate file must start with a 'row' column");
  }
  std::vector<std::size_t> col_arm;  // arm index per tau column
  for (std::size_t j = 1; j < header.size(); ++j) {
    if (header[j].rfind("tau_", 0) != 0) {
      throw config_error("unexpected cate column '" + header[j] + "'");
    }
    col_arm.push_back(arms.index_of(header[j].substr(4)));
  }
  CatePredictions out;
  out.arms = arms;
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line, lineno);
    if (cells.size() != header.size()) {
      throw config_error("line " + std::to_string(lineno) + ": wrong field count");
    }
    std::vector<double> vals;
    for (std::size_t j = 1; j < cells.size(); ++j) {
      vals.push_back(detail::parse_double_cell(cells[j], lineno, header[j]));
    }
    rows.push_back(std::move(vals));
  }
  out.tau = Matrix(rows.size(), arms.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < col_arm.size(); ++j) {
      out.tau(i, col_arm[j]) = rows[i][j];
    }
  }
  return out;
}

}  // namespace targetkit
