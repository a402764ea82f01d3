#pragma once

#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "targetkit/dataset.hpp"

namespace targetkit {

// ---------------------------------------------------------------------------
// Learner specifications.
// ---------------------------------------------------------------------------

enum class LearnerKind {
  regularized_linear,
  regularized_multinomial_logit,
  random_forest_regressor,
  gradient_boosted_stumps,
};

inline const char* to_string(LearnerKind k) {
  switch (k) {
    case LearnerKind::regularized_linear: return "regularized-linear";
    case LearnerKind::regularized_multinomial_logit: return "regularized-multinomial-logit";
    case LearnerKind::random_forest_regressor: return "random-forest-regressor";
    case LearnerKind::gradient_boosted_stumps: return "gradient-boosted-stumps";
  }
  return "regularized-linear";
}

inline LearnerKind learner_kind_from_string(const std::string& s) {
  if (s == "regularized-linear") return LearnerKind::regularized_linear;
  if (s == "regularized-multinomial-logit") return LearnerKind::regularized_multinomial_logit;
  if (s == "random-forest-regressor") return LearnerKind::random_forest_regressor;
  if (s == "gradient-boosted-stumps") return LearnerKind::gradient_boosted_stumps;
  throw config_error("unknown learner kind: " + s);
}

struct LearnerSpec {
  LearnerKind kind = LearnerKind::regularized_linear;
  double penalty = -1.0;      // ridge strength; negative means 1/n at fit time
  int trees = 200;            // forest
  int max_depth = -1;         // forest; -1 = grow to min_leaf, 0 = mean model
  int min_leaf = 5;           // forest and stump leaves
  int rounds = 300;           // boosting
  double learning_rate = 0.1; // boosting
  double subsample = 1.0;     // boosting row fraction per round
  std::uint64_t seed = 0;

  void validate() const {
    if (trees < 1) throw config_error("learner: trees must be >= 1");
    if (min_leaf < 1) throw config_error("learner: min_leaf must be >= 1");
    if (rounds < 1) throw config_error("learner: rounds must be >= 1");
    if (!(learning_rate > 0.0 && learning_rate <= 1.0)) {
      throw config_error("learner: learning_rate must be in (0,1]");
    }
    if (!(subsample > 0.0 && subsample <= 1.0)) {
      throw config_error("learner: subsample must be in (0,1]");
    }
    if (penalty >= 0.0 && !std::isfinite(penalty)) {
      throw config_error("learner: penalty must be finite");
    }
  }

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)},     {"penalty", penalty},
            {"trees", trees},              {"max_depth", max_depth},
            {"min_leaf", min_leaf},        {"rounds", rounds},
            {"learning_rate", learning_rate}, {"subsample", subsample},
            {"seed", seed}};
  }

  static LearnerSpec from_json(const nlohmann::json& j) {
    LearnerSpec s;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k == "kind") s.kind = learner_kind_from_string(it.value().get<std::string>());
      else if (k == "penalty") s.penalty = it.value().get<double>();
      else if (k == "trees") s.trees = it.value().get<int>();
      else if (k == "max_depth") s.max_depth = it.value().get<int>();
      else if (k == "min_leaf") s.min_leaf = it.value().get<int>();
      else if (k == "rounds") s.rounds = it.value().get<int>();
      else if (k == "learning_rate") s.learning_rate = it.value().get<double>();
      else if (k == "subsample") s.subsample = it.value().get<double>();
      else if (k == "seed") s.seed = it.value().get<std::uint64_t>();
      else throw config_error("learner spec: unknown key '" + k + "'");
    }
    s.validate();
    return s;
  }
};

// ---------------------------------------------------------------------------
// Cross-fitting plan. Fold membership is keyed to a canonical ordering of row
// contents rather than row positions, so permuting the input rows leaves each
// data point's fold (and out-of-fold prediction) unchanged.
// ---------------------------------------------------------------------------

struct CrossFitPlan {
  int k_folds = 5;
  std::vector<int> fold;            // per row
  std::vector<std::size_t> canonical;  // row indices in canonical order

  static CrossFitPlan make(const ExperimentTable& table, int k_folds, std::uint64_t seed) {
    const std::size_t n = table.n_rows();
    if (k_folds < 2) throw config_error("cross-fit plan: K must be >= 2");
    if (n < std::size_t(k_folds)) {
      throw config_error("cross-fit plan: need at least K rows");
    }
    CrossFitPlan plan;
    plan.k_folds = k_folds;
    plan.canonical = canonical_order(table);
    std::vector<int> labels(n);
    // Balanced labels: fold sizes differ by at most one.
    for (std::size_t i = 0; i < n; ++i) labels[i] = int(i % std::size_t(k_folds));
    Rng rng(derive_seed(seed, "crossfit"));
    rng.shuffle(labels);
    plan.fold.resize(n);
    for (std::size_t pos = 0; pos < n; ++pos) {
      plan.fold[plan.canonical[pos]] = labels[pos];
    }
    return plan;
  }

  // Rows sorted by full content (covariates, arm, outcome, pair, selected);
  // ties keep input order, which only happens for duplicated rows.
  static std::vector<std::size_t> canonical_order(const ExperimentTable& t) {
    std::vector<std::size_t> idx(t.n_rows());
    std::iota(idx.begin(), idx.end(), 0);
    auto row_less = [&](std::size_t a, std::size_t b) {
      for (std::size_t j = 0; j < t.n_covariates(); ++j) {
        if (t.covariates(a, j) != t.covariates(b, j)) {
          return t.covariates(a, j) < t.covariates(b, j);
        }
      }
      // Arms compare by label so reordering the arm set never moves folds.
      if (t.arm[a] != t.arm[b]) {
        return t.arms.labels[t.arm[a]] < t.arms.labels[t.arm[b]];
      }
      if (t.outcome[a] != t.outcome[b]) return t.outcome[a] < t.outcome[b];
      if (t.has_pairs() && t.pair_id[a] != t.pair_id[b]) return t.pair_id[a] < t.pair_id[b];
      if (t.has_selected() && t.selected[a] != t.selected[b]) {
        return t.selected[a] < t.selected[b];
      }
      return false;
    };
    std::stable_sort(idx.begin(), idx.end(), row_less);
    return idx;
  }

  void validate(std::size_t n) const {
    if (fold.size() != n) throw config_error("fold assignment length mismatch");
    std::vector<long> sizes(k_folds, 0);
    for (int f : fold) {
      if (f < 0 || f >= k_folds) throw config_error("fold index out of range");
      ++sizes[f];
    }
    long lo = sizes[0], hi = sizes[0];
    for (long s : sizes) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
    if (lo == 0) throw config_error("empty fold");
    if (hi - lo > 1) throw config_error("fold sizes differ by more than 1");
  }
};

// ---------------------------------------------------------------------------
// Regression learners.
// ---------------------------------------------------------------------------

class RegressionModel {
 public:
  virtual ~RegressionModel() = default;
  virtual double predict(std::span<const double> x) const = 0;
};

namespace detail {

// Ridge with an unpenalized intercept: (X'X/n + lambda*D) b = X'y/n.
class RidgeModel final : public RegressionModel {
 public:
  RidgeModel(const Matrix& x, std::span<const double> y, double lambda) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    const std::size_t m = d + 1;
    Matrix a(m, m);
    std::vector<double> rhs(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      // design row: [1, x_i]
      a(0, 0) += 1.0;
      rhs[0] += y[i];
      for (std::size_t j = 0; j < d; ++j) {
        const double xj = x(i, j);
        a(0, j + 1) += xj;
        rhs[j + 1] += xj * y[i];
        for (std::size_t k = j; k < d; ++k) {
          a(j + 1, k + 1) += xj * x(i, k);
        }
      }
    }
    const double inv_n = 1.0 / double(n);
    for (std::size_t j = 0; j < m; ++j) {
      rhs[j] *= inv_n;
      for (std::size_t k = j; k < m; ++k) {
        a(j, k) *= inv_n;
        a(k, j) = a(j, k);
      }
    }
    for (std::size_t j = 1; j < m; ++j) a(j, j) += lambda;
    coef_ = solve_spd(std::move(a), std::move(rhs));
  }

  double predict(std::span<const double> x) const override {
    double v = coef_[0];
    for (std::size_t j = 0; j < x.size(); ++j) v += coef_[j + 1] * x[j];
    return v;
  }

  const std::vector<double>& coefficients() const { return coef_; }

 private:
  std::vector<double> coef_;
};

struct SplitResult {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;  // SSE reduction
};

// Best SSE-reducing split of `rows` on `feature`, or feature = -1.
inline SplitResult best_split_on_feature(const Matrix& x, std::span<const double> y,
                                         const std::vector<std::size_t>& rows,
                                         int feature, int min_leaf) {
  SplitResult best;
  const std::size_t n = rows.size();
  std::vector<std::pair<double, double>> xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xy[i] = {x(rows[i], std::size_t(feature)), y[rows[i]]};
  }
  std::sort(xy.begin(), xy.end());
  double total = 0.0;
  for (const auto& [xa, ya] : xy) {
    (void)xa;
    total += ya;
  }
  double left_sum = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    left_sum += xy[i].second;
    if (xy[i].first == xy[i + 1].first) continue;
    const std::size_t nl = i + 1;
    const std::size_t nr = n - nl;
    if (nl < std::size_t(min_leaf) || nr < std::size_t(min_leaf)) continue;
    const double right_sum = total - left_sum;
    const double gain = left_sum * left_sum / double(nl) +
                        right_sum * right_sum / double(nr) - total * total / double(n);
    if (gain > best.gain) {
      best.feature = feature;
      best.threshold = 0.5 * (xy[i].first + xy[i + 1].first);
      best.gain = gain;
    }
  }
  return best;
}

class RegressionTree {
 public:
  struct Node {
    int feature = -1;  // -1 = leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
  };

  // Fits on the rows listed in `rows` (indices into x/y); mtry features are
  // drawn per node.
  void fit(const Matrix& x, std::span<const double> y, std::vector<std::size_t> rows,
           int max_depth, int min_leaf, int mtry, Rng& rng) {
    nodes_.clear();
    build(x, y, std::move(rows), 0, max_depth, min_leaf, mtry, rng);
  }

  double predict(std::span<const double> x) const {
    int node = 0;
    while (nodes_[node].feature >= 0) {
      node = x[nodes_[node].feature] <= nodes_[node].threshold ? nodes_[node].left
                                                               : nodes_[node].right;
    }
    return nodes_[node].value;
  }

 private:
  int build(const Matrix& x, std::span<const double> y, std::vector<std::size_t> rows,
            int depth, int max_depth, int min_leaf, int mtry, Rng& rng) {
    const int id = int(nodes_.size());
    nodes_.emplace_back();
    double sum = 0.0;
    for (std::size_t r : rows) sum += y[r];
    nodes_[id].value = rows.empty() ? 0.0 : sum / double(rows.size());

    const bool depth_ok = max_depth < 0 || depth < max_depth;
    if (!depth_ok || rows.size() < 2 * std::size_t(min_leaf)) return id;

    const int d = int(x.cols());
    std::vector<int> feats(d);
    std::iota(feats.begin(), feats.end(), 0);
    // Partial Fisher-Yates for the feature subsample.
    const int m = std::min(mtry, d);
    for (int i = 0; i < m; ++i) {
      std::swap(feats[i], feats[i + int(rng.below(std::size_t(d - i)))]);
    }
    SplitResult best;
    for (int i = 0; i < m; ++i) {
      const SplitResult s = best_split_on_feature(x, y, rows, feats[i], min_leaf);
      if (s.feature >= 0 &&
          (s.gain > best.gain ||
           (s.gain == best.gain && best.feature >= 0 && s.feature < best.feature))) {
        best = s;
      }
    }
    if (best.feature < 0 || !(best.gain > 0.0)) return id;

    std::vector<std::size_t> left, right;
    for (std::size_t r : rows) {
      (x(r, std::size_t(best.feature)) <= best.threshold ? left : right).push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();
    nodes_[id].feature = best.feature;
    nodes_[id].threshold = best.threshold;
    const int l = build(x, y, std::move(left), depth + 1, max_depth, min_leaf, mtry, rng);
    const int r = build(x, y, std::move(right), depth + 1, max_depth, min_leaf, mtry, rng);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  std::vector<Node> nodes_;
};

class RandomForestModel final : public RegressionModel {
 public:
  RandomForestModel(const Matrix& x, std::span<const double> y, const LearnerSpec& spec,
                    std::uint64_t seed) {
    const std::size_t n = x.rows();
    // max_depth == 0 leaves nothing for bagging to do, so the model is the
    // plain training mean.
    if (spec.max_depth == 0) {
      mean_only_ = true;
      mean_ = mean_of(y);
      return;
    }
    const int mtry = std::max(1, int(std::lround(std::sqrt(double(x.cols())))));
    const std::uint64_t forest_seed = derive_seed(seed, "forest");
    trees_.resize(std::size_t(spec.trees));
    parallel_for(trees_.size(), [&](std::size_t t) {
      Rng rng(derive_seed(forest_seed, t));
      std::vector<std::size_t> rows(n);
      for (std::size_t i = 0; i < n; ++i) rows[i] = rng.below(n);
      std::sort(rows.begin(), rows.end());
      trees_[t].fit(x, y, std::move(rows), spec.max_depth, spec.min_leaf, mtry, rng);
    });
  }

  double predict(std::span<const double> x) const override {
    if (mean_only_) return mean_;
    double s = 0.0;
    for (const auto& t : trees_) s += t.predict(x);
    return s / double(trees_.size());
  }

 private:
  std::vector<RegressionTree> trees_;
  bool mean_only_ = false;
  double mean_ = 0.0;
};

class BoostedStumpsModel final : public RegressionModel {
 public:
  BoostedStumpsModel(const Matrix& x, std::span<const double> y, const LearnerSpec& spec,
                     std::uint64_t seed) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    base_ = mean_of(y);
    rate_ = spec.learning_rate;
    std::vector<double> residual(n);
    for (std::size_t i = 0; i < n; ++i) residual[i] = y[i] - base_;

    // Presort each feature once; every round is then a linear scan.
    std::vector<std::vector<std::size_t>> order(d);
    for (std::size_t j = 0; j < d; ++j) {
      order[j].resize(n);
      std::iota(order[j].begin(), order[j].end(), 0);
      std::stable_sort(order[j].begin(), order[j].end(),
                       [&](std::size_t a, std::size_t b) { return x(a, j) < x(b, j); });
    }

    Rng rng(derive_seed(seed, "boost"));
    std::vector<char> in_round(n, 1);
    const std::size_t round_n =
        spec.subsample >= 1.0 ? n
                              : std::max<std::size_t>(2 * std::size_t(spec.min_leaf),
                                                      std::size_t(spec.subsample * double(n)));
    for (int round = 0; round < spec.rounds; ++round) {
      if (round_n < n) {
        std::fill(in_round.begin(), in_round.end(), 0);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        rng.shuffle(idx);
        for (std::size_t i = 0; i < round_n; ++i) in_round[idx[i]] = 1;
      }
      Stump best;
      double best_gain = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double total = 0.0;
        std::size_t m = 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (in_round[i]) {
            total += residual[i];
            ++m;
          }
        }
        if (m < 2 * std::size_t(spec.min_leaf)) break;
        double left_sum = 0.0;
        std::size_t nl = 0;
        const auto& ord = order[j];
        for (std::size_t p = 0; p + 1 < n; ++p) {
          const std::size_t i = ord[p];
          if (in_round[i]) {
            left_sum += residual[i];
            ++nl;
          }
          if (x(i, j) == x(ord[p + 1], j)) continue;
          const std::size_t nr = m - nl;
          if (nl < std::size_t(spec.min_leaf) || nr < std::size_t(spec.min_leaf)) continue;
          const double right_sum = total - left_sum;
          const double gain = left_sum * left_sum / double(nl) +
                              right_sum * right_sum / double(nr) -
                              total * total / double(m);
          if (gain > best_gain) {
            best_gain = gain;
            best.feature = int(j);
            best.threshold = 0.5 * (x(i, j) + x(ord[p + 1], j));
            best.left = left_sum / double(nl);
            best.right = right_sum / double(nr);
          }
        }
      }
      if (best.feature < 0) break;  // no further SSE reduction
      stumps_.push_back(best);
      for (std::size_t i = 0; i < n; ++i) {
        residual[i] -= rate_ * (x(i, std::size_t(best.feature)) <= best.threshold
                                    ? best.left
                                    : best.right);
      }
    }
  }

  double predict(std::span<const double> x) const override {
    double f = base_;
    for (const auto& s : stumps_) {
      f += rate_ * (x[std::size_t(s.feature)] <= s.threshold ? s.left : s.right);
    }
    return f;
  }

 private:
  struct Stump {
    int feature = -1;
    double threshold = 0.0;
    double left = 0.0;
    double right = 0.0;
  };
  std::vector<Stump> stumps_;
  double base_ = 0.0;
  double rate_ = 0.1;
};

inline double effective_penalty(const LearnerSpec& spec, std::size_t n) {
  return spec.penalty >= 0.0 ? spec.penalty : 1.0 / double(std::max<std::size_t>(1, n));
}

}  // namespace detail

inline std::unique_ptr<RegressionModel> fit_regression(const Matrix& x,
                                                       std::span<const double> y,
                                                       const LearnerSpec& spec,
                                                       std::uint64_t seed) {
  if (x.rows() == 0) throw domain_error("fit_regression: empty training set");
  spec.validate();
  switch (spec.kind) {
    case LearnerKind::regularized_linear:
      return std::make_unique<detail::RidgeModel>(x, y,
                                                  detail::effective_penalty(spec, x.rows()));
    case LearnerKind::random_forest_regressor:
      return std::make_unique<detail::RandomForestModel>(x, y, spec, seed);
    case LearnerKind::gradient_boosted_stumps:
      return std::make_unique<detail::BoostedStumpsModel>(x, y, spec, seed);
    case LearnerKind::regularized_multinomial_logit:
      throw config_error("multinomial logit is a classifier; use it for arm targets");
  }
  throw config_error("unknown learner kind");
}

// ---------------------------------------------------------------------------
// Penalized multinomial logit, fit by Newton/IRLS with a gradient-descent
// fallback. Class 0 is the reference; ridge acts on slopes only.
// ---------------------------------------------------------------------------

class MultinomialLogitModel {
 public:
  MultinomialLogitModel() = default;

  // Rows may carry weights (used for smoothing pseudo-counts).
  static MultinomialLogitModel fit(const Matrix& x, const std::vector<int>& y,
                                   int n_classes, double penalty,
                                   const std::vector<double>& weights = {},
                                   std::vector<std::string>* warnings = nullptr) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    if (n == 0) throw domain_error("multinomial fit: empty training set");
    if (n_classes < 2) throw domain_error("multinomial fit: need >= 2 classes");
    MultinomialLogitModel model;
    model.n_classes_ = n_classes;
    model.d_ = d;
    const std::size_t kk = std::size_t(n_classes - 1);
    const std::size_t p = d + 1;              // intercept + slopes
    const std::size_t m = kk * p;             // parameter count
    std::vector<double> beta(m, 0.0);
    std::vector<double> w(n, 1.0);
    if (!weights.empty()) w = weights;
    double wsum = 0.0;
    for (double wi : w) wsum += wi;

    auto probs_for = [&](const std::vector<double>& b, std::size_t i,
                         std::vector<double>& out) {
      out.assign(std::size_t(n_classes), 0.0);
      double maxeta = 0.0;  // eta of reference class
      for (std::size_t k = 0; k < kk; ++k) {
        double eta = b[k * p];
        for (std::size_t j = 0; j < d; ++j) eta += b[k * p + 1 + j] * x(i, j);
        out[k + 1] = eta;
        maxeta = std::max(maxeta, eta);
      }
      double z = std::exp(0.0 - maxeta);
      for (std::size_t k = 0; k < kk; ++k) {
        out[k + 1] = std::exp(out[k + 1] - maxeta);
        z += out[k + 1];
      }
      out[0] = std::exp(0.0 - maxeta);
      for (auto& v : out) v /= z;
    };

    auto objective = [&](const std::vector<double>& b) {
      double nll = 0.0;
      std::vector<double> pr;
      for (std::size_t i = 0; i < n; ++i) {
        probs_for(b, i, pr);
        nll -= w[i] * std::log(std::max(pr[std::size_t(y[i])], 1e-300));
      }
      double pen = 0.0;
      for (std::size_t k = 0; k < kk; ++k) {
        for (std::size_t j = 1; j < p; ++j) pen += b[k * p + j] * b[k * p + j];
      }
      return nll / wsum + 0.5 * penalty * pen;
    };

    double f = objective(beta);
    std::vector<double> grad(m), pr;
    const int max_iter = 500;
    for (int iter = 0; iter < max_iter; ++iter) {
      // Gradient and Hessian of the scaled objective.
      std::fill(grad.begin(), grad.end(), 0.0);
      Matrix hess(m, m);
      for (std::size_t i = 0; i < n; ++i) {
        probs_for(beta, i, pr);
        for (std::size_t k = 0; k < kk; ++k) {
          const double resid = pr[k + 1] - (std::size_t(y[i]) == k + 1 ? 1.0 : 0.0);
          const double gi = w[i] * resid;
          grad[k * p] += gi;
          for (std::size_t j = 0; j < d; ++j) grad[k * p + 1 + j] += gi * x(i, j);
          for (std::size_t l = k; l < kk; ++l) {
            const double wkl =
                w[i] * pr[k + 1] * ((k == l ? 1.0 : 0.0) - pr[l + 1]);
            if (wkl == 0.0) continue;
            // Rank-one block wkl * [1,x][1,x]'.
            hess(k * p, l * p) += wkl;
            for (std::size_t j = 0; j < d; ++j) {
              hess(k * p, l * p + 1 + j) += wkl * x(i, j);
              hess(k * p + 1 + j, l * p) += wkl * x(i, j);
              for (std::size_t j2 = 0; j2 < d; ++j2) {
                hess(k * p + 1 + j, l * p + 1 + j2) += wkl * x(i, j) * x(i, j2);
              }
            }
          }
        }
      }
      for (std::size_t a = 0; a < m; ++a) {
        grad[a] /= wsum;
        for (std::size_t b2 = a; b2 < m; ++b2) {
          hess(a, b2) /= wsum;
          hess(b2, a) = hess(a, b2);
        }
      }
      for (std::size_t k = 0; k < kk; ++k) {
        for (std::size_t j = 1; j < p; ++j) {
          grad[k * p + j] += penalty * beta[k * p + j];
          hess(k * p + j, k * p + j) += penalty;
        }
      }

      std::vector<double> step;
      bool newton_ok = true;
      try {
        step = solve_spd(hess, grad);
      } catch (const domain_error&) {
        newton_ok = false;
      }
      if (!newton_ok) step = grad;  // gradient direction fallback

      // Backtracking line search on the descent direction.
      double t = 1.0;
      std::vector<double> cand(m);
      double f_new = f;
      bool moved = false;
      for (int ls = 0; ls < 40; ++ls) {
        for (std::size_t a = 0; a < m; ++a) cand[a] = beta[a] - t * step[a];
        const double fc = objective(cand);
        if (std::isfinite(fc) && fc <= f) {
          f_new = fc;
          moved = true;
          break;
        }
        t *= 0.5;
      }
      if (!moved) break;
      double max_change = 0.0;
      for (std::size_t a = 0; a < m; ++a) {
        max_change = std::max(max_change, std::fabs(t * step[a]));
      }
      beta = cand;
      f = f_new;
      if (max_change < 1e-8) break;
    }

    double max_slope = 0.0;
    for (std::size_t k = 0; k < kk; ++k) {
      for (std::size_t j = 1; j < p; ++j) {
        max_slope = std::max(max_slope, std::fabs(beta[k * p + j]));
      }
    }
    if (warnings && max_slope > 20.0) {
      warnings->push_back(
          "multinomial logit: very large coefficients; classes may be separable "
          "(ridge penalty keeps the fit finite)");
    }
    model.beta_ = std::move(beta);
    return model;
  }

  std::vector<double> predict_proba(std::span<const double> x) const {
    const std::size_t kk = std::size_t(n_classes_ - 1);
    const std::size_t p = d_ + 1;
    std::vector<double> out(static_cast<std::size_t>(n_classes_));
    double maxeta = 0.0;
    for (std::size_t k = 0; k < kk; ++k) {
      double eta = beta_[k * p];
      for (std::size_t j = 0; j < d_; ++j) eta += beta_[k * p + 1 + j] * x[j];
      out[k + 1] = eta;
      maxeta = std::max(maxeta, eta);
    }
    double z = std::exp(0.0 - maxeta);
    for (std::size_t k = 0; k < kk; ++k) {
      out[k + 1] = std::exp(out[k + 1] - maxeta);
      z += out[k + 1];
    }
    out[0] = std::exp(0.0 - maxeta);
    for (auto& v : out) v /= z;
    return out;
  }

  int n_classes() const { return n_classes_; }
  const std::vector<double>& coefficients() const { return beta_; }

 private:
  std::vector<double> beta_;
  std::size_t d_ = 0;
  int n_classes_ = 2;
};

// ---------------------------------------------------------------------------
// Out-of-fold prediction.
// ---------------------------------------------------------------------------

struct OofRegression {
  std::vector<double> pred;
  std::vector<std::string> warnings;
};

namespace detail {

// Training rows for fold `hold_out`, in canonical order; mask may restrict to
// a subset (e.g. one arm).
inline std::vector<std::size_t> training_rows(const CrossFitPlan& plan, int hold_out,
                                              const std::vector<char>* mask) {
  std::vector<std::size_t> rows;
  for (std::size_t r : plan.canonical) {
    if (plan.fold[r] == hold_out) continue;
    if (mask && !(*mask)[r]) continue;
    rows.push_back(r);
  }
  return rows;
}

inline Matrix gather_x(const ExperimentTable& t, const std::vector<std::size_t>& rows) {
  Matrix x(rows.size(), t.n_covariates());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < t.n_covariates(); ++j) {
      x(i, j) = t.covariates(rows[i], j);
    }
  }
  return x;
}

template <typename T>
std::vector<T> gather(std::span<const T> values, const std::vector<std::size_t>& rows) {
  std::vector<T> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = values[rows[i]];
  return out;
}

}  // namespace detail

// Out-of-fold regression predictions: the prediction for row i comes from a
// model whose training folds exclude row i.
inline OofRegression fit_predict_oof(const ExperimentTable& table,
                                     std::span<const double> target,
                                     const LearnerSpec& spec, const CrossFitPlan& plan) {
  if (target.size() != table.n_rows()) {
    throw config_error("fit_predict_oof: target length mismatch");
  }
  plan.validate(table.n_rows());
  OofRegression out;
  out.pred.assign(table.n_rows(), 0.0);
  for (int f = 0; f < plan.k_folds; ++f) {
    const auto rows = detail::training_rows(plan, f, nullptr);
    const Matrix x = detail::gather_x(table, rows);
    const auto y = detail::gather<double>(target, rows);
    const auto model = fit_regression(x, y, spec, derive_seed(spec.seed, std::uint64_t(f)));
    for (std::size_t i = 0; i < table.n_rows(); ++i) {
      if (plan.fold[i] == f) out.pred[i] = model->predict(table.covariates.row(i));
    }
  }
  return out;
}

struct OofProbabilities {
  Matrix prob;  // n x n_classes
  std::vector<std::string> warnings;
};

namespace detail {

// Fits one multiclass model, adding symmetric pseudo-counts when a class is
// absent from the training rows, and predicts probabilities for `predict_rows`.
inline void fit_predict_multiclass(const ExperimentTable& table,
                                   const std::vector<int>& labels, int n_classes,
                                   const LearnerSpec& spec,
                                   const std::vector<std::size_t>& train_rows,
                                   const std::vector<std::size_t>& predict_rows,
                                   Matrix& prob, std::vector<std::string>& warnings,
                                   const char* context) {
  const std::size_t d = table.n_covariates();
  std::vector<long> class_count(std::size_t(n_classes), 0);
  for (std::size_t r : train_rows) ++class_count[std::size_t(labels[r])];
  bool degenerate = false;
  for (long c : class_count) degenerate |= c == 0;

  Matrix x = gather_x(table, train_rows);
  std::vector<int> y(train_rows.size());
  for (std::size_t i = 0; i < train_rows.size(); ++i) y[i] = labels[train_rows[i]];
  std::vector<double> w(train_rows.size(), 1.0);

  if (degenerate) {
    // Symmetric smoothing: one half-weight pseudo-row per class at the
    // training-mean covariate vector.
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j);
    }
    for (auto& v : mean) v /= double(std::max<std::size_t>(1, x.rows()));
    Matrix x2(x.rows() + std::size_t(n_classes), d);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t j = 0; j < d; ++j) x2(i, j) = x(i, j);
    }
    for (int c = 0; c < n_classes; ++c) {
      for (std::size_t j = 0; j < d; ++j) x2(x.rows() + std::size_t(c), j) = mean[j];
      y.push_back(c);
      w.push_back(0.5);
    }
    x = std::move(x2);
    w.resize(y.size(), 0.5);
    std::fill(w.begin(), w.begin() + long(train_rows.size()), 1.0);
    warnings.push_back(std::string(context) +
                       ": class absent from a training fold; refit with symmetric "
                       "smoothing pseudo-counts");
  }

  if (spec.kind == LearnerKind::regularized_multinomial_logit) {
    const auto model = MultinomialLogitModel::fit(
        x, y, n_classes, detail::effective_penalty(spec, x.rows()), w, &warnings);
    for (std::size_t r : predict_rows) {
      const auto p = model.predict_proba(table.covariates.row(r));
      for (int c = 0; c < n_classes; ++c) prob(r, std::size_t(c)) = p[std::size_t(c)];
    }
    return;
  }

  // Regression learners: one-vs-rest indicator regressions, floored at zero
  // and normalized.
  std::vector<std::unique_ptr<RegressionModel>> models;
  for (int c = 0; c < n_classes; ++c) {
    std::vector<double> ind(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) ind[i] = y[i] == c ? 1.0 : 0.0;
    models.push_back(fit_regression(x, ind, spec, derive_seed(spec.seed, std::uint64_t(c))));
  }
  for (std::size_t r : predict_rows) {
    double total = 0.0;
    std::vector<double> p(static_cast<std::size_t>(n_classes));
    for (int c = 0; c < n_classes; ++c) {
      p[std::size_t(c)] = std::max(0.0, models[std::size_t(c)]->predict(table.covariates.row(r)));
      total += p[std::size_t(c)];
    }
    for (int c = 0; c < n_classes; ++c) {
      prob(r, std::size_t(c)) =
          total > 0.0 ? p[std::size_t(c)] / total : 1.0 / double(n_classes);
    }
  }
}

}  // namespace detail

// Out-of-fold class probabilities for an integer-labelled target.
inline OofProbabilities fit_predict_oof_probs(const ExperimentTable& table,
                                              const std::vector<int>& labels,
                                              int n_classes, const LearnerSpec& spec,
                                              const CrossFitPlan& plan) {
  if (labels.size() != table.n_rows()) {
    throw config_error("fit_predict_oof_probs: label length mismatch");
  }
  plan.validate(table.n_rows());
  OofProbabilities out;
  out.prob = Matrix(table.n_rows(), std::size_t(n_classes));
  for (int f = 0; f < plan.k_folds; ++f) {
    const auto train = detail::training_rows(plan, f, nullptr);
    std::vector<std::size_t> predict;
    for (std::size_t i = 0; i < table.n_rows(); ++i) {
      if (plan.fold[i] == f) predict.push_back(i);
    }
    detail::fit_predict_multiclass(table, labels, n_classes, spec, train, predict,
                                   out.prob, out.warnings, "fold");
  }
  // Probability vectors must sum to one within 1e-9.
  for (std::size_t i = 0; i < table.n_rows(); ++i) {
    double s = 0.0;
    for (int c = 0; c < n_classes; ++c) s += out.prob(i, std::size_t(c));
    for (int c = 0; c < n_classes; ++c) out.prob(i, std::size_t(c)) /= s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Propensity estimation: per-row probability vector over arms, clipped away
// from 0/1 and renormalized, plus an overlap report.
// ---------------------------------------------------------------------------

struct OverlapReport {
  std::vector<double> min_prob;  // per arm
  std::vector<double> max_prob;  // per arm
  // group_mean(g, a): mean predicted propensity for arm a among rows whose
  // observed arm is g. Similar rows across groups show up as small gaps here.
  Matrix group_mean;

  nlohmann::json to_json(const ArmSet& arms) const {
    nlohmann::json per_arm = nlohmann::json::array();
    for (std::size_t a = 0; a < arms.size(); ++a) {
      nlohmann::json groups = nlohmann::json::object();
      for (std::size_t g = 0; g < arms.size(); ++g) {
        groups[arms.labels[g]] = group_mean(g, a);
      }
      per_arm.push_back({{"arm", arms.labels[a]},
                         {"min", min_prob[a]},
                         {"max", max_prob[a]},
                         {"group_means", groups}});
    }
    return per_arm;
  }
};

struct PropensityResult {
  Matrix prob;  // n x n_arms, clipped and renormalized
  OverlapReport overlap;
  std::vector<std::string> warnings;
};

inline PropensityResult fit_propensity(const ExperimentTable& table,
                                       const LearnerSpec& spec,
                                       const std::optional<CrossFitPlan>& plan = {},
                                       double eps_clip = 0.01) {
  const std::size_t n = table.n_rows();
  const int n_arms = int(table.arms.size());
  if (n_arms < 2) throw domain_error("fit_propensity: need >= 2 arms");
  if (!(eps_clip > 0.0 && eps_clip < 0.5)) {
    throw config_error("fit_propensity: eps_clip must be in (0, 0.5)");
  }
  PropensityResult out;
  if (plan) {
    auto oof = fit_predict_oof_probs(table, table.arm, n_arms, spec, *plan);
    out.prob = std::move(oof.prob);
    out.warnings = std::move(oof.warnings);
  } else {
    out.prob = Matrix(n, std::size_t(n_arms));
    std::vector<std::size_t> all = CrossFitPlan::canonical_order(table);
    std::vector<std::size_t> predict(n);
    std::iota(predict.begin(), predict.end(), 0);
    detail::fit_predict_multiclass(table, table.arm, n_arms, spec, all, predict,
                                   out.prob, out.warnings, "full fit");
  }

  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int a = 0; a < n_arms; ++a) {
      double& p = out.prob(i, std::size_t(a));
      p = std::clamp(p, eps_clip, 1.0 - eps_clip);
      s += p;
    }
    for (int a = 0; a < n_arms; ++a) out.prob(i, std::size_t(a)) /= s;
  }

  out.overlap.min_prob.assign(std::size_t(n_arms), 1.0);
  out.overlap.max_prob.assign(std::size_t(n_arms), 0.0);
  out.overlap.group_mean = Matrix(std::size_t(n_arms), std::size_t(n_arms));
  std::vector<long> group_n(std::size_t(n_arms), 0);
  for (std::size_t i = 0; i < n; ++i) {
    ++group_n[std::size_t(table.arm[i])];
    for (int a = 0; a < n_arms; ++a) {
      const double p = out.prob(i, std::size_t(a));
      out.overlap.min_prob[std::size_t(a)] = std::min(out.overlap.min_prob[std::size_t(a)], p);
      out.overlap.max_prob[std::size_t(a)] = std::max(out.overlap.max_prob[std::size_t(a)], p);
      out.overlap.group_mean(std::size_t(table.arm[i]), std::size_t(a)) += p;
    }
  }
  for (int g = 0; g < n_arms; ++g) {
    for (int a = 0; a < n_arms; ++a) {
      if (group_n[std::size_t(g)] > 0) {
        out.overlap.group_mean(std::size_t(g), std::size_t(a)) /= double(group_n[std::size_t(g)]);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-arm outcome models with out-of-fold discipline: mu(i, a) is the model
// for arm a, trained without fold(i), evaluated at x_i. Arms smaller than K
// fall back to leave-one-out fitting for their own rows.
// ---------------------------------------------------------------------------

struct PerArmOutcomes {
  Matrix mu;  // n x n_arms
  std::vector<std::string> warnings;
};

inline PerArmOutcomes fit_outcome_models_oof(const ExperimentTable& table,
                                             const LearnerSpec& spec,
                                             const CrossFitPlan& plan) {
  plan.validate(table.n_rows());
  const std::size_t n = table.n_rows();
  const std::size_t n_arms = table.arms.size();
  PerArmOutcomes out;
  out.mu = Matrix(n, n_arms);
  for (std::size_t a = 0; a < n_arms; ++a) {
    const std::uint64_t arm_seed = derive_seed(spec.seed, table.arms.labels[a]);
    std::vector<char> mask(n, 0);
    std::size_t arm_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::size_t(table.arm[i]) == a) {
        mask[i] = 1;
        ++arm_count;
      }
    }
    if (arm_count < 2) {
      throw domain_error("fit_outcome_models_oof: arm '" + table.arms.labels[a] +
                         "' has fewer than 2 rows");
    }
    if (arm_count < std::size_t(plan.k_folds)) {
      out.warnings.push_back("arm '" + table.arms.labels[a] +
                             "' has fewer rows than folds; using leave-one-out fits");
      // Full-arm model for other rows.
      std::vector<std::size_t> arm_rows;
      for (std::size_t r : plan.canonical) {
        if (mask[r]) arm_rows.push_back(r);
      }
      const Matrix x_all = detail::gather_x(table, arm_rows);
      const auto y_all = detail::gather<double>(table.outcome, arm_rows);
      const auto full = fit_regression(x_all, y_all, spec, arm_seed);
      for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) out.mu(i, a) = full->predict(table.covariates.row(i));
      }
      for (std::size_t leave = 0; leave < arm_rows.size(); ++leave) {
        std::vector<std::size_t> rows;
        for (std::size_t j = 0; j < arm_rows.size(); ++j) {
          if (j != leave) rows.push_back(arm_rows[j]);
        }
        const Matrix x = detail::gather_x(table, rows);
        const auto y = detail::gather<double>(table.outcome, rows);
        const auto model =
            fit_regression(x, y, spec, derive_seed(arm_seed, 1000 + leave));
        out.mu(arm_rows[leave], a) = model->predict(table.covariates.row(arm_rows[leave]));
      }
      continue;
    }
    for (int f = 0; f < plan.k_folds; ++f) {
      auto rows = detail::training_rows(plan, f, &mask);
      if (rows.empty()) {
        // Every arm-a row sits in fold f; train on all of them instead.
        rows = detail::training_rows(plan, -1, &mask);
        out.warnings.push_back("arm '" + table.arms.labels[a] +
                               "' empty outside one fold; fold reuses the full arm fit");
      }
      const Matrix x = detail::gather_x(table, rows);
      const auto y = detail::gather<double>(table.outcome, rows);
      const auto model =
          fit_regression(x, y, spec, derive_seed(arm_seed, std::uint64_t(f)));
      for (std::size_t i = 0; i < n; ++i) {
        if (plan.fold[i] == f) out.mu(i, a) = model->predict(table.covariates.row(i));
      }
    }
  }
  return out;
}

}  // namespace targetkit
