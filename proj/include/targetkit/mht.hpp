#pragma once

#include <bit>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "targetkit/core_stats.hpp"

namespace targetkit {

// One subgroup hypothesis: the ATE within `subset` equals zero. When
// `subset_b` is non-empty the hypothesis is instead that the two subgroup
// ATEs are equal (their difference is the tested statistic).
struct Hypothesis {
  std::string label;
  std::vector<char> subset;
  std::vector<char> subset_b;

  bool is_difference() const { return !subset_b.empty(); }
};

struct HypothesisFamily {
  std::vector<Hypothesis> items;
  int b_replications = 1000;
  std::uint64_t seed = 0;
  double alpha = 0.05;

  void validate(std::size_t n) const {
    if (items.empty()) throw config_error("hypothesis family is empty");
    if (b_replications < 100) throw config_error("family: B must be >= 100");
    if (!(alpha > 0.0 && alpha < 1.0)) throw config_error("family: alpha in (0,1)");
    for (const auto& h : items) {
      if (h.subset.size() != n) throw config_error("hypothesis mask length mismatch");
      if (!h.subset_b.empty() && h.subset_b.size() != n) {
        throw config_error("hypothesis mask length mismatch");
      }
    }
  }
};

struct RomanoWolfRow {
  std::string label;
  double estimate = 0.0;
  double se = 0.0;
  double t_stat = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double p_unadjusted = 1.0;
  double p_adjusted = 1.0;
};

struct RomanoWolfResult {
  std::vector<RomanoWolfRow> rows;  // in family order
  long redraws = 0;
  std::vector<std::string> warnings;
};

// Unadjusted z-test that two subgroup effects differ, with
// se = sqrt(se1^2 + se2^2).
struct TwoGroupTest {
  Estimate difference;
  double z = 0.0;
  double p_value = 1.0;
};

inline TwoGroupTest two_group_difference(const Estimate& a, const Estimate& b,
                                         double level = 0.95) {
  TwoGroupTest out;
  const double se = std::sqrt(a.se * a.se + b.se * b.se);
  out.difference = make_estimate(a.point - b.point, se, a.n_treat + a.n_control,
                                 b.n_treat + b.n_control, level);
  out.z = se > 0.0 ? out.difference.point / se : 0.0;
  out.p_value = se > 0.0 ? two_sided_p(out.z) : 1.0;
  return out;
}

namespace detail {

// Accumulators for one (cell, arm) pair of a bootstrap draw.
struct CellSums {
  double sum_t = 0.0, sumsq_t = 0.0;
  double sum_c = 0.0, sumsq_c = 0.0;
  long n_t = 0, n_c = 0;

  void add(double y, bool treated) {
    if (treated) {
      sum_t += y;
      sumsq_t += y * y;
      ++n_t;
    } else {
      sum_c += y;
      sumsq_c += y * y;
      ++n_c;
    }
  }

  bool present() const { return n_t > 0 && n_c > 0; }

  double point() const {
    return sum_t / double(n_t) - sum_c / double(n_c);
  }

  double se() const {
    auto var = [](double s, double ss, long n) {
      if (n < 2) return 0.0;
      const double m = s / double(n);
      const double v = (ss - double(n) * m * m) / double(n - 1);
      return v > 0.0 ? v : 0.0;
    };
    return std::sqrt(var(sum_t, sumsq_t, n_t) / double(n_t) +
                     var(sum_c, sumsq_c, n_c) / double(n_c));
  }
};

inline double studentized(double point, double se, double center) {
  const double num = point - center;
  if (se > 0.0) return num / se;
  if (num == 0.0) return 0.0;
  return num > 0.0 ? std::numeric_limits<double>::infinity()
                   : -std::numeric_limits<double>::infinity();
}

}  // namespace detail

// Romano-Wolf studentized stepdown max-t adjustment over a family of
// subgroup treatment-effect hypotheses. Resampling is stratified by arm;
// complete pairs are resampled as units when pair ids are present. Bootstrap
// statistics are recentered at the observed estimates. Draws in which a
// subgroup loses an entire arm are redrawn (capped at 10*B).
inline RomanoWolfResult romano_wolf(const ExperimentTable& table,
                                    const HypothesisFamily& family,
                                    const std::string& treat_arm,
                                    const std::string& control_arm,
                                    double level = 0.95) {
  const std::size_t n = table.n_rows();
  family.validate(n);
  const std::size_t H = family.items.size();

  // Flatten hypotheses into cells, at most 64 so membership fits a bitmask.
  struct CellRef {
    int cell_a = -1;
    int cell_b = -1;
  };
  std::vector<const std::vector<char>*> cells;
  std::vector<CellRef> refs(H);
  for (std::size_t h = 0; h < H; ++h) {
    refs[h].cell_a = int(cells.size());
    cells.push_back(&family.items[h].subset);
    if (family.items[h].is_difference()) {
      refs[h].cell_b = int(cells.size());
      cells.push_back(&family.items[h].subset_b);
    }
  }
  if (cells.size() > 64) throw config_error("romano_wolf: at most 64 subgroups");

  const std::size_t t_arm = table.arms.index_of(treat_arm);
  const std::size_t c_arm = table.arms.index_of(control_arm);
  std::vector<std::uint64_t> membership(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if ((*cells[c])[i]) membership[i] |= std::uint64_t(1) << c;
    }
  }

  // Resampling units: complete pairs between the two arms, plus leftover
  // rows per arm.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::size_t> loose_treat, loose_control;
  if (table.has_pairs()) {
    std::map<long, std::pair<int, int>> by_pair;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::size_t(table.arm[i]) != t_arm && std::size_t(table.arm[i]) != c_arm) continue;
      if (table.pair_id[i] >= 0) {
        auto& slot = by_pair.try_emplace(table.pair_id[i], -1, -1).first->second;
        (std::size_t(table.arm[i]) == t_arm ? slot.first : slot.second) = int(i);
      } else {
        (std::size_t(table.arm[i]) == t_arm ? loose_treat : loose_control).push_back(i);
      }
    }
    for (const auto& [pid, rows] : by_pair) {
      (void)pid;
      if (rows.first >= 0 && rows.second >= 0) {
        pairs.emplace_back(std::size_t(rows.first), std::size_t(rows.second));
      } else if (rows.first >= 0) {
        loose_treat.push_back(std::size_t(rows.first));
      } else if (rows.second >= 0) {
        loose_control.push_back(std::size_t(rows.second));
      }
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      if (std::size_t(table.arm[i]) == t_arm) loose_treat.push_back(i);
      if (std::size_t(table.arm[i]) == c_arm) loose_control.push_back(i);
    }
  }
  if (pairs.empty() && (loose_treat.empty() || loose_control.empty())) {
    throw domain_error("romano_wolf: an arm has no rows");
  }

  // Observed statistics.
  auto eval_cells = [&](const std::vector<detail::CellSums>& sums, std::size_t h,
                        double& point, double& se) {
    const auto& a = sums[std::size_t(refs[h].cell_a)];
    point = a.point();
    double var = a.se() * a.se();
    if (refs[h].cell_b >= 0) {
      const auto& b = sums[std::size_t(refs[h].cell_b)];
      point -= b.point();
      var += b.se() * b.se();
    }
    se = std::sqrt(var);
  };

  auto accumulate_row = [&](std::vector<detail::CellSums>& sums, std::size_t row) {
    const bool treated = std::size_t(table.arm[row]) == t_arm;
    if (!treated && std::size_t(table.arm[row]) != c_arm) return;
    std::uint64_t m = membership[row];
    while (m) {
      const int c = std::countr_zero(m);
      m &= m - 1;
      sums[std::size_t(c)].add(table.outcome[row], treated);
    }
  };

  std::vector<detail::CellSums> observed(cells.size());
  for (std::size_t i = 0; i < n; ++i) accumulate_row(observed, i);
  std::vector<double> obs_point(H), obs_se(H), obs_t(H);
  for (std::size_t h = 0; h < H; ++h) {
    const auto& a = observed[std::size_t(refs[h].cell_a)];
    if (!a.present() ||
        (refs[h].cell_b >= 0 && !observed[std::size_t(refs[h].cell_b)].present())) {
      throw domain_error("romano_wolf: subgroup '" + family.items[h].label +
                         "' lacks rows in an arm");
    }
    eval_cells(observed, h, obs_point[h], obs_se[h]);
    obs_t[h] = detail::studentized(obs_point[h], obs_se[h], 0.0);
  }

  // Bootstrap: |t*| matrix of shape B x H, each replicate seeded by index so
  // results are schedule independent. A replicate redraws while a subgroup is
  // missing an arm; the family-wide budget is 10*B redraws.
  const int B = family.b_replications;
  Matrix boot_t(std::size_t(B), H);
  std::vector<long> redraw_count(std::size_t(B), 0);
  std::vector<char> failed(std::size_t(B), 0);
  const long redraw_cap_total = 10L * B;
  const long per_rep_safety = std::max<long>(1000, redraw_cap_total / B);

  parallel_for(std::size_t(B), [&](std::size_t b) {
    std::vector<detail::CellSums> sums(cells.size());
    for (long attempt = 0;; ++attempt) {
      if (attempt > per_rep_safety) {
        failed[b] = 1;
        return;
      }
      Rng rng(derive_seed(family.seed, b * 16384 + std::uint64_t(attempt)));
      for (auto& s : sums) s = detail::CellSums{};
      for (std::size_t k = 0; k < pairs.size(); ++k) {
        const auto& p = pairs[rng.below(pairs.size())];
        accumulate_row(sums, p.first);
        accumulate_row(sums, p.second);
      }
      for (std::size_t k = 0; k < loose_treat.size(); ++k) {
        accumulate_row(sums, loose_treat[rng.below(loose_treat.size())]);
      }
      for (std::size_t k = 0; k < loose_control.size(); ++k) {
        accumulate_row(sums, loose_control[rng.below(loose_control.size())]);
      }
      bool ok = true;
      for (std::size_t c = 0; c < cells.size() && ok; ++c) ok = sums[c].present();
      if (!ok) {
        ++redraw_count[b];
        continue;
      }
      for (std::size_t h = 0; h < H; ++h) {
        double point, se;
        eval_cells(sums, h, point, se);
        boot_t(b, h) = std::fabs(detail::studentized(point, se, obs_point[h]));
      }
      return;
    }
  });

  RomanoWolfResult out;
  bool any_failed = false;
  for (std::size_t b = 0; b < std::size_t(B); ++b) {
    out.redraws += redraw_count[b];
    any_failed |= failed[b] != 0;
  }
  if (any_failed || out.redraws > redraw_cap_total) {
    throw domain_error("romano_wolf: redraw cap (10*B) exceeded; a subgroup is too "
                       "small to bootstrap");
  }
  if (out.redraws > 0) {
    out.warnings.push_back(std::to_string(out.redraws) +
                           " bootstrap draws redrawn (subgroup lost an arm)");
  }

  // Stepdown over hypotheses ordered by |t| descending. Suffix maxima over
  // the remaining set are built once per replicate from the back.
  std::vector<std::size_t> order(H);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b2) {
    return std::fabs(obs_t[a]) > std::fabs(obs_t[b2]);
  });

  std::vector<double> p_adj(H, 0.0), p_unadj(H, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    long cnt = 0;
    for (std::size_t b = 0; b < std::size_t(B); ++b) {
      cnt += boot_t(b, h) >= std::fabs(obs_t[h]);
    }
    p_unadj[h] = double(1 + cnt) / double(B + 1);
  }
  std::vector<double> suffix_max(std::size_t(B), 0.0);
  std::vector<long> step_count(H, 0);
  for (std::size_t step = H; step-- > 0;) {
    const std::size_t h = order[step];
    long cnt = 0;
    for (std::size_t b = 0; b < std::size_t(B); ++b) {
      suffix_max[b] = std::max(suffix_max[b], boot_t(b, h));
      cnt += suffix_max[b] >= std::fabs(obs_t[h]);
    }
    step_count[step] = cnt;
  }
  double running = 0.0;
  for (std::size_t step = 0; step < H; ++step) {
    const double p = double(1 + step_count[step]) / double(B + 1);
    running = std::max(running, p);
    p_adj[order[step]] = running;
  }

  const double z = normal_quantile(0.5 + level / 2.0);
  out.rows.resize(H);
  for (std::size_t h = 0; h < H; ++h) {
    auto& r = out.rows[h];
    r.label = family.items[h].label;
    r.estimate = obs_point[h];
    r.se = obs_se[h];
    r.t_stat = obs_t[h];
    r.ci_low = obs_point[h] - z * obs_se[h];
    r.ci_high = obs_point[h] + z * obs_se[h];
    r.p_unadjusted = p_unadj[h];
    r.p_adjusted = p_adj[h];
  }
  return out;
}

// Appendix-style table: variable, ATE, CI bounds, adjusted p-value.
inline nlohmann::json romano_wolf_to_json(const RomanoWolfResult& res) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : res.rows) {
    arr.push_back({{"variable", r.label},
                   {"ate", r.estimate},
                   {"ci_low", r.ci_low},
                   {"ci_high", r.ci_high},
                   {"p_unadjusted", r.p_unadjusted},
                   {"romano_wolf_p", r.p_adjusted}});
  }
  return arr;
}

}  // namespace targetkit
