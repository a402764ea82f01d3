#pragma once

#include <cstddef>

#include "targetkit/common.hpp"

#include <json.hpp>

namespace targetkit {

// Point estimate with a normal-approximation confidence interval. Every
// statistical output in the library is reported through this type.
struct Estimate {
  double point = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double level = 0.95;
  long n_treat = 0;
  long n_control = 0;
};

inline Estimate make_estimate(double point, double se, long n_treat = 0,
                              long n_control = 0, double level = 0.95) {
  if (!(level > 0.0 && level < 1.0)) {
    throw config_error("confidence level must be in (0,1)");
  }
  Estimate e;
  e.point = point;
  e.se = se;
  e.level = level;
  const double z = normal_quantile(0.5 + level / 2.0);
  e.ci_low = point - z * se;
  e.ci_high = point + z * se;
  e.n_treat = n_treat;
  e.n_control = n_control;
  return e;
}

inline nlohmann::json to_json(const Estimate& e) {
  return {{"point", e.point},   {"se", e.se},           {"ci_low", e.ci_low},
          {"ci_high", e.ci_high}, {"level", e.level},   {"n_treat", e.n_treat},
          {"n_control", e.n_control}};
}

}  // namespace targetkit
