#include "diffuseq/schedule.hpp"

#include "diffuseq/common.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace diffuseq {

namespace {

// Fills beta/alpha from a raw alpha_bar table and rebuilds alpha_bar as their
// running product.
void chain_from_alpha_bar(NoiseSchedule& sched, const std::vector<double>& raw) {
  const int T = static_cast<int>(raw.size()) - 1;
  sched.alpha_bar.assign(T + 1, 0.0);
  sched.beta.assign(T + 1, 0.0);
  sched.alpha.assign(T + 1, 1.0);
  sched.alpha_bar[0] = raw[0];
  for (int t = 1; t <= T; ++t) {
    const double unclamped = 1.0 - raw[t] / sched.alpha_bar[t - 1];
    // A floored tail can produce a zero ratio step; keep beta strictly positive.
    const double b = std::clamp(unclamped, 1e-12, sched.beta_cap);
    sched.beta[t] = b;
    sched.alpha[t] = 1.0 - b;
    sched.alpha_bar[t] = (b == unclamped) ? raw[t] : sched.alpha_bar[t - 1] * sched.alpha[t];
  }
}

}  // namespace

NoiseSchedule build_sqrt_schedule(int T, double s, double floor, double beta_cap) {
  if (T < 2) throw ConfigError("schedule: T must be >= 2, got " + std::to_string(T));
  if (!(s > 0.0)) throw ConfigError("schedule: s must be > 0");
  if (!(floor > 0.0 && floor < 1.0)) throw ConfigError("schedule: floor must be in (0,1)");
  if (!(beta_cap > 0.0 && beta_cap < 1.0)) throw ConfigError("schedule: beta cap must be in (0,1)");

  NoiseSchedule sched;
  sched.T = T;
  sched.s = s;
  sched.floor = floor;
  sched.beta_cap = beta_cap;

  std::vector<double> raw(T + 1);
  for (int t = 0; t <= T; ++t) {
    raw[t] = std::max(1.0 - std::sqrt(static_cast<double>(t) / T + s), floor);
  }
  chain_from_alpha_bar(sched, raw);
  sched.timesteps.resize(T + 1);
  for (int t = 0; t <= T; ++t) sched.timesteps[t] = t;
  return sched;
}

PosteriorCoeffs posterior(const NoiseSchedule& schedule, int t) {
  if (t < 1 || t > schedule.T) {
    throw ContractError("posterior: step " + std::to_string(t) + " outside [1, " +
                        std::to_string(schedule.T) + "]");
  }
  const double ab = schedule.alpha_bar[t];
  const double ab_prev = schedule.alpha_bar[t - 1];
  const double beta = schedule.beta[t];
  const double denom = 1.0 - ab;
  PosteriorCoeffs c;
  c.coef_zt = std::sqrt(schedule.alpha[t]) * (1.0 - ab_prev) / denom;
  c.coef_z0 = std::sqrt(ab_prev) * beta / denom;
  c.variance = beta * (1.0 - ab_prev) / denom;
  return c;
}

NoiseSchedule respace(const NoiseSchedule& schedule, int K) {
  const int T = schedule.T;
  if (K < 2 || K > T) {
    throw ConfigError("respace: step count " + std::to_string(K) + " outside [2, " +
                      std::to_string(T) + "]");
  }
  NoiseSchedule out;
  out.T = K;
  out.s = schedule.s;
  out.floor = schedule.floor;
  out.beta_cap = schedule.beta_cap;

  std::vector<double> raw(K + 1);
  out.timesteps.resize(K + 1);
  raw[0] = schedule.alpha_bar[0];
  out.timesteps[0] = schedule.timesteps[0];
  for (int k = 1; k <= K; ++k) {
    // round(k * T / K), exact in integers
    const long idx = (2L * k * T + K) / (2L * K);
    raw[k] = schedule.alpha_bar[idx];
    out.timesteps[k] = schedule.timesteps[idx];
  }
  chain_from_alpha_bar(out, raw);
  return out;
}

}  // namespace diffuseq
