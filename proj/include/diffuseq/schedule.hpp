#pragma once

#include <vector>

namespace diffuseq {

/// Variance schedule of the forward process, indexed by step.
///
/// `alpha_bar` has T+1 entries (index 0 is the q(z_0|w) anchor); `beta` and
/// `alpha` have T+1 entries with index 0 unused. `timesteps[k]` maps step k of
/// this schedule onto the step index the denoiser was trained with; it is the
/// identity for a freshly built schedule and a strictly increasing subsequence
/// after respacing.
struct NoiseSchedule {
  int T = 0;
  double s = 0.0;
  double floor = 1e-5;
  double beta_cap = 0.999;
  std::vector<double> alpha_bar;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<int> timesteps;

  /// Variance of the q(z_0|w) transition, 1 - alpha_bar[0].
  double beta0() const { return 1.0 - alpha_bar[0]; }
};

struct PosteriorCoeffs {
  double coef_zt = 0.0;
  double coef_z0 = 0.0;
  double variance = 0.0;
};

/// alpha_bar_t = 1 - sqrt(t/T + s), floored; beta capped. When the cap or the
/// floor engages, alpha_bar is rebuilt from the clamped betas so the chain
/// identity alpha_bar[t] = alpha[t] * alpha_bar[t-1] stays exact.
NoiseSchedule build_sqrt_schedule(int T, double s, double floor = 1e-5, double beta_cap = 0.999);

PosteriorCoeffs posterior(const NoiseSchedule& schedule, int t);

/// K evenly spaced steps ending at T.
NoiseSchedule respace(const NoiseSchedule& schedule, int K);

}  // namespace diffuseq
