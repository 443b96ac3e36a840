#pragma once

#include "diffuseq/common.hpp"
#include "diffuseq/embedding.hpp"
#include "diffuseq/schedule.hpp"
#include "diffuseq/tokenizer.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace diffuseq {

/// A source/target pair laid out as [BOS] src [SEP] trg [EOS] PAD... with a
/// fixed length. Positions before `boundary` form the source half.
struct PairedExample {
  TokenIds src_ids;
  TokenIds trg_ids;
  TokenIds ids;
  int boundary = 0;
  std::vector<std::uint8_t> pad_mask;  // 1 = PAD

  int length() const { return static_cast<int>(ids.size()); }
  /// Target positions that carry content (target tokens and EOS).
  int target_tokens() const { return static_cast<int>(trg_ids.size()) + 1; }
};

/// Throws ConfigError when the pair does not fit in `length` positions.
PairedExample make_example(const TokenIds& src, const TokenIds& trg, int length);

/// Layout for generation: [BOS] src [SEP] followed by target slots. The target
/// half is all PAD placeholders and is not masked.
PairedExample make_source_layout(const TokenIds& src, int length);

template <class S>
struct LatentState {
  MatrixX<S> z;
  int t = 0;
  int boundary = 0;
  std::vector<std::uint8_t> pad_mask;

  auto x_rows() const { return z.topRows(boundary); }
  auto y_rows() const { return z.bottomRows(z.rows() - boundary); }
};

/// Overwrites rows [0, boundary) with `x0_rows`.
template <class S>
LatentState<S> anchor(LatentState<S> state, const MatrixX<S>& x0_rows) {
  if (x0_rows.rows() != state.boundary || x0_rows.cols() != state.z.cols()) {
    throw ContractError("anchor: source rows (" + std::to_string(x0_rows.rows()) +
                        ") do not match boundary " + std::to_string(state.boundary));
  }
  state.z.topRows(state.boundary) = x0_rows;
  return state;
}

/// z_0 = Emb(ids) + sqrt(beta_0) * eps.
template <class S>
LatentState<S> sample_z0(const PairedExample& ex, const MatrixX<S>& table, const NoiseSchedule& schedule, Rng& rng) {
  LatentState<S> st;
  st.z = embed(table, ex.ids);
  const S sd = static_cast<S>(std::sqrt(schedule.beta0()));
  if (sd != S(0)) {
    for (Eigen::Index i = 0; i < st.z.size(); ++i) st.z.data()[i] += sd * static_cast<S>(rng.normal());
  }
  st.t = 0;
  st.boundary = ex.boundary;
  st.pad_mask = ex.pad_mask;
  return st;
}

/// Partially noised forward sample with explicit target noise `eps`
/// (rows = target rows).
template <class S>
LatentState<S> q_sample_with_noise(const LatentState<S>& z0, const MatrixX<S>& x0_rows, int t,
                                   const NoiseSchedule& schedule, const MatrixX<S>& eps) {
  if (t < 1 || t > schedule.T) throw ContractError("q_sample: step out of range");
  LatentState<S> out = z0;
  out.t = t;
  const S a = static_cast<S>(std::sqrt(schedule.alpha_bar[t]));
  const S b = static_cast<S>(std::sqrt(1.0 - schedule.alpha_bar[t]));
  const Eigen::Index ny = z0.z.rows() - z0.boundary;
  out.z.bottomRows(ny) = a * z0.z.bottomRows(ny) + b * eps;
  return anchor(std::move(out), x0_rows);
}

/// y_t = sqrt(abar_t) y_0 + sqrt(1 - abar_t) eps; x rows anchored to `x0_rows`.
template <class S>
LatentState<S> q_sample(const LatentState<S>& z0, const MatrixX<S>& x0_rows, int t, const NoiseSchedule& schedule,
                        Rng& rng) {
  MatrixX<S> eps(z0.z.rows() - z0.boundary, z0.z.cols());
  rng.fill_normal(eps);
  return q_sample_with_noise(z0, x0_rows, t, schedule, eps);
}

/// Anchors with z0's own source rows.
template <class S>
LatentState<S> q_sample(const LatentState<S>& z0, int t, const NoiseSchedule& schedule, Rng& rng) {
  return q_sample(z0, MatrixX<S>(z0.x_rows()), t, schedule, rng);
}

/// One transition q(z_t | z_{t-1}) on the target rows.
template <class S>
LatentState<S> q_step(const LatentState<S>& prev, const NoiseSchedule& schedule, Rng& rng) {
  LatentState<S> out = prev;
  out.t = prev.t + 1;
  const S a = static_cast<S>(std::sqrt(schedule.alpha[out.t]));
  const S b = static_cast<S>(std::sqrt(schedule.beta[out.t]));
  for (Eigen::Index r = prev.boundary; r < prev.z.rows(); ++r) {
    for (Eigen::Index c = 0; c < prev.z.cols(); ++c) out.z(r, c) = a * prev.z(r, c) + b * static_cast<S>(rng.normal());
  }
  return out;
}

/// coef_zt * z_t + coef_z0 * z0_hat.
template <class S>
MatrixX<S> posterior_mean(const MatrixX<S>& z_t, const MatrixX<S>& z0_hat, int t, const NoiseSchedule& schedule) {
  if (z_t.rows() != z0_hat.rows() || z_t.cols() != z0_hat.cols()) {
    throw ContractError("posterior_mean: shape mismatch");
  }
  const PosteriorCoeffs c = posterior(schedule, t);
  return static_cast<S>(c.coef_zt) * z_t + static_cast<S>(c.coef_z0) * z0_hat;
}

}  // namespace diffuseq
