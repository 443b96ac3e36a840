#pragma once

#include "diffuseq/training.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace diffuseq::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;  // elementwise
  std::string worst_tensor;
  /// Max over named tensors of ||an - fd|| / max(||an||, ||fd||).
  double max_tensor_rel_error = 0.0;
  std::string worst_named;
  std::size_t checked = 0;
};

/// Tiny double-precision model with dropout disabled.
inline Model<double> tiny_model(int V, int d_emb, int d_model, int n_layers, int n_heads, int d_ff, int max_len, int T,
                                std::uint64_t seed) {
  Model<double> m;
  m.config.vocab_size = V;
  m.config.d_emb = d_emb;
  m.config.d_model = d_model;
  m.config.n_layers = n_layers;
  m.config.n_heads = n_heads;
  m.config.d_ff = d_ff;
  m.config.max_len = max_len;
  m.config.dropout = 0.0;
  m.schedule = build_sqrt_schedule(T, 1e-4);
  m.params = init_params<double>(m.config, seed);
  // Larger embeddings make every loss term contribute visibly.
  Rng rng(seed + 1);
  for (Eigen::Index i = 0; i < m.params.emb.size(); ++i) m.params.emb.data()[i] = rng.normal() * 0.5;
  return m;
}

/// Compares backward gradients of the batch objective against central
/// finite differences for every parameter entry.
/// Relative error is |a - b| / max(|a|, |b|, floor).
inline GradCheckResult grad_check(Model<double>& model, const std::vector<LossItem>& items, double step = 1e-3,
                                  double floor = 1e-8) {
  ModelParams<double> grads = model.params.zeros_like();
  batch_loss<double>(model, items, &grads, nullptr);

  std::vector<std::pair<std::string, MatrixX<double>*>> ps, gs;
  model.params.visit([&](const std::string& n, MatrixX<double>& m) { ps.emplace_back(n, &m); });
  grads.visit([&](const std::string& n, MatrixX<double>& m) { gs.emplace_back(n, &m); });

  GradCheckResult res;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    MatrixX<double>& p = *ps[k].second;
    const MatrixX<double>& g = *gs[k].second;
    MatrixX<double> fd_all(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double orig = p.data()[i];
      p.data()[i] = orig + step;
      const double up = batch_loss<double>(model, items, nullptr, nullptr).objective;
      p.data()[i] = orig - step;
      const double down = batch_loss<double>(model, items, nullptr, nullptr).objective;
      p.data()[i] = orig;
      const double fd = (up - down) / (2.0 * step);
      fd_all.data()[i] = fd;
      const double an = g.data()[i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor});
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_tensor = ps[k].first + "[" + std::to_string(i) + "] fd=" + std::to_string(fd) +
                           " an=" + std::to_string(an);
      }
      ++res.checked;
    }
    const double denom = std::max({g.norm(), fd_all.norm(), 1e-300});
    const double trel = (g - fd_all).norm() / denom;
    if (trel > res.max_tensor_rel_error) {
      res.max_tensor_rel_error = trel;
      res.worst_named = ps[k].first;
    }
  }
  return res;
}

}  // namespace diffuseq::testing
