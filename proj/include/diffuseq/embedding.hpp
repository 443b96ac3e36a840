#pragma once

#include "diffuseq/common.hpp"
#include "diffuseq/tokenizer.hpp"

#include <string>

namespace diffuseq {

/// Rows of `table` selected by `ids`.
template <class S>
MatrixX<S> embed(const MatrixX<S>& table, const TokenIds& ids) {
  MatrixX<S> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw ContractError("embed: token id " + std::to_string(ids[i]) + " outside table of " +
                          std::to_string(table.rows()) + " rows");
    }
    out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
  }
  return out;
}

/// logits[i][v] = -||z[i] - table[v]||^2
template <class S>
MatrixX<S> round_logits(const MatrixX<S>& table, const MatrixX<S>& z) {
  MatrixX<S> logits(z.rows(), table.rows());
  logits.noalias() = S(2) * z * table.transpose();
  logits.colwise() -= z.rowwise().squaredNorm();
  logits.rowwise() -= table.rowwise().squaredNorm().transpose();
  return logits;
}

/// Row-wise softmax of round_logits.
template <class S>
MatrixX<S> round_probs(const MatrixX<S>& table, const MatrixX<S>& z) {
  MatrixX<S> p = round_logits(table, z);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    p.row(i).array() -= p.row(i).maxCoeff();
    p.row(i) = p.row(i).array().exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

/// Nearest embedding row per position, computed directly on distances;
/// ties go to the lowest id.
template <class S>
TokenIds decode_tokens(const MatrixX<S>& table, const MatrixX<S>& z) {
  TokenIds ids(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    TokenId best = 0;
    S best_d = (table.row(0) - z.row(i)).squaredNorm();
    for (Eigen::Index v = 1; v < table.rows(); ++v) {
      const S d = (table.row(v) - z.row(i)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<TokenId>(v);
      }
    }
    ids[static_cast<std::size_t>(i)] = best;
  }
  return ids;
}

}  // namespace diffuseq
