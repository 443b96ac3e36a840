#pragma once

#include "diffuseq/denoiser.hpp"
#include "diffuseq/schedule.hpp"

#include <optional>

namespace diffuseq {

/// A trained (or training) denoiser with its schedule. `frozen_src` holds the
/// fixed table used for source positions when source embeddings are frozen.
template <class S>
struct Model {
  ModelConfig config;
  NoiseSchedule schedule;
  ModelParams<S> params;
  std::optional<MatrixX<S>> frozen_src;

  /// Table that embeds source-half positions.
  const MatrixX<S>& source_table() const { return frozen_src ? *frozen_src : params.emb; }

  template <class T>
  Model<T> cast() const {
    Model<T> m;
    m.config = config;
    m.schedule = schedule;
    m.params = params.template cast<T>();
    if (frozen_src) m.frozen_src = frozen_src->template cast<T>();
    return m;
  }
};

}  // namespace diffuseq
