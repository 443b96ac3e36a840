#pragma once

#include "diffuseq/diffusion.hpp"
#include "diffuseq/metrics.hpp"
#include "diffuseq/model.hpp"

#include <cstdint>
#include <vector>

namespace diffuseq {

struct SampleConfig {
  int steps = 2000;
  bool clamp = false;
  int candidates = 1;
  std::uint64_t seed = 0;
  /// Chains evaluated together in one forward pass.
  int chain_batch = 64;

  void validate(int T) const;
};

/// Predicts z_0 for B stacked sequences of length L at trained step indices `t`.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual MatrixF predict(const MatrixF& z, int seq_len, const std::vector<int>& t) const = 0;
};

class TransformerDenoiser final : public Denoiser {
 public:
  explicit TransformerDenoiser(const Model<float>& model) : model_(model) {}
  MatrixF predict(const MatrixF& z, int seq_len, const std::vector<int>& t) const override;

 private:
  const Model<float>& model_;
};

/// B reverse-process chains sharing a sequence length. Rows [0, boundary[b])
/// of chain b are source rows and equal x0 after every step.
struct ChainBatch {
  MatrixF z;   // (B*L) x d_emb
  MatrixF x0;  // (B*L) x d_emb; only source rows are read
  std::vector<int> boundary;
  int seq_len = 0;
  int k = 0;  // current step of the (possibly respaced) schedule

  int batch() const { return static_cast<int>(boundary.size()); }
};

/// One anchored ancestral step from k to k-1 of `schedule`. The denoiser is
/// queried at schedule.timesteps[k]. `rngs` holds one generator per chain; an
/// empty vector means zero noise. `clamp_table`, when set, snaps each
/// predicted target row to its nearest row of the table.
void reverse_step(const Denoiser& denoiser, ChainBatch& chains, const NoiseSchedule& schedule, std::vector<Rng>& rngs,
                  const MatrixF* clamp_table);

/// Single-chain form; `rng` may be null for zero noise.
LatentState<float> reverse_step(const Denoiser& denoiser, const LatentState<float>& state,
                                const NoiseSchedule& schedule, Rng* rng, const MatrixF& x0_rows,
                                const MatrixF* clamp_table);

/// Nearest-row decode of the target rows, cut at the first EOS, with special
/// tokens removed.
TokenIds decode_target(const MatrixF& table, const MatrixF& y_rows);

/// candidates[i][c] is chain c for source i, seeded with cfg.seed + c.
std::vector<std::vector<TokenIds>> generate_candidates(const Model<float>& model, const std::vector<TokenIds>& sources,
                                                       const SampleConfig& cfg);

/// Same as generate_candidates with an arbitrary denoiser.
std::vector<std::vector<TokenIds>> generate_candidates(const Denoiser& denoiser, const MatrixF& table,
                                                       const MatrixF& source_table, const NoiseSchedule& trained,
                                                       int max_len, const std::vector<TokenIds>& sources,
                                                       const SampleConfig& cfg);

/// One candidate for one source.
TokenIds generate(const Model<float>& model, const TokenIds& src, const SampleConfig& cfg);

struct MbrResult {
  int index = 0;
  Matrix utility;  // utility(i, j) = BLEU(candidate i, {candidate j}); diagonal unused
};

/// Minimum-risk candidate under negative pairwise BLEU; ties go to the lowest
/// index. Throws ContractError on an empty set.
MbrResult mbr_select(const std::vector<metrics::Tokens>& candidates);

/// Argmax of the mean off-diagonal utility per row, lowest index on ties.
int mbr_select_from_utilities(const Matrix& utility);

}  // namespace diffuseq
