#include "diffuseq/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace diffuseq {

void SampleConfig::validate(int T) const {
  if (steps < 2 || steps > T) {
    throw ConfigError("sample: steps must be in [2, " + std::to_string(T) + "], got " + std::to_string(steps));
  }
  if (candidates < 1) throw ConfigError("sample: candidates must be >= 1");
  if (chain_batch < 1) throw ConfigError("sample: chain_batch must be >= 1");
}

MatrixF TransformerDenoiser::predict(const MatrixF& z, int seq_len, const std::vector<int>& t) const {
  DenoiserBatch<float> in;
  in.z = z;
  in.t = t;
  in.seq_len = seq_len;
  return forward(model_.params, model_.config, in);
}

namespace {

void snap_rows(const MatrixF& table, MatrixF& zhat, Eigen::Index lo, Eigen::Index hi) {
  if (lo >= hi) return;
  const TokenIds ids = decode_tokens<float>(table, MatrixF(zhat.middleRows(lo, hi - lo)));
  for (Eigen::Index r = lo; r < hi; ++r) zhat.row(r) = table.row(ids[static_cast<std::size_t>(r - lo)]);
}

}  // namespace

void reverse_step(const Denoiser& denoiser, ChainBatch& chains, const NoiseSchedule& schedule, std::vector<Rng>& rngs,
                  const MatrixF* clamp_table) {
  const int k = chains.k;
  if (k < 1 || k > schedule.T) throw ContractError("reverse_step: step out of range");
  const int B = chains.batch();
  const int L = chains.seq_len;
  if (chains.z.rows() != static_cast<Eigen::Index>(B) * L || chains.x0.rows() != chains.z.rows()) {
    throw ContractError("reverse_step: latent shape does not match the chain layout");
  }
  if (!rngs.empty() && static_cast<int>(rngs.size()) != B) throw ContractError("reverse_step: one rng per chain");

  const std::vector<int> t(static_cast<std::size_t>(B), schedule.timesteps[static_cast<std::size_t>(k)]);
  MatrixF zhat = denoiser.predict(chains.z, L, t);
  if (clamp_table) {
    for (int b = 0; b < B; ++b) {
      snap_rows(*clamp_table, zhat, static_cast<Eigen::Index>(b) * L + chains.boundary[b],
                static_cast<Eigen::Index>(b + 1) * L);
    }
  }

  if (k == 1) {
    chains.z = std::move(zhat);
  } else {
    const PosteriorCoeffs c = posterior(schedule, k);
    MatrixF next = static_cast<float>(c.coef_zt) * chains.z + static_cast<float>(c.coef_z0) * zhat;
    if (!rngs.empty()) {
      const float sd = static_cast<float>(std::sqrt(c.variance));
      const Eigen::Index d = next.cols();
      for (int b = 0; b < B; ++b) {
        float* row = next.data() + static_cast<Eigen::Index>(b) * L * d;
        for (Eigen::Index i = 0; i < L * d; ++i) row[i] += sd * static_cast<float>(rngs[b].normal());
      }
    }
    chains.z = std::move(next);
  }

  for (int b = 0; b < B; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * L;
    chains.z.middleRows(r0, chains.boundary[b]) = chains.x0.middleRows(r0, chains.boundary[b]);
  }
  chains.k = k - 1;
}

LatentState<float> reverse_step(const Denoiser& denoiser, const LatentState<float>& state,
                                const NoiseSchedule& schedule, Rng* rng, const MatrixF& x0_rows,
                                const MatrixF* clamp_table) {
  ChainBatch chains;
  chains.z = state.z;
  chains.x0 = MatrixF::Zero(state.z.rows(), state.z.cols());
  if (x0_rows.rows() != state.boundary || x0_rows.cols() != state.z.cols()) {
    throw ContractError("reverse_step: source rows do not match the boundary");
  }
  chains.x0.topRows(state.boundary) = x0_rows;
  chains.boundary = {state.boundary};
  chains.seq_len = static_cast<int>(state.z.rows());
  chains.k = state.t;
  std::vector<Rng> rngs;
  if (rng) rngs.push_back(*rng);
  reverse_step(denoiser, chains, schedule, rngs, clamp_table);
  if (rng) *rng = rngs.front();

  LatentState<float> out = state;
  out.z = std::move(chains.z);
  out.t = chains.k;
  return out;
}

TokenIds decode_target(const MatrixF& table, const MatrixF& y_rows) {
  const TokenIds raw = decode_tokens<float>(table, y_rows);
  TokenIds out;
  for (TokenId id : raw) {
    if (id == special::kEos) break;
    if (id == special::kPad || id == special::kBos || id == special::kSep) continue;
    out.push_back(id);
  }
  return out;
}

std::vector<std::vector<TokenIds>> generate_candidates(const Denoiser& denoiser, const MatrixF& table,
                                                       const MatrixF& source_table, const NoiseSchedule& trained,
                                                       int max_len, const std::vector<TokenIds>& sources,
                                                       const SampleConfig& cfg) {
  cfg.validate(trained.T);
  const NoiseSchedule schedule = cfg.steps == trained.T ? trained : respace(trained, cfg.steps);
  const int L = max_len;
  const Eigen::Index d = table.cols();

  struct Job {
    std::size_t source;
    int candidate;
  };
  std::vector<Job> jobs;
  std::vector<PairedExample> layouts;
  layouts.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    layouts.push_back(make_source_layout(sources[i], L));
    for (int c = 0; c < cfg.candidates; ++c) jobs.push_back({i, c});
  }

  std::vector<std::vector<TokenIds>> out(sources.size(), std::vector<TokenIds>(static_cast<std::size_t>(cfg.candidates)));
  for (std::size_t lo = 0; lo < jobs.size(); lo += static_cast<std::size_t>(cfg.chain_batch)) {
    const std::size_t hi = std::min(jobs.size(), lo + static_cast<std::size_t>(cfg.chain_batch));
    const int B = static_cast<int>(hi - lo);
    ChainBatch chains;
    chains.seq_len = L;
    chains.k = schedule.T;
    chains.z.resize(static_cast<Eigen::Index>(B) * L, d);
    chains.x0 = MatrixF::Zero(chains.z.rows(), d);
    std::vector<Rng> rngs;
    rngs.reserve(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      const Job& job = jobs[lo + static_cast<std::size_t>(b)];
      const PairedExample& ex = layouts[job.source];
      rngs.emplace_back(cfg.seed + static_cast<std::uint64_t>(job.candidate));
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * L;
      for (Eigen::Index i = 0; i < L * d; ++i) chains.z.data()[r0 * d + i] = static_cast<float>(rngs.back().normal());
      const TokenIds src_ids(ex.ids.begin(), ex.ids.begin() + ex.boundary);
      chains.x0.middleRows(r0, ex.boundary) = embed(source_table, src_ids);
      chains.z.middleRows(r0, ex.boundary) = chains.x0.middleRows(r0, ex.boundary);
      chains.boundary.push_back(ex.boundary);
    }
    while (chains.k > 0) reverse_step(denoiser, chains, schedule, rngs, cfg.clamp ? &table : nullptr);
    for (int b = 0; b < B; ++b) {
      const Job& job = jobs[lo + static_cast<std::size_t>(b)];
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * L + chains.boundary[b];
      const MatrixF y = chains.z.middleRows(r0, L - chains.boundary[b]);
      out[job.source][static_cast<std::size_t>(job.candidate)] = decode_target(table, y);
    }
  }
  return out;
}

std::vector<std::vector<TokenIds>> generate_candidates(const Model<float>& model, const std::vector<TokenIds>& sources,
                                                       const SampleConfig& cfg) {
  const TransformerDenoiser denoiser(model);
  return generate_candidates(denoiser, model.params.emb, model.source_table(), model.schedule, model.config.max_len,
                             sources, cfg);
}

TokenIds generate(const Model<float>& model, const TokenIds& src, const SampleConfig& cfg) {
  SampleConfig one = cfg;
  one.candidates = 1;
  return generate_candidates(model, {src}, one).front().front();
}

int mbr_select_from_utilities(const Matrix& utility) {
  const Eigen::Index n = utility.rows();
  if (n == 0 || utility.cols() != n) {
    if (n == 0 && utility.cols() == 0) return 0;
    throw ContractError("mbr: utility matrix must be square");
  }
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    double sum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) sum += utility(i, j);
    }
    const double score = n > 1 ? sum / static_cast<double>(n - 1) : 0.0;
    if (score > best_score) {
      best_score = score;
      best = static_cast<int>(i);
    }
  }
  return best;
}

MbrResult mbr_select(const std::vector<metrics::Tokens>& candidates) {
  if (candidates.empty()) throw ContractError("mbr: empty candidate set");
  MbrResult r;
  if (candidates.size() == 1) return r;
  const auto n = static_cast<Eigen::Index>(candidates.size());
  r.utility = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i != j) r.utility(i, j) = metrics::bleu(candidates[i], {candidates[j]});
    }
  }
  r.index = mbr_select_from_utilities(r.utility);
  return r;
}

}  // namespace diffuseq
