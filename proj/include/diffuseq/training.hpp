#pragma once

#include "diffuseq/diffusion.hpp"
#include "diffuseq/model.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace diffuseq {

/// Flat key/value training configuration (`key = value`, `#` comments).
struct TrainConfig {
  int T = 2000;
  double s = 1e-4;
  int d_emb = 128;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int max_len = 128;
  double dropout = 0.1;
  int batch_size = 32;
  double lr = 1e-3;
  double warmup_frac = 0.01;
  double grad_clip = 1.0;
  long steps = 10000;
  std::uint64_t seed = 0;
  bool freeze_source_embedding = false;
  bool importance_sampling = true;
  int workers = 1;
  long log_every = 100;
  long eval_every = 1000;
  long save_every = 1000;

  ModelConfig model_config(int vocab_size) const;
  void validate() const;
  std::string serialize() const;
};

TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);

struct LossBreakdown {
  double mse_y = 0.0;
  double mse_t1 = 0.0;
  double round_nll = 0.0;
  double reg_zT = 0.0;
  double total = 0.0;

  /// The per-step term tracked by the importance sampler.
  double mse_term() const { return mse_y + mse_t1; }
};

/// Loss-aware timestep sampler. Keeps the last kHistory squared losses per step.
class ImportanceState {
 public:
  static constexpr int kHistory = 10;

  ImportanceState() = default;
  explicit ImportanceState(int T);

  int T() const { return T_; }
  void record(int t, double loss);
  bool warmed_up() const;
  /// p[t-1] for t = 1..T.
  std::vector<double> probs() const;

  const std::vector<std::array<double, kHistory>>& history() const { return history_; }
  const std::vector<long>& counts() const { return counts_; }
  void restore(std::vector<std::array<double, kHistory>> history, std::vector<long> counts);

 private:
  int T_ = 0;
  std::vector<std::array<double, kHistory>> history_;
  std::vector<long> counts_;
};

struct TimestepDraw {
  int t = 1;
  double weight = 1.0;
};

/// Draws t from `probs` (indexed t-1); weight = 1/(T p_t).
TimestepDraw sample_timestep(const std::vector<double>& probs, Rng& rng);
TimestepDraw sample_timestep(const ImportanceState& state, Rng& rng);

double entropy(const std::vector<double>& probs);

/// One training example within a batch.
struct LossItem {
  const PairedExample* example = nullptr;
  int t = 1;
  double weight = 1.0;
  std::uint64_t noise_seed = 0;
};

template <class S>
struct BatchLoss {
  std::vector<LossBreakdown> items;
  double objective = 0.0;  // mean over items of weight * total
};

/// Simplified objective on a batch of equal-length examples. When `grads`
/// is non-null, accumulates d(objective)/d(params) into it. Dropout is applied
/// only when `dropout_rng` is non-null.
template <class S>
BatchLoss<S> batch_loss(const Model<S>& model, const std::vector<LossItem>& items, ModelParams<S>* grads,
                        Rng* dropout_rng);

/// Single-example loss without dropout or gradients.
template <class S>
LossBreakdown compute_loss(const Model<S>& model, const PairedExample& example, int t, std::uint64_t noise_seed);

template <class S>
struct AdamState {
  ModelParams<S> m;
  ModelParams<S> v;
  long step = 0;

  static AdamState like(const ModelParams<S>& p) { return AdamState{p.zeros_like(), p.zeros_like(), 0}; }
};

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 1.0;  // global-norm clip; <= 0 disables
};

struct StepResult {
  bool applied = false;
  double grad_norm = 0.0;
};

/// Bias-corrected Adam with global-norm clipping; skips the update when any
/// gradient is non-finite. `grads` may be rescaled in place by clipping.
template <class S>
StepResult optimizer_step(ModelParams<S>& params, ModelParams<S>& grads, AdamState<S>& state, const AdamHyper& hyper);

struct TrainingPair {
  std::string src;
  std::string trg;
};

struct TrainLogEntry {
  long step = 0;
  LossBreakdown loss;
  double objective = 0.0;
  double p_entropy = 0.0;
  std::optional<double> valid_total;
};

/// One JSON object (no trailing newline) as written to metrics.jsonl.
std::string log_line(const TrainLogEntry& entry);

struct TrainState {
  Model<float> model;
  AdamState<float> adam;
  ImportanceState importance;
  long step = 0;
};

struct TrainOptions {
  std::string out_dir;  // empty: no files written
  std::string vocab_text;
  std::uint64_t vocab_hash = 0;
  std::function<void(const TrainLogEntry&)> on_log;
  /// Stop after this many steps of the configured total (for interrupted
  /// runs); negative means run to `steps`.
  long stop_after = -1;
};

/// Fresh model, optimizer, and sampler state for `config`.
TrainState init_train_state(const TrainConfig& config, int vocab_size);

/// Runs the training loop from `state.step` to `config.steps`. Deterministic
/// given the seed and worker count. Writes `last.dsq` every `save_every`
/// steps, `final.dsq` at the end, and `metrics.jsonl` when out_dir is set.
void train(const TrainConfig& config, const std::vector<PairedExample>& train_set,
           const std::vector<PairedExample>& valid_set, TrainState& state, const TrainOptions& options = {});

/// Mean total loss over a dataset with fixed per-example timesteps and noise.
double evaluate_loss(const Model<float>& model, const std::vector<PairedExample>& data, std::uint64_t seed);

}  // namespace diffuseq
