#pragma once

#include "diffuseq/common.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace diffuseq {

struct ModelConfig {
  int vocab_size = 0;
  int d_emb = 128;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int max_len = 128;
  double dropout = 0.1;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
};

template <class S>
struct LayerParams {
  MatrixX<S> ln1_g, ln1_b;
  MatrixX<S> qkv_w, qkv_b;
  MatrixX<S> out_w, out_b;
  MatrixX<S> ln2_g, ln2_b;
  MatrixX<S> ff1_w, ff1_b;
  MatrixX<S> ff2_w, ff2_b;
};

/// Denoiser weights plus the shared embedding table. Biases and norm
/// parameters are stored as 1 x n matrices.
template <class S>
struct ModelParams {
  MatrixX<S> emb;  // V x d_emb
  MatrixX<S> in_w, in_b;
  MatrixX<S> pos;  // max_len x d_model
  MatrixX<S> time1_w, time1_b, time2_w, time2_b;
  std::vector<LayerParams<S>> layers;
  MatrixX<S> lnf_g, lnf_b;
  MatrixX<S> out_w, out_b;

  /// Calls f(name, tensor) over every tensor in canonical order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const MatrixX<S>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.visit([](const std::string&, MatrixX<S>& m) { m.setZero(); });
    return z;
  }

  template <class T>
  ModelParams<T> cast() const {
    ModelParams<T> out;
    out.layers.resize(layers.size());
    std::vector<MatrixX<T>*> dst;
    out.visit([&](const std::string&, MatrixX<T>& m) { dst.push_back(&m); });
    std::size_t i = 0;
    visit([&](const std::string&, const MatrixX<S>& m) { *dst[i++] = m.template cast<T>(); });
    return out;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& p, F& f) {
    f("emb.weight", p.emb);
    f("in_proj.weight", p.in_w);
    f("in_proj.bias", p.in_b);
    f("pos_emb.weight", p.pos);
    f("time_mlp.0.weight", p.time1_w);
    f("time_mlp.0.bias", p.time1_b);
    f("time_mlp.2.weight", p.time2_w);
    f("time_mlp.2.bias", p.time2_b);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      auto& l = p.layers[i];
      const std::string pre = "layers." + std::to_string(i) + ".";
      f(pre + "ln1.weight", l.ln1_g);
      f(pre + "ln1.bias", l.ln1_b);
      f(pre + "attn.qkv.weight", l.qkv_w);
      f(pre + "attn.qkv.bias", l.qkv_b);
      f(pre + "attn.out.weight", l.out_w);
      f(pre + "attn.out.bias", l.out_b);
      f(pre + "ln2.weight", l.ln2_g);
      f(pre + "ln2.bias", l.ln2_b);
      f(pre + "ff.0.weight", l.ff1_w);
      f(pre + "ff.0.bias", l.ff1_b);
      f(pre + "ff.2.weight", l.ff2_w);
      f(pre + "ff.2.bias", l.ff2_b);
    }
    f("final_ln.weight", p.lnf_g);
    f("final_ln.bias", p.lnf_b);
    f("out_proj.weight", p.out_w);
    f("out_proj.bias", p.out_b);
  }
};

/// Gaussian weights scaled by 1/sqrt(fan_in), zero biases, unit norm gains;
/// embedding rows and positional embeddings drawn with std 0.02.
template <class S>
ModelParams<S> init_params(const ModelConfig& config, std::uint64_t seed);

/// Sinusoidal encoding: [2i] = sin(t / 10000^(2i/dim)), [2i+1] = cos(...).
std::vector<double> timestep_embedding(double t, int dim);

/// A batch of B sequences of a common length L, stacked row-wise.
template <class S>
struct DenoiserBatch {
  MatrixX<S> z;                       // (B*L) x d_emb
  std::vector<int> t;                 // B step indices
  std::vector<std::uint8_t> key_pad;  // B*L, nonzero = excluded from attention keys; empty = none
  int seq_len = 0;

  int batch() const { return static_cast<int>(t.size()); }
};

template <class S>
struct LayerCache {
  MatrixX<S> x_in;
  MatrixX<S> ln1_xhat, ln1_rstd, ln1_out;
  MatrixX<S> qkv;
  MatrixX<S> probs;  // (B*H*L) x L
  MatrixX<S> attn_cat;
  MatrixX<S> drop1;
  MatrixX<S> x_mid;
  MatrixX<S> ln2_xhat, ln2_rstd, ln2_out;
  MatrixX<S> ff_pre, ff_act;
  MatrixX<S> drop2;
};

/// Activations recorded by a training forward pass.
template <class S>
struct ForwardCache {
  int batch = 0;
  int seq_len = 0;
  MatrixX<S> z;
  MatrixX<S> t_sin, t_pre, t_act;  // B x d_model
  MatrixX<S> drop0;
  std::vector<LayerCache<S>> layers;
  MatrixX<S> x_final;
  MatrixX<S> lnf_xhat, lnf_rstd, lnf_out;
};

/// Predicts z_0 from z_t. Bidirectional attention over the full sequence;
/// padded keys are masked. Dropout is applied only when `dropout_rng` is set.
/// Records activations into `cache` when non-null.
template <class S>
MatrixX<S> forward(const ModelParams<S>& params, const ModelConfig& config, const DenoiserBatch<S>& input,
                   ForwardCache<S>* cache = nullptr, Rng* dropout_rng = nullptr);

/// Accumulates dLoss/dparams into `grads` given dLoss/d(output) and returns
/// dLoss/d(z_t). Throws NumericError naming the first non-finite gradient.
template <class S>
MatrixX<S> backward(const ModelParams<S>& params, const ModelConfig& config, const ForwardCache<S>& cache,
                    const MatrixX<S>& d_out, ModelParams<S>& grads);

/// Throws NumericError naming the first tensor with a non-finite entry.
template <class S>
void check_finite(const ModelParams<S>& params, const std::string& what);

}  // namespace diffuseq
