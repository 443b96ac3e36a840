#include "diffuseq/denoiser.hpp"

#include "diffuseq/tokenizer.hpp"

#include <cmath>
#include <limits>

namespace diffuseq {

namespace {

constexpr double kLnEps = 1e-5;

template <class S>
using Mat = MatrixX<S>;

template <class S>
Mat<S> gaussian(int rows, int cols, double stddev, Rng& rng) {
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal() * stddev);
  return m;
}

template <class S>
Mat<S> linear_weight(int fan_in, int fan_out, Rng& rng) {
  return gaussian<S>(fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

template <class S>
void linear(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b, Mat<S>& y) {
  y.resize(x.rows(), w.cols());
  y.noalias() = x * w;
  y.rowwise() += b.row(0);
}

// dx = dy w^T; accumulates dw, db.
template <class S>
Mat<S> linear_backward(const Mat<S>& x, const Mat<S>& w, const Mat<S>& dy, Mat<S>& dw, Mat<S>& db) {
  dw.noalias() += x.transpose() * dy;
  db += dy.colwise().sum();
  Mat<S> dx(dy.rows(), w.rows());
  dx.noalias() = dy * w.transpose();
  return dx;
}

template <class S>
void layer_norm(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b, Mat<S>& xhat, Mat<S>& rstd, Mat<S>& y) {
  const auto n = x.cols();
  xhat.resize(x.rows(), n);
  rstd.resize(x.rows(), 1);
  y.resize(x.rows(), n);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().mean();
    const S rs = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    rstd(r, 0) = rs;
    xhat.row(r) = (x.row(r).array() - mean) * rs;
    y.row(r) = xhat.row(r).cwiseProduct(g.row(0)) + b.row(0);
  }
}

template <class S>
Mat<S> layer_norm_backward(const Mat<S>& xhat, const Mat<S>& rstd, const Mat<S>& g, const Mat<S>& dy, Mat<S>& dg,
                           Mat<S>& db) {
  dg += dy.cwiseProduct(xhat).colwise().sum();
  db += dy.colwise().sum();
  Mat<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const auto dxhat = dy.row(r).cwiseProduct(g.row(0)).eval();
    const S m1 = dxhat.mean();
    const S m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
    dx.row(r) = rstd(r, 0) * (dxhat.array() - m1 - xhat.row(r).array() * m2);
  }
  return dx;
}

template <class S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * static_cast<S>(M_SQRT1_2)));
}

template <class S>
S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x * static_cast<S>(M_SQRT1_2)));
  const S pdf = std::exp(S(-0.5) * x * x) * static_cast<S>(0.3989422804014327);
  return cdf + x * pdf;
}

template <class S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

template <class S>
Mat<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Mat<S> m(rows, cols);
  const S keep = static_cast<S>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? S(0) : keep;
  return m;
}

}  // namespace

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("model config: " + msg);
  };
  require(vocab_size > special::kCount, "vocab_size must exceed the special tokens");
  require(d_emb > 0 && d_model > 0 && d_ff > 0, "widths must be positive");
  require(n_layers > 0, "n_layers must be positive");
  require(n_heads > 0 && d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(d_model % 2 == 0, "d_model must be even for the timestep encoding");
  require(max_len >= 3, "max_len must be at least 3");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
}

std::vector<double> timestep_embedding(double t, int dim) {
  if (dim % 2 != 0) throw ContractError("timestep_embedding: dim must be even");
  std::vector<double> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / dim);
    out[2 * i] = std::sin(t * freq);
    out[2 * i + 1] = std::cos(t * freq);
  }
  return out;
}

template <class S>
ModelParams<S> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const int de = config.d_emb, dm = config.d_model, dff = config.d_ff;
  ModelParams<S> p;
  p.emb = gaussian<S>(config.vocab_size, de, 0.02, rng);
  p.in_w = linear_weight<S>(de, dm, rng);
  p.in_b = Mat<S>::Zero(1, dm);
  p.pos = gaussian<S>(config.max_len, dm, 0.02, rng);
  p.time1_w = linear_weight<S>(dm, dm, rng);
  p.time1_b = Mat<S>::Zero(1, dm);
  p.time2_w = linear_weight<S>(dm, dm, rng);
  p.time2_b = Mat<S>::Zero(1, dm);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& l : p.layers) {
    l.ln1_g = Mat<S>::Ones(1, dm);
    l.ln1_b = Mat<S>::Zero(1, dm);
    l.qkv_w = linear_weight<S>(dm, 3 * dm, rng);
    l.qkv_b = Mat<S>::Zero(1, 3 * dm);
    l.out_w = linear_weight<S>(dm, dm, rng);
    l.out_b = Mat<S>::Zero(1, dm);
    l.ln2_g = Mat<S>::Ones(1, dm);
    l.ln2_b = Mat<S>::Zero(1, dm);
    l.ff1_w = linear_weight<S>(dm, dff, rng);
    l.ff1_b = Mat<S>::Zero(1, dff);
    l.ff2_w = linear_weight<S>(dff, dm, rng);
    l.ff2_b = Mat<S>::Zero(1, dm);
  }
  p.lnf_g = Mat<S>::Ones(1, dm);
  p.lnf_b = Mat<S>::Zero(1, dm);
  p.out_w = linear_weight<S>(dm, de, rng);
  p.out_b = Mat<S>::Zero(1, de);
  return p;
}

template <class S>
Mat<S> forward(const ModelParams<S>& p, const ModelConfig& cfg, const DenoiserBatch<S>& in, ForwardCache<S>* cache,
               Rng* dropout_rng) {
  const int B = in.batch();
  const int L = in.seq_len;
  const int dm = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = dm / H;
  if (L > cfg.max_len) {
    throw ConfigError("forward: sequence length " + std::to_string(L) + " exceeds max_len " +
                      std::to_string(cfg.max_len));
  }
  if (in.z.rows() != static_cast<Eigen::Index>(B) * L || in.z.cols() != cfg.d_emb) {
    throw ContractError("forward: input shape does not match batch layout");
  }
  if (!in.key_pad.empty() && in.key_pad.size() != static_cast<std::size_t>(B) * L) {
    throw ContractError("forward: key mask length does not match batch layout");
  }
  const bool drop = dropout_rng != nullptr && cfg.dropout > 0.0;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  ForwardCache<S> local;
  ForwardCache<S>& c = cache ? *cache : local;
  c.batch = B;
  c.seq_len = L;
  if (cache) c.z = in.z;

  // timestep conditioning
  c.t_sin.resize(B, dm);
  for (int b = 0; b < B; ++b) {
    const auto e = timestep_embedding(in.t[static_cast<std::size_t>(b)], dm);
    for (int j = 0; j < dm; ++j) c.t_sin(b, j) = static_cast<S>(e[static_cast<std::size_t>(j)]);
  }
  linear(c.t_sin, p.time1_w, p.time1_b, c.t_pre);
  c.t_act = c.t_pre.unaryExpr([](S v) { return v * sigmoid(v); });
  Mat<S> temb;
  linear(c.t_act, p.time2_w, p.time2_b, temb);

  Mat<S> x;
  linear(in.z, p.in_w, p.in_b, x);
  for (int b = 0; b < B; ++b) {
    auto blk = x.middleRows(static_cast<Eigen::Index>(b) * L, L);
    blk += p.pos.topRows(L);
    blk.rowwise() += temb.row(b);
  }
  if (drop) {
    c.drop0 = dropout_mask<S>(x.rows(), x.cols(), cfg.dropout, *dropout_rng);
    x = x.cwiseProduct(c.drop0);
  } else {
    c.drop0.resize(0, 0);
  }

  c.layers.resize(p.layers.size());
  Mat<S> scores(L, L);
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& lp = p.layers[li];
    auto& lc = c.layers[li];
    lc.x_in = x;
    layer_norm(x, lp.ln1_g, lp.ln1_b, lc.ln1_xhat, lc.ln1_rstd, lc.ln1_out);
    linear(lc.ln1_out, lp.qkv_w, lp.qkv_b, lc.qkv);
    lc.probs.resize(static_cast<Eigen::Index>(B) * H * L, L);
    lc.attn_cat.resize(static_cast<Eigen::Index>(B) * L, dm);
    for (int b = 0; b < B; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * L;
      for (int h = 0; h < H; ++h) {
        const auto q = lc.qkv.block(r0, h * dh, L, dh);
        const auto k = lc.qkv.block(r0, dm + h * dh, L, dh);
        const auto v = lc.qkv.block(r0, 2 * dm + h * dh, L, dh);
        scores.noalias() = q * k.transpose();
        scores *= scale;
        if (!in.key_pad.empty()) {
          for (int j = 0; j < L; ++j) {
            if (in.key_pad[static_cast<std::size_t>(r0 + j)]) scores.col(j).setConstant(-std::numeric_limits<S>::infinity());
          }
        }
        for (int i = 0; i < L; ++i) {
          const S mx = scores.row(i).maxCoeff();
          scores.row(i) = (scores.row(i).array() - mx).exp();
          scores.row(i) /= scores.row(i).sum();
        }
        lc.probs.block((static_cast<Eigen::Index>(b) * H + h) * L, 0, L, L) = scores;
        lc.attn_cat.block(r0, h * dh, L, dh).noalias() = scores * v;
      }
    }
    Mat<S> attn_out;
    linear(lc.attn_cat, lp.out_w, lp.out_b, attn_out);
    if (drop) {
      lc.drop1 = dropout_mask<S>(attn_out.rows(), attn_out.cols(), cfg.dropout, *dropout_rng);
      attn_out = attn_out.cwiseProduct(lc.drop1);
    } else {
      lc.drop1.resize(0, 0);
    }
    x += attn_out;
    lc.x_mid = x;

    layer_norm(x, lp.ln2_g, lp.ln2_b, lc.ln2_xhat, lc.ln2_rstd, lc.ln2_out);
    linear(lc.ln2_out, lp.ff1_w, lp.ff1_b, lc.ff_pre);
    lc.ff_act = lc.ff_pre.unaryExpr([](S v) { return gelu(v); });
    Mat<S> ff_out;
    linear(lc.ff_act, lp.ff2_w, lp.ff2_b, ff_out);
    if (drop) {
      lc.drop2 = dropout_mask<S>(ff_out.rows(), ff_out.cols(), cfg.dropout, *dropout_rng);
      ff_out = ff_out.cwiseProduct(lc.drop2);
    } else {
      lc.drop2.resize(0, 0);
    }
    x += ff_out;
  }

  c.x_final = x;
  layer_norm(x, p.lnf_g, p.lnf_b, c.lnf_xhat, c.lnf_rstd, c.lnf_out);
  Mat<S> out;
  linear(c.lnf_out, p.out_w, p.out_b, out);
  return out;
}

template <class S>
Mat<S> backward(const ModelParams<S>& p, const ModelConfig& cfg, const ForwardCache<S>& c, const Mat<S>& d_out,
                ModelParams<S>& g) {
  const int B = c.batch;
  const int L = c.seq_len;
  const int dm = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = dm / H;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  if (c.layers.size() != p.layers.size() || c.z.rows() == 0) {
    throw ContractError("backward: forward was not run with recording enabled");
  }

  Mat<S> d_lnf = linear_backward(c.lnf_out, p.out_w, d_out, g.out_w, g.out_b);
  Mat<S> dx = layer_norm_backward(c.lnf_xhat, c.lnf_rstd, p.lnf_g, d_lnf, g.lnf_g, g.lnf_b);

  Mat<S> dP(L, L), dS(L, L);
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& lp = p.layers[li];
    const auto& lc = c.layers[li];
    auto& lg = g.layers[li];

    // feed-forward branch
    Mat<S> d_ff = lc.drop2.size() ? Mat<S>(dx.cwiseProduct(lc.drop2)) : dx;
    Mat<S> d_act = linear_backward(lc.ff_act, lp.ff2_w, d_ff, lg.ff2_w, lg.ff2_b);
    Mat<S> d_pre = d_act.cwiseProduct(lc.ff_pre.unaryExpr([](S v) { return gelu_grad(v); }));
    Mat<S> d_ln2 = linear_backward(lc.ln2_out, lp.ff1_w, d_pre, lg.ff1_w, lg.ff1_b);
    dx += layer_norm_backward(lc.ln2_xhat, lc.ln2_rstd, lp.ln2_g, d_ln2, lg.ln2_g, lg.ln2_b);

    // attention branch
    Mat<S> d_attn = lc.drop1.size() ? Mat<S>(dx.cwiseProduct(lc.drop1)) : dx;
    Mat<S> d_cat = linear_backward(lc.attn_cat, lp.out_w, d_attn, lg.out_w, lg.out_b);
    Mat<S> d_qkv = Mat<S>::Zero(lc.qkv.rows(), lc.qkv.cols());
    for (int b = 0; b < B; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * L;
      for (int h = 0; h < H; ++h) {
        const auto q = lc.qkv.block(r0, h * dh, L, dh);
        const auto k = lc.qkv.block(r0, dm + h * dh, L, dh);
        const auto v = lc.qkv.block(r0, 2 * dm + h * dh, L, dh);
        const auto P = lc.probs.block((static_cast<Eigen::Index>(b) * H + h) * L, 0, L, L);
        const auto dO = d_cat.block(r0, h * dh, L, dh);
        dP.noalias() = dO * v.transpose();
        d_qkv.block(r0, 2 * dm + h * dh, L, dh).noalias() = P.transpose() * dO;
        for (int i = 0; i < L; ++i) {
          const S dot = dP.row(i).dot(P.row(i));
          dS.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - dot).matrix());
        }
        dS *= scale;
        d_qkv.block(r0, h * dh, L, dh).noalias() = dS * k;
        d_qkv.block(r0, dm + h * dh, L, dh).noalias() = dS.transpose() * q;
      }
    }
    Mat<S> d_ln1 = linear_backward(lc.ln1_out, lp.qkv_w, d_qkv, lg.qkv_w, lg.qkv_b);
    dx += layer_norm_backward(lc.ln1_xhat, lc.ln1_rstd, lp.ln1_g, d_ln1, lg.ln1_g, lg.ln1_b);
  }

  if (c.drop0.size()) dx = dx.cwiseProduct(c.drop0);

  Mat<S> d_temb = Mat<S>::Zero(B, dm);
  for (int b = 0; b < B; ++b) {
    const auto blk = dx.middleRows(static_cast<Eigen::Index>(b) * L, L);
    g.pos.topRows(L) += blk;
    d_temb.row(b) = blk.colwise().sum();
  }
  Mat<S> d_act = linear_backward(c.t_act, p.time2_w, d_temb, g.time2_w, g.time2_b);
  Mat<S> d_pre = d_act.cwiseProduct(c.t_pre.unaryExpr([](S v) {
    const S sg = sigmoid(v);
    return sg * (S(1) + v * (S(1) - sg));
  }));
  g.time1_w.noalias() += c.t_sin.transpose() * d_pre;
  g.time1_b += d_pre.colwise().sum();

  Mat<S> dz = linear_backward(c.z, p.in_w, dx, g.in_w, g.in_b);
  check_finite(g, "gradient");
  if (!dz.allFinite()) throw NumericError("backward: non-finite gradient for denoiser input");
  return dz;
}

template <class S>
void check_finite(const ModelParams<S>& params, const std::string& what) {
  params.visit([&](const std::string& name, const Mat<S>& m) {
    if (!m.allFinite()) throw NumericError("non-finite " + what + " in tensor '" + name + "'");
  });
}

template ModelParams<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ModelParams<double> init_params<double>(const ModelConfig&, std::uint64_t);
template MatrixX<float> forward<float>(const ModelParams<float>&, const ModelConfig&, const DenoiserBatch<float>&,
                                       ForwardCache<float>*, Rng*);
template MatrixX<double> forward<double>(const ModelParams<double>&, const ModelConfig&,
                                         const DenoiserBatch<double>&, ForwardCache<double>*, Rng*);
template MatrixX<float> backward<float>(const ModelParams<float>&, const ModelConfig&, const ForwardCache<float>&,
                                        const MatrixX<float>&, ModelParams<float>&);
template MatrixX<double> backward<double>(const ModelParams<double>&, const ModelConfig&,
                                          const ForwardCache<double>&, const MatrixX<double>&,
                                          ModelParams<double>&);
template void check_finite<float>(const ModelParams<float>&, const std::string&);
template void check_finite<double>(const ModelParams<double>&, const std::string&);

}  // namespace diffuseq
