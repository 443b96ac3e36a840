#include "diffuseq/training.hpp"

#include "diffuseq/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

namespace diffuseq {

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (is.fail() || !is.eof()) throw ConfigError("config: key '" + key + "' has malformed value '" + v + "'");
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Summed cross-entropy of distance logits against `ids`. With `dz`/`demb`
// set, adds scale * d(sum)/dz and scale * d(sum)/d(emb).
template <class S>
double rounding_ce(const MatrixX<S>& emb, const MatrixX<S>& z, const TokenIds& ids, S scale, MatrixX<S>* dz,
                   MatrixX<S>* demb) {
  MatrixX<S> probs = round_logits(emb, z);
  double nll = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const S mx = probs.row(i).maxCoeff();
    probs.row(i).array() -= mx;
    const S lse = std::log(probs.row(i).array().exp().sum());
    nll -= static_cast<double>(probs(i, ids[static_cast<std::size_t>(i)]) - lse);
    probs.row(i) = (probs.row(i).array() - lse).exp().matrix();
  }
  if (!dz) return nll;
  // logits = -||z - e_v||^2
  MatrixX<S> dlogit = probs;
  for (Eigen::Index i = 0; i < z.rows(); ++i) dlogit(i, ids[static_cast<std::size_t>(i)]) -= S(1);
  dlogit *= scale;
  const RowVectorX<S> col_sum = dlogit.colwise().sum();
  const Eigen::Matrix<S, Eigen::Dynamic, 1> row_sum = dlogit.rowwise().sum();
  *dz += S(2) * (dlogit * emb);
  *dz -= S(2) * (z.array().colwise() * row_sum.array()).matrix();
  demb->noalias() += S(2) * (dlogit.transpose() * z);
  *demb -= S(2) * (emb.array().colwise() * col_sum.transpose().array()).matrix();
  return nll;
}

template <class S>
std::vector<MatrixX<S>*> tensors_of(ModelParams<S>& p) {
  std::vector<MatrixX<S>*> out;
  p.visit([&](const std::string&, MatrixX<S>& m) { out.push_back(&m); });
  return out;
}

}  // namespace

ModelConfig TrainConfig::model_config(int vocab_size) const {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.d_emb = d_emb;
  m.d_model = d_model;
  m.n_layers = n_layers;
  m.n_heads = n_heads;
  m.d_ff = d_ff;
  m.max_len = max_len;
  m.dropout = dropout;
  return m;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("train config: " + msg);
  };
  require(T >= 2, "T must be >= 2");
  require(s > 0.0 && s < 0.01, "s must be in (0, 0.01)");
  require(batch_size > 0, "batch_size must be positive");
  require(lr > 0.0, "lr must be positive");
  require(steps >= 0, "steps must be non-negative");
  require(warmup_frac >= 0.0 && warmup_frac <= 1.0, "warmup_frac must be in [0, 1]");
  require(workers >= 1, "workers must be >= 1");
  require(log_every > 0 && eval_every > 0, "log_every and eval_every must be positive");
  model_config(special::kCount + 1).validate();
}

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  os.precision(17);
  os << "T = " << T << "\ns = " << s << "\nd_emb = " << d_emb << "\nd_model = " << d_model
     << "\nn_layers = " << n_layers << "\nn_heads = " << n_heads << "\nd_ff = " << d_ff
     << "\nmax_len = " << max_len << "\ndropout = " << dropout << "\nbatch_size = " << batch_size
     << "\nlr = " << lr << "\nwarmup_frac = " << warmup_frac << "\ngrad_clip = " << grad_clip
     << "\nsteps = " << steps << "\nseed = " << seed
     << "\nfreeze_source_embedding = " << (freeze_source_embedding ? "true" : "false")
     << "\nimportance_sampling = " << (importance_sampling ? "on" : "off") << "\nworkers = " << workers
     << "\nlog_every = " << log_every << "\neval_every = " << eval_every << "\nsave_every = " << save_every
     << "\n";
  return os.str();
}

TrainConfig parse_train_config(const std::string& text) {
  TrainConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "T") c.T = parse_number<int>(key, val);
    else if (key == "s") c.s = parse_number<double>(key, val);
    else if (key == "d_emb") c.d_emb = parse_number<int>(key, val);
    else if (key == "d_model") c.d_model = parse_number<int>(key, val);
    else if (key == "n_layers") c.n_layers = parse_number<int>(key, val);
    else if (key == "n_heads") c.n_heads = parse_number<int>(key, val);
    else if (key == "d_ff") c.d_ff = parse_number<int>(key, val);
    else if (key == "max_len") c.max_len = parse_number<int>(key, val);
    else if (key == "dropout") c.dropout = parse_number<double>(key, val);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, val);
    else if (key == "lr") c.lr = parse_number<double>(key, val);
    else if (key == "warmup_frac") c.warmup_frac = parse_number<double>(key, val);
    else if (key == "grad_clip") c.grad_clip = parse_number<double>(key, val);
    else if (key == "steps") c.steps = parse_number<long>(key, val);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, val);
    else if (key == "freeze_source_embedding") c.freeze_source_embedding = parse_bool(key, val);
    else if (key == "importance_sampling") c.importance_sampling = parse_bool(key, val);
    else if (key == "workers") c.workers = parse_number<int>(key, val);
    else if (key == "log_every") c.log_every = parse_number<long>(key, val);
    else if (key == "eval_every") c.eval_every = parse_number<long>(key, val);
    else if (key == "save_every") c.save_every = parse_number<long>(key, val);
    else throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_train_config(ss.str());
}

// ---------------------------------------------------------------------------
// importance sampling

ImportanceState::ImportanceState(int T) : T_(T), history_(static_cast<std::size_t>(T)), counts_(static_cast<std::size_t>(T), 0) {
  for (auto& h : history_) h.fill(0.0);
}

void ImportanceState::record(int t, double loss) {
  if (t < 1 || t > T_) throw ContractError("importance: step out of range");
  const auto i = static_cast<std::size_t>(t - 1);
  history_[i][static_cast<std::size_t>(counts_[i] % kHistory)] = loss * loss;
  ++counts_[i];
}

bool ImportanceState::warmed_up() const {
  return T_ > 0 && std::all_of(counts_.begin(), counts_.end(), [](long c) { return c >= kHistory; });
}

std::vector<double> ImportanceState::probs() const {
  std::vector<double> p(static_cast<std::size_t>(T_), 1.0 / T_);
  if (!warmed_up()) return p;
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double mean_sq = std::accumulate(history_[i].begin(), history_[i].end(), 0.0) / kHistory;
    p[i] = std::max(std::sqrt(mean_sq), 1e-12);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

void ImportanceState::restore(std::vector<std::array<double, kHistory>> history, std::vector<long> counts) {
  if (history.size() != counts.size()) throw FormatError("importance: history/count size mismatch");
  T_ = static_cast<int>(history.size());
  history_ = std::move(history);
  counts_ = std::move(counts);
}

TimestepDraw sample_timestep(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  const int T = static_cast<int>(probs.size());
  int t = T;
  for (int i = 0; i < T; ++i) {
    acc += probs[static_cast<std::size_t>(i)];
    if (u < acc) {
      t = i + 1;
      break;
    }
  }
  return {t, 1.0 / (T * probs[static_cast<std::size_t>(t - 1)])};
}

TimestepDraw sample_timestep(const ImportanceState& state, Rng& rng) { return sample_timestep(state.probs(), rng); }

double entropy(const std::vector<double>& probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

// ---------------------------------------------------------------------------
// loss

template <class S>
BatchLoss<S> batch_loss(const Model<S>& model, const std::vector<LossItem>& items, ModelParams<S>* grads,
                        Rng* dropout_rng) {
  BatchLoss<S> result;
  if (items.empty()) return result;
  const auto& cfg = model.config;
  const auto& sched = model.schedule;
  const auto& p = model.params;
  const int B = static_cast<int>(items.size());
  const int L = items.front().example->length();
  const int d = cfg.d_emb;
  const double ab_T = sched.alpha_bar[static_cast<std::size_t>(sched.T)];

  DenoiserBatch<S> in;
  in.z.resize(static_cast<Eigen::Index>(B) * L, d);
  in.seq_len = L;
  std::vector<MatrixX<S>> y0s(static_cast<std::size_t>(B)), x0s(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const LossItem& it = items[static_cast<std::size_t>(b)];
    const PairedExample& ex = *it.example;
    if (ex.length() != L) throw ContractError("batch_loss: examples must share one layout length");
    if (it.t < 1 || it.t > sched.T) throw ContractError("batch_loss: step out of range");
    Rng rng(it.noise_seed);
    const LatentState<S> z0 = sample_z0(ex, p.emb, sched, rng);
    const TokenIds src_part(ex.ids.begin(), ex.ids.begin() + ex.boundary);
    const MatrixX<S> x0 = embed(model.source_table(), src_part);
    const LatentState<S> zt = q_sample(z0, x0, it.t, sched, rng);
    in.z.middleRows(static_cast<Eigen::Index>(b) * L, L) = zt.z;
    in.t.push_back(it.t);
    y0s[static_cast<std::size_t>(b)] = z0.y_rows();
    x0s[static_cast<std::size_t>(b)] = x0;
  }

  ForwardCache<S> cache;
  const MatrixX<S> out = forward(p, cfg, in, grads ? &cache : nullptr, dropout_rng);

  MatrixX<S> d_out;
  std::vector<MatrixX<S>> d_y0(static_cast<std::size_t>(B)), dx0(static_cast<std::size_t>(B));
  if (grads) d_out = MatrixX<S>::Zero(out.rows(), out.cols());

  for (int b = 0; b < B; ++b) {
    const LossItem& it = items[static_cast<std::size_t>(b)];
    const PairedExample& ex = *it.example;
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * L;
    const int bd = ex.boundary;
    const int n = ex.target_tokens();
    const int m = bd + n;  // non-pad positions
    const MatrixX<S>& y0 = y0s[static_cast<std::size_t>(b)];

    const TokenIds trg_part(ex.ids.begin() + bd, ex.ids.begin() + m);
    const MatrixX<S> target = it.t == 1 ? embed(p.emb, trg_part) : MatrixX<S>(y0.topRows(n));
    const MatrixX<S> diff = out.block(r0 + bd, 0, n, d) - target;

    LossBreakdown lb;
    const double mse = static_cast<double>(diff.rowwise().squaredNorm().sum()) / n;
    (it.t == 1 ? lb.mse_t1 : lb.mse_y) = mse;

    const TokenIds ids(ex.ids.begin(), ex.ids.begin() + m);
    const MatrixX<S> zhat = out.middleRows(r0, m);
    MatrixX<S> z0rows(m, d);
    z0rows.topRows(bd) = x0s[static_cast<std::size_t>(b)];
    z0rows.bottomRows(n) = y0.topRows(n);
    const S scale = static_cast<S>(it.weight / B);
    MatrixX<S> dzhat, dz0;
    if (grads) {
      dzhat = MatrixX<S>::Zero(m, d);
      dz0 = MatrixX<S>::Zero(m, d);
    }
    const S ce_scale = scale / static_cast<S>(m);
    const double nll = rounding_ce(p.emb, zhat, ids, ce_scale, grads ? &dzhat : nullptr, grads ? &grads->emb : nullptr) +
                       rounding_ce(p.emb, z0rows, ids, ce_scale, grads ? &dz0 : nullptr, grads ? &grads->emb : nullptr);
    lb.round_nll = nll / m;
    lb.reg_zT = ab_T * static_cast<double>(y0.topRows(n).rowwise().squaredNorm().sum()) / n;
    lb.total = lb.mse_y + lb.mse_t1 + lb.round_nll + lb.reg_zT;
    result.objective += it.weight * lb.total / B;
    result.items.push_back(lb);

    if (!grads) continue;
    MatrixX<S>& dy0 = d_y0[static_cast<std::size_t>(b)];
    dy0 = MatrixX<S>::Zero(y0.rows(), d);

    d_out.block(r0 + bd, 0, n, d) += (S(2) * scale / static_cast<S>(n)) * diff;
    if (it.t == 1) {
      for (int i = 0; i < n; ++i) {
        grads->emb.row(trg_part[static_cast<std::size_t>(i)]) -= (S(2) * scale / static_cast<S>(n)) * diff.row(i);
      }
    } else {
      dy0.topRows(n) -= (S(2) * scale / static_cast<S>(n)) * diff;
    }
    dy0.topRows(n) += (S(2) * scale * static_cast<S>(ab_T) / static_cast<S>(n)) * y0.topRows(n);
    d_out.middleRows(r0, m) += dzhat;
    dy0.topRows(n) += dz0.bottomRows(n);
    dx0[static_cast<std::size_t>(b)] = dz0.topRows(bd);
  }

  if (!grads) return result;

  const MatrixX<S> dz = backward(p, cfg, cache, d_out, *grads);
  for (int b = 0; b < B; ++b) {
    const LossItem& it = items[static_cast<std::size_t>(b)];
    const PairedExample& ex = *it.example;
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * L;
    const int bd = ex.boundary;
    if (!model.frozen_src) {
      const MatrixX<S>& dx = dx0[static_cast<std::size_t>(b)];
      for (int r = 0; r < bd; ++r) grads->emb.row(ex.ids[static_cast<std::size_t>(r)]) += dz.row(r0 + r) + dx.row(r);
    }
    MatrixX<S>& dy0 = d_y0[static_cast<std::size_t>(b)];
    const S a = static_cast<S>(std::sqrt(sched.alpha_bar[static_cast<std::size_t>(it.t)]));
    dy0 += a * dz.middleRows(r0 + bd, L - bd);
    for (int r = bd; r < L; ++r) grads->emb.row(ex.ids[static_cast<std::size_t>(r)]) += dy0.row(r - bd);
  }
  if (!grads->emb.allFinite()) throw NumericError("non-finite gradient in tensor 'emb.weight'");
  return result;
}

template <class S>
LossBreakdown compute_loss(const Model<S>& model, const PairedExample& example, int t, std::uint64_t noise_seed) {
  const std::vector<LossItem> items{LossItem{&example, t, 1.0, noise_seed}};
  return batch_loss<S>(model, items, nullptr, nullptr).items.front();
}

// ---------------------------------------------------------------------------
// optimizer

template <class S>
StepResult optimizer_step(ModelParams<S>& params, ModelParams<S>& grads, AdamState<S>& state, const AdamHyper& hyper) {
  auto ps = tensors_of(params);
  auto gs = tensors_of(grads);
  auto ms = tensors_of(state.m);
  auto vs = tensors_of(state.v);

  double sq = 0.0;
  for (auto* g : gs) sq += g->template cast<double>().squaredNorm();
  StepResult res;
  res.grad_norm = std::sqrt(sq);
  if (!std::isfinite(res.grad_norm)) return res;

  if (hyper.clip > 0.0 && res.grad_norm > hyper.clip) {
    const S f = static_cast<S>(hyper.clip / res.grad_norm);
    for (auto* g : gs) *g *= f;
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  const S b1 = static_cast<S>(hyper.beta1), b2 = static_cast<S>(hyper.beta2);
  const S step_size = static_cast<S>(hyper.lr / bc1);
  const S inv_bc2 = static_cast<S>(1.0 / bc2);
  const S eps = static_cast<S>(hyper.eps);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& m = *ms[i];
    auto& v = *vs[i];
    const auto& g = *gs[i];
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
    ps[i]->array() -= step_size * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
  }
  res.applied = true;
  return res;
}

// ---------------------------------------------------------------------------
// training loop

TrainState init_train_state(const TrainConfig& config, int vocab_size) {
  config.validate();
  TrainState st;
  st.model.config = config.model_config(vocab_size);
  st.model.schedule = build_sqrt_schedule(config.T, config.s);
  st.model.params = init_params<float>(st.model.config, derive_seed(config.seed, 0x1a17));
  if (config.freeze_source_embedding) {
    Rng rng(derive_seed(config.seed, 0xf20e));
    MatrixF table(vocab_size, config.d_emb);
    for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = static_cast<float>(0.02 * rng.normal());
    st.model.frozen_src = std::move(table);
  }
  st.adam = AdamState<float>::like(st.model.params);
  st.importance = ImportanceState(config.T);
  st.step = 0;
  return st;
}

double evaluate_loss(const Model<float>& model, const std::vector<PairedExample>& data, std::uint64_t seed) {
  if (data.empty()) return 0.0;
  constexpr std::size_t kChunk = 64;
  double sum = 0.0;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    std::vector<LossItem> items;
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) {
      const std::uint64_t h = derive_seed(seed, 0x7e57, i);
      items.push_back(LossItem{&data[i], 1 + static_cast<int>(h % static_cast<std::uint64_t>(model.schedule.T)), 1.0,
                               derive_seed(seed, 0x7e58, i)});
    }
    for (const auto& lb : batch_loss<float>(model, items, nullptr, nullptr).items) sum += lb.total;
  }
  return sum / static_cast<double>(data.size());
}

std::string log_line(const TrainLogEntry& e) {
  nlohmann::json j;
  j["step"] = e.step;
  j["mse_y"] = e.loss.mse_y;
  j["mse_t1"] = e.loss.mse_t1;
  j["round_nll"] = e.loss.round_nll;
  j["reg_zT"] = e.loss.reg_zT;
  j["total"] = e.loss.total;
  j["objective"] = e.objective;
  j["p_entropy"] = e.p_entropy;
  if (e.valid_total) j["valid_total"] = *e.valid_total;
  return j.dump();
}

namespace {

void save_atomic(const std::string& path, const TrainConfig& config, const TrainState& state,
                 const TrainOptions& options) {
  const std::string tmp = path + ".tmp";
  save_checkpoint(tmp, config, state, options.vocab_text, options.vocab_hash);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

}  // namespace

void train(const TrainConfig& config, const std::vector<PairedExample>& train_set,
           const std::vector<PairedExample>& valid_set, TrainState& state, const TrainOptions& options) {
  config.validate();
  if (train_set.empty()) throw ConfigError("train: empty dataset");
  for (const auto& ex : train_set) {
    if (ex.length() != config.max_len) throw ConfigError("train: example layout length differs from max_len");
  }
  const std::size_t N = train_set.size();
  const int B = config.batch_size;
  const long end = options.stop_after >= 0 ? std::min(config.steps, state.step + options.stop_after) : config.steps;
  const long warmup = std::max<long>(1, std::lround(config.warmup_frac * static_cast<double>(config.steps)));

  std::ofstream log;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    log.open(options.out_dir + "/metrics.jsonl", state.step > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open metrics log in " + options.out_dir);
  }

  long perm_epoch = -1;
  std::vector<std::size_t> perm(N);
  auto example_at = [&](long k) -> const PairedExample& {
    const long epoch = k / static_cast<long>(N);
    if (epoch != perm_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng shuffle_rng(derive_seed(config.seed, 0x5f1e, epoch));
      std::shuffle(perm.begin(), perm.end(), shuffle_rng.engine());
      perm_epoch = epoch;
    }
    return train_set[perm[static_cast<std::size_t>(k % static_cast<long>(N))]];
  };

  AdamHyper hyper;
  hyper.clip = config.grad_clip;

  for (long step = state.step; step < end; ++step) {
    Rng step_rng(derive_seed(config.seed, 0x57e9, step));
    const std::vector<double> probs = config.importance_sampling
                                          ? state.importance.probs()
                                          : std::vector<double>(static_cast<std::size_t>(config.T), 1.0 / config.T);
    std::vector<LossItem> items;
    items.reserve(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
      const TimestepDraw draw = sample_timestep(probs, step_rng);
      items.push_back(LossItem{&example_at(step * B + i), draw.t, draw.weight, derive_seed(config.seed, 0x0153, step, i)});
    }

    ModelParams<float> grads = state.model.params.zeros_like();
    std::vector<LossBreakdown> losses(static_cast<std::size_t>(B));
    double objective = 0.0;
    const int W = std::min(config.workers, B);
    if (W <= 1) {
      Rng drop_rng(derive_seed(config.seed, 0xd509, step, 0));
      BatchLoss<float> bl = batch_loss<float>(state.model, items, &grads, &drop_rng);
      losses = std::move(bl.items);
      objective = bl.objective;
    } else {
      std::vector<ModelParams<float>> chunk_grads(static_cast<std::size_t>(W), grads);
      std::vector<BatchLoss<float>> chunk_loss(static_cast<std::size_t>(W));
      std::vector<std::exception_ptr> errors(static_cast<std::size_t>(W));
      std::vector<std::thread> pool;
      const int per = (B + W - 1) / W;
      for (int w = 0; w < W; ++w) {
        pool.emplace_back([&, w] {
          try {
            const int lo = w * per, hi = std::min(B, lo + per);
            if (lo >= hi) return;
            std::vector<LossItem> chunk(items.begin() + lo, items.begin() + hi);
            Rng drop_rng(derive_seed(config.seed, 0xd509, step, lo));
            chunk_loss[static_cast<std::size_t>(w)] =
                batch_loss<float>(state.model, chunk, &chunk_grads[static_cast<std::size_t>(w)], &drop_rng);
            const float f = static_cast<float>(hi - lo) / static_cast<float>(B);
            chunk_grads[static_cast<std::size_t>(w)].visit([f](const std::string&, MatrixF& m) { m *= f; });
            chunk_loss[static_cast<std::size_t>(w)].objective *= static_cast<double>(hi - lo) / B;
          } catch (...) {
            errors[static_cast<std::size_t>(w)] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
      auto dst = tensors_of(grads);
      for (int w = 0; w < W; ++w) {
        auto src = tensors_of(chunk_grads[static_cast<std::size_t>(w)]);
        for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] += *src[i];
        const int lo = w * per;
        auto& cl = chunk_loss[static_cast<std::size_t>(w)];
        for (std::size_t i = 0; i < cl.items.size(); ++i) losses[static_cast<std::size_t>(lo) + i] = cl.items[i];
        objective += cl.objective;
      }
    }

    if (!std::isfinite(objective)) {
      const LossBreakdown& lb = losses.front();
      std::ostringstream os;
      os << "non-finite loss at step " << step << " (mse_y=" << lb.mse_y << " mse_t1=" << lb.mse_t1
         << " round_nll=" << lb.round_nll << " reg_zT=" << lb.reg_zT << ")";
      throw NumericError(os.str());
    }
    for (int i = 0; i < B; ++i) {
      state.importance.record(items[static_cast<std::size_t>(i)].t, losses[static_cast<std::size_t>(i)].mse_term());
    }

    hyper.lr = config.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
    const StepResult sr = optimizer_step(state.model.params, grads, state.adam, hyper);
    if (!sr.applied) std::cerr << "warning: step " << step << ": non-finite gradient norm, update skipped\n";
    state.step = step + 1;

    const bool last = state.step == end;
    if (step % config.log_every == 0 || last) {
      TrainLogEntry e;
      e.step = step;
      for (const auto& lb : losses) {
        e.loss.mse_y += lb.mse_y / B;
        e.loss.mse_t1 += lb.mse_t1 / B;
        e.loss.round_nll += lb.round_nll / B;
        e.loss.reg_zT += lb.reg_zT / B;
        e.loss.total += lb.total / B;
      }
      e.objective = objective;
      e.p_entropy = entropy(probs);
      if (!valid_set.empty() && (step % config.eval_every == 0 || last)) {
        e.valid_total = evaluate_loss(state.model, valid_set, derive_seed(config.seed, 0x7a11d));
      }
      if (log) log << log_line(e) << '\n' << std::flush;
      if (options.on_log) options.on_log(e);
    }
    if (!options.out_dir.empty() && config.save_every > 0 && state.step % config.save_every == 0) {
      save_atomic(options.out_dir + "/last.dsq", config, state, options);
    }
  }
  if (!options.out_dir.empty()) {
    save_atomic(options.out_dir + "/last.dsq", config, state, options);
    if (state.step == config.steps) save_atomic(options.out_dir + "/final.dsq", config, state, options);
  }
}

template BatchLoss<float> batch_loss<float>(const Model<float>&, const std::vector<LossItem>&, ModelParams<float>*,
                                            Rng*);
template BatchLoss<double> batch_loss<double>(const Model<double>&, const std::vector<LossItem>&,
                                              ModelParams<double>*, Rng*);
template LossBreakdown compute_loss<float>(const Model<float>&, const PairedExample&, int, std::uint64_t);
template LossBreakdown compute_loss<double>(const Model<double>&, const PairedExample&, int, std::uint64_t);
template StepResult optimizer_step<float>(ModelParams<float>&, ModelParams<float>&, AdamState<float>&,
                                          const AdamHyper&);
template StepResult optimizer_step<double>(ModelParams<double>&, ModelParams<double>&, AdamState<double>&,
                                           const AdamHyper&);

}  // namespace diffuseq
