#include "diffuseq/checkpoint.hpp"
#include "diffuseq/data.hpp"
#include "diffuseq/decoding.hpp"
#include "diffuseq/metrics.hpp"
#include "diffuseq/tokenizer.hpp"
#include "diffuseq/training.hpp"

#include "support.hpp"

#include <unistd.h>

#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace diffuseq;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// ---------------------------------------------------------------------------
// shared fixtures

constexpr std::uint64_t kSeed = 1;
constexpr long kCopySteps = 5000;
constexpr long kEarlyStep = 1500;

TrainConfig copy_config() {
  TrainConfig c;
  c.T = 200;
  c.d_emb = 32;
  c.d_model = 64;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_ff = 128;
  c.max_len = 16;
  c.batch_size = 32;
  c.lr = 1e-3;
  c.steps = kCopySteps;
  c.seed = kSeed;
  c.log_every = 500;
  c.eval_every = 100000;
  c.save_every = 0;
  return c;
}

struct Task {
  Vocab vocab;
  std::vector<PairedExample> train;
  std::vector<TokenIds> test_src;
  std::vector<std::vector<std::string>> test_valid;
};

Task make_task(SynthTask kind, int count, int repeats, int holdout, std::uint64_t seed, int max_len) {
  SynthConfig sc;
  sc.task = kind;
  sc.count = count + holdout;
  sc.repeats = repeats;
  sc.seed = seed;
  const auto recs = generate_synthetic(sc);
  const std::size_t n_train = static_cast<std::size_t>(count * repeats);
  std::vector<std::string> corpus;
  std::vector<TrainingPair> pairs;
  for (std::size_t i = 0; i < n_train; ++i) {
    corpus.push_back(recs[i].src);
    corpus.push_back(recs[i].trg);
    pairs.push_back({recs[i].src, recs[i].trg});
  }
  Task t;
  t.vocab = train_bpe(corpus, 1000);
  t.train = build_examples(t.vocab, pairs, max_len).examples;
  for (std::size_t i = n_train; i < recs.size(); i += static_cast<std::size_t>(repeats)) {
    t.test_src.push_back(t.vocab.encode(recs[i].src));
    t.test_valid.push_back(recs[i].valid);
  }
  return t;
}

struct DecodeScore {
  double exact = 0.0;
  double bleu = 0.0;
  double seconds = 0.0;
};

// Text candidates per source.
std::vector<std::vector<std::string>> sample_text(const Model<float>& model, const Vocab& vocab,
                                                  const std::vector<TokenIds>& sources, int K, int candidates,
                                                  double* seconds = nullptr) {
  SampleConfig cfg;
  cfg.steps = K;
  cfg.candidates = candidates;
  cfg.seed = 0;
  const auto t0 = Clock::now();
  const auto ids = generate_candidates(model, sources, cfg);
  if (seconds) *seconds = seconds_since(t0);
  std::vector<std::vector<std::string>> out;
  for (const auto& per : ids) {
    std::vector<std::string> texts;
    for (const auto& c : per) texts.push_back(vocab.decode(c));
    out.push_back(std::move(texts));
  }
  return out;
}

// MBR over the first `S` candidates of each source, scored against the references.
DecodeScore score_mbr(const std::vector<std::vector<std::string>>& cands, const std::vector<std::vector<std::string>>& refs,
                      int S) {
  DecodeScore r;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    std::vector<metrics::Tokens> toks;
    for (int c = 0; c < S; ++c) toks.push_back(split_whitespace(cands[i][static_cast<std::size_t>(c)]));
    const auto& pick = toks[static_cast<std::size_t>(mbr_select(toks).index)];
    std::vector<metrics::Tokens> ref_toks;
    bool exact = false;
    for (const auto& ref : refs[i]) {
      ref_toks.push_back(split_whitespace(ref));
      exact = exact || ref_toks.back() == pick;
    }
    r.exact += exact;
    r.bleu += metrics::bleu(pick, ref_toks);
  }
  r.exact /= static_cast<double>(cands.size());
  r.bleu /= static_cast<double>(cands.size());
  return r;
}

struct CopyRuns {
  Task task;
  TrainState early;
  TrainState joint;
  TrainState frozen;
  double train_seconds = 0.0;
};

CopyRuns& copy_runs() {
  static CopyRuns* runs = [] {
    auto* r = new CopyRuns;
    r->task = make_task(SynthTask::Copy, 500, 1, 100, 11, 16);
    const int V = static_cast<int>(r->task.vocab.size());
    const auto t0 = Clock::now();
    auto cfg = copy_config();
    r->joint = init_train_state(cfg, V);
    TrainOptions opt;
    opt.stop_after = kEarlyStep;
    train(cfg, r->task.train, {}, r->joint, opt);
    r->early = r->joint;
    opt.stop_after = -1;
    train(cfg, r->task.train, {}, r->joint, opt);

    cfg.freeze_source_embedding = true;
    r->frozen = init_train_state(cfg, V);
    train(cfg, r->task.train, {}, r->frozen);
    r->train_seconds = seconds_since(t0);
    return r;
  }();
  return *runs;
}

// ---------------------------------------------------------------------------
// criteria

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  auto model = testing::tiny_model(20, 8, 16, 2, 2, 32, 10, 50, 21);
  const PairedExample a = make_example({5, 6}, {7, 8, 9}, 10);
  const PairedExample b = make_example({10, 12, 13}, {11}, 10);
  const std::vector<LossItem> items = {{&a, 1, 1.0, 100}, {&b, 17, 0.7, 101}, {&a, 50, 1.3, 102}, {&b, 2, 1.0, 103}};
  const auto r = testing::grad_check(model, items);
  const double secs = seconds_since(t0);
  return {r.max_tensor_rel_error <= 1e-4 && secs < 60.0,
          fmt("%zu entries, max per-parameter relative error %.2e (%s), %.1f s", r.checked, r.max_tensor_rel_error,
              r.worst_named.c_str(), secs)};
}

Outcome forward_moments() {
  const auto t0 = Clock::now();
  const int T = 2000;
  const auto sched = build_sqrt_schedule(T, 1e-4);
  Rng rng(7);
  Matrix table(20, 4);
  rng.fill_normal(table);
  const PairedExample ex = make_example({5, 6, 7}, {8, 9}, 9);
  const auto z0 = sample_z0(ex, table, sched, rng);
  const Matrix x0 = embed(table, TokenIds(ex.ids.begin(), ex.ids.begin() + ex.boundary));
  constexpr int N = 10000;
  bool ok = true;
  long anchored = 0;
  double worst_mean = 0.0, worst_var = 0.0;
  for (int t : {1, T / 2, T}) {
    Matrix sum = Matrix::Zero(z0.z.rows() - z0.boundary, 4), sq = sum;
    for (int i = 0; i < N; ++i) {
      const auto zt = q_sample(z0, x0, t, sched, rng);
      anchored += zt.x_rows() == x0;
      sum += zt.y_rows();
      sq += zt.y_rows().cwiseProduct(zt.y_rows());
    }
    const Matrix mean = sum / N;
    const Matrix var = sq / N - mean.cwiseProduct(mean);
    const double v = 1.0 - sched.alpha_bar[t];
    const double mean_err = (mean - std::sqrt(sched.alpha_bar[t]) * z0.y_rows()).cwiseAbs().maxCoeff() /
                            (4.0 * std::sqrt(v) / std::sqrt(double(N)));
    const double var_err = ((var.array() / v) - 1.0).abs().maxCoeff();
    worst_mean = std::max(worst_mean, mean_err);
    worst_var = std::max(worst_var, var_err);
    ok = ok && mean_err <= 1.0 && var_err <= 0.05;
  }
  const bool all_anchored = anchored == 3L * N;
  return {ok && all_anchored && seconds_since(t0) < 60.0,
          fmt("worst mean error %.2f of the 4-sigma band, worst variance error %.2f%%, anchored %ld/%d", worst_mean,
              100.0 * worst_var, anchored, 3 * N)};
}

Outcome posterior_identities() {
  const int T = 2000;
  const auto sched = build_sqrt_schedule(T, 1e-4);
  double worst_coef = 0.0, worst_mean = 0.0;
  Rng rng(8);
  Matrix z0(5, 3);
  rng.fill_normal(z0);
  for (int t = 1; t <= T; ++t) {
    const auto c = posterior(sched, t);
    worst_coef = std::max(worst_coef, std::abs(c.coef_zt * std::sqrt(sched.alpha_bar[t]) + c.coef_z0 -
                                               std::sqrt(sched.alpha_bar[t - 1])));
    const Matrix m = posterior_mean(Matrix(std::sqrt(sched.alpha_bar[t]) * z0), z0, t, sched);
    worst_mean = std::max(worst_mean, (m - std::sqrt(sched.alpha_bar[t - 1]) * z0).cwiseAbs().maxCoeff());
  }
  return {worst_coef <= 1e-6 && worst_mean <= 1e-6,
          fmt("max coefficient identity error %.2e, max zero-noise mean error %.2e over t=1..%d", worst_coef, worst_mean,
              T)};
}

Outcome importance_sampler() {
  ImportanceState st(2);
  for (int i = 0; i < ImportanceState::kHistory; ++i) {
    st.record(1, 1.0);  // squared loss 1
    st.record(2, 2.0);  // squared loss 4
  }
  const auto p = st.probs();
  const bool exact = p[0] == 1.0 / 3.0 && p[1] == 2.0 / 3.0;
  Rng rng(3);
  constexpr int N = 100000;
  int ones = 0;
  for (int i = 0; i < N; ++i) ones += sample_timestep(st, rng).t == 1;
  const double f1 = ones / double(N);
  const double sum_err = std::abs(p[0] + p[1] - 1.0);
  return {exact && std::abs(f1 - p[0]) <= 0.02 && std::abs((1 - f1) - p[1]) <= 0.02 && sum_err <= 1e-9,
          fmt("p = (%.17g, %.17g), empirical (%.4f, %.4f), |sum-1| = %.1e", p[0], p[1], f1, 1 - f1, sum_err)};
}

Outcome overfit_copy() {
  auto& r = copy_runs();
  const auto c = sample_text(r.joint.model, r.task.vocab, r.task.test_src, 200, 5);
  const auto s = score_mbr(c, r.task.test_valid, 5);
  return {s.exact >= 0.80 && s.bleu >= 0.90 && r.joint.step <= 20000 && r.train_seconds < 1800.0,
          fmt("%ld steps, |S|=5 exact match %.3f, BLEU %.4f on %zu held-out sources (all training %.0f s)", r.joint.step,
              s.exact, s.bleu, r.task.test_src.size(), r.train_seconds)};
}

Outcome mbr_trend() {
  auto& r = copy_runs();
  const auto c = sample_text(r.early.model, r.task.vocab, r.task.test_src, 200, 10);
  std::vector<double> b;
  for (int S : {1, 3, 5, 10}) b.push_back(score_mbr(c, r.task.test_valid, S).bleu);
  bool monotone = true;
  for (std::size_t i = 1; i < b.size(); ++i) monotone = monotone && b[i] >= b[i - 1] - 0.01;
  return {b[3] >= b[0] && monotone,
          fmt("step %ld checkpoint, BLEU |S|=1: %.4f, 3: %.4f, 5: %.4f, 10: %.4f", r.early.step, b[0], b[1], b[2], b[3])};
}

Outcome diversity() {
  TrainConfig cfg = copy_config();
  cfg.steps = 8000;
  const Task task = make_task(SynthTask::OneToMany, 300, 5, 100, 13, 16);
  auto st = init_train_state(cfg, static_cast<int>(task.vocab.size()));
  train(cfg, task.train, {}, st);
  const auto c = sample_text(st.model, task.vocab, task.test_src, 200, 10);
  int enough = 0;
  double sb = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const std::set<std::string> valid(task.test_valid[i].begin(), task.test_valid[i].end());
    std::set<std::string> hit;
    std::vector<metrics::Tokens> toks;
    for (const auto& s : c[i]) {
      if (valid.count(s)) hit.insert(s);
      toks.push_back(split_whitespace(s));
    }
    enough += hit.size() >= 2;
    sb += metrics::self_bleu(toks);
  }
  const double frac = enough / double(c.size());
  sb /= static_cast<double>(c.size());
  return {frac >= 0.5 && sb < 0.95,
          fmt("%.2f of %zu held-out sources with >= 2 distinct valid outputs, mean self-BLEU %.3f", frac, c.size(), sb)};
}

Outcome respacing() {
  auto& r = copy_runs();
  double t_full = 0.0, t_short = 0.0;
  const auto full = score_mbr(sample_text(r.joint.model, r.task.vocab, r.task.test_src, 200, 1, &t_full),
                              r.task.test_valid, 1);
  const auto fast = score_mbr(sample_text(r.joint.model, r.task.vocab, r.task.test_src, 20, 1, &t_short),
                              r.task.test_valid, 1);
  const double drop = full.exact > 0 ? (full.exact - fast.exact) / full.exact : 1.0;
  const double speedup = t_full / t_short;
  return {drop <= 0.20 && speedup >= 5.0,
          fmt("exact match K=200 %.3f, K=20 %.3f (relative drop %.1f%%), time %.2f s vs %.2f s (%.1fx)", full.exact,
              fast.exact, 100.0 * drop, t_full, t_short, speedup)};
}

Outcome metric_oracles() {
  using metrics::Tokens;
  auto tok = [](const char* s) { return split_whitespace(s); };
  struct Case {
    const char* name;
    double got;
    double want;
  };
  const Case cases[] = {
      {"bleu identical", metrics::bleu(tok("a b c d e"), {tok("a b c d e")}), 1.0},
      {"bleu disjoint length 10", metrics::bleu(tok("a b c d e f g h i j"), {tok("k l m n o p q r s t")}),
       0.011727986748186987},
      {"bleu a b c vs a b c d", metrics::bleu(tok("a b c"), {tok("a b c d")}), 0.7165313105737893},
      {"rouge_l identical", metrics::rouge_l(tok("a b c"), tok("a b c")), 1.0},
      {"rouge_l disjoint", metrics::rouge_l(tok("a b"), tok("c d")), 0.0},
      {"rouge_l a c e vs a b c d e", metrics::rouge_l(tok("a c e"), tok("a b c d e")), 0.75},
      {"dist1 all distinct", metrics::dist1(tok("a b c")), 1.0},
      {"dist1 a a b", metrics::dist1(tok("a a b")), 2.0 / 3.0},
      {"dist1 single", metrics::dist1(tok("a")), 1.0},
      {"self_bleu identical", metrics::self_bleu({tok("a b c d"), tok("a b c d"), tok("a b c d")}), 1.0},
      {"self_bleu disjoint", metrics::self_bleu({tok("a b c d e f g h i j"), tok("k l m n o p q r s t")}),
       0.011727986748186987},
      {"self_bleu single", metrics::self_bleu({tok("a b c d")}), 0.0},
      {"div4 two identical", metrics::div4({tok("a b c d e"), tok("a b c d e")}), 0.5},
      {"div4 disjoint", metrics::div4({tok("a b c d"), tok("e f g h")}), 1.0},
      {"div4 short", metrics::div4({tok("a b"), tok("c")}), 1.0},
  };
  int bad = 0;
  std::string first_bad;
  for (const auto& c : cases) {
    if (std::abs(c.got - c.want) > 1e-9) {
      if (!bad) first_bad = fmt(" first mismatch: %s got %.17g want %.17g", c.name, c.got, c.want);
      ++bad;
    }
  }
  const int total = static_cast<int>(sizeof cases / sizeof cases[0]);
  return {bad == 0, fmt("%d/%d hand-worked examples within 1e-9%s", total - bad, total, first_bad.c_str())};
}

Outcome joint_vs_frozen() {
  auto& r = copy_runs();
  const auto j = score_mbr(sample_text(r.joint.model, r.task.vocab, r.task.test_src, 200, 1), r.task.test_valid, 1);
  const auto f = score_mbr(sample_text(r.frozen.model, r.task.vocab, r.task.test_src, 200, 1), r.task.test_valid, 1);
  return {f.exact < j.exact,
          fmt("exact match at %ld steps: joint %.3f, frozen source table %.3f", r.joint.step, j.exact, f.exact)};
}

Outcome checkpoint_roundtrip() {
  const fs::path dir = fs::temp_directory_path() / ("dsq_accept_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const Task task = make_task(SynthTask::Copy, 200, 1, 0, 17, 16);
  auto cfg = copy_config();
  cfg.steps = 200;
  cfg.log_every = 1;
  const int V = static_cast<int>(task.vocab.size());

  std::vector<double> full, resumed;
  auto a = init_train_state(cfg, V);
  TrainOptions oa;
  oa.on_log = [&](const TrainLogEntry& e) { full.push_back(e.objective); };
  train(cfg, task.train, {}, a, oa);

  auto b = init_train_state(cfg, V);
  TrainOptions ob;
  ob.stop_after = 100;
  train(cfg, task.train, {}, b, ob);
  const std::string path = (dir / "mid.dsq").string();
  save_checkpoint(path, cfg, b, task.vocab.serialize(), task.vocab.hash());
  Checkpoint ck = load_checkpoint(path);
  ob.stop_after = -1;
  ob.on_log = [&](const TrainLogEntry& e) { resumed.push_back(e.objective); };
  train(ck.config, task.train, {}, ck.state, ob);

  double worst = resumed.size() == 100 ? 0.0 : 1.0;
  for (std::size_t i = 0; i < resumed.size() && i + 100 < full.size(); ++i) {
    worst = std::max(worst, std::abs(resumed[i] - full[i + 100]));
  }

  const std::string fpath = (dir / "final.dsq").string();
  save_checkpoint(fpath, cfg, a, task.vocab.serialize(), task.vocab.hash(), false);
  const Checkpoint back = load_checkpoint(fpath);
  DenoiserBatch<float> in;
  Rng rng(4);
  in.z.resize(3 * 16, cfg.d_emb);
  rng.fill_normal(in.z);
  in.seq_len = 16;
  in.t = {1, 100, 200};
  const bool bit_exact = forward(a.model.params, a.model.config, in) == forward(back.state.model.params, back.state.model.config, in);
  fs::remove_all(dir);
  return {bit_exact && worst <= 1e-5,
          fmt("forward after reload %s; resumed vs uninterrupted loss over %zu steps: max diff %.2e",
              bit_exact ? "bit-exact" : "differs", resumed.size(), worst)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},
      {"forward-process moments", forward_moments},
      {"posterior identities", posterior_identities},
      {"importance sampler", importance_sampler},
      {"overfit copy task", overfit_copy},
      {"MBR candidate-count trend", mbr_trend},
      {"one-to-many diversity", diversity},
      {"respaced sampling", respacing},
      {"metric oracles", metric_oracles},
      {"joint vs frozen source embedding", joint_vs_frozen},
      {"checkpoint roundtrip and resume", checkpoint_roundtrip},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s [%d] %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
