#include "diffuseq/diffuseq.h"

#include "diffuseq/checkpoint.hpp"
#include "diffuseq/data.hpp"
#include "diffuseq/decoding.hpp"
#include "diffuseq/eval.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <new>

struct dsq_vocab {
  diffuseq::Vocab vocab;
};

struct dsq_model {
  diffuseq::Model<float> model;
  diffuseq::Vocab vocab;
  std::uint64_t vocab_hash = 0;
  long step = 0;
};

namespace {

thread_local std::string g_last_error;

template <class F>
dsq_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return DSQ_OK;
  } catch (const diffuseq::ConfigError& e) {
    g_last_error = e.what();
    return DSQ_ERR_CONFIG;
  } catch (const diffuseq::IoError& e) {
    g_last_error = e.what();
    return DSQ_ERR_IO;
  } catch (const diffuseq::FormatError& e) {
    g_last_error = e.what();
    return DSQ_ERR_FORMAT;
  } catch (const diffuseq::NumericError& e) {
    g_last_error = e.what();
    return DSQ_ERR_NUMERIC;
  } catch (const diffuseq::ContractError& e) {
    g_last_error = e.what();
    return DSQ_ERR_INVALID_ARGUMENT;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return DSQ_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return DSQ_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return DSQ_ERR_INTERNAL;
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw diffuseq::ContractError(what);
}

bool same_shape(const diffuseq::TrainConfig& a, const diffuseq::TrainConfig& b) {
  return a.T == b.T && a.s == b.s && a.d_emb == b.d_emb && a.d_model == b.d_model && a.n_layers == b.n_layers &&
         a.n_heads == b.n_heads && a.d_ff == b.d_ff && a.max_len == b.max_len && a.dropout == b.dropout &&
         a.batch_size == b.batch_size && a.lr == b.lr && a.warmup_frac == b.warmup_frac &&
         a.grad_clip == b.grad_clip && a.seed == b.seed &&
         a.freeze_source_embedding == b.freeze_source_embedding && a.importance_sampling == b.importance_sampling;
}

std::vector<std::string> read_sources(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw diffuseq::IoError("cannot open source file " + path);
  std::vector<std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (line.front() == '{') {
      try {
        out.push_back(nlohmann::json::parse(line).at("src").get<std::string>());
      } catch (const nlohmann::json::exception& e) {
        throw diffuseq::FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    } else {
      out.push_back(line);
    }
  }
  return out;
}

}  // namespace

extern "C" {

const char* dsq_last_error(void) { return g_last_error.c_str(); }

const char* dsq_status_name(dsq_status status) {
  switch (status) {
    case DSQ_OK:
      return "ok";
    case DSQ_ERR_INVALID_ARGUMENT:
      return "invalid argument";
    case DSQ_ERR_CONFIG:
      return "configuration error";
    case DSQ_ERR_IO:
      return "I/O error";
    case DSQ_ERR_FORMAT:
      return "format error";
    case DSQ_ERR_NUMERIC:
      return "numeric error";
    case DSQ_ERR_INTERNAL:
      return "internal error";
  }
  return "unknown status";
}

dsq_status dsq_vocab_build(const char* data_path, size_t vocab_size, dsq_vocab** out) {
  return guarded([&] {
    require(data_path && out, "dsq_vocab_build: null argument");
    const auto file = diffuseq::read_pairs_jsonl(data_path, &std::cerr);
    std::vector<std::string> corpus;
    corpus.reserve(file.pairs.size() * 2);
    for (const auto& p : file.pairs) {
      corpus.push_back(p.src);
      corpus.push_back(p.trg);
    }
    *out = new dsq_vocab{diffuseq::train_bpe(corpus, vocab_size)};
  });
}

dsq_status dsq_vocab_load(const char* path, dsq_vocab** out) {
  return guarded([&] {
    require(path && out, "dsq_vocab_load: null argument");
    *out = new dsq_vocab{diffuseq::Vocab::load(path)};
  });
}

dsq_status dsq_vocab_save(const dsq_vocab* vocab, const char* path) {
  return guarded([&] {
    require(vocab && path, "dsq_vocab_save: null argument");
    vocab->vocab.save(path);
  });
}

size_t dsq_vocab_size(const dsq_vocab* vocab) { return vocab ? vocab->vocab.size() : 0; }
uint64_t dsq_vocab_hash(const dsq_vocab* vocab) { return vocab ? vocab->vocab.hash() : 0; }
void dsq_vocab_free(dsq_vocab* vocab) { delete vocab; }

void dsq_train_options_init(dsq_train_options* options) {
  if (!options) return;
  *options = dsq_train_options{};
  options->stop_after = -1;
}

dsq_status dsq_train(const dsq_train_options* o) {
  return guarded([&] {
    require(o && o->data_path && o->vocab_path && o->out_dir, "dsq_train: data, vocab and out_dir are required");
    require(o->config_path || o->resume_path, "dsq_train: a config or a checkpoint to resume is required");
    const diffuseq::Vocab vocab = diffuseq::Vocab::load(o->vocab_path);
    const int V = static_cast<int>(vocab.size());

    diffuseq::TrainConfig config;
    diffuseq::TrainState state;
    if (o->resume_path) {
      diffuseq::Checkpoint ck = diffuseq::load_checkpoint(o->resume_path);
      if (ck.vocab_hash != vocab.hash()) {
        throw diffuseq::FormatError("vocab hash mismatch between checkpoint and " + std::string(o->vocab_path));
      }
      if (!ck.has_optimizer) throw diffuseq::FormatError("checkpoint has no optimizer state to resume from");
      config = ck.config;
      if (o->config_path) {
        diffuseq::TrainConfig given = diffuseq::load_train_config(o->config_path);
        if (o->has_seed) given.seed = o->seed;
        if (!same_shape(given, ck.config)) {
          throw diffuseq::ConfigError("config differs from the checkpoint in a field that cannot change on resume");
        }
        config = given;
      } else if (o->has_seed && o->seed != config.seed) {
        throw diffuseq::ConfigError("seed differs from the checkpoint");
      }
      state = std::move(ck.state);
    } else {
      config = diffuseq::load_train_config(o->config_path);
      if (o->has_seed) config.seed = o->seed;
      config.validate();
      state = diffuseq::init_train_state(config, V);
    }

    const auto train_file = diffuseq::read_pairs_jsonl(o->data_path, &std::cerr);
    auto train_set = diffuseq::build_examples(vocab, train_file.pairs, config.max_len, &std::cerr);
    if (train_set.examples.empty()) throw diffuseq::ConfigError("no usable training pairs in " + std::string(o->data_path));
    std::vector<diffuseq::PairedExample> valid;
    if (o->valid_path) {
      const auto valid_file = diffuseq::read_pairs_jsonl(o->valid_path, &std::cerr);
      valid = diffuseq::build_examples(vocab, valid_file.pairs, config.max_len, &std::cerr).examples;
    }

    diffuseq::TrainOptions options;
    options.out_dir = o->out_dir;
    options.vocab_text = vocab.serialize();
    options.vocab_hash = vocab.hash();
    options.stop_after = o->stop_after;
    if (o->on_log) {
      options.on_log = [fn = o->on_log, user = o->user](const diffuseq::TrainLogEntry& e) {
        fn(diffuseq::log_line(e).c_str(), user);
      };
    }
    diffuseq::train(config, train_set.examples, valid, state, options);
  });
}

dsq_status dsq_model_load(const char* checkpoint_path, dsq_model** out) {
  return guarded([&] {
    require(checkpoint_path && out, "dsq_model_load: null argument");
    diffuseq::Checkpoint ck = diffuseq::load_checkpoint(checkpoint_path);
    if (ck.vocab_text.empty()) throw diffuseq::FormatError("checkpoint carries no vocabulary");
    auto* m = new dsq_model;
    m->model = std::move(ck.state.model);
    m->vocab = diffuseq::Vocab::parse(ck.vocab_text);
    m->vocab_hash = ck.vocab_hash;
    m->step = ck.state.step;
    *out = m;
  });
}

void dsq_model_free(dsq_model* model) { delete model; }
uint64_t dsq_model_vocab_hash(const dsq_model* model) { return model ? model->vocab_hash : 0; }
int dsq_model_diffusion_steps(const dsq_model* model) { return model ? model->model.schedule.T : 0; }
long dsq_model_train_step(const dsq_model* model) { return model ? model->step : 0; }

void dsq_sample_options_init(dsq_sample_options* options) {
  if (!options) return;
  *options = dsq_sample_options{};
  options->candidates = 1;
}

dsq_status dsq_sample_file(const dsq_model* model, const dsq_vocab* vocab, const char* src_path,
                           const dsq_sample_options* options, const char* out_path) {
  return guarded([&] {
    require(model && src_path && options && out_path, "dsq_sample_file: null argument");
    if (vocab && vocab->vocab.hash() != model->vocab_hash) {
      throw diffuseq::FormatError("vocab hash mismatch between checkpoint and the given vocabulary");
    }
    const diffuseq::Vocab& v = vocab ? vocab->vocab : model->vocab;
    diffuseq::SampleConfig cfg;
    cfg.steps = options->steps > 0 ? options->steps : model->model.schedule.T;
    cfg.candidates = options->candidates;
    cfg.clamp = options->clamp != 0;
    cfg.seed = options->seed;
    cfg.validate(model->model.schedule.T);

    const auto sources = read_sources(src_path);
    std::vector<diffuseq::TokenIds> ids;
    ids.reserve(sources.size());
    for (std::size_t i = 0; i < sources.size(); ++i) {
      ids.push_back(v.encode(sources[i]));
      if (static_cast<int>(ids.back().size()) + 3 > model->model.config.max_len) {
        throw diffuseq::ConfigError("source line " + std::to_string(i + 1) + " has " +
                                    std::to_string(ids.back().size()) + " tokens, too long for layout length " +
                                    std::to_string(model->model.config.max_len));
      }
    }
    const auto cands = diffuseq::generate_candidates(model->model, ids, cfg);

    std::ofstream f(out_path);
    if (!f) throw diffuseq::IoError(std::string("cannot write ") + out_path);
    for (std::size_t i = 0; i < sources.size(); ++i) {
      diffuseq::SampleRecord r;
      r.src = sources[i];
      std::vector<diffuseq::metrics::Tokens> toks;
      for (const auto& c : cands[i]) {
        r.candidates.push_back(v.decode(c));
        toks.push_back(diffuseq::split_whitespace(r.candidates.back()));
      }
      r.mbr_choice = diffuseq::mbr_select(toks).index;
      r.seed = cfg.seed;
      r.steps = cfg.steps;
      f << diffuseq::to_json_line(r) << '\n';
    }
    if (!f) throw diffuseq::IoError(std::string("failed writing ") + out_path);
  });
}

dsq_status dsq_eval_files(const char* hyp_path, const char* refs_path, const char* report_path, const char* tsv_path,
                          int keep_case) {
  return guarded([&] {
    require(hyp_path && refs_path && report_path, "dsq_eval_files: null argument");
    const auto samples = diffuseq::read_samples(hyp_path);
    const auto refs = diffuseq::read_references(refs_path);
    std::vector<diffuseq::EvalRow> rows;
    const auto report = diffuseq::evaluate(samples, refs, &rows, keep_case != 0);
    std::ofstream f(report_path);
    if (!f) throw diffuseq::IoError(std::string("cannot write ") + report_path);
    f << diffuseq::report_json(report) << '\n';
    if (!f) throw diffuseq::IoError(std::string("failed writing ") + report_path);
    if (tsv_path) diffuseq::write_eval_tsv(tsv_path, rows);
  });
}

dsq_status dsq_gen_synth(const char* task, int count, int repeats, int holdout, uint64_t seed, const char* out_path,
                         const char* holdout_path) {
  return guarded([&] {
    require(task && out_path, "dsq_gen_synth: null argument");
    require(holdout <= 0 || holdout_path, "dsq_gen_synth: holdout needs an output path");
    if (count < 1 || repeats < 1) throw diffuseq::ConfigError("gen-synth: count and repeats must be positive");
    diffuseq::SynthConfig cfg;
    cfg.task = diffuseq::parse_synth_task(task);
    cfg.count = count + std::max(0, holdout);
    cfg.repeats = repeats;
    cfg.seed = seed;
    auto records = diffuseq::generate_synthetic(cfg);
    const std::size_t n_train = static_cast<std::size_t>(count) * static_cast<std::size_t>(repeats);
    std::vector<diffuseq::SynthRecord> held;
    for (std::size_t i = n_train; i < records.size(); i += static_cast<std::size_t>(repeats)) held.push_back(records[i]);
    records.resize(n_train);
    diffuseq::write_synth_jsonl(out_path, records);
    if (holdout > 0) diffuseq::write_synth_jsonl(holdout_path, held);
  });
}

}  // extern "C"
