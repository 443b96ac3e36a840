#include "diffuseq/diffuseq.h"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

int fail(dsq_status st) {
  std::fprintf(stderr, "diffuseq: %s: %s\n", dsq_status_name(st), dsq_last_error());
  return static_cast<int>(st);
}

const char* opt(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

void print_log(const char* line, void*) { std::printf("%s\n", line); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequence-to-sequence text diffusion: vocab, train, sample, eval"};
  app.require_subcommand(1);

  std::string data, out, vocab_path, config, valid, out_dir, resume, ckpt, src_file, hyp, refs, report, tsv, task,
      holdout_out;
  std::size_t vocab_size = 1000;
  std::optional<std::uint64_t> seed;
  long stop_after = -1;
  int steps = 0, candidates = 1, count = 500, repeats = 1, holdout = 0;
  bool clamp = false, keep_case = false, quiet = false;

  auto* bv = app.add_subcommand("build-vocab", "Train a BPE vocabulary from a JSONL pair file");
  bv->add_option("--data", data, "JSONL file with src/trg fields")->required()->check(CLI::ExistingFile);
  bv->add_option("--vocab-size", vocab_size, "Target vocabulary size")->capture_default_str();
  bv->add_option("--out", out, "Output vocabulary file")->required();

  auto* tr = app.add_subcommand("train", "Train a denoiser");
  tr->add_option("--config", config, "Key/value training config")->check(CLI::ExistingFile);
  tr->add_option("--data", data, "Training JSONL")->required()->check(CLI::ExistingFile);
  tr->add_option("--valid", valid, "Held-out JSONL")->check(CLI::ExistingFile);
  tr->add_option("--vocab", vocab_path, "Vocabulary file")->required()->check(CLI::ExistingFile);
  tr->add_option("--out-dir", out_dir, "Directory for checkpoints and metrics.jsonl")->required();
  tr->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  tr->add_option("--seed", seed, "Seed (overrides the config)")->envname("DIFFUSEQ_SEED");
  tr->add_option("--stop-after", stop_after, "Stop after this many steps");
  tr->add_flag("--quiet", quiet, "Do not echo log lines");

  auto* sa = app.add_subcommand("sample", "Generate candidates and an MBR choice per source line");
  sa->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  sa->add_option("--src-file", src_file, "Sources, plain text or JSONL")->required()->check(CLI::ExistingFile);
  sa->add_option("--steps", steps, "Inference steps (default: trained step count)");
  sa->add_option("--candidates", candidates, "Candidates per source")->capture_default_str()->check(CLI::PositiveNumber);
  sa->add_flag("--clamp", clamp, "Snap predictions to the nearest embedding each step");
  sa->add_option("--seed", seed, "Base seed")->envname("DIFFUSEQ_SEED");
  sa->add_option("--vocab", vocab_path, "Vocabulary to check against the checkpoint")->check(CLI::ExistingFile);
  sa->add_option("--out", out, "Output JSONL")->required();

  auto* ev = app.add_subcommand("eval", "Score sample output against references");
  ev->add_option("--hyp", hyp, "Sample JSONL or plain text")->required()->check(CLI::ExistingFile);
  ev->add_option("--refs", refs, "References, JSONL or plain text")->required()->check(CLI::ExistingFile);
  ev->add_option("--report", report, "Output JSON report")->required();
  ev->add_option("--tsv", tsv, "Per-example TSV (default: <report>.tsv)");
  ev->add_flag("--keep-case", keep_case, "Compare case-sensitively");

  auto* gs = app.add_subcommand("gen-synth", "Write a synthetic pair dataset");
  gs->add_option("--task", task, "copy, reverse or one2many")->required();
  gs->add_option("--count", count, "Distinct sources")->capture_default_str();
  gs->add_option("--repeats", repeats, "Records per source, each with its own target draw")->capture_default_str();
  gs->add_option("--holdout", holdout, "Extra records with unseen sources")->capture_default_str();
  gs->add_option("--holdout-out", holdout_out, "Output file for the held-out records");
  gs->add_option("--seed", seed, "Seed")->envname("DIFFUSEQ_SEED");
  gs->add_option("--out", out, "Output JSONL")->required();

  CLI11_PARSE(app, argc, argv);

  if (*bv) {
    dsq_vocab* v = nullptr;
    if (auto st = dsq_vocab_build(data.c_str(), vocab_size, &v); st != DSQ_OK) return fail(st);
    const dsq_status st = dsq_vocab_save(v, out.c_str());
    std::printf("vocab size %zu hash %016llx\n", dsq_vocab_size(v), static_cast<unsigned long long>(dsq_vocab_hash(v)));
    dsq_vocab_free(v);
    return st == DSQ_OK ? 0 : fail(st);
  }
  if (*tr) {
    dsq_train_options o;
    dsq_train_options_init(&o);
    o.config_path = opt(config);
    o.data_path = data.c_str();
    o.valid_path = opt(valid);
    o.vocab_path = vocab_path.c_str();
    o.out_dir = out_dir.c_str();
    o.resume_path = opt(resume);
    o.has_seed = seed.has_value();
    o.seed = seed.value_or(0);
    o.stop_after = stop_after;
    if (!quiet) o.on_log = print_log;
    const dsq_status st = dsq_train(&o);
    return st == DSQ_OK ? 0 : fail(st);
  }
  if (*sa) {
    dsq_model* m = nullptr;
    if (auto st = dsq_model_load(ckpt.c_str(), &m); st != DSQ_OK) return fail(st);
    dsq_vocab* v = nullptr;
    if (!vocab_path.empty()) {
      if (auto st = dsq_vocab_load(vocab_path.c_str(), &v); st != DSQ_OK) {
        dsq_model_free(m);
        return fail(st);
      }
    }
    dsq_sample_options so;
    dsq_sample_options_init(&so);
    so.steps = steps;
    so.candidates = candidates;
    so.clamp = clamp ? 1 : 0;
    so.seed = seed.value_or(0);
    const dsq_status st = dsq_sample_file(m, v, src_file.c_str(), &so, out.c_str());
    dsq_vocab_free(v);
    dsq_model_free(m);
    return st == DSQ_OK ? 0 : fail(st);
  }
  if (*ev) {
    if (tsv.empty()) tsv = report + ".tsv";
    const dsq_status st = dsq_eval_files(hyp.c_str(), refs.c_str(), report.c_str(), tsv.c_str(), keep_case ? 1 : 0);
    if (st != DSQ_OK) return fail(st);
    std::ifstream f(report);
    std::cout << f.rdbuf();
    return 0;
  }
  if (*gs) {
    const dsq_status st =
        dsq_gen_synth(task.c_str(), count, repeats, holdout, seed.value_or(0), out.c_str(), opt(holdout_out));
    return st == DSQ_OK ? 0 : fail(st);
  }
  return 0;
}
