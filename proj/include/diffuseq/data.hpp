#pragma once

#include "diffuseq/diffusion.hpp"
#include "diffuseq/training.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace diffuseq {

struct PairFile {
  std::vector<TrainingPair> pairs;
  std::size_t skipped = 0;
};

/// Reads {"src", "trg"} JSONL. Lines that fail to parse or have an empty field
/// after normalization are skipped, counted, and reported to `warn`.
PairFile read_pairs_jsonl(const std::string& path, std::ostream* warn = nullptr);

struct ExampleSet {
  std::vector<PairedExample> examples;
  std::size_t skipped = 0;  // pairs that do not fit the layout
};

ExampleSet build_examples(const Vocab& vocab, const std::vector<TrainingPair>& pairs, int length,
                          std::ostream* warn = nullptr);

enum class SynthTask { Copy, Reverse, OneToMany };

SynthTask parse_synth_task(const std::string& name);
std::string synth_task_name(SynthTask task);

struct SynthConfig {
  SynthTask task = SynthTask::Copy;
  int count = 500;  // distinct sources
  int repeats = 1;  // records per source, each with its own target draw
  int vocab_words = 12;
  int min_len = 2;
  int max_len = 6;
  std::uint64_t seed = 0;
};

struct SynthRecord {
  std::string src;
  std::string trg;
  /// Every acceptable target for `src`.
  std::vector<std::string> valid;
};

/// Words are "a", "b", ... Sources are pairwise distinct; each is emitted
/// `repeats` times in a row. The one-to-many task
/// maps each source to one of three renderings chosen uniformly per record:
/// marker "x", "y" or "z" followed by every word shifted 0, 1 or 2 letters.
std::vector<SynthRecord> generate_synthetic(const SynthConfig& config);

/// All three one-to-many renderings of a source.
std::vector<std::string> one_to_many_targets(const std::string& src, int vocab_words);

void write_synth_jsonl(const std::string& path, const std::vector<SynthRecord>& records);

}  // namespace diffuseq
