#pragma once

#include "diffuseq/metrics.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace diffuseq {

/// One line of `sample` output.
struct SampleRecord {
  std::string src;
  std::vector<std::string> candidates;
  int mbr_choice = 0;
  std::uint64_t seed = 0;
  int steps = 0;

  const std::string& choice() const { return candidates.at(static_cast<std::size_t>(mbr_choice)); }
};

std::string to_json_line(const SampleRecord& record);

/// Accepts sample JSONL lines or plain text lines (one hypothesis each).
std::vector<SampleRecord> read_samples(const std::string& path);

/// One reference list per line. A line may be a JSON object with "valid"
/// (array), "refs" (array), "trg" (string), or sample-output fields, or
/// plain text.
std::vector<std::vector<std::string>> read_references(const std::string& path);

struct EvalRow {
  double bleu = 0.0;
  double rouge_l = 0.0;
  double dist1 = 0.0;
  double self_bleu = 0.0;
  double div4 = 0.0;
  std::size_t length = 0;
  std::string hyp;
  std::string ref;
};

inline constexpr int kDiversityCandidates = 3;

/// Scores each MBR choice against its references (ROUGE-L takes the best
/// reference) and the first kDiversityCandidates candidates for diversity.
/// Text is compared on whitespace tokens, lowercased unless `keep_case`.
metrics::EvalReport evaluate(const std::vector<SampleRecord>& samples,
                             const std::vector<std::vector<std::string>>& refs, std::vector<EvalRow>* rows = nullptr,
                             bool keep_case = false);

std::string report_json(const metrics::EvalReport& report);
void write_eval_tsv(const std::string& path, const std::vector<EvalRow>& rows);

}  // namespace diffuseq
