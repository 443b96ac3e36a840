#pragma once

#include <string>
#include <vector>

namespace diffuseq::metrics {

using Tokens = std::vector<std::string>;

/// Sentence BLEU over orders 1..4. Orders for which the hypothesis has no
/// n-grams are skipped; orders with zero matches use (0.1)/(total + 0.1).
/// Brevity penalty uses the closest reference length (shorter on ties).
double bleu(const Tokens& hyp, const std::vector<Tokens>& refs);

std::size_t lcs_length(const Tokens& a, const Tokens& b);
/// LCS-based F1.
double rouge_l(const Tokens& hyp, const Tokens& ref);
/// Distinct unigrams over total unigrams; 0 for an empty sentence.
double dist1(const Tokens& sentence);
/// Mean BLEU of each candidate against all others; 0 for fewer than 2.
double self_bleu(const std::vector<Tokens>& candidates);
/// Distinct 4-grams over total 4-grams across the set; 1 when there are none.
double div4(const std::vector<Tokens>& candidates);

struct EvalReport {
  double bleu = 0.0;
  double rouge_l = 0.0;
  double dist1 = 0.0;
  double self_bleu = 0.0;
  double div4 = 0.0;
  double avg_len = 0.0;
  std::size_t count = 0;
};

}  // namespace diffuseq::metrics
