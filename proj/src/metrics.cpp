#include "diffuseq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>

namespace diffuseq::metrics {

namespace {

constexpr int kMaxOrder = 4;
constexpr double kSmoothing = 0.1;

std::map<Tokens, int> ngram_counts(const Tokens& s, std::size_t n) {
  std::map<Tokens, int> counts;
  if (s.size() < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[Tokens(s.begin() + i, s.begin() + i + n)];
  return counts;
}

}  // namespace

double bleu(const Tokens& hyp, const std::vector<Tokens>& refs) {
  if (hyp.empty() || refs.empty()) return 0.0;

  double log_sum = 0.0;
  int orders = 0;
  for (std::size_t n = 1; n <= kMaxOrder; ++n) {
    if (hyp.size() < n) break;
    const auto hyp_counts = ngram_counts(hyp, n);
    std::map<Tokens, int> max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    int matched = 0;
    for (const auto& [g, c] : hyp_counts) {
      auto it = max_ref.find(g);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    const double total = static_cast<double>(hyp.size() - n + 1);
    const double p = matched > 0 ? matched / total : kSmoothing / (total + kSmoothing);
    log_sum += std::log(p);
    ++orders;
  }

  const auto c = static_cast<long>(hyp.size());
  long r = static_cast<long>(refs.front().size());
  for (const auto& ref : refs) {
    const auto len = static_cast<long>(ref.size());
    if (std::labs(len - c) < std::labs(r - c) || (std::labs(len - c) == std::labs(r - c) && len < r)) r = len;
  }
  const double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(r) / static_cast<double>(c)));
  return bp * std::exp(log_sum / orders);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const auto lcs = static_cast<double>(lcs_length(hyp, ref));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(hyp.size());
  const double r = lcs / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

double dist1(const Tokens& sentence) {
  if (sentence.empty()) return 0.0;
  const std::set<std::string> distinct(sentence.begin(), sentence.end());
  return static_cast<double>(distinct.size()) / static_cast<double>(sentence.size());
}

double self_bleu(const std::vector<Tokens>& candidates) {
  if (candidates.size() < 2) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    std::vector<Tokens> others;
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      if (j != i) others.push_back(candidates[j]);
    }
    sum += bleu(candidates[i], others);
  }
  return sum / static_cast<double>(candidates.size());
}

double div4(const std::vector<Tokens>& candidates) {
  std::set<Tokens> distinct;
  std::size_t total = 0;
  for (const auto& c : candidates) {
    if (c.size() < 4) continue;
    for (std::size_t i = 0; i + 4 <= c.size(); ++i) {
      distinct.emplace(c.begin() + i, c.begin() + i + 4);
      ++total;
    }
  }
  return total == 0 ? 1.0 : static_cast<double>(distinct.size()) / static_cast<double>(total);
}

}  // namespace diffuseq::metrics
