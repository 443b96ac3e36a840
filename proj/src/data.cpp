#include "diffuseq/data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <set>

namespace diffuseq {

PairFile read_pairs_jsonl(const std::string& path, std::ostream* warn) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open data file " + path);
  PairFile out;
  std::string line;
  std::size_t lineno = 0;
  auto skip = [&](const std::string& why) {
    ++out.skipped;
    if (warn) *warn << "warning: " << path << ":" << lineno << ": " << why << ", skipped\n";
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      skip("malformed JSON");
      continue;
    }
    if (!j.is_object() || !j.contains("src") || !j.contains("trg") || !j["src"].is_string() ||
        !j["trg"].is_string()) {
      skip("missing string field src or trg");
      continue;
    }
    TrainingPair p{j["src"].get<std::string>(), j["trg"].get<std::string>()};
    if (normalize_text(p.src, false).empty() || normalize_text(p.trg, false).empty()) {
      skip("empty src or trg");
      continue;
    }
    out.pairs.push_back(std::move(p));
  }
  return out;
}

ExampleSet build_examples(const Vocab& vocab, const std::vector<TrainingPair>& pairs, int length, std::ostream* warn) {
  ExampleSet out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const TokenIds src = vocab.encode(pairs[i].src);
    const TokenIds trg = vocab.encode(pairs[i].trg);
    if (static_cast<int>(src.size() + trg.size()) + 3 > length) {
      ++out.skipped;
      if (warn) *warn << "warning: pair " << i << " needs " << src.size() + trg.size() + 3 << " positions, skipped\n";
      continue;
    }
    out.examples.push_back(make_example(src, trg, length));
  }
  return out;
}

SynthTask parse_synth_task(const std::string& name) {
  if (name == "copy") return SynthTask::Copy;
  if (name == "reverse") return SynthTask::Reverse;
  if (name == "one2many") return SynthTask::OneToMany;
  throw ConfigError("unknown synthetic task '" + name + "' (expected copy, reverse, one2many)");
}

std::string synth_task_name(SynthTask task) {
  switch (task) {
    case SynthTask::Copy:
      return "copy";
    case SynthTask::Reverse:
      return "reverse";
    case SynthTask::OneToMany:
      return "one2many";
  }
  return "copy";
}

namespace {

std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

std::string word(int i) { return std::string(1, static_cast<char>('a' + i)); }

}  // namespace

std::vector<std::string> one_to_many_targets(const std::string& src, int vocab_words) {
  if (vocab_words > 23) throw ConfigError("one2many: at most 23 words (x, y, z are markers)");
  const std::vector<std::string> words = split_whitespace(src);
  for (const auto& w : words) {
    if (w.size() != 1 || w[0] < 'a' || w[0] >= 'a' + vocab_words) {
      throw ConfigError("one2many: word '" + w + "' outside the synthetic vocabulary");
    }
  }
  std::vector<std::string> out;
  for (int k = 0; k < 3; ++k) {
    std::vector<std::string> t{std::string(1, static_cast<char>('x' + k))};
    for (const auto& w : words) t.push_back(word((w[0] - 'a' + k) % vocab_words));
    out.push_back(join(t));
  }
  return out;
}

std::vector<SynthRecord> generate_synthetic(const SynthConfig& config) {
  if (config.vocab_words < 2 || config.vocab_words > 26) throw ConfigError("synthetic: vocab_words must be in [2, 26]");
  if (config.min_len < 1 || config.max_len < config.min_len) throw ConfigError("synthetic: bad length range");
  if (config.count < 1) throw ConfigError("synthetic: count must be positive");
  if (config.repeats < 1) throw ConfigError("synthetic: repeats must be positive");
  double capacity = 0.0;
  for (int n = config.min_len; n <= config.max_len; ++n) capacity += std::pow(config.vocab_words, n);
  if (capacity < 2.0 * config.count) throw ConfigError("synthetic: too many records for the length range");

  Rng rng(derive_seed(config.seed, 0x5e7));
  std::uniform_int_distribution<int> len_dist(config.min_len, config.max_len);
  std::uniform_int_distribution<int> word_dist(0, config.vocab_words - 1);
  std::uniform_int_distribution<int> dialect(0, 2);
  std::set<std::string> seen;
  std::vector<SynthRecord> out;
  while (static_cast<int>(seen.size()) < config.count) {
    std::vector<std::string> words(static_cast<std::size_t>(len_dist(rng.engine())));
    for (auto& w : words) w = word(word_dist(rng.engine()));
    const std::string src = join(words);
    if (!seen.insert(src).second) continue;
    for (int rep = 0; rep < config.repeats; ++rep) {
      SynthRecord r;
      r.src = src;
      switch (config.task) {
        case SynthTask::Copy:
          r.trg = r.src;
          r.valid = {r.trg};
          break;
        case SynthTask::Reverse:
          r.trg = join(std::vector<std::string>(words.rbegin(), words.rend()));
          r.valid = {r.trg};
          break;
        case SynthTask::OneToMany:
          r.valid = one_to_many_targets(r.src, config.vocab_words);
          r.trg = r.valid[static_cast<std::size_t>(dialect(rng.engine()))];
          break;
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

void write_synth_jsonl(const std::string& path, const std::vector<SynthRecord>& records) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  for (const auto& r : records) {
    nlohmann::json j = {{"src", r.src}, {"trg", r.trg}};
    if (r.valid.size() > 1) j["valid"] = r.valid;
    f << j.dump() << '\n';
  }
  if (!f) throw IoError("failed writing " + path);
}

}  // namespace diffuseq
