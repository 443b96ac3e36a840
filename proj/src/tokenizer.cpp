#include "diffuseq/tokenizer.hpp"

#include "diffuseq/common.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>
#include <sstream>

namespace diffuseq {

namespace {

constexpr const char* kSpecialSurface[] = {"<pad>", "<unk>", "<s>", "</s>", "<sep>"};
constexpr std::string_view kHeaderPrefix = "bpe-vocab v1 lowercase=";
constexpr std::string_view kMergesSentinel = "#merges";

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;  // invalid lead byte: treat as a single symbol
}

bool ends_with_marker(const std::string& s) {
  return s.size() >= kEndOfWord.size() &&
         std::string_view(s).substr(s.size() - kEndOfWord.size()) == kEndOfWord;
}

}  // namespace

std::string normalize_text(std::string_view text, bool lowercase) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(lowercase ? static_cast<char>(std::tolower(c)) : ch);
  }
  return out;
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

std::vector<std::string> word_symbols(std::string_view word) {
  std::vector<std::string> symbols;
  std::size_t i = 0;
  while (i < word.size()) {
    const std::size_t n = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
    symbols.emplace_back(word.substr(i, n));
    i += n;
  }
  if (!symbols.empty()) symbols.back() += kEndOfWord;
  return symbols;
}

Vocab::Vocab() {
  for (const char* s : kSpecialSurface) add_token(s);
}

TokenId Vocab::add_token(const std::string& token) {
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  const auto id = static_cast<TokenId>(id_to_token_.size());
  id_to_token_.push_back(token);
  token_to_id_.emplace(token, id);
  return id;
}

void Vocab::add_merge(const std::string& left, const std::string& right) {
  merge_rank_.emplace(std::make_pair(left, right), merges_.size());
  merges_.emplace_back(left, right);
}

TokenId Vocab::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? special::kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const {
  return token_to_id_.count(std::string(token)) != 0;
}

std::vector<std::string> Vocab::apply_merges(std::vector<std::string> symbols) const {
  while (symbols.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
      if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second);
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const auto& [left, right] = merges_[best_rank];
    std::vector<std::string> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
        next.push_back(left + right);
        i += 2;
      } else {
        next.push_back(std::move(symbols[i]));
        ++i;
      }
    }
    symbols = std::move(next);
  }
  return symbols;
}

TokenIds Vocab::encode(std::string_view text) const {
  TokenIds ids;
  for (const auto& word : split_whitespace(normalize_text(text, lowercase_))) {
    for (const auto& sym : apply_merges(word_symbols(word))) ids.push_back(id(sym));
  }
  return ids;
}

std::string Vocab::decode(const TokenIds& ids) const {
  std::string raw;
  for (TokenId id : ids) {
    if (id == special::kPad || id == special::kBos || id == special::kEos || id == special::kSep) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= size() || id == special::kUnk) {
      raw += " ";
      raw += kSpecialSurface[special::kUnk];
      raw += " ";
      continue;
    }
    const std::string& tok = id_to_token_[static_cast<std::size_t>(id)];
    if (ends_with_marker(tok)) {
      raw.append(tok, 0, tok.size() - kEndOfWord.size());
      raw += ' ';
    } else {
      raw += tok;
    }
  }
  return normalize_text(raw, false);
}

std::string Vocab::serialize() const {
  std::ostringstream os;
  os << kHeaderPrefix << (lowercase_ ? "true" : "false") << '\n';
  for (const auto& tok : id_to_token_) os << tok << '\n';
  os << kMergesSentinel << '\n';
  for (const auto& [l, r] : merges_) os << l << ' ' << r << '\n';
  return os.str();
}

Vocab Vocab::parse(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  if (!std::getline(is, line) || line.rfind(kHeaderPrefix, 0) != 0) {
    throw FormatError("vocab: missing 'bpe-vocab v1' header");
  }
  const std::string flag = line.substr(kHeaderPrefix.size());
  if (flag != "true" && flag != "false") throw FormatError("vocab: bad lowercase flag '" + flag + "'");

  Vocab v;
  v.lowercase_ = flag == "true";
  v.id_to_token_.clear();
  v.token_to_id_.clear();
  bool in_merges = false;
  while (std::getline(is, line)) {
    if (!in_merges && line == kMergesSentinel) {
      in_merges = true;
      continue;
    }
    if (!in_merges) {
      if (line.empty()) throw FormatError("vocab: empty token line");
      if (v.token_to_id_.count(line)) throw FormatError("vocab: duplicate token '" + line + "'");
      v.add_token(line);
    } else {
      const auto sp = line.find(' ');
      if (sp == std::string::npos) throw FormatError("vocab: bad merge line '" + line + "'");
      v.add_merge(line.substr(0, sp), line.substr(sp + 1));
    }
  }
  if (!in_merges) throw FormatError("vocab: missing #merges sentinel");
  if (v.size() < static_cast<std::size_t>(special::kCount)) throw FormatError("vocab: missing special tokens");
  for (TokenId i = 0; i < special::kCount; ++i) {
    if (v.id_to_token_[static_cast<std::size_t>(i)] != kSpecialSurface[i]) {
      throw FormatError("vocab: special token mismatch at id " + std::to_string(i));
    }
  }
  return v;
}

void Vocab::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write vocab file " + path);
  f << serialize();
  if (!f) throw IoError("failed writing vocab file " + path);
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open vocab file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : serialize()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Vocab train_bpe(const std::vector<std::string>& corpus, std::size_t target_size, bool lowercase) {
  if (corpus.empty()) throw ConfigError("train_bpe: empty corpus");

  std::map<std::string, std::size_t> word_freq;
  for (const auto& line : corpus) {
    for (auto& w : split_whitespace(normalize_text(line, lowercase))) ++word_freq[w];
  }
  if (word_freq.empty()) throw ConfigError("train_bpe: corpus has no words");

  struct Word {
    std::vector<std::string> symbols;
    std::size_t freq;
  };
  std::vector<Word> words;
  std::map<std::string, int> alphabet;
  for (const auto& [w, f] : word_freq) {
    Word word{word_symbols(w), f};
    for (const auto& s : word.symbols) alphabet[s];
    words.push_back(std::move(word));
  }

  Vocab v;
  v.lowercase_ = lowercase;
  if (target_size <= alphabet.size() + special::kCount) {
    throw ConfigError("train_bpe: target size " + std::to_string(target_size) +
                      " must exceed alphabet (" + std::to_string(alphabet.size()) + ") + specials");
  }
  for (const auto& [s, unused] : alphabet) v.add_token(s);

  while (v.size() < target_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> counts;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) counts[{w.symbols[i], w.symbols[i + 1]}] += w.freq;
    }
    const std::pair<std::string, std::string>* best = nullptr;
    std::size_t best_count = 0;
    // std::map iterates in lexicographic order, so the first maximum wins ties.
    for (const auto& [pair, c] : counts) {
      if (c > best_count) {
        const std::string merged = pair.first + pair.second;
        bool is_special = false;
        for (const char* sp : kSpecialSurface) is_special |= merged == sp;
        if (is_special) continue;
        best = &pair;
        best_count = c;
      }
    }
    if (best == nullptr || best_count < 2) break;
    const auto left = best->first;
    const auto right = best->second;
    v.add_merge(left, right);
    v.add_token(left + right);
    for (auto& w : words) {
      std::vector<std::string> next;
      next.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size();) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
          next.push_back(left + right);
          i += 2;
        } else {
          next.push_back(std::move(w.symbols[i]));
          ++i;
        }
      }
      w.symbols = std::move(next);
    }
  }
  return v;
}

}  // namespace diffuseq
