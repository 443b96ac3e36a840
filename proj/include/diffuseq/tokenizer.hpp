#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace diffuseq {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kSep = 4;
inline constexpr TokenId kCount = 5;
}  // namespace special

inline constexpr std::string_view kEndOfWord = "</w>";

/// BPE vocabulary. Ids 0..4 are PAD, UNK, BOS, EOS, SEP.
class Vocab {
 public:
  Vocab();

  std::size_t size() const { return id_to_token_.size(); }
  bool lowercase() const { return lowercase_; }
  const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  /// UNK when absent.
  TokenId id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  TokenIds encode(std::string_view text) const;
  std::string decode(const TokenIds& ids) const;

  std::string serialize() const;
  static Vocab parse(std::string_view text);
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  /// FNV-1a over the serialized form; stored in checkpoints.
  std::uint64_t hash() const;

  friend Vocab train_bpe(const std::vector<std::string>& corpus, std::size_t target_size, bool lowercase);

 private:
  TokenId add_token(const std::string& token);
  void add_merge(const std::string& left, const std::string& right);
  std::vector<std::string> apply_merges(std::vector<std::string> symbols) const;

  bool lowercase_ = true;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::map<std::pair<std::string, std::string>, std::size_t> merge_rank_;
};

/// Greedy most-frequent-pair merging over whitespace-split words; ties go to
/// the lexicographically smallest pair. Stops at `target_size` tokens or when
/// no pair occurs at least twice.
Vocab train_bpe(const std::vector<std::string>& corpus, std::size_t target_size, bool lowercase = true);

/// Lowercases (optionally) and collapses runs of whitespace to one space.
std::string normalize_text(std::string_view text, bool lowercase);
std::vector<std::string> split_whitespace(std::string_view text);
/// Splits a word into UTF-8 code points, attaching the end-of-word marker to
/// the last one.
std::vector<std::string> word_symbols(std::string_view word);

}  // namespace diffuseq
