#include "diffuseq/diffusion.hpp"

namespace diffuseq {

PairedExample make_example(const TokenIds& src, const TokenIds& trg, int length) {
  const int needed = static_cast<int>(src.size() + trg.size()) + 3;
  if (needed > length) {
    throw ConfigError("example of " + std::to_string(needed) + " positions exceeds layout length " +
                      std::to_string(length));
  }
  PairedExample ex;
  ex.src_ids = src;
  ex.trg_ids = trg;
  ex.ids.reserve(static_cast<std::size_t>(length));
  ex.ids.push_back(special::kBos);
  ex.ids.insert(ex.ids.end(), src.begin(), src.end());
  ex.ids.push_back(special::kSep);
  ex.boundary = static_cast<int>(ex.ids.size());
  ex.ids.insert(ex.ids.end(), trg.begin(), trg.end());
  ex.ids.push_back(special::kEos);
  ex.pad_mask.assign(ex.ids.size(), 0);
  ex.ids.resize(static_cast<std::size_t>(length), special::kPad);
  ex.pad_mask.resize(static_cast<std::size_t>(length), 1);
  return ex;
}

PairedExample make_source_layout(const TokenIds& src, int length) {
  const int needed = static_cast<int>(src.size()) + 3;
  if (needed > length) {
    throw ConfigError("source of " + std::to_string(src.size()) + " tokens leaves no target slot in length " +
                      std::to_string(length));
  }
  PairedExample ex;
  ex.src_ids = src;
  ex.ids.push_back(special::kBos);
  ex.ids.insert(ex.ids.end(), src.begin(), src.end());
  ex.ids.push_back(special::kSep);
  ex.boundary = static_cast<int>(ex.ids.size());
  ex.ids.resize(static_cast<std::size_t>(length), special::kPad);
  ex.pad_mask.assign(static_cast<std::size_t>(length), 0);
  return ex;
}

}  // namespace diffuseq
