#pragma once

#include "diffuseq/training.hpp"

#include <cstdint>
#include <string>

namespace diffuseq {

/// On-disk layout (all integers little-endian):
///   "DSQ1" | u32 version | u32 meta_len | meta JSON | u32 n_tensors |
///   n_tensors x (u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 data) |
///   u64 FNV-1a checksum of every preceding byte
/// The JSON meta block carries the model config, schedule parameters, training
/// config, vocab text and hash, and the step/sampler state needed to resume.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  TrainState state;
  bool has_optimizer = false;
  std::string vocab_text;
  std::uint64_t vocab_hash = 0;
};

void save_checkpoint(const std::string& path, const TrainConfig& config, const TrainState& state,
                     const std::string& vocab_text, std::uint64_t vocab_hash, bool include_optimizer = true);

/// Throws FormatError on magic/version/checksum/hash/shape mismatch and
/// IoError when the file cannot be read.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace diffuseq
