#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>

#include "icleq/training.hpp"

namespace icleq {

/// Malformed file: bad magic, unsupported version, truncation or bad config.
class CheckpointFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stored tensors or model shape disagree with what the caller expects.
class CheckpointShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'I', 'C', 'L', 'E', 'Q', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  TrainConfig config;
};

/// Layout: 8-byte magic, u32 version, u32 pair count and (key, value)
/// strings, u32 tensor count and per tensor (name, u32 rank, u64 dims,
/// row-major little-endian binary64 payload). Strings are u32 length + bytes.
void save_checkpoint(const ModelParams& params, const TrainConfig& config,
                     const std::filesystem::path& path);

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Like load_checkpoint, but rejects a file whose model shape differs from
/// `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace icleq
