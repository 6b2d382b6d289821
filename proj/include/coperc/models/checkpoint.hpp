#pragma once

#include <filesystem>
#include <stdexcept>

#include "coperc/models/model.hpp"

namespace coperc::models {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian layout: "CPCK", u32 version, u64 config hash, u32 count, then
/// per tensor u32 name length, name bytes, u32 rank, u64 dims, float32 values.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
/// Rejects files whose config hash, names or shapes differ from `config`.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);

}  // namespace coperc::models
