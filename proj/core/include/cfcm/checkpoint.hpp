#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cfcm/model.hpp"
#include "cfcm/optim.hpp"

namespace cfcm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// On-disk layout, little-endian throughout:
//   "CFCM" | u32 version | u32 config length + bytes |
//   u32 tensor count | per tensor: u32 name length + bytes, u32 rank,
//   rank x u32 dims, raw float32 payload.
struct CheckpointData {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::vector<std::pair<std::string, Tensor4<float>>> tensors;
};

void save_checkpoint(const std::string& path, const std::string& config_text,
                     const std::vector<std::pair<std::string, Tensor4<float>>>& tensors);

// Model parameters and buffers, plus Adam moments when an optimizer is given.
void save_checkpoint(const std::string& path, SegModel<float>& model,
                     const AdamState<float>* optimizer, const std::string& config_text);

CheckpointData read_checkpoint(const std::string& path);

// Copies every model tensor from the checkpoint by name, bit-exact.
// Missing names or shape mismatches throw, naming the offending tensor.
void load_into(SegModel<float>& model, const CheckpointData& checkpoint);

}  // namespace cfcm
