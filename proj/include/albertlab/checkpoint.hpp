#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "albertlab/model.hpp"

namespace albert {

// Binary weight file ("ALBT" magic) plus a JSON sidecar next to it carrying
// the model config and run metadata. Layout, all little-endian:
//   magic "ALBT" | u32 version | u64 tensor count
//   per tensor:  u32 path length | path bytes | u32 rank | u64 dims...
//                u8 dtype (0 = f32, 1 = f64) | raw values
// Writes are always f64; f32 files load widened.
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Sidecar file that save_checkpoint writes next to `path` (.json extension).
std::string sidecar_path(const std::string& path);

struct Checkpoint {
  ModelConfig config;  // normalized
  ParameterStore params;
  std::vector<std::pair<std::string, Tensor>> extra_tensors;  // e.g. optimizer state
  nlohmann::json sidecar;
};

/// Writes params (insertion order) and any extra tensors to `path` and the
/// sidecar JSON {"format_version", "model", ...extra} next to it.
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParameterStore& params,
                     const std::vector<std::pair<std::string, Tensor>>& extra_tensors = {},
                     const nlohmann::json& extra_sidecar = nlohmann::json::object());

/// Rebuilds the model from the sidecar config and overwrites every tensor
/// from the binary file. Tensors whose path starts with "optim." land in
/// extra_tensors; anything else must match the built model exactly (missing,
/// unknown, or reshaped tensors raise IoError).
Checkpoint load_checkpoint(const std::string& path);

}  // namespace albert
