#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmctl/model.hpp"
#include "mmctl/optim.hpp"

namespace mmctl {

inline constexpr char kCheckpointMagic[4] = {'M', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorEntry {
  std::string name;
  Tensor<float> value;
};

struct CheckpointData {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorEntry> tensors;
};

// Layout (all integers little-endian):
//   "MMCK" | u32 version | u32 meta_len | meta (JSON, sorted keys) | u32 count |
//   count x (u32 name_len | name | u32 rank | u64 dims[rank] | u64 offset) |
//   payload of float32 values; offsets are byte positions within the payload.
std::string encode_checkpoint(const CheckpointData& ck);
// Throws FormatError on bad magic, unsupported version, truncation, trailing
// bytes, or overlapping/out-of-range tensor offsets.
CheckpointData decode_checkpoint(const std::string& bytes);

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointData& ck);
CheckpointData read_checkpoint_file(const std::filesystem::path& path);

nlohmann::json model_config_json(const ModelConfig& m);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Parameters (registration order), then optimiser moments as
// "optim.m.<name>" / "optim.v.<name>". Metadata gains model config, phase,
// step, bypass/frozen flags and the backbone checksum.
CheckpointData model_checkpoint(const JointModel<float>& model, const AdamState<float>* state,
                                nlohmann::json extra_meta = nlohmann::json::object());

struct LoadedModel {
  JointModel<float> model;
  AdamState<float> state;
  nlohmann::json meta;
};

// Rebuilds the model and optimiser state; throws StateError when the stored
// backbone checksum disagrees with the loaded tensors.
LoadedModel load_model(const CheckpointData& ck);
LoadedModel load_model_file(const std::filesystem::path& path);

}  // namespace mmctl
