#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ssmil/mil.hpp"
#include "ssmil/nn.hpp"

namespace ssmil {

struct TensorRecord {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

/// Named f32 tensors plus string metadata. On disk: a `manifest` listing
/// names, shapes and element offsets, and `params.bin` holding the tensors as
/// little-endian 32-bit floats in manifest order.
struct Checkpoint {
  std::string kind;  // "encoder" or "mil"
  std::map<std::string, std::string> meta;
  std::vector<TensorRecord> tensors;

  const TensorRecord& tensor(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& dir);

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t file_hash(const std::filesystem::path& path);
/// Hash over the manifest and tensor files of a checkpoint directory.
std::uint64_t checkpoint_hash(const std::filesystem::path& dir);
std::string hex64(std::uint64_t v);

Checkpoint encoder_checkpoint(const Mlp& encoder, std::map<std::string, std::string> meta = {});
Mlp encoder_from_checkpoint(const Checkpoint& ckpt);

Checkpoint mil_checkpoint(const MilModel& model, std::map<std::string, std::string> meta = {});
MilModel mil_from_checkpoint(const Checkpoint& ckpt);

/// The network as it reads back from a checkpoint (weights rounded to f32).
Mlp round_to_f32(const Mlp& net);

}  // namespace ssmil
