#pragma once

// Binary checkpoint layout (all integers u32 little-endian):
//
//   "SATCKPT1"
//   header length, header bytes   (free-form text, empty for bare tensors)
//   entry count
//   per entry: name length, UTF-8 name, rank, dims..., raw f32 data
//
// Optimizer state is stored as ordinary entries under the "opt/" prefix.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "sat/optim.hpp"
#include "sat/tensor.hpp"

namespace sat {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::string header;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::vector<char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<char>& bytes);

void append_params(Checkpoint& ckpt, const std::vector<NamedParam>& params);
void append_optimizer(Checkpoint& ckpt, const std::vector<NamedParam>& params, const OptimizerState& state);

// Copies matching entries into the parameters; every parameter must be
// present with the same shape.
void load_params(const Checkpoint& ckpt, std::vector<NamedParam>& params);
OptimizerState load_optimizer(const Checkpoint& ckpt, const std::vector<NamedParam>& params);

}  // namespace sat
