#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "stydesty/tensor.hpp"

namespace stydesty {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// FNV-1a 64 over names, shapes and raw element bytes, in the order given.
std::uint64_t parameter_hash(std::span<const Parameter* const> params);
std::uint64_t parameter_hash(std::span<Parameter* const> params);
inline std::uint64_t parameter_hash(const std::vector<Parameter*>& params) {
  return parameter_hash(std::span<Parameter* const>(params));
}
inline std::uint64_t parameter_hash(const std::vector<const Parameter*>& params) {
  return parameter_hash(std::span<const Parameter* const>(params));
}
std::string hex64(std::uint64_t v);

/// Writes <stem>.bin (little-endian float32 arrays concatenated in
/// lexicographic name order) and <stem>.json (name → shape, offset, dtype,
/// plus `meta`).
void save_checkpoint(const std::filesystem::path& stem, std::span<const Parameter* const> params,
                     const nlohmann::json& meta);

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  nlohmann::json manifest;

  /// Copies the stored values into `params`; every parameter must be present
  /// with its exact shape.
  void restore(std::span<Parameter* const> params) const;
};

Checkpoint load_checkpoint(const std::filesystem::path& stem);

}  // namespace stydesty
