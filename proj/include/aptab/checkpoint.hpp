#pragma once

// Tensor bundle file: magic, format version, a JSON header, then named
// tensors as raw little-endian doubles in header order.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "aptab/tensor.hpp"

namespace aptab {

inline constexpr std::uint32_t kBundleVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Bundle {
  std::string kind;  // "model", "train-state", ...
  nlohmann::json header;
  std::vector<NamedTensor> tensors;

  // Throws std::runtime_error when absent.
  const Tensor& at(const std::string& name) const;
};

// Writes atomically (temporary file then rename).
void write_bundle(const std::filesystem::path& path, const Bundle& bundle);
Bundle read_bundle(const std::filesystem::path& path);

}  // namespace aptab
