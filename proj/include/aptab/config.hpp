#pragma once

// Run configuration files: INI sections [train], [model], [prior], [agents]
// and [eval]. Ranges are written "lo, hi" (or a single value), lists are
// comma separated. Unknown sections or keys are rejected.

#include <filesystem>
#include <iosfwd>
#include <string>

#include "aptab/training.hpp"

namespace aptab {

TrainConfig parse_train_config(std::istream& in);
TrainConfig load_train_config(const std::filesystem::path& path);

// Writes every field, in a form parse_train_config reads back.
std::string to_ini(const TrainConfig& config);

}  // namespace aptab
