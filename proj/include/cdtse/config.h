#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cdtse/model.h"
#include "cdtse/sim.h"
#include "cdtse/train.h"
#include "json.hpp"

namespace cdtse {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Everything a CLI run depends on. Serialized as
// {"sim": {...}, "model": {...}, "train": {...}, "systems": [...]}.
struct ExperimentConfig {
  SimConfig sim;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::string> systems = {"all"};  // grid system keys

  void Validate() const;
};

void to_json(nlohmann::ordered_json& j, const ExperimentConfig& c);
// Unknown keys at any level throw ConfigError.
void from_json(const nlohmann::ordered_json& j, ExperimentConfig& c);

ExperimentConfig LoadExperimentConfig(const std::filesystem::path& path);
void SaveExperimentConfig(const std::filesystem::path& path, const ExperimentConfig& c);

// Applies "a.b=c". The path must name an existing leaf. The value is read as
// JSON when it parses as such, otherwise as a string; list values may be
// given comma separated.
void ApplyOverride(ExperimentConfig& c, std::string_view assignment);

// Sets the sim, model and train seeds together.
void ApplySeed(ExperimentConfig& c, std::uint64_t seed);
// Parses CD_TSE_SEED if set. Throws ConfigError on a malformed value.
std::optional<std::uint64_t> SeedFromEnvironment();
std::uint64_t ParseSeed(std::string_view text);

}  // namespace cdtse
