#include "cdtse/config.h"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace cdtse {

namespace {

// Library validators throw std::invalid_argument; surface those as config
// errors with the offending section named.
template <typename Fn>
void AsConfigError(const std::string& section, Fn fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(section + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

std::vector<std::string> SplitCommas(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = std::min(s.find(',', start), s.size());
    if (end > start) out.emplace_back(s.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

}  // namespace

void ExperimentConfig::Validate() const {
  AsConfigError("sim", [&] { sim.Validate(); });
  AsConfigError("model", [&] { model.Validate(); });
  AsConfigError("train", [&] { train.Validate(); });
  AsConfigError("systems", [&] { SelectSystems(model, systems); });
}

void to_json(nlohmann::ordered_json& j, const ExperimentConfig& c) {
  j = nlohmann::ordered_json::object();
  j["sim"] = c.sim;
  j["model"] = c.model;
  j["train"] = c.train;
  j["systems"] = c.systems;
}

void from_json(const nlohmann::ordered_json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "sim") AsConfigError(key, [&] { c.sim = value.get<SimConfig>(); });
    else if (key == "model") AsConfigError(key, [&] { c.model = value.get<ModelConfig>(); });
    else if (key == "train") AsConfigError(key, [&] { c.train = value.get<TrainConfig>(); });
    else if (key == "systems") AsConfigError(key, [&] { c.systems = value.get<std::vector<std::string>>(); });
    else throw ConfigError("unknown config key '" + key + "'");
  }
}

ExperimentConfig LoadExperimentConfig(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  return c;
}

void SaveExperimentConfig(const std::filesystem::path& path, const ExperimentConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << nlohmann::ordered_json(c).dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

void ApplyOverride(ExperimentConfig& c, std::string_view assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  const std::string path(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));

  nlohmann::ordered_json root = c;
  nlohmann::ordered_json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) throw ConfigError("unknown config key '" + path + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("'" + path + "' is a section, not a value");

  nlohmann::ordered_json value;
  if (node->is_string()) {
    value = text;
  } else if (node->is_array() && !text.empty() && text.front() != '[') {
    value = SplitCommas(text);
  } else {
    try {
      value = nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
      throw ConfigError("cannot parse value '" + text + "' for '" + path + "'");
    }
  }
  const bool compatible = (node->is_number() && value.is_number()) ||
                          (node->is_boolean() && value.is_boolean()) ||
                          (node->is_array() && value.is_array()) || node->is_string();
  if (!compatible) {
    throw ConfigError("'" + path + "' expects a " + std::string(node->type_name()) + ", got '" + text + "'");
  }
  if (node->is_number_integer() && !value.is_number_integer()) {
    throw ConfigError("'" + path + "' expects an integer, got '" + text + "'");
  }
  *node = value;
  c = root.get<ExperimentConfig>();
}

void ApplySeed(ExperimentConfig& c, std::uint64_t seed) {
  c.sim.seed = seed;
  c.model.seed = seed;
  c.train.seed = seed;
}

std::uint64_t ParseSeed(std::string_view text) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("seed must be a non-negative integer, got '" + std::string(text) + "'");
  }
  return v;
}

std::optional<std::uint64_t> SeedFromEnvironment() {
  const char* v = std::getenv("CD_TSE_SEED");
  if (v == nullptr || *v == '\0') return std::nullopt;
  try {
    return ParseSeed(v);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("CD_TSE_SEED: ") + e.what());
  }
}

}  // namespace cdtse
