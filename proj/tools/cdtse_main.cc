// cdtse: data generation, training, evaluation and CD inspection.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cdtse/cd.h"
#include "cdtse/config.h"
#include "cdtse/metrics.h"
#include "cdtse/model.h"
#include "cdtse/selftest.h"
#include "cdtse/sim.h"
#include "cdtse/train.h"
#include "cdtse/wav.h"

namespace fs = std::filesystem;
using namespace cdtse;

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

// Precedence: defaults < --config < key=value < CD_TSE_SEED < --seed/--workers.
ExperimentConfig Resolve(const CommonOptions& o) {
  ExperimentConfig c;
  if (!o.config.empty()) c = LoadExperimentConfig(o.config);
  for (const auto& kv : o.overrides) ApplyOverride(c, kv);
  if (auto env = SeedFromEnvironment()) ApplySeed(c, *env);
  if (o.seed) ApplySeed(c, *o.seed);
  if (o.workers) c.train.workers = *o.workers;
  c.Validate();
  return c;
}

void AddCommon(CLI::App* app, CommonOptions& o, bool out_required) {
  app->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
  app->add_option("overrides", o.overrides, "key=value config overrides, e.g. train.epochs=5");
  auto* out = app->add_option("--out", o.out, "output directory");
  if (out_required) out->required();
  app->add_option("--seed", o.seed, "seed for simulation, initialization and training");
  app->add_option("--workers", o.workers, "worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber);
}

void Log(const std::string& line) { std::cerr << line << std::endl; }

// Reads a dataset written by gen-data, or simulates one in memory.
std::vector<MixtureSample> LoadOrGenerate(const ExperimentConfig& c, const std::string& data, std::string_view split) {
  if (!data.empty()) return LoadSplit(data, split);
  Log("simulating " + std::string(split) + " split (" + std::to_string(c.sim.Counts(split).total()) + " utterances)");
  return GenerateSplit(c.sim, split);
}

int GenData(const CommonOptions& o) {
  const ExperimentConfig c = Resolve(o);
  BuildDataset(c.sim, o.out);
  SaveExperimentConfig(fs::path(o.out) / "resolved_config.json", c);
  for (std::string_view split : kSplits) {
    std::cout << split << ": " << c.sim.Counts(split).total() << " utterances\n";
  }
  return 0;
}

int TrainCommand(const CommonOptions& o, const std::string& data, const std::string& system) {
  ExperimentConfig c = Resolve(o);
  ModelConfig model = c.model;
  std::string name = std::string(ToString(model.combination));
  if (!system.empty()) {
    const std::vector<std::string> keys = {system};
    const SystemSpec spec = SelectSystems(c.model, keys).front();
    model = spec.model;
    name = spec.name;
  }
  SaveExperimentConfig(fs::path(o.out) / "resolved_config.json", c);
  const auto train = LoadOrGenerate(c, data, "train");
  const auto val = LoadOrGenerate(c, data, "val");
  const RunRecord rec = Train(model, c.train, train, val, o.out, name, Log);
  std::cout << "best epoch " << rec.best_epoch << ", val SI-SDR " << std::fixed << std::setprecision(2)
            << rec.best_val_sisdr << " dB, checkpoint " << rec.best_checkpoint << "\n";
  return 0;
}

int EvalCommand(const CommonOptions& o, const std::string& checkpoint, const std::string& data,
                const std::string& split) {
  const ExperimentConfig c = Resolve(o);
  const auto [model, params] = LoadCheckpoint(checkpoint);
  const auto samples = LoadOrGenerate(c, data, split);
  const EvalReport report = Evaluate(
      samples, [&](const MixtureSample& m) { return Extract(model, params, m); }, c.train.workers);
  if (!o.out.empty()) {
    report.Write(fs::path(o.out) / "scores.csv", fs::path(o.out) / "summary.json");
    SaveExperimentConfig(fs::path(o.out) / "resolved_config.json", c);
  }
  std::cout << report.SummaryJson().dump(2) << "\n";
  return 0;
}

int GridCommand(const CommonOptions& o, const std::string& data) {
  const ExperimentConfig c = Resolve(o);
  const auto systems = SelectSystems(c.model, c.systems);
  SaveExperimentConfig(fs::path(o.out) / "resolved_config.json", c);
  const auto train = LoadOrGenerate(c, data, "train");
  const auto val = LoadOrGenerate(c, data, "val");
  const auto test = LoadOrGenerate(c, data, "test");
  const GridReport grid = RunGrid(systems, c.train, train, val, test, o.out, Log);
  std::cout << grid.Table();
  return 0;
}

int InspectCd(const CommonOptions& o, const std::string& variant_name, const std::vector<std::string>& inputs,
              const std::string& checkpoint) {
  const ExperimentConfig c = Resolve(o);
  const CdVariant variant = ParseCdVariant(variant_name);
  if (variant == CdVariant::kNone) throw ConfigError("inspect-cd needs a score variant other than none");
  ModelConfig model = c.model;
  ModelParams params;
  if (checkpoint.empty()) {
    params = InitParams(model);
  } else {
    std::tie(model, params) = LoadCheckpoint(checkpoint);
  }
  const auto a = ReadMono(inputs[0]);
  const auto b = ReadMono(inputs[1]);
  if (a.size() != b.size()) {
    throw std::invalid_argument("inputs differ in length (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + " samples)");
  }
  Graph g(false);
  // Without a trained second encoder both channels go through encoder1.
  const std::string second = params.Has("encoder2.weight") ? "encoder2" : "encoder1";
  const EncoderRepresentation w1 = Encode(g, model, params, Tensor::Row(a), "encoder1", 1);
  const EncoderRepresentation w2 = Encode(g, model, params, Tensor::Row(b), second, 2);
  const SimilarityVector phi = RowCosineSimilarity(g, w1, w2);
  const ScoreVector s = ScoreFor(g, variant, phi);
  std::ostringstream csv;
  csv << "dim,phi,score\n" << std::setprecision(17);
  for (std::size_t j = 0; j < phi.values.numel(); ++j) {
    csv << j << ',' << phi.values.at(j) << ',' << s.values.at(j) << '\n';
  }
  if (o.out.empty()) {
    std::cout << csv.str();
  } else {
    fs::create_directories(o.out);
    std::ofstream(fs::path(o.out) / "cd_scores.csv") << csv.str();
    SaveExperimentConfig(fs::path(o.out) / "resolved_config.json", c);
    std::cout << "wrote " << (fs::path(o.out) / "cd_scores.csv").string() << "\n";
  }
  return 0;
}

int SelfTest() {
  int failed = 0;
  const auto results = RunSelfTest([&](const SelfTestCheck& c) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << " (" << c.detail << ")" << std::endl;
    if (!c.passed) ++failed;
  });
  std::cout << results.size() - static_cast<std::size_t>(failed) << "/" << results.size() << " checks passed\n";
  return failed == 0 ? 0 : 1;
}

std::string Category(const std::exception& e) {
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return "io";
  if (dynamic_cast<const std::invalid_argument*>(&e)) return "invalid";
  if (dynamic_cast<const std::out_of_range*>(&e)) return "invalid";
  return "runtime";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel-decorrelation target speech extraction toolkit"};
  app.require_subcommand(1);

  CommonOptions gen_opts, train_opts, eval_opts, grid_opts, inspect_opts;
  std::string train_data, train_system, eval_ckpt, eval_data, eval_split = "test", grid_data;
  std::string inspect_variant = "unrolled", inspect_ckpt;
  std::vector<std::string> inspect_inputs;

  auto* gen = app.add_subcommand("gen-data", "simulate the train/val/test mixtures to WAV + JSONL manifests");
  AddCommon(gen, gen_opts, true);

  auto* train = app.add_subcommand("train", "train one system, keeping the best-validation checkpoint");
  AddCommon(train, train_opts, true);
  train->add_option("--data", train_data, "dataset from gen-data (default: simulate in memory)");
  train->add_option("--system", train_system, "grid system key (default: the config's model section)");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a split");
  AddCommon(eval, eval_opts, false);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "dataset from gen-data (default: simulate in memory)");
  eval->add_option("--split", eval_split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* grid = app.add_subcommand("grid", "train and evaluate the system grid, print the comparison table");
  AddCommon(grid, grid_opts, true);
  grid->add_option("--data", grid_data, "dataset from gen-data (default: simulate in memory)");

  auto* inspect = app.add_subcommand("inspect-cd", "per-dimension phi and CD score for two WAV channels, as CSV");
  AddCommon(inspect, inspect_opts, false);
  inspect->add_option("--variant", inspect_variant, "original, unrolled or cosine")
      ->check(CLI::IsMember({"original", "unrolled", "cosine"}));
  inspect->add_option("--in", inspect_inputs, "channel-1 and channel-2 WAV files")
      ->required()
      ->expected(2)
      ->check(CLI::ExistingFile);
  inspect->add_option("--checkpoint", inspect_ckpt, "use this model's encoders (default: initial weights)")
      ->check(CLI::ExistingFile);

  auto* self = app.add_subcommand("self-test", "run the gradient and invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return GenData(gen_opts);
    if (*train) return TrainCommand(train_opts, train_data, train_system);
    if (*eval) return EvalCommand(eval_opts, eval_ckpt, eval_data, eval_split);
    if (*grid) return GridCommand(grid_opts, grid_data);
    if (*inspect) return InspectCd(inspect_opts, inspect_variant, inspect_inputs, inspect_ckpt);
    if (*self) return SelfTest();
  } catch (const ConfigError& e) {
    // A bad invocation, like an unknown flag.
    std::cerr << "error: config: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << Category(e) << ": " << e.what() << std::endl;
    return 1;
  }
  return 2;
}
