#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdtse/metrics.h"
#include "cdtse/model.h"
#include "cdtse/sim.h"
#include "json.hpp"

namespace cdtse {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 5.0;  // global L2; <= 0 disables
  int batch_size = 4;
  int epochs = 50;
  int patience = 6;        // stop after this many epochs without a new best
  int lr_halve_after = 3;  // halve lr after this many stagnant epochs
  // Random training crops; 0 uses the whole utterance.
  int segment_samples = 2000;
  int enrollment_samples = 2000;
  // Validation crop taken from the start of each utterance; 0 = whole.
  int val_segment_samples = 4000;
  int workers = 1;
  std::uint64_t seed = 1;

  void Validate() const;
};

void to_json(nlohmann::ordered_json& j, const TrainConfig& c);
void from_json(const nlohmann::ordered_json& j, TrainConfig& c);

// ---- optimizer ------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> m, v;  // one per parameter, in order
};

AdamState InitAdam(const ModelParams& params);
// Bias-corrected Adam on the gradients stored in `params`. Throws
// std::runtime_error naming the first parameter with a non-finite gradient;
// nothing is updated in that case.
void AdamStep(ModelParams& params, AdamState& state, const AdamConfig& config);

double GlobalGradNorm(const ModelParams& params);
// Rescales all gradients so the global norm is at most max_norm. Returns the
// norm before clipping.
double ClipGradNorm(ModelParams& params, double max_norm);

// ---- training --------------------------------------------------------------

struct PlannedItem {
  std::size_t index = 0;          // into the training set
  std::size_t offset = 0;         // mixture crop start
  std::size_t enroll_offset = 0;  // enrollment crop start
};

// Shuffled order and crop positions for one epoch; a pure function of
// (seed, epoch, data shape).
std::vector<PlannedItem> EpochPlan(const TrainConfig& config, std::span<const MixtureSample> data,
                                   int epoch);

// Mean training loss of `params` over a plan, without updating anything.
double MeanLoss(const ModelConfig& model, const ModelParams& params, const TrainConfig& config,
                std::span<const MixtureSample> data, std::span<const PlannedItem> plan);

// Model output for one sample with no tape (inference).
Tensor Extract(const ModelConfig& model, const ModelParams& params, const MixtureSample& sample,
               std::size_t max_samples = 0);

// Mean SI-SDR (dB) of the model on a validation set.
double ValidationSiSdr(const ModelConfig& model, const ModelParams& params,
                       std::span<const MixtureSample> data, int segment_samples, int workers);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_sisdr = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
  bool improved = false;
};

struct RunRecord {
  std::string system;
  ModelConfig model;
  TrainConfig train;
  std::size_t parameter_count = 0;
  double initial_val_sisdr = 0.0;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_sisdr = 0.0;
  std::string best_checkpoint;
  bool early_stopped = false;
  std::optional<nlohmann::ordered_json> test_summary;

  nlohmann::ordered_json ToJson() const;
};

using TrainLog = std::function<void(const std::string&)>;

// Trains from InitParams(model) and writes {out}/best.ckpt, {out}/last.ckpt and
// {out}/run.json. The best checkpoint always holds the parameters with the
// highest validation SI-SDR seen.
RunRecord Train(const ModelConfig& model, const TrainConfig& config,
                std::span<const MixtureSample> train, std::span<const MixtureSample> val,
                const std::filesystem::path& out, std::string system = "model",
                const TrainLog& log = nullptr);

// ---- grid -------------------------------------------------------------------

struct SystemSpec {
  std::string name;  // table label, e.g. "CD-Unrolled"
  std::string key;   // file-system friendly id, e.g. "cd_unrolled_sa"
  ModelConfig model;
};

// The comparison systems, derived from `base` (which supplies sizes and seed).
std::vector<SystemSpec> StandardSystems(const ModelConfig& base);
// Selects systems by key; throws std::invalid_argument on an unknown key.
std::vector<SystemSpec> SelectSystems(const ModelConfig& base, std::span<const std::string> keys);

struct GridRow {
  std::string system;
  std::string key;
  std::string sa;  // "-" or "yes"
  EvalReport report;
};

struct GridReport {
  std::vector<GridRow> rows;

  // Columns: system,key,sa,ff_sisdr,...,avg_sisdr,ff_sisdri,...,avg_sisdri
  std::string Csv() const;
  // Aligned System | SA | FF | MM | FM | Avg table of SI-SDR improvement (dB).
  std::string Table() const;
};

// Row for the unprocessed channel-1 mixture (improvement 0 by construction).
GridRow MixtureRow(std::span<const MixtureSample> test);

// Trains every system under {out}/{key}/, evaluates its best checkpoint on
// `test` and writes {out}/grid.csv and {out}/grid.txt. The mixture row comes
// first when `include_mixture` is set.
GridReport RunGrid(std::span<const SystemSpec> systems, const TrainConfig& config,
                   std::span<const MixtureSample> train, std::span<const MixtureSample> val,
                   std::span<const MixtureSample> test, const std::filesystem::path& out,
                   const TrainLog& log = nullptr, bool include_mixture = true);

}  // namespace cdtse
