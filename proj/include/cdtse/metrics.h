#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cdtse/sim.h"
#include "cdtse/tensor.h"
#include "json.hpp"

namespace cdtse {

inline constexpr double kSiSdrClampDb = 60.0;

// Scale-invariant SDR in dB after zero-meaning both signals, clamped to
// [-60, 60]. Throws std::invalid_argument on a length mismatch, empty input,
// or a reference with no energy.
double SiSdr(std::span<const double> estimate, std::span<const double> reference);
double SiSdr(const Tensor& estimate, const Tensor& reference);

// Negative SI-SDR as a differentiable scalar. No clamp; the energies inside
// the log are floored at kEps. The reference is treated as a constant.
Tensor SiSdrLoss(Graph& g, const Tensor& estimate, const Tensor& reference);

struct UtteranceScore {
  std::string utt_id;
  Condition condition = Condition::kFM;
  double sisdr_est = 0.0;
  double sisdr_mix = 0.0;
  double improvement = 0.0;  // sisdr_est - sisdr_mix
};

struct ConditionMean {
  std::size_t count = 0;
  double sisdr_est = 0.0;
  double sisdr_mix = 0.0;
  double improvement = 0.0;
};

struct EvalReport {
  std::vector<UtteranceScore> utterances;
  ConditionMean ff, mm, fm;
  ConditionMean overall;  // over all utterances

  const ConditionMean& For(Condition c) const;
  nlohmann::ordered_json SummaryJson() const;
  std::string Csv() const;
  void Write(const std::filesystem::path& csv, const std::filesystem::path& summary) const;
};

// Builds the per-condition means from `scores` (summed in order).
EvalReport MakeReport(std::vector<UtteranceScore> scores);

// Maps a sample to a 1 x samples estimate of its target.
using Extractor = std::function<Tensor(const MixtureSample&)>;

// Scores every sample against target_clean_ch1; the baseline is channel 1 of
// the mixture. `workers` > 1 evaluates in parallel with identical results.
EvalReport Evaluate(std::span<const MixtureSample> dataset, const Extractor& extract,
                    int workers = 1);

}  // namespace cdtse
