#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdtse/tensor.h"
#include "json.hpp"

namespace cdtse {

enum class Gender { kFemale, kMale };
enum class Condition { kFF, kMM, kFM };

std::string_view ToString(Gender gender);
std::string_view ToString(Condition condition);
Condition ParseCondition(std::string_view name);
Condition ConditionOf(Gender a, Gender b);

inline constexpr double kFemaleF0Lo = 160.0;
inline constexpr double kFemaleF0Hi = 300.0;
inline constexpr double kMaleF0Lo = 80.0;
inline constexpr double kMaleF0Hi = 160.0;

struct SyntheticSpeaker {
  int speaker_id = 0;
  Gender gender = Gender::kFemale;
  double f0_lo = 0.0;  // Hz
  double f0_hi = 0.0;
  std::array<double, 3> formants{};  // Hz
  std::uint64_t seed = 0;
};

struct SplitCounts {
  int ff = 0;
  int mm = 0;
  int fm = 0;
  int total() const { return ff + mm + fm; }
};

struct SimConfig {
  int sample_rate = 8000;
  int utterance_samples = 16000;
  int enrollment_samples = 16000;
  double sir_lo_db = -2.5;
  double sir_hi_db = 2.5;
  double delay_lo = 0.0;  // inter-channel delay, fractional samples
  double delay_hi = 2.0;
  double gain_lo = 0.7;
  double gain_hi = 1.0;
  double t60_lo = 0.2;  // seconds
  double t60_hi = 0.6;
  int speakers_per_gender = 16;
  SplitCounts train{128, 128, 256};
  SplitCounts val{32, 32, 64};
  SplitCounts test{24, 24, 48};
  std::uint64_t seed = 1;

  void Validate() const;
  const SplitCounts& Counts(std::string_view split) const;
};

void to_json(nlohmann::ordered_json& j, const SimConfig& c);
void from_json(const nlohmann::ordered_json& j, SimConfig& c);

struct MixtureSample {
  std::string utt_id;
  Condition condition = Condition::kFM;
  int target_speaker_id = 0;
  int interferer_speaker_id = 0;
  Tensor mixture;               // 2 x samples
  Tensor target_clean_ch1;      // reverberant target image on channel 1
  Tensor interferer_clean_ch1;  // reverberant interferer image on channel 1
  Tensor target_ch2;            // images on channel 2
  Tensor interferer_ch2;
  Tensor enrollment;  // 1 x enrollment_samples, anechoic
  double t60 = 0.0;
  std::array<double, 2> delays{};  // target, interferer
  std::array<double, 2> gains{};
  double sir_db = 0.0;
};

// 64-bit mix of (seed, stream...) used for every derived RNG stream.
std::uint64_t DeriveSeed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t DeriveSeed(std::uint64_t seed, std::string_view stream);

// speakers_per_gender F speakers (ids 0..n-1) then the same number of M.
std::vector<SyntheticSpeaker> MakeSpeakerPool(const SimConfig& config);

// Unit-RMS harmonic source with the speaker's pitch range and formants.
Tensor GenSource(const SyntheticSpeaker& speaker, std::size_t length, std::uint64_t seed,
                 int sample_rate = 8000);

// 1 at lag 0 plus a decaying noise tail reaching -60 dB energy at t60.
std::vector<double> MakeRir(double t60, std::uint64_t seed, int sample_rate = 8000);
// dry convolved with MakeRir(t60, seed), truncated to the input length.
Tensor Reverberate(const Tensor& dry, double t60, std::uint64_t seed, int sample_rate = 8000);
// Full linear convolution truncated to a.size() (FFT based).
std::vector<double> ConvolveTruncated(std::span<const double> a, std::span<const double> h);

// Windowed-sinc (17 taps) fractional delay followed by a gain.
Tensor SecondChannel(const Tensor& ch1, double delay, double gain);

MixtureSample MakeMixture(const SimConfig& config, const SyntheticSpeaker& target,
                          const SyntheticSpeaker& interferer, std::uint64_t seed,
                          std::string utt_id);

// Writes {out}/{split}.jsonl and {out}/{split}/{utt_id}_{role}_{ch}.wav for
// the train, val and test splits.
void BuildDataset(const SimConfig& config, const std::filesystem::path& out);
// Generates one split in memory (same content BuildDataset writes).
std::vector<MixtureSample> GenerateSplit(const SimConfig& config, std::string_view split);

// Reads a split written by BuildDataset. Throws std::runtime_error on a
// missing file or a manifest/audio inconsistency. Without `load_images` only
// the mixture, target_clean_ch1 and enrollment are read.
std::vector<MixtureSample> LoadSplit(const std::filesystem::path& dir, std::string_view split,
                                     bool load_images = false);

inline constexpr std::string_view kSplits[] = {"train", "val", "test"};

}  // namespace cdtse
