#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cdtse/cd.h"
#include "cdtse/tensor.h"
#include "json.hpp"

namespace cdtse {

// How the second channel's representation enters the mask estimator.
enum class Combination { kSingleChannel, kParaEnc, kCdOld, kCdParaA, kCdParaB };

std::string_view ToString(Combination combination);
Combination ParseCombination(std::string_view name);

struct ModelConfig {
  int n_filters = 64;       // N, encoder output dimension
  int kernel_size = 16;     // L
  int encoder_stride = 8;
  int tcn_blocks = 4;       // B, dilations 1, 2, ..., 2^(B-1)
  int tcn_repeats = 2;      // R
  int tcn_channels = 64;    // hidden width inside each block
  int tcn_kernel = 3;
  CdVariant cd_variant = CdVariant::kNone;
  Combination combination = Combination::kSingleChannel;
  bool adapt_w2 = false;    // speaker adaptation on the second-channel path
  bool tied_encoders = false;
  bool detach_similarity = false;
  std::uint64_t seed = 1;

  // Throws std::invalid_argument naming the first violated constraint.
  void Validate() const;
  bool UsesSecondChannel() const { return combination != Combination::kSingleChannel; }
  bool UsesCd() const {
    return combination == Combination::kCdOld || combination == Combination::kCdParaA ||
           combination == Combination::kCdParaB;
  }
};

void to_json(nlohmann::ordered_json& j, const ModelConfig& c);
// Rejects unknown keys.
void from_json(const nlohmann::ordered_json& j, ModelConfig& c);

struct SpeakerEmbedding {
  Tensor values;  // N x 1
};

// Ordered, uniquely named learnable tensors.
class ModelParams {
 public:
  void Add(std::string name, Tensor value);
  bool Has(std::string_view name) const;
  const Tensor& Get(std::string_view name) const;
  Tensor& Get(std::string_view name);

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  std::size_t ParameterCount() const;

  // Deep copy with fresh gradient buffers.
  ModelParams Clone() const;
  void SetRequiresGrad(bool value);
  void ZeroGrad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Uniform(-k, k) with k = 1/sqrt(fan_in); norm gains 1, biases 0, PReLU 0.25.
ModelParams InitParams(const ModelConfig& config);

// ReLU(conv1d(waveform)) with the named encoder's kernels.
EncoderRepresentation Encode(Graph& g, const ModelConfig& config,
                             const ModelParams& params, const Tensor& waveform,
                             std::string_view encoder, int channel);

// Auxiliary encoder -> one conv block -> mean over time.
SpeakerEmbedding SpeakerEmbed(Graph& g, const ModelConfig& config,
                              const ModelParams& params, const Tensor& enrollment);

// output[j, t] = h[j, t] * e_j
Tensor ScalingAdapt(Graph& g, const Tensor& h, const SpeakerEmbedding& e);

// mixture: 2 x samples (1 x samples is accepted for the single-channel
// system), enrollment: 1 x samples. Returns 1 x samples.
Tensor Forward(Graph& g, const ModelConfig& config, const ModelParams& params,
               const Tensor& mixture, const Tensor& enrollment);

// Single-file checkpoint: 8-byte magic, little-endian u64 header length, JSON
// header {config, params: [{name, shape, offset}]}, then raw little-endian
// float64 data in manifest order. Offsets are relative to the data section.
void SaveCheckpoint(const std::filesystem::path& path, const ModelConfig& config,
                    const ModelParams& params);
std::pair<ModelConfig, ModelParams> LoadCheckpoint(const std::filesystem::path& path);

}  // namespace cdtse
