#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cdtse {

struct WavData {
  int sample_rate = 8000;
  int channels = 1;
  std::vector<std::int16_t> samples;  // interleaved
};

// 16-bit PCM only. Unknown chunks are skipped.
WavData ReadWav(const std::filesystem::path& path);
void WriteWav(const std::filesystem::path& path, int sample_rate,
              std::span<const std::int16_t> mono);

// q / 32768
std::vector<double> PcmToDouble(std::span<const std::int16_t> pcm);
// round(x * 32768), saturating.
std::vector<std::int16_t> DoubleToPcm(std::span<const double> x);

// Reads a mono 8 kHz file as doubles in [-1, 1).
std::vector<double> ReadMono(const std::filesystem::path& path, int expected_rate = 8000);

}  // namespace cdtse
