#include "cdtse/wav.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

namespace cdtse {

namespace {

std::uint32_t U32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t U16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

void Put32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void Put16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

[[noreturn]] void Bad(const std::filesystem::path& path, const std::string& what) {
  throw std::runtime_error("wav " + path.string() + ": " + what);
}

}  // namespace

WavData ReadWav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) Bad(path, "cannot open");
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0) {
    Bad(path, "not a RIFF/WAVE file");
  }
  WavData wav;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t size = U32(p + pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) Bad(path, "truncated chunk");
    if (std::memcmp(p + pos, "fmt ", 4) == 0) {
      if (size < 16) Bad(path, "short fmt chunk");
      const std::uint16_t format = U16(p + body);
      wav.channels = U16(p + body + 2);
      wav.sample_rate = static_cast<int>(U32(p + body + 4));
      const std::uint16_t bits = U16(p + body + 14);
      if (format != 1 || bits != 16) Bad(path, "only 16-bit PCM is supported");
      if (wav.channels < 1) Bad(path, "no channels");
      have_fmt = true;
    } else if (std::memcmp(p + pos, "data", 4) == 0) {
      if (!have_fmt) Bad(path, "data chunk before fmt chunk");
      wav.samples.resize(size / 2);
      for (std::size_t i = 0; i < wav.samples.size(); ++i) {
        wav.samples[i] = static_cast<std::int16_t>(U16(p + body + 2 * i));
      }
      return wav;
    }
    pos = body + size + (size & 1);
  }
  Bad(path, "no data chunk");
}

void WriteWav(const std::filesystem::path& path, int sample_rate,
              std::span<const std::int16_t> mono) {
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(mono.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  Put32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  Put32(out, 16);
  Put16(out, 1);
  Put16(out, 1);
  Put32(out, static_cast<std::uint32_t>(sample_rate));
  Put32(out, static_cast<std::uint32_t>(sample_rate * 2));
  Put16(out, 2);
  Put16(out, 16);
  out += "data";
  Put32(out, data_bytes);
  for (std::int16_t s : mono) Put16(out, static_cast<std::uint16_t>(s));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) Bad(path, "cannot open for writing");
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) Bad(path, "write failed");
}

std::vector<double> PcmToDouble(std::span<const std::int16_t> pcm) {
  std::vector<double> out(pcm.size());
  for (std::size_t i = 0; i < pcm.size(); ++i) out[i] = pcm[i] / 32768.0;
  return out;
}

std::vector<std::int16_t> DoubleToPcm(std::span<const double> x) {
  std::vector<std::int16_t> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double q = std::nearbyint(x[i] * 32768.0);
    out[i] = static_cast<std::int16_t>(std::clamp(q, -32768.0, 32767.0));
  }
  return out;
}

std::vector<double> ReadMono(const std::filesystem::path& path, int expected_rate) {
  const WavData wav = ReadWav(path);
  if (wav.channels != 1) Bad(path, "expected mono, got " + std::to_string(wav.channels) + " channels");
  if (wav.sample_rate != expected_rate) {
    Bad(path, "expected " + std::to_string(expected_rate) + " Hz, got " +
                  std::to_string(wav.sample_rate));
  }
  return PcmToDouble(wav.samples);
}

}  // namespace cdtse
