#include "cdtse/sim.h"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "cdtse/wav.h"

namespace cdtse {

namespace {

constexpr double kTailAmplitude = 0.05;
constexpr double kPeakLevel = 0.9;
constexpr int kSincHalfTaps = 8;        // 17 taps
constexpr double kSincHalfWindow = 9.0;  // Hann half-width
constexpr double kFormantBandwidth = 150.0;
constexpr double kHarmonicCeiling = 3800.0;

std::uint64_t SplitMix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double Uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Tensor RowTensor(std::vector<double> v) { return Tensor::Row(std::move(v)); }

std::vector<double> Values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double Energy(std::span<const double> x) {
  double e = 0.0;
  for (double v : x) e += v * v;
  return e;
}

double PeakAbs(std::span<const double> x) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  return m;
}

std::vector<double> Quantized(std::span<const double> x) { return PcmToDouble(DoubleToPcm(x)); }

// FFTW's planner is not re-entrant.
std::mutex& PlannerMutex() {
  static std::mutex m;
  return m;
}

std::size_t NextFftSize(std::size_t n) {
  std::size_t size = 1;
  while (size < n) size <<= 1;
  return size;
}

struct SplitSpec {
  std::string_view name;
  const SplitCounts* counts;
};

std::string UttId(std::string_view split, int index) {
  std::ostringstream os;
  os << split << '_';
  os.width(5);
  os.fill('0');
  os << index;
  return os.str();
}

std::string WavName(std::string_view split, const std::string& utt, std::string_view role, int ch) {
  return std::string(split) + "/" + utt + "_" + std::string(role) + "_" + std::to_string(ch) + ".wav";
}

Condition ConditionForIndex(const SplitCounts& counts, int index) {
  if (index < counts.ff) return Condition::kFF;
  if (index < counts.ff + counts.mm) return Condition::kMM;
  return Condition::kFM;
}

// Picks (target, interferer) for a condition from the pool.
std::pair<const SyntheticSpeaker*, const SyntheticSpeaker*> PickPair(
    const std::vector<SyntheticSpeaker>& pool, int per_gender, Condition condition,
    std::mt19937_64& rng) {
  auto pick = [&](Gender g) {
    const int base = g == Gender::kFemale ? 0 : per_gender;
    return base + std::uniform_int_distribution<int>(0, per_gender - 1)(rng);
  };
  Gender gt = Gender::kFemale;
  Gender gi = Gender::kFemale;
  if (condition == Condition::kMM) {
    gt = gi = Gender::kMale;
  } else if (condition == Condition::kFM) {
    gt = std::bernoulli_distribution(0.5)(rng) ? Gender::kFemale : Gender::kMale;
    gi = gt == Gender::kFemale ? Gender::kMale : Gender::kFemale;
  }
  const int t = pick(gt);
  int i = pick(gi);
  while (i == t) i = pick(gi);
  return {&pool[static_cast<std::size_t>(t)], &pool[static_cast<std::size_t>(i)]};
}

MixtureSample GenerateUtterance(const SimConfig& config, const std::vector<SyntheticSpeaker>& pool,
                                std::string_view split, const SplitCounts& counts, int index) {
  const std::uint64_t seed = DeriveSeed(DeriveSeed(config.seed, split), static_cast<std::uint64_t>(index));
  std::mt19937_64 rng(DeriveSeed(seed, "pair"));
  const Condition condition = ConditionForIndex(counts, index);
  const auto [target, interferer] = PickPair(pool, config.speakers_per_gender, condition, rng);
  return MakeMixture(config, *target, *interferer, seed, UttId(split, index));
}

}  // namespace

std::string_view ToString(Gender gender) { return gender == Gender::kFemale ? "F" : "M"; }

std::string_view ToString(Condition condition) {
  switch (condition) {
    case Condition::kFF: return "FF";
    case Condition::kMM: return "MM";
    case Condition::kFM: return "FM";
  }
  return "FM";
}

Condition ParseCondition(std::string_view name) {
  if (name == "FF") return Condition::kFF;
  if (name == "MM") return Condition::kMM;
  if (name == "FM" || name == "MF") return Condition::kFM;
  throw std::invalid_argument("unknown condition '" + std::string(name) + "'");
}

Condition ConditionOf(Gender a, Gender b) {
  if (a != b) return Condition::kFM;
  return a == Gender::kFemale ? Condition::kFF : Condition::kMM;
}

// ---- config ----------------------------------------------------------------

void SimConfig::Validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("sim." + what); };
  if (sample_rate != 8000) fail("sample_rate must be 8000");
  if (utterance_samples < 64) fail("utterance_samples must be >= 64");
  if (enrollment_samples < 64) fail("enrollment_samples must be >= 64");
  if (!(sir_lo_db <= sir_hi_db)) fail("sir range is empty");
  if (!(delay_lo >= 0.0 && delay_lo <= delay_hi && delay_hi <= 2.0)) {
    fail("delay range must satisfy 0 <= lo <= hi <= 2");
  }
  if (!(gain_lo > 0.0 && gain_lo <= gain_hi && gain_hi <= 1.0)) {
    fail("gain range must satisfy 0 < lo <= hi <= 1");
  }
  if (!(t60_lo >= 0.0 && t60_lo <= t60_hi && t60_hi <= 0.6)) {
    fail("t60 range must satisfy 0 <= lo <= hi <= 0.6");
  }
  if (speakers_per_gender < 2) fail("speakers_per_gender must be >= 2");
  for (const SplitCounts* c : {&train, &val, &test}) {
    if (c->ff < 0 || c->mm < 0 || c->fm < 0) fail("split counts must be >= 0");
  }
}

const SplitCounts& SimConfig::Counts(std::string_view split) const {
  if (split == "train") return train;
  if (split == "val") return val;
  if (split == "test") return test;
  throw std::invalid_argument("unknown split '" + std::string(split) + "'");
}

namespace {

nlohmann::ordered_json CountsJson(const SplitCounts& c) {
  return {{"ff", c.ff}, {"mm", c.mm}, {"fm", c.fm}};
}

SplitCounts CountsFromJson(const nlohmann::ordered_json& j, SplitCounts c, const std::string& name) {
  if (!j.is_object()) throw std::invalid_argument("sim." + name + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "ff") c.ff = value.get<int>();
    else if (key == "mm") c.mm = value.get<int>();
    else if (key == "fm") c.fm = value.get<int>();
    else throw std::invalid_argument("unknown sim config key '" + name + "." + key + "'");
  }
  return c;
}

}  // namespace

void to_json(nlohmann::ordered_json& j, const SimConfig& c) {
  j = nlohmann::ordered_json{
      {"sample_rate", c.sample_rate},
      {"utterance_samples", c.utterance_samples},
      {"enrollment_samples", c.enrollment_samples},
      {"sir_lo_db", c.sir_lo_db},
      {"sir_hi_db", c.sir_hi_db},
      {"delay_lo", c.delay_lo},
      {"delay_hi", c.delay_hi},
      {"gain_lo", c.gain_lo},
      {"gain_hi", c.gain_hi},
      {"t60_lo", c.t60_lo},
      {"t60_hi", c.t60_hi},
      {"speakers_per_gender", c.speakers_per_gender},
      {"train", CountsJson(c.train)},
      {"val", CountsJson(c.val)},
      {"test", CountsJson(c.test)},
      {"seed", c.seed},
  };
}

void from_json(const nlohmann::ordered_json& j, SimConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("sim config must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "sample_rate") c.sample_rate = value.get<int>();
    else if (key == "utterance_samples") c.utterance_samples = value.get<int>();
    else if (key == "enrollment_samples") c.enrollment_samples = value.get<int>();
    else if (key == "sir_lo_db") c.sir_lo_db = value.get<double>();
    else if (key == "sir_hi_db") c.sir_hi_db = value.get<double>();
    else if (key == "delay_lo") c.delay_lo = value.get<double>();
    else if (key == "delay_hi") c.delay_hi = value.get<double>();
    else if (key == "gain_lo") c.gain_lo = value.get<double>();
    else if (key == "gain_hi") c.gain_hi = value.get<double>();
    else if (key == "t60_lo") c.t60_lo = value.get<double>();
    else if (key == "t60_hi") c.t60_hi = value.get<double>();
    else if (key == "speakers_per_gender") c.speakers_per_gender = value.get<int>();
    else if (key == "train") c.train = CountsFromJson(value, c.train, key);
    else if (key == "val") c.val = CountsFromJson(value, c.val, key);
    else if (key == "test") c.test = CountsFromJson(value, c.test, key);
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else throw std::invalid_argument("unknown sim config key '" + key + "'");
  }
}

// ---- generators ------------------------------------------------------------

std::uint64_t DeriveSeed(std::uint64_t seed, std::uint64_t stream) {
  return SplitMix64(SplitMix64(seed) ^ SplitMix64(stream + 0x632BE59BD9B4E019ull));
}

std::uint64_t DeriveSeed(std::uint64_t seed, std::string_view stream) {
  std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return DeriveSeed(seed, h);
}

std::vector<SyntheticSpeaker> MakeSpeakerPool(const SimConfig& config) {
  std::vector<SyntheticSpeaker> pool;
  const int n = config.speakers_per_gender;
  for (int id = 0; id < 2 * n; ++id) {
    SyntheticSpeaker s;
    s.speaker_id = id;
    s.gender = id < n ? Gender::kFemale : Gender::kMale;
    s.seed = DeriveSeed(config.seed, "speaker/" + std::to_string(id));
    std::mt19937_64 rng(s.seed);
    const double lo = s.gender == Gender::kFemale ? kFemaleF0Lo : kMaleF0Lo;
    const double hi = s.gender == Gender::kFemale ? kFemaleF0Hi : kMaleF0Hi;
    // Log-uniform centre, +-7% range, kept inside the gender band.
    const double centre = std::exp(Uniform(rng, std::log(lo * 1.08), std::log(hi / 1.08)));
    s.f0_lo = centre / 1.07;
    s.f0_hi = centre * 1.07;
    s.formants = {Uniform(rng, 300.0, 850.0), Uniform(rng, 900.0, 2000.0),
                  Uniform(rng, 2100.0, 3300.0)};
    pool.push_back(s);
  }
  return pool;
}

Tensor GenSource(const SyntheticSpeaker& speaker, std::size_t length, std::uint64_t seed,
                 int sample_rate) {
  if (length < 1) throw std::invalid_argument("gen_source: length must be >= 1");
  std::mt19937_64 rng(DeriveSeed(seed, speaker.seed));
  const double fs = static_cast<double>(sample_rate);
  const double two_pi = 2.0 * std::numbers::pi;
  const double mid = std::sqrt(speaker.f0_lo * speaker.f0_hi);
  const double log_half_range = 0.5 * std::log(speaker.f0_hi / speaker.f0_lo);

  // Pitch contour: slow drift plus faster jitter, |excursion| <= 1.
  const double drift_rate = Uniform(rng, 0.3, 1.5), drift_phase = Uniform(rng, 0.0, two_pi);
  const double jitter_rate = Uniform(rng, 2.0, 5.0), jitter_phase = Uniform(rng, 0.0, two_pi);
  const double syllable_rate = Uniform(rng, 3.0, 6.0), syllable_phase = Uniform(rng, 0.0, two_pi);

  const int harmonics = std::max(1, static_cast<int>(kHarmonicCeiling / speaker.f0_hi));
  std::vector<double> amplitude(static_cast<std::size_t>(harmonics));
  std::vector<double> phase(static_cast<std::size_t>(harmonics));
  for (int h = 1; h <= harmonics; ++h) {
    const double f = h * mid;
    double formant = 0.0;
    for (double fc : speaker.formants) {
      const double z = (f - fc) / kFormantBandwidth;
      formant = std::max(formant, std::exp(-z * z));
    }
    amplitude[static_cast<std::size_t>(h - 1)] = (1.0 + 2.0 * formant) / (h * h);
    phase[static_cast<std::size_t>(h - 1)] = Uniform(rng, 0.0, two_pi);
  }

  std::vector<double> out(length);
  double base_phase = 0.0;
  for (std::size_t n = 0; n < length; ++n) {
    const double t = static_cast<double>(n) / fs;
    const double excursion = 0.7 * std::sin(two_pi * drift_rate * t + drift_phase) +
                             0.3 * std::sin(two_pi * jitter_rate * t + jitter_phase);
    const double f0 = mid * std::exp(log_half_range * excursion);
    double v = 0.0;
    for (int h = 0; h < harmonics; ++h) {
      v += amplitude[static_cast<std::size_t>(h)] *
           std::sin((h + 1) * base_phase + phase[static_cast<std::size_t>(h)]);
    }
    const double syl = 0.5 - 0.5 * std::cos(two_pi * syllable_rate * t + syllable_phase);
    out[n] = v * (0.15 + 0.85 * syl * syl);
    base_phase = std::fmod(base_phase + two_pi * f0 / fs, two_pi);
  }
  const double rms = std::sqrt(Energy(out) / static_cast<double>(length));
  for (double& v : out) v /= rms;
  return RowTensor(std::move(out));
}

std::vector<double> MakeRir(double t60, std::uint64_t seed, int sample_rate) {
  if (!(t60 >= 0.0 && t60 <= 0.6)) throw std::invalid_argument("reverberate: t60 must be in [0, 0.6]");
  const double decay_samples = t60 * sample_rate;
  const auto length = static_cast<std::size_t>(std::floor(decay_samples)) + 1;
  std::vector<double> h(length, 0.0);
  h[0] = 1.0;
  std::mt19937_64 rng(DeriveSeed(seed, "rir"));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t n = 1; n < length; ++n) {
    // Energy falls by 60 dB over t60, so amplitude by 10^-3.
    h[n] = kTailAmplitude * noise(rng) * std::pow(10.0, -3.0 * static_cast<double>(n) / decay_samples);
  }
  return h;
}

std::vector<double> ConvolveTruncated(std::span<const double> a, std::span<const double> h) {
  if (a.empty() || h.empty()) return std::vector<double>(a.size(), 0.0);
  const std::size_t n = NextFftSize(a.size() + h.size() - 1);
  const std::size_t bins = n / 2 + 1;
  double* ta = fftw_alloc_real(n);
  double* th = fftw_alloc_real(n);
  fftw_complex* fa = fftw_alloc_complex(bins);
  fftw_complex* fh = fftw_alloc_complex(bins);
  fftw_plan pa, ph, inv;
  {
    std::lock_guard<std::mutex> lock(PlannerMutex());
    pa = fftw_plan_dft_r2c_1d(static_cast<int>(n), ta, fa, FFTW_ESTIMATE);
    ph = fftw_plan_dft_r2c_1d(static_cast<int>(n), th, fh, FFTW_ESTIMATE);
    inv = fftw_plan_dft_c2r_1d(static_cast<int>(n), fa, ta, FFTW_ESTIMATE);
  }
  std::fill(ta, ta + n, 0.0);
  std::fill(th, th + n, 0.0);
  std::copy(a.begin(), a.end(), ta);
  std::copy(h.begin(), h.end(), th);
  fftw_execute(pa);
  fftw_execute(ph);
  for (std::size_t k = 0; k < bins; ++k) {
    const double re = fa[k][0] * fh[k][0] - fa[k][1] * fh[k][1];
    const double im = fa[k][0] * fh[k][1] + fa[k][1] * fh[k][0];
    fa[k][0] = re;
    fa[k][1] = im;
  }
  fftw_execute(inv);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = ta[i] / static_cast<double>(n);
  {
    std::lock_guard<std::mutex> lock(PlannerMutex());
    fftw_destroy_plan(pa);
    fftw_destroy_plan(ph);
    fftw_destroy_plan(inv);
  }
  fftw_free(ta);
  fftw_free(th);
  fftw_free(fa);
  fftw_free(fh);
  return out;
}

Tensor Reverberate(const Tensor& dry, double t60, std::uint64_t seed, int sample_rate) {
  const std::vector<double> rir = MakeRir(t60, seed, sample_rate);
  if (rir.size() == 1) return dry.Clone();
  return RowTensor(ConvolveTruncated(dry.data(), rir));
}

Tensor SecondChannel(const Tensor& ch1, double delay, double gain) {
  if (!(delay >= 0.0 && delay <= 2.0)) throw std::invalid_argument("second_channel: delay must be in [0, 2]");
  if (!(gain > 0.0 && gain <= 1.0)) throw std::invalid_argument("second_channel: gain must be in (0, 1]");
  const long centre = std::lround(delay);
  double taps[2 * kSincHalfTaps + 1];
  for (int j = -kSincHalfTaps; j <= kSincHalfTaps; ++j) {
    const double x = static_cast<double>(centre + j) - delay;
    double sinc = 1.0;
    if (x != 0.0) {
      sinc = x == std::round(x) ? 0.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
    }
    const double window =
        std::abs(x) < kSincHalfWindow ? 0.5 * (1.0 + std::cos(std::numbers::pi * x / kSincHalfWindow)) : 0.0;
    taps[j + kSincHalfTaps] = sinc * window;
  }
  const auto in = ch1.data();
  const long n = static_cast<long>(in.size());
  std::vector<double> out(in.size(), 0.0);
  for (long t = 0; t < n; ++t) {
    double acc = 0.0;
    for (int j = -kSincHalfTaps; j <= kSincHalfTaps; ++j) {
      const long src = t - (centre + j);
      if (src >= 0 && src < n) acc += taps[j + kSincHalfTaps] * in[static_cast<std::size_t>(src)];
    }
    out[static_cast<std::size_t>(t)] = gain * acc;
  }
  return Tensor(ch1.shape(), std::move(out));
}

MixtureSample MakeMixture(const SimConfig& config, const SyntheticSpeaker& target,
                          const SyntheticSpeaker& interferer, std::uint64_t seed,
                          std::string utt_id) {
  if (target.speaker_id == interferer.speaker_id) {
    throw std::invalid_argument("make_mixture: target and interferer are the same speaker (" +
                                std::to_string(target.speaker_id) + ")");
  }
  const auto samples = static_cast<std::size_t>(config.utterance_samples);
  std::mt19937_64 rng(DeriveSeed(seed, "room"));
  MixtureSample m;
  m.utt_id = std::move(utt_id);
  m.condition = ConditionOf(target.gender, interferer.gender);
  m.target_speaker_id = target.speaker_id;
  m.interferer_speaker_id = interferer.speaker_id;
  m.t60 = Uniform(rng, config.t60_lo, config.t60_hi);
  m.sir_db = Uniform(rng, config.sir_lo_db, config.sir_hi_db);
  for (int s = 0; s < 2; ++s) {
    m.delays[s] = Uniform(rng, config.delay_lo, config.delay_hi);
    m.gains[s] = Uniform(rng, config.gain_lo, config.gain_hi);
  }

  const Tensor dry_t = GenSource(target, samples, DeriveSeed(seed, "target"), config.sample_rate);
  const Tensor dry_i = GenSource(interferer, samples, DeriveSeed(seed, "interferer"), config.sample_rate);
  const Tensor t1 = Reverberate(dry_t, m.t60, DeriveSeed(seed, "rir/target"), config.sample_rate);
  const Tensor i1 = Reverberate(dry_i, m.t60, DeriveSeed(seed, "rir/interferer"), config.sample_rate);
  const Tensor t2 = SecondChannel(t1, m.delays[0], m.gains[0]);
  const Tensor i2 = SecondChannel(i1, m.delays[1], m.gains[1]);

  // Interferer level from the channel-1 energy ratio, then one common gain so
  // that no sum can exceed the peak level.
  const double k = std::sqrt(Energy(t1.data()) / (Energy(i1.data()) * std::pow(10.0, m.sir_db / 10.0)));
  const double peak = std::max(PeakAbs(t1.data()), PeakAbs(t2.data())) +
                      k * std::max(PeakAbs(i1.data()), PeakAbs(i2.data()));
  const double scale = kPeakLevel / peak;
  auto finish = [&](const Tensor& x, double gain) {
    std::vector<double> v = Values(x);
    for (double& s : v) s *= gain * scale;
    return Quantized(v);
  };
  const std::vector<double> qt1 = finish(t1, 1.0), qt2 = finish(t2, 1.0);
  const std::vector<double> qi1 = finish(i1, k), qi2 = finish(i2, k);
  std::vector<double> mix(2 * samples);
  for (std::size_t n = 0; n < samples; ++n) {
    mix[n] = qt1[n] + qi1[n];
    mix[samples + n] = qt2[n] + qi2[n];
  }
  m.mixture = Tensor({2, samples}, std::move(mix));
  m.target_clean_ch1 = RowTensor(qt1);
  m.target_ch2 = RowTensor(qt2);
  m.interferer_clean_ch1 = RowTensor(qi1);
  m.interferer_ch2 = RowTensor(qi2);

  std::vector<double> enroll = Values(GenSource(
      target, static_cast<std::size_t>(config.enrollment_samples), DeriveSeed(seed, "enrollment"),
      config.sample_rate));
  const double enroll_scale = kPeakLevel / PeakAbs(enroll);
  for (double& v : enroll) v *= enroll_scale;
  m.enrollment = RowTensor(Quantized(enroll));
  return m;
}

std::vector<MixtureSample> GenerateSplit(const SimConfig& config, std::string_view split) {
  config.Validate();
  const SplitCounts& counts = config.Counts(split);
  const auto pool = MakeSpeakerPool(config);
  std::vector<MixtureSample> out;
  out.reserve(static_cast<std::size_t>(counts.total()));
  for (int i = 0; i < counts.total(); ++i) out.push_back(GenerateUtterance(config, pool, split, counts, i));
  return out;
}

void BuildDataset(const SimConfig& config, const std::filesystem::path& out) {
  config.Validate();
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw std::runtime_error("cannot create " + out.string() + ": " + ec.message());
  const auto pool = MakeSpeakerPool(config);
  for (std::string_view split : kSplits) {
    const SplitCounts& counts = config.Counts(split);
    std::filesystem::create_directories(out / split, ec);
    if (ec) throw std::runtime_error("cannot create " + (out / split).string() + ": " + ec.message());
    std::ofstream manifest(out / (std::string(split) + ".jsonl"), std::ios::binary | std::ios::trunc);
    if (!manifest) throw std::runtime_error("cannot write manifest in " + out.string());
    for (int i = 0; i < counts.total(); ++i) {
      const MixtureSample m = GenerateUtterance(config, pool, split, counts, i);
      const auto samples = static_cast<std::size_t>(config.utterance_samples);
      auto write = [&](const std::string& rel, std::span<const double> x) {
        WriteWav(out / rel, config.sample_rate, DoubleToPcm(x));
        return rel;
      };
      const auto mix = m.mixture.data();
      nlohmann::ordered_json files;
      files["mix"] = {write(WavName(split, m.utt_id, "mix", 1), mix.subspan(0, samples)),
                      write(WavName(split, m.utt_id, "mix", 2), mix.subspan(samples, samples))};
      files["target"] = {write(WavName(split, m.utt_id, "target", 1), m.target_clean_ch1.data()),
                         write(WavName(split, m.utt_id, "target", 2), m.target_ch2.data())};
      files["interf"] = {write(WavName(split, m.utt_id, "interf", 1), m.interferer_clean_ch1.data()),
                         write(WavName(split, m.utt_id, "interf", 2), m.interferer_ch2.data())};
      files["enroll"] = write(WavName(split, m.utt_id, "enroll", 1), m.enrollment.data());
      nlohmann::ordered_json row;
      row["utt_id"] = m.utt_id;
      row["condition"] = std::string(ToString(m.condition));
      row["target_speaker_id"] = m.target_speaker_id;
      row["interferer_speaker_id"] = m.interferer_speaker_id;
      row["samples"] = samples;
      row["enrollment_samples"] = config.enrollment_samples;
      row["t60"] = m.t60;
      row["delays"] = {{"target", m.delays[0]}, {"interferer", m.delays[1]}};
      row["gains"] = {{"target", m.gains[0]}, {"interferer", m.gains[1]}};
      row["sir_db"] = m.sir_db;
      row["files"] = files;
      manifest << row.dump() << '\n';
    }
    if (!manifest) throw std::runtime_error("failed writing manifest for " + std::string(split));
  }
}

std::vector<MixtureSample> LoadSplit(const std::filesystem::path& dir, std::string_view split,
                                     bool load_images) {
  const auto manifest_path = dir / (std::string(split) + ".jsonl");
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("cannot open manifest " + manifest_path.string());
  std::vector<MixtureSample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = manifest_path.string() + ":" + std::to_string(line_no);
    try {
      const auto row = nlohmann::ordered_json::parse(line);
      MixtureSample m;
      m.utt_id = row.at("utt_id").get<std::string>();
      m.condition = ParseCondition(row.at("condition").get<std::string>());
      m.target_speaker_id = row.at("target_speaker_id").get<int>();
      m.interferer_speaker_id = row.at("interferer_speaker_id").get<int>();
      m.t60 = row.at("t60").get<double>();
      m.sir_db = row.at("sir_db").get<double>();
      m.delays = {row.at("delays").at("target").get<double>(), row.at("delays").at("interferer").get<double>()};
      m.gains = {row.at("gains").at("target").get<double>(), row.at("gains").at("interferer").get<double>()};
      const auto samples = row.at("samples").get<std::size_t>();
      const auto& files = row.at("files");
      auto read = [&](const nlohmann::ordered_json& rel, std::size_t expected) {
        std::vector<double> x = ReadMono(dir / rel.get<std::string>());
        if (x.size() != expected) {
          throw std::runtime_error(rel.get<std::string>() + " has " + std::to_string(x.size()) +
                                   " samples, manifest says " + std::to_string(expected));
        }
        return x;
      };
      std::vector<double> mix = read(files.at("mix").at(0), samples);
      const std::vector<double> mix2 = read(files.at("mix").at(1), samples);
      mix.insert(mix.end(), mix2.begin(), mix2.end());
      m.mixture = Tensor({2, samples}, std::move(mix));
      m.target_clean_ch1 = RowTensor(read(files.at("target").at(0), samples));
      m.enrollment = RowTensor(read(files.at("enroll"), row.at("enrollment_samples").get<std::size_t>()));
      if (load_images) {
        m.target_ch2 = RowTensor(read(files.at("target").at(1), samples));
        m.interferer_clean_ch1 = RowTensor(read(files.at("interf").at(0), samples));
        m.interferer_ch2 = RowTensor(read(files.at("interf").at(1), samples));
      }
      out.push_back(std::move(m));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(where + ": bad manifest row: " + e.what());
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
  }
  if (out.empty()) throw std::runtime_error("manifest " + manifest_path.string() + " is empty");
  return out;
}

}  // namespace cdtse
