#include "cdtse/model.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace cdtse {

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'D', 'T', 'S', 'E', 'C', 'K', '1'};

std::string BlockPrefix(int index) { return "tcn." + std::to_string(index) + "."; }

// Dilation of residual block `index` within its repeat.
int BlockDilation(const ModelConfig& c, int index) { return 1 << (index % c.tcn_blocks); }

void AddUniform(ModelParams& p, std::mt19937_64& rng, std::string name, Shape shape,
                double fan_in) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  const double k = 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> dist(-k, k);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  p.Add(std::move(name), Tensor(std::move(shape), std::move(v), true));
}

void AddConstant(ModelParams& p, std::string name, Shape shape, double value) {
  Tensor t = Tensor::Filled(std::move(shape), value);
  t.set_requires_grad(true);
  p.Add(std::move(name), t);
}

void AddBlock(ModelParams& p, std::mt19937_64& rng, const ModelConfig& c,
              const std::string& prefix) {
  const std::size_t n = static_cast<std::size_t>(c.n_filters);
  const std::size_t h = static_cast<std::size_t>(c.tcn_channels);
  const std::size_t k = static_cast<std::size_t>(c.tcn_kernel);
  AddUniform(p, rng, prefix + "conv_in.weight", {h, n, 1}, static_cast<double>(n));
  AddUniform(p, rng, prefix + "conv_in.bias", {h, 1}, static_cast<double>(n));
  AddConstant(p, prefix + "prelu1", {h, 1}, 0.25);
  AddConstant(p, prefix + "norm1.gain", {h, 1}, 1.0);
  AddConstant(p, prefix + "norm1.bias", {h, 1}, 0.0);
  AddUniform(p, rng, prefix + "dconv.weight", {h, k}, static_cast<double>(k));
  AddUniform(p, rng, prefix + "dconv.bias", {h, 1}, static_cast<double>(k));
  AddConstant(p, prefix + "prelu2", {h, 1}, 0.25);
  AddConstant(p, prefix + "norm2.gain", {h, 1}, 1.0);
  AddConstant(p, prefix + "norm2.bias", {h, 1}, 0.0);
  AddUniform(p, rng, prefix + "conv_out.weight", {n, h, 1}, static_cast<double>(h));
  AddUniform(p, rng, prefix + "conv_out.bias", {n, 1}, static_cast<double>(h));
}

Tensor ConvBlock(Graph& g, const ModelConfig& c, const ModelParams& p,
                 const std::string& prefix, const Tensor& x, int dilation) {
  Tensor h = Add(g, Conv1d(g, x, p.Get(prefix + "conv_in.weight")),
                 p.Get(prefix + "conv_in.bias"));
  h = PRelu(g, h, p.Get(prefix + "prelu1"));
  h = GlobalLayerNorm(g, h, p.Get(prefix + "norm1.gain"), p.Get(prefix + "norm1.bias"));
  const int pad = dilation * (c.tcn_kernel - 1) / 2;
  h = Add(g, DepthwiseConv1d(g, h, p.Get(prefix + "dconv.weight"), dilation, pad),
          p.Get(prefix + "dconv.bias"));
  h = PRelu(g, h, p.Get(prefix + "prelu2"));
  h = GlobalLayerNorm(g, h, p.Get(prefix + "norm2.gain"), p.Get(prefix + "norm2.bias"));
  const Tensor y = Add(g, Conv1d(g, h, p.Get(prefix + "conv_out.weight")),
                       p.Get(prefix + "conv_out.bias"));
  return Add(g, x, y);
}

// 2N -> N pointwise fusion of [h; W_cd].
Tensor Fuse(Graph& g, const ModelParams& p, const Tensor& h, const Tensor& cd) {
  return Add(g, Conv1d(g, ConcatRows(g, h, cd), p.Get("fuse.weight")), p.Get("fuse.bias"));
}

std::string SecondEncoder(const ModelConfig& c) {
  return c.tied_encoders ? "encoder1" : "encoder2";
}

template <typename T>
void WriteRaw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

std::uint64_t ToLittle(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0x00000000000000FFull) << 56) | ((v & 0x000000000000FF00ull) << 40) |
        ((v & 0x0000000000FF0000ull) << 24) | ((v & 0x00000000FF000000ull) << 8) |
        ((v & 0x000000FF00000000ull) >> 8) | ((v & 0x0000FF0000000000ull) >> 24) |
        ((v & 0x00FF000000000000ull) >> 40) | ((v & 0xFF00000000000000ull) >> 56);
  }
  return v;
}

}  // namespace

// ---- names -----------------------------------------------------------------

std::string_view ToString(Combination combination) {
  switch (combination) {
    case Combination::kSingleChannel: return "single_channel";
    case Combination::kParaEnc: return "para_enc";
    case Combination::kCdOld: return "cd_old";
    case Combination::kCdParaA: return "cd_para_a";
    case Combination::kCdParaB: return "cd_para_b";
  }
  return "single_channel";
}

Combination ParseCombination(std::string_view name) {
  for (Combination c : {Combination::kSingleChannel, Combination::kParaEnc,
                        Combination::kCdOld, Combination::kCdParaA, Combination::kCdParaB}) {
    if (ToString(c) == name) return c;
  }
  throw std::invalid_argument(
      "unknown combination '" + std::string(name) +
      "' (expected single_channel|para_enc|cd_old|cd_para_a|cd_para_b)");
}

// ---- config ----------------------------------------------------------------

void ModelConfig::Validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("model.") + name + " must be >= 1");
  };
  positive(n_filters, "n_filters");
  positive(kernel_size, "kernel_size");
  positive(encoder_stride, "encoder_stride");
  positive(tcn_blocks, "tcn_blocks");
  positive(tcn_repeats, "tcn_repeats");
  positive(tcn_channels, "tcn_channels");
  positive(tcn_kernel, "tcn_kernel");
  if (tcn_kernel % 2 == 0) throw std::invalid_argument("model.tcn_kernel must be odd");
  if (tcn_blocks > 16) throw std::invalid_argument("model.tcn_blocks must be <= 16");
  if (UsesCd() && cd_variant == CdVariant::kNone) {
    throw std::invalid_argument("model.combination " + std::string(ToString(combination)) +
                                " requires cd_variant != none");
  }
}

void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
  j = nlohmann::ordered_json{
      {"n_filters", c.n_filters},
      {"kernel_size", c.kernel_size},
      {"encoder_stride", c.encoder_stride},
      {"tcn_blocks", c.tcn_blocks},
      {"tcn_repeats", c.tcn_repeats},
      {"tcn_channels", c.tcn_channels},
      {"tcn_kernel", c.tcn_kernel},
      {"cd_variant", std::string(ToString(c.cd_variant))},
      {"combination", std::string(ToString(c.combination))},
      {"adapt_w2", c.adapt_w2},
      {"tied_encoders", c.tied_encoders},
      {"detach_similarity", c.detach_similarity},
      {"seed", c.seed},
  };
}

void from_json(const nlohmann::ordered_json& j, ModelConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("model config must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "n_filters") c.n_filters = value.get<int>();
    else if (key == "kernel_size") c.kernel_size = value.get<int>();
    else if (key == "encoder_stride") c.encoder_stride = value.get<int>();
    else if (key == "tcn_blocks") c.tcn_blocks = value.get<int>();
    else if (key == "tcn_repeats") c.tcn_repeats = value.get<int>();
    else if (key == "tcn_channels") c.tcn_channels = value.get<int>();
    else if (key == "tcn_kernel") c.tcn_kernel = value.get<int>();
    else if (key == "cd_variant") c.cd_variant = ParseCdVariant(value.get<std::string>());
    else if (key == "combination") c.combination = ParseCombination(value.get<std::string>());
    else if (key == "adapt_w2") c.adapt_w2 = value.get<bool>();
    else if (key == "tied_encoders") c.tied_encoders = value.get<bool>();
    else if (key == "detach_similarity") c.detach_similarity = value.get<bool>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else throw std::invalid_argument("unknown model config key '" + key + "'");
  }
}

// ---- params ----------------------------------------------------------------

void ModelParams::Add(std::string name, Tensor value) {
  if (Has(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  entries_.emplace_back(std::move(name), std::move(value));
}

bool ModelParams::Has(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return true;
  }
  return false;
}

const Tensor& ModelParams::Get(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::invalid_argument("missing parameter '" + std::string(name) + "'");
}

Tensor& ModelParams::Get(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).Get(name));
}

std::size_t ModelParams::ParameterCount() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

ModelParams ModelParams::Clone() const {
  ModelParams out;
  for (const auto& [name, t] : entries_) {
    out.entries_.emplace_back(name, Tensor(t.shape(), {t.data().begin(), t.data().end()},
                                           t.requires_grad()));
  }
  return out;
}

void ModelParams::SetRequiresGrad(bool value) {
  for (auto& [name, t] : entries_) t.set_requires_grad(value);
}

void ModelParams::ZeroGrad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

ModelParams InitParams(const ModelConfig& c) {
  c.Validate();
  std::mt19937_64 rng(c.seed);
  ModelParams p;
  const std::size_t n = static_cast<std::size_t>(c.n_filters);
  const std::size_t l = static_cast<std::size_t>(c.kernel_size);
  const double enc_fan_in = static_cast<double>(l);
  AddUniform(p, rng, "encoder1.weight", {n, 1, l}, enc_fan_in);
  if (c.UsesSecondChannel() && !c.tied_encoders) {
    AddUniform(p, rng, "encoder2.weight", {n, 1, l}, enc_fan_in);
  }
  AddUniform(p, rng, "aux.encoder.weight", {n, 1, l}, enc_fan_in);
  AddBlock(p, rng, c, "aux.block.");
  AddConstant(p, "in_norm.gain", {n, 1}, 1.0);
  AddConstant(p, "in_norm.bias", {n, 1}, 0.0);
  if (c.combination == Combination::kCdParaA || c.combination == Combination::kCdParaB) {
    AddUniform(p, rng, "fuse.weight", {n, 2 * n, 1}, static_cast<double>(2 * n));
    AddUniform(p, rng, "fuse.bias", {n, 1}, static_cast<double>(2 * n));
  }
  for (int b = 0; b < c.tcn_blocks * c.tcn_repeats; ++b) AddBlock(p, rng, c, BlockPrefix(b));
  AddConstant(p, "mask.prelu", {n, 1}, 0.25);
  AddUniform(p, rng, "mask.weight", {n, n, 1}, static_cast<double>(n));
  AddUniform(p, rng, "mask.bias", {n, 1}, static_cast<double>(n));
  // Each output sample receives about N * L / stride contributions.
  AddUniform(p, rng, "decoder.weight", {n, 1, l},
             static_cast<double>(n * l) / static_cast<double>(c.encoder_stride));
  return p;
}

// ---- forward ---------------------------------------------------------------

EncoderRepresentation Encode(Graph& g, const ModelConfig& c, const ModelParams& p,
                             const Tensor& waveform, std::string_view encoder,
                             int channel) {
  if (!waveform.defined() || waveform.rank() != 2 || waveform.rows() != 1) {
    throw ShapeError("encode: waveform must be 1 x samples");
  }
  if (waveform.cols() < static_cast<std::size_t>(c.kernel_size)) {
    throw ShapeError("encode: waveform has " + std::to_string(waveform.cols()) +
                     " samples, fewer than the kernel size " +
                     std::to_string(c.kernel_size));
  }
  const Tensor& w = p.Get(std::string(encoder) + ".weight");
  return EncoderRepresentation(Relu(g, Conv1d(g, waveform, w, c.encoder_stride)), channel);
}

SpeakerEmbedding SpeakerEmbed(Graph& g, const ModelConfig& c, const ModelParams& p,
                              const Tensor& enrollment) {
  const EncoderRepresentation enc = Encode(g, c, p, enrollment, "aux.encoder", 0);
  const Tensor h = ConvBlock(g, c, p, "aux.block.", enc.matrix, 1);
  return {MeanOverTime(g, h)};
}

Tensor ScalingAdapt(Graph& g, const Tensor& h, const SpeakerEmbedding& e) {
  if (!e.values.defined() || e.values.rank() != 2 || e.values.cols() != 1 ||
      h.rank() != 2 || e.values.rows() != h.rows()) {
    throw ShapeError("scaling_adapt: embedding must be " +
                     (h.rank() == 2 ? std::to_string(h.rows()) : std::string("N")) +
                     " x 1, got " +
                     (e.values.defined() ? ShapeToString(e.values.shape()) : "undefined"));
  }
  return Mul(g, h, e.values);
}

Tensor Forward(Graph& g, const ModelConfig& c, const ModelParams& p, const Tensor& mixture,
               const Tensor& enrollment) {
  c.Validate();
  if (!mixture.defined() || mixture.rank() != 2) {
    throw ShapeError("forward: mixture must be channels x samples");
  }
  const bool two_channel = c.UsesSecondChannel();
  if (two_channel && mixture.rows() != 2) {
    throw ShapeError("forward: combination " + std::string(ToString(c.combination)) +
                     " needs a 2 x samples mixture, got " + ShapeToString(mixture.shape()));
  }
  if (!two_channel && mixture.rows() < 1) throw ShapeError("forward: empty mixture");
  const std::size_t samples = mixture.cols();

  const Tensor ch1 = mixture.rows() == 1 ? mixture : SelectRow(g, mixture, 0);
  const EncoderRepresentation w1 = Encode(g, c, p, ch1, "encoder1", 1);
  const SpeakerEmbedding e = SpeakerEmbed(g, c, p, enrollment);

  Tensor x = w1.matrix;
  Tensor cd;
  if (two_channel) {
    const EncoderRepresentation w2 =
        Encode(g, c, p, SelectRow(g, mixture, 1), SecondEncoder(c), 2);
    switch (c.combination) {
      case Combination::kParaEnc:
      case Combination::kCdParaA:
      case Combination::kCdParaB: {
        const Tensor second = c.adapt_w2 ? ScalingAdapt(g, w2.matrix, e) : w2.matrix;
        x = Add(g, w1.matrix, second);
        if (c.combination != Combination::kParaEnc) {
          cd = ChannelDecorrelate(g, w1, w2, {c.cd_variant, c.detach_similarity});
        }
        break;
      }
      case Combination::kCdOld: {
        cd = ChannelDecorrelate(g, w1, w2, {c.cd_variant, c.detach_similarity});
        if (c.adapt_w2) cd = ScalingAdapt(g, cd, e);
        x = Add(g, w1.matrix, cd);
        break;
      }
      case Combination::kSingleChannel:
        break;
    }
  }
  if (c.combination == Combination::kCdParaB) x = Fuse(g, p, x, cd);

  Tensor h = GlobalLayerNorm(g, x, p.Get("in_norm.gain"), p.Get("in_norm.bias"));
  const int total_blocks = c.tcn_blocks * c.tcn_repeats;
  for (int b = 0; b < total_blocks; ++b) {
    h = ConvBlock(g, c, p, BlockPrefix(b), h, BlockDilation(c, b));
    if (b == 0) {
      h = ScalingAdapt(g, h, e);
      if (c.combination == Combination::kCdParaA) h = Fuse(g, p, h, cd);
    }
  }
  h = PRelu(g, h, p.Get("mask.prelu"));
  const Tensor mask =
      Sigmoid(g, Add(g, Conv1d(g, h, p.Get("mask.weight")), p.Get("mask.bias")));
  const Tensor masked = Mul(g, mask, w1.matrix);
  const Tensor wave = ConvTranspose1d(g, masked, p.Get("decoder.weight"), c.encoder_stride);
  return FitLength(g, wave, samples);
}

// ---- checkpoint ------------------------------------------------------------

void SaveCheckpoint(const std::filesystem::path& path, const ModelConfig& config,
                    const ModelParams& params) {
  nlohmann::ordered_json header;
  header["format"] = "cdtse-checkpoint";
  header["version"] = 1;
  header["config"] = config;
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.entries()) {
    list.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * sizeof(double);
  }
  header["params"] = list;
  header["data_bytes"] = offset;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  WriteRaw(os, ToLittle(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : params.entries()) {
    for (double v : t.data()) WriteRaw(os, ToLittle(std::bit_cast<std::uint64_t>(v)));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

std::pair<ModelConfig, ModelParams> LoadCheckpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("not a checkpoint: " + path.string());
  }
  std::uint64_t header_len = 0;
  is.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  header_len = ToLittle(header_len);
  if (!is || header_len > (1ull << 30)) throw std::runtime_error("corrupt checkpoint header");
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw std::runtime_error("truncated checkpoint header");
  const auto header = nlohmann::ordered_json::parse(text);
  ModelConfig config = header.at("config").get<ModelConfig>();
  config.Validate();

  const std::uint64_t data_bytes = header.at("data_bytes").get<std::uint64_t>();
  std::vector<std::uint64_t> raw(data_bytes / sizeof(double));
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(data_bytes));
  if (!is) throw std::runtime_error("truncated checkpoint data");

  const ModelParams expected = InitParams(config);
  ModelParams params;
  for (const auto& entry : header.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    if (!expected.Has(name) || expected.Get(name).shape() != shape) {
      throw std::runtime_error("checkpoint parameter '" + name +
                               "' does not match the stored config");
    }
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    if (offset % sizeof(double) != 0 || offset + n * sizeof(double) > data_bytes) {
      throw std::runtime_error("checkpoint parameter '" + name + "' has a bad offset");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      values[i] = std::bit_cast<double>(ToLittle(raw[offset / sizeof(double) + i]));
    }
    params.Add(name, Tensor(shape, std::move(values), true));
  }
  if (params.size() != expected.size()) {
    throw std::runtime_error("checkpoint is missing parameters for its config");
  }
  return {config, params};
}

}  // namespace cdtse
