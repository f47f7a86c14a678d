#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "cdtse/metrics.h"
#include "cdtse/model.h"
#include "doctest.h"
#include "oracles.h"

using namespace cdtse;
using cdtse::testing::RandomTensor;

namespace {

ModelConfig TinyConfig(Combination combination, CdVariant variant = CdVariant::kNone) {
  ModelConfig c;
  c.n_filters = 8;
  c.kernel_size = 8;
  c.encoder_stride = 4;
  c.tcn_blocks = 2;
  c.tcn_repeats = 1;
  c.tcn_channels = 8;
  c.combination = combination;
  c.cd_variant = variant;
  c.seed = 11;
  return c;
}

std::vector<double> Values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor Run(const ModelConfig& c, const ModelParams& p, const Tensor& mix, const Tensor& enr) {
  Graph g(false);
  return Forward(g, c, p, mix, enr);
}

}  // namespace

TEST_CASE("config json round trip and validation") {
  ModelConfig c = TinyConfig(Combination::kCdParaB, CdVariant::kCosine);
  c.adapt_w2 = true;
  const nlohmann::ordered_json j = c;
  const ModelConfig back = j.get<ModelConfig>();
  CHECK(nlohmann::ordered_json(back) == j);

  nlohmann::ordered_json bad = j;
  bad["n_filtres"] = 3;
  CHECK_THROWS_AS(bad.get<ModelConfig>(), std::invalid_argument);

  ModelConfig invalid = TinyConfig(Combination::kCdOld);
  CHECK_THROWS_WITH_AS(invalid.Validate(), doctest::Contains("cd_variant"), std::invalid_argument);
  invalid = TinyConfig(Combination::kSingleChannel);
  invalid.tcn_repeats = 0;
  CHECK_THROWS_AS(invalid.Validate(), std::invalid_argument);
  CHECK(ParseCombination("para_enc") == Combination::kParaEnc);
  CHECK_THROWS(ParseCombination("stereo"));
}

TEST_CASE("encode shapes") {
  ModelConfig c;  // N=64, L=16, stride 8
  const ModelParams p = InitParams(c);
  Graph g(false);
  std::mt19937_64 rng(1);
  const auto w = Encode(g, c, p, RandomTensor({1, 64}, rng), "encoder1", 1);
  CHECK(w.dims() == 64);
  CHECK(w.frames() == 7);
  const auto zero = Encode(g, c, p, Tensor::Zeros({1, 64}), "encoder1", 1);
  for (double v : zero.matrix.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(Encode(g, c, p, Tensor::Zeros({1, 15}), "encoder1", 1), ShapeError);
}

TEST_CASE("tied encoders give identical representations and fewer parameters") {
  ModelConfig c = TinyConfig(Combination::kCdOld, CdVariant::kUnrolled);
  ModelConfig tied = c;
  tied.tied_encoders = true;
  const ModelParams pu = InitParams(c);
  const ModelParams pt = InitParams(tied);
  const std::size_t encoder = static_cast<std::size_t>(c.n_filters * c.kernel_size);
  CHECK(pu.ParameterCount() - pt.ParameterCount() == encoder);
  CHECK_FALSE(pt.Has("encoder2.weight"));

  std::mt19937_64 rng(2);
  const Tensor x = RandomTensor({1, 128}, rng);
  Graph g(false);
  const auto a = Encode(g, tied, pt, x, "encoder1", 1);
  const auto b = Encode(g, tied, pt, x.Clone(), "encoder1", 2);
  CHECK(Values(a.matrix) == Values(b.matrix));
}

TEST_CASE("speaker embedding") {
  const ModelConfig c = TinyConfig(Combination::kSingleChannel);
  const ModelParams p = InitParams(c);
  Graph g(false);
  const auto zero = SpeakerEmbed(g, c, p, Tensor::Zeros({1, 200}));
  CHECK(zero.values.shape() == Shape{8, 1});
  CHECK(AllFinite(zero.values.data()));
  CHECK(Values(zero.values) == Values(SpeakerEmbed(g, c, p, Tensor::Zeros({1, 200})).values));

  std::mt19937_64 rng(3);
  const Tensor noise = RandomTensor({1, 200}, rng);
  std::vector<double> reversed = Values(noise);
  std::reverse(reversed.begin(), reversed.end());
  const auto e1 = SpeakerEmbed(g, c, p, noise);
  const auto e2 = SpeakerEmbed(g, c, p, Tensor({1, 200}, reversed));
  double diff = 0;
  for (std::size_t i = 0; i < 8; ++i) diff += std::abs(e1.values.at(i) - e2.values.at(i));
  CHECK(diff > 1e-6);
  CHECK_THROWS_AS(SpeakerEmbed(g, c, p, Tensor::Zeros({1, 4})), ShapeError);
}

TEST_CASE("scaling adaptation") {
  Graph g(false);
  const Tensor h({2, 2}, {1, 2, 3, 4});
  CHECK(Values(ScalingAdapt(g, h, {Tensor::Column({1, 1})})) == Values(h));
  const Tensor zero = ScalingAdapt(g, h, {Tensor::Column({0, 0})});
  for (double v : zero.data()) CHECK(v == 0.0);
  const Tensor r = ScalingAdapt(g, h, {Tensor::Column({-2, 1})});
  CHECK(r.at(0) == -2.0);
  CHECK(r.at(1) == -4.0);
  CHECK_THROWS_AS(ScalingAdapt(g, h, {Tensor::Column({1, 1, 1})}), ShapeError);
}

TEST_CASE("forward keeps the input length") {
  ModelConfig c;
  c.combination = Combination::kCdParaA;
  c.cd_variant = CdVariant::kUnrolled;
  c.tcn_blocks = 2;
  c.tcn_repeats = 1;
  const ModelParams p = InitParams(c);
  std::mt19937_64 rng(4);
  const Tensor y = Run(c, p, RandomTensor({2, 8000}, rng), RandomTensor({1, 4000}, rng));
  CHECK(y.shape() == Shape{1, 8000});
  CHECK(AllFinite(y.data()));
}

TEST_CASE("forward rejects inconsistent inputs and params") {
  const ModelConfig c = TinyConfig(Combination::kParaEnc);
  ModelParams p = InitParams(c);
  std::mt19937_64 rng(5);
  const Tensor enr = RandomTensor({1, 64}, rng);
  CHECK_THROWS_AS(Run(c, p, RandomTensor({1, 64}, rng), enr), ShapeError);
  const ModelParams single = InitParams(TinyConfig(Combination::kSingleChannel));
  CHECK_THROWS_WITH(Run(c, single, RandomTensor({2, 64}, rng), enr),
                    doctest::Contains("encoder2"));
  p.Get("mask.weight") = Tensor::Zeros({8, 7, 1});
  CHECK_THROWS_AS(Run(c, p, RandomTensor({2, 64}, rng), enr), ShapeError);
}

TEST_CASE("identical channels collapse CD-Old onto the single-channel trunk") {
  std::mt19937_64 rng(6);
  const Tensor ch = RandomTensor({1, 256}, rng);
  std::vector<double> both = Values(ch);
  both.insert(both.end(), ch.data().begin(), ch.data().end());
  const Tensor mix({2, 256}, both);
  const Tensor enr = RandomTensor({1, 256}, rng);
  for (CdVariant v : {CdVariant::kUnrolled, CdVariant::kCosine}) {
    for (bool adapt : {false, true}) {
      ModelConfig cd = TinyConfig(Combination::kCdOld, v);
      cd.adapt_w2 = adapt;
      // Identical representations need a shared encoder as well as identical inputs.
      cd.tied_encoders = true;
      const ModelParams p = InitParams(cd);
      const Tensor y_cd = Run(cd, p, mix, enr);
      const Tensor y_single = Run(TinyConfig(Combination::kSingleChannel), p, ch, enr);
      for (std::size_t i = 0; i < y_cd.numel(); ++i) {
        REQUIRE(std::abs(y_cd.at(i) - y_single.at(i)) <= 1e-10);
      }
    }
  }
}

TEST_CASE("swapping channels changes the output") {
  std::mt19937_64 rng(7);
  const Tensor mix = RandomTensor({2, 256}, rng);
  std::vector<double> swapped(mix.data().begin() + 256, mix.data().end());
  swapped.insert(swapped.end(), mix.data().begin(), mix.data().begin() + 256);
  const Tensor enr = RandomTensor({1, 256}, rng);
  for (Combination comb : {Combination::kParaEnc, Combination::kCdOld,
                           Combination::kCdParaA, Combination::kCdParaB}) {
    const ModelConfig c = TinyConfig(comb, comb == Combination::kParaEnc
                                               ? CdVariant::kNone
                                               : CdVariant::kUnrolled);
    const ModelParams p = InitParams(c);
    const Tensor a = Run(c, p, mix, enr);
    const Tensor b = Run(c, p, Tensor({2, 256}, swapped), enr);
    double diff = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.at(i) - b.at(i)));
    CHECK_MESSAGE(diff > 1e-8, ToString(comb));
  }
}

TEST_CASE("forward gradients for every combination") {
  std::mt19937_64 rng(8);
  const Tensor mix = RandomTensor({2, 256}, rng);
  const Tensor enr = RandomTensor({1, 256}, rng);
  const Tensor proj = RandomTensor({1, 256}, rng);
  struct Case {
    Combination comb;
    CdVariant variant;
    bool adapt;
  };
  for (const Case& k : {Case{Combination::kSingleChannel, CdVariant::kNone, false},
                        Case{Combination::kParaEnc, CdVariant::kNone, true},
                        Case{Combination::kCdOld, CdVariant::kOriginal, true},
                        Case{Combination::kCdOld, CdVariant::kCosine, false},
                        Case{Combination::kCdParaA, CdVariant::kUnrolled, false},
                        Case{Combination::kCdParaB, CdVariant::kUnrolled, true}}) {
    ModelConfig c = TinyConfig(k.comb, k.variant);
    c.adapt_w2 = k.adapt;
    const ModelParams p = InitParams(c);
    const Tensor input =
        k.comb == Combination::kSingleChannel
            ? Tensor({1, 256}, std::vector<double>(mix.data().begin(), mix.data().begin() + 256))
            : mix;
    auto loss = [&](Graph& g, std::span<const Tensor> xs) {
      return Sum(g, Mul(g, Forward(g, c, p, xs[0], xs[1]), proj));
    };
    const Tensor xs[] = {input, enr};
    CHECK_MESSAGE(GradCheck(loss, xs, 1e-5) < 1e-4, ToString(k.comb));
  }
}

// The h = 1e-5 central difference is retried at 1e-7 when it straddles a
// ReLU/PReLU kink: one-sided slopes that disagree by more than a smooth
// function allows.
TEST_CASE("parameter gradients for every combination") {
  std::mt19937_64 rng(9);
  const Tensor mix = RandomTensor({2, 256}, rng);
  const Tensor enr = RandomTensor({1, 256}, rng);
  const Tensor target = RandomTensor({1, 256}, rng);
  for (Combination comb : {Combination::kSingleChannel, Combination::kParaEnc, Combination::kCdOld,
                           Combination::kCdParaA, Combination::kCdParaB}) {
    ModelConfig c = TinyConfig(comb, comb == Combination::kSingleChannel || comb == Combination::kParaEnc
                                         ? CdVariant::kNone
                                         : CdVariant::kUnrolled);
    c.adapt_w2 = comb != Combination::kSingleChannel;
    const ModelParams init = InitParams(c);
    ModelParams p = init.Clone();
    p.SetRequiresGrad(true);
    Graph g;
    g.Backward(SiSdrLoss(g, Forward(g, c, p, mix, enr), target));

    int retried = 0;
    for (const auto& [name, t] : p.entries()) {
      for (std::size_t i = 0; i < t.numel(); ++i) {
        auto f = [&](double d) {
          ModelParams q = init.Clone();
          q.Get(name).mutable_data()[i] += d;
          Graph z(false);
          return SiSdrLoss(z, Forward(z, c, q, mix, enr), target).item();
        };
        const double analytic = t.grad()[i];
        auto rel = [&](double numeric) { return std::abs(analytic - numeric) / std::max(std::abs(analytic), 1e-8); };
        const double f0 = f(0.0), up = f(1e-5), down = f(-1e-5);
        double err = rel((up - down) / 2e-5), tol = 1e-4;
        if (err >= tol && std::abs((up - f0) - (f0 - down)) / 1e-5 > 1e-4 * std::abs(analytic)) {
          // The smaller step loses digits to rounding.
          ++retried;
          err = rel((f(1e-7) - f(-1e-7)) / 2e-7);
          tol = 1e-3;
        }
        CHECK_MESSAGE(err < tol, ToString(comb) << " " << name << "[" << i << "] analytic " << analytic);
      }
    }
    CHECK_MESSAGE(retried <= 3, ToString(comb) << " retried " << retried);
  }
}

TEST_CASE("init and forward are deterministic") {
  const ModelConfig c = TinyConfig(Combination::kCdParaA, CdVariant::kCosine);
  const ModelParams a = InitParams(c);
  const ModelParams b = InitParams(c);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.entries()[i].first == b.entries()[i].first);
    CHECK(Values(a.entries()[i].second) == Values(b.entries()[i].second));
  }
  std::mt19937_64 rng(9);
  const Tensor mix = RandomTensor({2, 300}, rng);
  const Tensor enr = RandomTensor({1, 300}, rng);
  CHECK(Values(Run(c, a, mix, enr)) == Values(Run(c, b, mix, enr)));
  ModelConfig other = c;
  other.seed = 12;
  CHECK(Values(InitParams(other).Get("decoder.weight")) != Values(a.Get("decoder.weight")));
}

TEST_CASE("checkpoint round trip is bit exact") {
  ModelConfig c = TinyConfig(Combination::kCdOld, CdVariant::kOriginal);
  c.tied_encoders = true;
  ModelParams p = InitParams(c);
  p.Get("mask.bias").mutable_data()[0] = -0.0;
  p.Get("mask.bias").mutable_data()[1] = 1e-310;
  const auto path = std::filesystem::temp_directory_path() / "cdtse_model_test.ckpt";
  SaveCheckpoint(path, c, p);
  const auto [c2, p2] = LoadCheckpoint(path);
  CHECK(nlohmann::ordered_json(c2) == nlohmann::ordered_json(c));
  REQUIRE(p2.size() == p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& x = p.entries()[i].second.data();
    const auto& y = p2.entries()[i].second.data();
    CHECK(p.entries()[i].first == p2.entries()[i].first);
    CHECK(std::memcmp(x.data(), y.data(), x.size_bytes()) == 0);
  }
  std::mt19937_64 rng(10);
  const Tensor mix = RandomTensor({2, 128}, rng);
  const Tensor enr = RandomTensor({1, 128}, rng);
  CHECK(Values(Run(c, p, mix, enr)) == Values(Run(c2, p2, mix, enr)));

  // Truncated files are rejected.
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  CHECK_THROWS_AS(LoadCheckpoint(path), std::runtime_error);
  std::filesystem::remove(path);
}
