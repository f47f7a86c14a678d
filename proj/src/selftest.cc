#include "cdtse/selftest.h"

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "cdtse/cd.h"
#include "cdtse/metrics.h"
#include "cdtse/model.h"
#include "cdtse/sim.h"
#include "cdtse/tensor.h"

namespace cdtse {

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kStep = 1e-5;

std::string Num(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

Tensor Random(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Values bounded away from zero so ReLU-type kinks are not straddled.
Tensor AwayFromZero(Shape shape, std::mt19937_64& rng) {
  Tensor t = Random(std::move(shape), rng, 0.1, 1.0);
  std::bernoulli_distribution flip(0.5);
  for (double& v : t.mutable_data()) v = flip(rng) ? -v : v;
  return t;
}

// Scalar probe sum(y * r) with a fixed random r.
Tensor Probe(Graph& g, const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Sum(g, Mul(g, y, Random(y.shape(), rng)));
}

class Runner {
 public:
  explicit Runner(const std::function<void(const SelfTestCheck&)>& cb) : cb_(cb) {}

  template <typename Fn>
  void Run(const std::string& name, Fn fn) {
    SelfTestCheck c{name, false, ""};
    try {
      std::tie(c.passed, c.detail) = fn();
    } catch (const std::exception& e) {
      c.passed = false;
      c.detail = std::string("exception: ") + e.what();
    }
    if (cb_) cb_(c);
    results_.push_back(c);
  }

  void Grad(const std::string& name, const MultiScalarFn& f, std::vector<Tensor> xs) {
    Run("grad " + name, [&] {
      const double err = GradCheck(f, xs, kStep);
      return std::pair{err < kGradTol, "max rel err " + Num(err)};
    });
  }

  std::vector<SelfTestCheck> results() const { return results_; }

 private:
  const std::function<void(const SelfTestCheck&)>& cb_;
  std::vector<SelfTestCheck> results_;
};

std::vector<double> NaiveConv(const Tensor& x, const Tensor& w, long stride, long dil, long pad) {
  const long cin = static_cast<long>(x.rows()), t_in = static_cast<long>(x.cols());
  const long cout = static_cast<long>(w.dim(0)), k_len = static_cast<long>(w.dim(2));
  const long t_out = (t_in + 2 * pad - dil * (k_len - 1) - 1) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(cout * t_out));
  for (long o = 0; o < cout; ++o) {
    for (long t = 0; t < t_out; ++t) {
      double acc = 0.0;
      for (long c = 0; c < cin; ++c) {
        for (long k = 0; k < k_len; ++k) {
          const long i = t * stride + k * dil - pad;
          if (i >= 0 && i < t_in) acc += w.at(static_cast<std::size_t>((o * cin + c) * k_len + k)) * x.at(static_cast<std::size_t>(c * t_in + i));
        }
      }
      y[static_cast<std::size_t>(o * t_out + t)] = acc;
    }
  }
  return y;
}

std::vector<double> NaiveConvT(const Tensor& x, const Tensor& w, long stride) {
  const long cin = static_cast<long>(x.rows()), t_in = static_cast<long>(x.cols());
  const long cout = static_cast<long>(w.dim(1)), k_len = static_cast<long>(w.dim(2));
  const long t_out = (t_in - 1) * stride + k_len;
  std::vector<double> y(static_cast<std::size_t>(cout * t_out));
  for (long o = 0; o < cout; ++o) {
    for (long n = 0; n < t_out; ++n) {
      double acc = 0.0;
      for (long c = 0; c < cin; ++c) {
        for (long k = 0; k < k_len; ++k) {
          const long d = n - k;
          if (d < 0 || d % stride != 0 || d / stride >= t_in) continue;
          acc += x.at(static_cast<std::size_t>(c * t_in + d / stride)) * w.at(static_cast<std::size_t>((c * cout + o) * k_len + k));
        }
      }
      y[static_cast<std::size_t>(o * t_out + n)] = acc;
    }
  }
  return y;
}

ModelConfig SmallModel(Combination comb, CdVariant variant, bool sa) {
  ModelConfig c;
  c.n_filters = 8;
  c.kernel_size = 8;
  c.encoder_stride = 4;
  c.tcn_blocks = 2;
  c.tcn_repeats = 1;
  c.tcn_channels = 8;
  c.combination = comb;
  c.cd_variant = variant;
  c.adapt_w2 = sa;
  c.seed = 3;
  return c;
}

}  // namespace

std::vector<SelfTestCheck> RunSelfTest(const std::function<void(const SelfTestCheck&)>& on_result) {
  Runner r(on_result);
  std::mt19937_64 rng(20240601);

  // ---- score transforms -------------------------------------------------------
  r.Run("score ranges", [&] {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    bool ok = true;
    for (int i = 0; i < 100000 && ok; ++i) {
      const double phi = u(rng);
      for (CdVariant v : {CdVariant::kOriginal, CdVariant::kUnrolled, CdVariant::kCosine}) {
        const auto [lo, hi] = ScoreRange(v);
        const double s = Score(v, phi);
        ok &= s >= lo && s <= hi;
      }
    }
    ok &= std::abs(OriginalScore(1.0) - 0.5) < 1e-12;
    ok &= std::abs(OriginalScore(-1.0) - std::exp(2.0) / (std::exp(2.0) + 1.0)) < 1e-12;
    ok &= std::abs(UnrolledScore(1.0)) < 1e-12;
    ok &= std::abs(UnrolledScore(-1.0) - (std::exp(2.0) - 1.0) / (std::exp(2.0) + 1.0)) < 1e-12;
    ok &= CosineScore(0.0) == 0.5;
    return std::pair{ok, std::string("original [") + Num(OriginalScore(1)) + ", " + Num(OriginalScore(-1)) +
                             "], unrolled [" + Num(UnrolledScore(1)) + ", " + Num(UnrolledScore(-1)) + "]"};
  });

  r.Run("collapse on identical channels", [&] {
    Graph g(false);
    const EncoderRepresentation w(Random({16, 40}, rng, 0.0, 2.0), 1);
    double worst = 0.0;
    for (CdVariant v : {CdVariant::kOriginal, CdVariant::kUnrolled, CdVariant::kCosine}) {
      const Tensor cd = ChannelDecorrelate(g, w, w, {v, false});
      const double factor = v == CdVariant::kOriginal ? 0.5 : 0.0;
      for (std::size_t i = 0; i < cd.numel(); ++i) worst = std::max(worst, std::abs(cd.at(i) - factor * w.matrix.at(i)));
    }
    return std::pair{worst < 1e-10, "max deviation " + Num(worst)};
  });

  // ---- SI-SDR ------------------------------------------------------------------
  r.Run("si-sdr orthogonal oracle", [&] {
    const double v = SiSdr(std::vector<double>{1.1, -0.9, 0.9, -1.1}, std::vector<double>{1, -1, 1, -1});
    return std::pair{std::abs(v - 20.0) < 1e-6, Num(v) + " dB"};
  });
  r.Run("si-sdr scale invariance", [&] {
    const Tensor s = Random({1, 256}, rng);
    Tensor x = Random({1, 256}, rng);
    for (std::size_t i = 0; i < 256; ++i) x.mutable_data()[i] += s.at(i);
    const double base = SiSdr(x, s);
    double worst = 0.0;
    for (double c : {0.1, 3.0, -2.0}) {
      std::vector<double> y(x.data().begin(), x.data().end());
      for (double& v : y) v *= c;
      worst = std::max(worst, std::abs(SiSdr(y, s.data()) - base));
    }
    return std::pair{worst < 1e-9, "max deviation " + Num(worst)};
  });

  // ---- conv oracles -------------------------------------------------------------
  r.Run("conv1d / conv_transpose1d oracles", [&] {
    std::uniform_int_distribution<int> small(1, 4), len(1, 40), kd(1, 7), st(1, 4);
    int mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const int cin = small(rng), cout = small(rng), k = kd(rng), s = st(rng), d = small(rng);
      const int t = std::max(len(rng), (k - 1) * d + 1);
      const int pad = std::uniform_int_distribution<int>(0, k)(rng);
      Graph g(false);
      const Tensor x = Random({std::size_t(cin), std::size_t(t)}, rng);
      const Tensor w = Random({std::size_t(cout), std::size_t(cin), std::size_t(k)}, rng);
      const Tensor y = Conv1d(g, x, w, s, d, pad);
      const auto ref = NaiveConv(x, w, s, d, pad);
      if (!std::equal(ref.begin(), ref.end(), y.data().begin(), y.data().end())) ++mismatches;
      const Tensor wt = Random({std::size_t(cin), std::size_t(cout), std::size_t(k)}, rng);
      const Tensor yt = ConvTranspose1d(g, x, wt, s);
      const auto reft = NaiveConvT(x, wt, s);
      if (!std::equal(reft.begin(), reft.end(), yt.data().begin(), yt.data().end())) ++mismatches;
    }
    return std::pair{mismatches == 0, std::to_string(mismatches) + " mismatches in 200 draws"};
  });

  // ---- op gradients --------------------------------------------------------------
  auto unary = [&](auto op) {
    return [op](Graph& g, std::span<const Tensor> xs) { return Probe(g, op(g, xs[0]), 1); };
  };
  auto binary = [&](auto op) {
    return [op](Graph& g, std::span<const Tensor> xs) { return Probe(g, op(g, xs[0], xs[1]), 2); };
  };
  r.Grad("conv1d", [](Graph& g, std::span<const Tensor> xs) { return Probe(g, Conv1d(g, xs[0], xs[1], 2, 2, 3), 3); },
         {Random({3, 30}, rng), Random({4, 3, 5}, rng)});
  r.Grad("conv_transpose1d",
         [](Graph& g, std::span<const Tensor> xs) { return Probe(g, ConvTranspose1d(g, xs[0], xs[1], 3), 4); },
         {Random({3, 12}, rng), Random({3, 2, 5}, rng)});
  r.Grad("depthwise_conv1d",
         [](Graph& g, std::span<const Tensor> xs) { return Probe(g, DepthwiseConv1d(g, xs[0], xs[1], 2, 2), 5); },
         {Random({4, 25}, rng), Random({4, 3}, rng)});
  r.Grad("add", binary([](Graph& g, const Tensor& a, const Tensor& b) { return Add(g, a, b); }),
         {Random({3, 7}, rng), Random({3, 1}, rng)});
  r.Grad("sub", binary([](Graph& g, const Tensor& a, const Tensor& b) { return Sub(g, a, b); }),
         {Random({3, 7}, rng), Random({3, 7}, rng)});
  r.Grad("mul", binary([](Graph& g, const Tensor& a, const Tensor& b) { return Mul(g, a, b); }),
         {Random({3, 7}, rng), Random({3, 1}, rng)});
  r.Grad("sigmoid", unary([](Graph& g, const Tensor& x) { return Sigmoid(g, x); }), {Random({3, 9}, rng, -3, 3)});
  r.Grad("tanh", unary([](Graph& g, const Tensor& x) { return Tanh(g, x); }), {Random({3, 9}, rng, -2, 2)});
  r.Grad("relu", unary([](Graph& g, const Tensor& x) { return Relu(g, x); }), {AwayFromZero({3, 9}, rng)});
  r.Grad("prelu", binary([](Graph& g, const Tensor& a, const Tensor& b) { return PRelu(g, a, b); }),
         {AwayFromZero({3, 9}, rng), Random({3, 1}, rng, 0.05, 0.5)});
  r.Grad("global_layer_norm",
         [](Graph& g, std::span<const Tensor> xs) { return Probe(g, GlobalLayerNorm(g, xs[0], xs[1], xs[2]), 6); },
         {Random({4, 10}, rng), Random({4, 1}, rng), Random({4, 1}, rng)});
  r.Grad("mean_over_time", unary([](Graph& g, const Tensor& x) { return MeanOverTime(g, x); }), {Random({4, 6}, rng)});
  r.Grad("concat_rows", binary([](Graph& g, const Tensor& a, const Tensor& b) { return ConcatRows(g, a, b); }),
         {Random({2, 5}, rng), Random({3, 5}, rng)});
  r.Grad("select_row", unary([](Graph& g, const Tensor& x) { return SelectRow(g, x, 1); }), {Random({3, 5}, rng)});
  r.Grad("fit_length", unary([](Graph& g, const Tensor& x) { return FitLength(g, FitLength(g, x, 9), 4); }),
         {Random({2, 6}, rng)});
  r.Grad("slice_columns", unary([](Graph& g, const Tensor& x) { return SliceColumns(g, x, 2, 3); }),
         {Random({2, 6}, rng)});
  r.Grad("scaling_adapt",
         [](Graph& g, std::span<const Tensor> xs) { return Probe(g, ScalingAdapt(g, xs[0], {xs[1]}), 7); },
         {Random({4, 6}, rng), Random({4, 1}, rng)});
  for (CdVariant v : {CdVariant::kOriginal, CdVariant::kUnrolled, CdVariant::kCosine}) {
    r.Grad("channel_decorrelate/" + std::string(ToString(v)),
           [v](Graph& g, std::span<const Tensor> xs) {
             return Probe(g, ChannelDecorrelate(g, EncoderRepresentation(xs[0], 1), EncoderRepresentation(xs[1], 2), {v, false}), 8);
           },
           {Random({5, 12}, rng), Random({5, 12}, rng)});
  }
  {
    const Tensor ref = Random({1, 64}, rng);
    r.Grad("si_sdr_loss", [ref](Graph& g, std::span<const Tensor> xs) { return SiSdrLoss(g, xs[0], ref); },
           {Random({1, 64}, rng)});
  }

  // ---- model variants ------------------------------------------------------------
  const std::vector<std::pair<std::string, ModelConfig>> variants = {
      {"single_channel", SmallModel(Combination::kSingleChannel, CdVariant::kNone, false)},
      {"para_enc", SmallModel(Combination::kParaEnc, CdVariant::kNone, true)},
      {"cd_old", SmallModel(Combination::kCdOld, CdVariant::kUnrolled, true)},
      {"cd_para_a", SmallModel(Combination::kCdParaA, CdVariant::kUnrolled, true)},
      {"cd_para_b", SmallModel(Combination::kCdParaB, CdVariant::kUnrolled, true)},
  };
  for (const auto& [name, cfg] : variants) {
    const ModelParams params = InitParams(cfg);
    const Tensor target = Random({1, 256}, rng);
    r.Grad("forward+loss/" + name,
           [&cfg, &params, target](Graph& g, std::span<const Tensor> xs) {
             return SiSdrLoss(g, Forward(g, cfg, params, xs[0], xs[1]), target);
           },
           {Random({2, 256}, rng), Random({1, 256}, rng)});
  }

  // ---- persistence and simulator -------------------------------------------------
  r.Run("checkpoint round trip", [&] {
    const ModelConfig cfg = SmallModel(Combination::kCdParaA, CdVariant::kUnrolled, true);
    const ModelParams params = InitParams(cfg);
    const auto path = std::filesystem::temp_directory_path() / ("cdtse_selftest_" + std::to_string(::getpid()) + ".ckpt");
    SaveCheckpoint(path, cfg, params);
    const auto [c2, p2] = LoadCheckpoint(path);
    std::filesystem::remove(path);
    const Tensor mix = Random({2, 300}, rng), enroll = Random({1, 200}, rng);
    Graph g1(false), g2(false);
    const Tensor y1 = Forward(g1, cfg, params, mix, enroll);
    const Tensor y2 = Forward(g2, c2, p2, mix, enroll);
    const bool same = std::equal(y1.data().begin(), y1.data().end(), y2.data().begin(), y2.data().end());
    return std::pair{same, same ? std::string("bit-identical output") : std::string("outputs differ")};
  });

  r.Run("mixture additivity and determinism", [&] {
    SimConfig sc;
    sc.utterance_samples = 2000;
    sc.enrollment_samples = 1000;
    const auto pool = MakeSpeakerPool(sc);
    const MixtureSample a = MakeMixture(sc, pool[2], pool[20], 11, "a");
    const MixtureSample b = MakeMixture(sc, pool[2], pool[20], 11, "a");
    bool ok = std::equal(a.mixture.data().begin(), a.mixture.data().end(), b.mixture.data().begin());
    const std::size_t n = a.mixture.cols();
    for (std::size_t t = 0; t < n; ++t) {
      ok &= a.mixture.at(0, t) == a.target_clean_ch1.at(t) + a.interferer_clean_ch1.at(t);
      ok &= a.mixture.at(1, t) == a.target_ch2.at(t) + a.interferer_ch2.at(t);
    }
    return std::pair{ok, std::string(ok ? "exact" : "violated")};
  });

  return r.results();
}

}  // namespace cdtse
