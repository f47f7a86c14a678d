#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include <unistd.h>

#include "cdtse/train.h"
#include "doctest.h"

using namespace cdtse;

namespace {

ModelParams OneParam(std::vector<double> value, std::vector<double> grad) {
  ModelParams p;
  Tensor t = Tensor::Row(std::move(value));
  t.set_requires_grad(true);
  auto g = t.mutable_grad();
  std::copy(grad.begin(), grad.end(), g.begin());
  p.Add("x", t);
  return p;
}

ModelConfig Tiny(Combination comb = Combination::kParaEnc) {
  ModelConfig c;
  c.n_filters = 8;
  c.kernel_size = 8;
  c.encoder_stride = 4;
  c.tcn_blocks = 2;
  c.tcn_repeats = 1;
  c.tcn_channels = 8;
  c.combination = comb;
  c.cd_variant = comb == Combination::kParaEnc || comb == Combination::kSingleChannel ? CdVariant::kNone
                                                                                       : CdVariant::kUnrolled;
  c.seed = 5;
  return c;
}

TrainConfig TinyTrain() {
  TrainConfig t;
  t.epochs = 1;
  t.batch_size = 4;
  t.segment_samples = 400;
  t.enrollment_samples = 400;
  t.val_segment_samples = 0;
  t.lr = 3e-3;
  t.seed = 8;
  return t;
}

SimConfig TinySim() {
  SimConfig s;
  s.utterance_samples = 800;
  s.enrollment_samples = 600;
  s.train = {2, 2, 4};
  s.val = {1, 1, 2};
  s.test = {1, 1, 2};
  s.seed = 4;
  return s;
}

std::string Slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::temp_directory_path() / ("cdtse_" + name + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("adam converges on a quadratic bowl") {
  ModelParams p = OneParam({1.0}, {0.0});
  AdamState s = InitAdam(p);
  const AdamConfig cfg{0.1, 0.9, 0.999, 1e-8};
  for (int step = 0; step < 200; ++step) {
    Tensor& x = p.Get("x");
    x.mutable_grad()[0] = 2.0 * x.at(0);
    AdamStep(p, s, cfg);
  }
  CHECK(std::abs(p.Get("x").at(0)) < 1e-3);
  CHECK(s.step == 200);
}

TEST_CASE("adam leaves parameters alone under zero gradient") {
  ModelParams p = OneParam({0.5, -2.0, 3.25}, {0.0, 0.0, 0.0});
  AdamState s = InitAdam(p);
  for (int i = 0; i < 10; ++i) AdamStep(p, s, AdamConfig{});
  CHECK(p.Get("x").at(0) == 0.5);
  CHECK(p.Get("x").at(1) == -2.0);
  CHECK(p.Get("x").at(2) == 3.25);
}

TEST_CASE("adam first step moves each weight by lr against the gradient sign") {
  ModelParams p = OneParam({0.0, 0.0}, {3.0, -0.01});
  AdamState s = InitAdam(p);
  AdamStep(p, s, AdamConfig{0.01, 0.9, 0.999, 1e-8});
  // m_hat = g and v_hat = g^2 after one step.
  CHECK(p.Get("x").at(0) == doctest::Approx(-0.01 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));
  CHECK(p.Get("x").at(1) == doctest::Approx(0.01 * 0.01 / (0.01 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("adam rejects non-finite gradients by name") {
  ModelParams p = OneParam({1.0}, {0.0});
  Tensor w = Tensor::Row({1.0, 2.0});
  w.set_requires_grad(true);
  w.mutable_grad()[1] = std::numeric_limits<double>::quiet_NaN();
  p.Add("tcn.3.dconv.weight", w);
  AdamState s = InitAdam(p);
  p.Get("x").mutable_grad()[0] = 1.0;
  CHECK_THROWS_WITH_AS(AdamStep(p, s, AdamConfig{}), doctest::Contains("tcn.3.dconv.weight"), std::runtime_error);
  CHECK(p.Get("x").at(0) == 1.0);
  CHECK(s.step == 0);
}

TEST_CASE("gradient clipping") {
  ModelParams p = OneParam({0.0, 0.0}, {6.0, 8.0});
  CHECK(ClipGradNorm(p, 5.0) == 10.0);
  CHECK(p.Get("x").grad()[0] == 3.0);
  CHECK(p.Get("x").grad()[1] == 4.0);
  ModelParams small = OneParam({0.0}, {0.25});
  ClipGradNorm(small, 5.0);
  CHECK(small.Get("x").grad()[0] == 0.25);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 10.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> g(37);
    for (double& v : g) v = n(rng);
    ModelParams q = OneParam(std::vector<double>(37, 0.0), g);
    Tensor extra = Tensor::Row({n(rng), n(rng)});
    extra.set_requires_grad(true);
    extra.mutable_grad()[0] = n(rng);
    q.Add("y", extra);
    const double clip = 0.5 + trial;
    ClipGradNorm(q, clip);
    CHECK(GlobalGradNorm(q) <= clip + 1e-9);
  }
}

TEST_CASE("epoch plan is a seeded permutation with in-range crops") {
  const auto data = GenerateSplit(TinySim(), "train");
  const TrainConfig cfg = TinyTrain();
  const auto a = EpochPlan(cfg, data, 0);
  const auto b = EpochPlan(cfg, data, 0);
  const auto c = EpochPlan(cfg, data, 1);
  REQUIRE(a.size() == data.size());
  std::set<std::size_t> seen;
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    seen.insert(a[i].index);
    CHECK(a[i].index == b[i].index);
    CHECK(a[i].offset == b[i].offset);
    CHECK(a[i].offset + 400 <= 800);
    CHECK(a[i].enroll_offset + 400 <= 600);
    differs |= a[i].index != c[i].index || a[i].offset != c[i].offset;
  }
  CHECK(seen.size() == data.size());
  CHECK(differs);
  TrainConfig whole = cfg;
  whole.segment_samples = 0;
  for (const auto& item : EpochPlan(whole, data, 3)) CHECK(item.offset == 0);
}

TEST_CASE("train config json and validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.Validate());
  nlohmann::ordered_json j = c;
  CHECK(nlohmann::ordered_json(j.get<TrainConfig>()).dump() == j.dump());
  TrainConfig bad = c;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.Validate(), std::invalid_argument);
  bad = c;
  bad.patience = 0;
  CHECK_THROWS_AS(bad.Validate(), std::invalid_argument);
  j["momentum"] = 0.9;
  CHECK_THROWS_AS(j.get<TrainConfig>(), std::invalid_argument);
}

TEST_CASE("one epoch on 8 utterances writes a loadable checkpoint") {
  const auto train = GenerateSplit(TinySim(), "train");
  const auto val = GenerateSplit(TinySim(), "val");
  REQUIRE(train.size() == 8);
  TempDir dir("train_one");
  const ModelConfig model = Tiny();
  const TrainConfig cfg = TinyTrain();
  const RunRecord rec = Train(model, cfg, train, val, dir.path);
  REQUIRE(rec.epochs.size() == 1);
  CHECK(rec.best_epoch == 1);
  CHECK(std::filesystem::exists(dir.path / "best.ckpt"));
  CHECK(std::filesystem::exists(dir.path / "run.json"));
  const auto [loaded_config, params] = LoadCheckpoint(dir.path / "best.ckpt");
  CHECK(nlohmann::ordered_json(loaded_config).dump() == nlohmann::ordered_json(model).dump());
  // The restored model reproduces the recorded validation score exactly.
  CHECK(ValidationSiSdr(loaded_config, params, val, cfg.val_segment_samples, 1) == rec.best_val_sisdr);

  // Saving the loaded parameters again gives the same bytes.
  SaveCheckpoint(dir.path / "again.ckpt", loaded_config, params);
  CHECK(Slurp(dir.path / "again.ckpt") == Slurp(dir.path / "best.ckpt"));
  const Tensor y1 = Extract(loaded_config, params, val[0]);
  const auto [c2, p2] = LoadCheckpoint(dir.path / "again.ckpt");
  const Tensor y2 = Extract(c2, p2, val[0]);
  CHECK(std::ranges::equal(y1.data(), y2.data()));

  const auto run = nlohmann::json::parse(Slurp(dir.path / "run.json"));
  CHECK(run["epochs"].size() == 1);
  CHECK(run["best_val_sisdr"].get<double>() == rec.best_val_sisdr);
}

TEST_CASE("one epoch lowers the loss on the epoch's own batches") {
  const auto train = GenerateSplit(TinySim(), "train");
  const auto val = GenerateSplit(TinySim(), "val");
  TempDir dir("train_sanity");
  for (Combination comb : {Combination::kSingleChannel, Combination::kCdOld}) {
    const ModelConfig model = Tiny(comb);
    const TrainConfig cfg = TinyTrain();
    const auto plan = EpochPlan(cfg, train, 0);
    const double before = MeanLoss(model, InitParams(model), cfg, train, plan);
    const RunRecord rec = Train(model, cfg, train, val, dir.path / std::string(ToString(comb)));
    const auto [c, trained] = LoadCheckpoint(dir.path / std::string(ToString(comb)) / "last.ckpt");
    const double after = MeanLoss(c, trained, cfg, train, plan);
    CAPTURE(ToString(comb));
    CHECK(after < before);
    CHECK(std::isfinite(rec.epochs[0].train_loss));
  }
}

TEST_CASE("training is deterministic and independent of worker count") {
  const auto train = GenerateSplit(TinySim(), "train");
  const auto val = GenerateSplit(TinySim(), "val");
  TempDir dir("train_det");
  TrainConfig cfg = TinyTrain();
  cfg.epochs = 2;
  const ModelConfig model = Tiny(Combination::kCdParaA);
  const RunRecord a = Train(model, cfg, train, val, dir.path / "a");
  const RunRecord b = Train(model, cfg, train, val, dir.path / "b");
  cfg.workers = 3;
  const RunRecord c = Train(model, cfg, train, val, dir.path / "c");
  for (std::size_t e = 0; e < a.epochs.size(); ++e) {
    CHECK(a.epochs[e].train_loss == b.epochs[e].train_loss);
    CHECK(a.epochs[e].train_loss == c.epochs[e].train_loss);
    CHECK(a.epochs[e].val_sisdr == c.epochs[e].val_sisdr);
  }
  CHECK(Slurp(dir.path / "a" / "last.ckpt") == Slurp(dir.path / "b" / "last.ckpt"));
  CHECK(Slurp(dir.path / "a" / "last.ckpt") == Slurp(dir.path / "c" / "last.ckpt"));
}

TEST_CASE("best checkpoint tracks the best validation epoch") {
  const auto train = GenerateSplit(TinySim(), "train");
  const auto val = GenerateSplit(TinySim(), "val");
  TempDir dir("train_best");
  TrainConfig cfg = TinyTrain();
  cfg.epochs = 6;
  cfg.patience = 2;
  cfg.lr_halve_after = 1;
  cfg.lr = 0.05;  // large enough to make validation bounce
  const ModelConfig model = Tiny(Combination::kSingleChannel);
  const RunRecord rec = Train(model, cfg, train, val, dir.path);
  double best = -1e300;
  int best_epoch = 0;
  for (const auto& e : rec.epochs) {
    if (e.val_sisdr > best) {
      best = e.val_sisdr;
      best_epoch = e.epoch;
    }
  }
  CHECK(rec.best_val_sisdr == best);
  CHECK(rec.best_epoch == best_epoch);
  const auto [c, p] = LoadCheckpoint(rec.best_checkpoint);
  CHECK(ValidationSiSdr(c, p, val, 0, 1) == best);
  if (rec.early_stopped) CHECK(static_cast<int>(rec.epochs.size()) - rec.best_epoch == cfg.patience);
  for (std::size_t e = 1; e < rec.epochs.size(); ++e) CHECK(rec.epochs[e].lr <= rec.epochs[e - 1].lr);
}

TEST_CASE("train rejects inconsistent data") {
  auto train = GenerateSplit(TinySim(), "train");
  const auto val = GenerateSplit(TinySim(), "val");
  TempDir dir("train_bad");
  train[2].target_clean_ch1 = Tensor::Row({1.0, 2.0});
  CHECK_THROWS_WITH_AS(Train(Tiny(), TinyTrain(), train, val, dir.path), doctest::Contains(train[2].utt_id.c_str()),
                       std::invalid_argument);
  CHECK_THROWS_AS(Train(Tiny(), TinyTrain(), {}, val, dir.path), std::invalid_argument);
}

TEST_CASE("system catalogue") {
  const auto all = StandardSystems(ModelConfig{});
  CHECK(all.size() == 12);
  std::set<std::string> keys;
  for (const auto& s : all) {
    keys.insert(s.key);
    CHECK_NOTHROW(s.model.Validate());
  }
  CHECK(keys.size() == all.size());
  const std::vector<std::string> pick = {"para_enc", "cd_unrolled_sa"};
  const auto sel = SelectSystems(ModelConfig{}, pick);
  REQUIRE(sel.size() == 2);
  CHECK(sel[1].model.cd_variant == CdVariant::kUnrolled);
  CHECK(sel[1].model.adapt_w2);
  const std::vector<std::string> bad = {"cd_magic"};
  CHECK_THROWS_WITH_AS(SelectSystems(ModelConfig{}, bad), doctest::Contains("cd_magic"), std::invalid_argument);
}

TEST_CASE("grid of two systems renders a two-row table") {
  const auto train = GenerateSplit(TinySim(), "train");
  const auto val = GenerateSplit(TinySim(), "val");
  const auto test = GenerateSplit(TinySim(), "test");
  TempDir dir("grid");
  std::vector<SystemSpec> systems = {{"TSB", "tsb", Tiny(Combination::kSingleChannel)},
                                     {"Para-Enc", "para_enc", Tiny(Combination::kParaEnc)}};
  const GridReport g = RunGrid(systems, TinyTrain(), train, val, test, dir.path, nullptr, false);
  REQUIRE(g.rows.size() == 2);
  const std::string table = g.Table();
  std::istringstream lines(table);
  std::string header;
  std::getline(lines, header);
  CHECK(header.find("System") == 0);
  for (const char* col : {"SA", "FF", "MM", "FM", "Avg"}) CHECK(header.find(col) != std::string::npos);
  CHECK(std::count(header.begin(), header.end(), '|') == 5);
  CHECK(std::filesystem::exists(dir.path / "grid.csv"));
  CHECK(std::filesystem::exists(dir.path / "tsb" / "test_scores.csv"));

  const GridRow mix = MixtureRow(test);
  CHECK(mix.report.overall.improvement == 0.0);
  CHECK(mix.report.ff.improvement == 0.0);
}
