#include "cdtse/train.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace cdtse {

namespace {

using Clock = std::chrono::steady_clock;

// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
// is rethrown after all threads finish.
template <typename Fn>
void ParallelFor(std::size_t n, int workers, Fn fn) {
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

Tensor CropColumns(const Tensor& x, std::size_t offset, std::size_t length) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  if (offset == 0 && length == cols) return x;
  if (offset + length > cols) {
    throw std::out_of_range("crop of " + std::to_string(length) + " at " + std::to_string(offset) +
                            " exceeds " + std::to_string(cols) + " samples");
  }
  std::vector<double> out(rows * length);
  const auto d = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(d.begin() + static_cast<long>(r * cols + offset), length, out.begin() + static_cast<long>(r * length));
  }
  return Tensor({rows, length}, std::move(out));
}

std::size_t CropLength(int requested, std::size_t available) {
  if (requested <= 0) return available;
  return std::min(static_cast<std::size_t>(requested), available);
}

void CheckSample(const MixtureSample& s) {
  if (!s.mixture.defined() || s.mixture.rank() != 2 || !s.target_clean_ch1.defined() ||
      !s.enrollment.defined()) {
    throw std::invalid_argument("sample " + s.utt_id + " is missing audio");
  }
  if (s.target_clean_ch1.numel() != s.mixture.cols()) {
    throw std::invalid_argument("sample " + s.utt_id + ": target length " +
                                std::to_string(s.target_clean_ch1.numel()) + " != mixture length " +
                                std::to_string(s.mixture.cols()));
  }
}

struct ItemResult {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
};

ItemResult RunItem(const ModelConfig& model, const ModelParams& params, const TrainConfig& config,
                   const MixtureSample& sample, const PlannedItem& item, bool want_grads) {
  const std::size_t seg = CropLength(config.segment_samples, sample.mixture.cols());
  const std::size_t enr = CropLength(config.enrollment_samples, sample.enrollment.numel());
  const Tensor mix = CropColumns(sample.mixture, item.offset, seg);
  const Tensor target = CropColumns(sample.target_clean_ch1, item.offset, seg);
  const Tensor enroll = CropColumns(sample.enrollment, item.enroll_offset, enr);
  ItemResult r;
  if (!want_grads) {
    Graph g(false);
    r.loss = SiSdrLoss(g, Forward(g, model, params, mix, enroll), target).item();
    return r;
  }
  ModelParams local = params.Clone();
  local.SetRequiresGrad(true);
  Graph g;
  const Tensor loss = SiSdrLoss(g, Forward(g, model, local, mix, enroll), target);
  r.loss = loss.item();
  g.Backward(loss);
  r.grads.reserve(local.size());
  for (const auto& [name, t] : local.entries()) {
    if (t.has_grad()) {
      r.grads.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      r.grads.emplace_back(t.numel(), 0.0);
    }
  }
  return r;
}

void WriteText(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << text;
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

std::string Fixed(double v, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

// ---- config ----------------------------------------------------------------

void TrainConfig::Validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train." + what); };
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 1) fail("epochs must be >= 1");
  if (patience < 1) fail("patience must be >= 1");
  if (lr_halve_after < 1) fail("lr_halve_after must be >= 1");
  if (segment_samples < 0 || enrollment_samples < 0 || val_segment_samples < 0) {
    fail("crop lengths must be >= 0");
  }
  if (workers < 1) fail("workers must be >= 1");
}

void to_json(nlohmann::ordered_json& j, const TrainConfig& c) {
  j = nlohmann::ordered_json{
      {"lr", c.lr},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"adam_eps", c.adam_eps},
      {"clip_norm", c.clip_norm},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"patience", c.patience},
      {"lr_halve_after", c.lr_halve_after},
      {"segment_samples", c.segment_samples},
      {"enrollment_samples", c.enrollment_samples},
      {"val_segment_samples", c.val_segment_samples},
      {"workers", c.workers},
      {"seed", c.seed},
  };
}

void from_json(const nlohmann::ordered_json& j, TrainConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("train config must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "lr") c.lr = value.get<double>();
    else if (key == "beta1") c.beta1 = value.get<double>();
    else if (key == "beta2") c.beta2 = value.get<double>();
    else if (key == "adam_eps") c.adam_eps = value.get<double>();
    else if (key == "clip_norm") c.clip_norm = value.get<double>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "epochs") c.epochs = value.get<int>();
    else if (key == "patience") c.patience = value.get<int>();
    else if (key == "lr_halve_after") c.lr_halve_after = value.get<int>();
    else if (key == "segment_samples") c.segment_samples = value.get<int>();
    else if (key == "enrollment_samples") c.enrollment_samples = value.get<int>();
    else if (key == "val_segment_samples") c.val_segment_samples = value.get<int>();
    else if (key == "workers") c.workers = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else throw std::invalid_argument("unknown train config key '" + key + "'");
  }
}

// ---- optimizer ---------------------------------------------------------------

AdamState InitAdam(const ModelParams& params) {
  AdamState s;
  for (const auto& [name, t] : params.entries()) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  }
  return s;
}

void AdamStep(ModelParams& params, AdamState& state, const AdamConfig& config) {
  auto& entries = params.entries();
  if (state.m.size() != entries.size() || state.v.size() != entries.size()) {
    throw std::invalid_argument("adam: state has " + std::to_string(state.m.size()) + " slots for " +
                                std::to_string(entries.size()) + " parameters");
  }
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const auto& [name, t] = entries[p];
    if (state.m[p].size() != t.numel()) throw std::invalid_argument("adam: state shape mismatch for " + name);
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient in parameter '" + name + "'");
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < entries.size(); ++p) {
    Tensor& t = entries[p].second;
    const auto grad = t.grad();
    if (grad.empty()) continue;  // treated as zero: moments decay, no step
    auto w = t.mutable_data();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] -= config.lr * mh / (std::sqrt(vh) + config.eps);
    }
  }
}

double GlobalGradNorm(const ModelParams& params) {
  double ss = 0.0;
  for (const auto& [name, t] : params.entries()) {
    for (double g : t.grad()) ss += g * g;
  }
  return std::sqrt(ss);
}

double ClipGradNorm(ModelParams& params, double max_norm) {
  const double norm = GlobalGradNorm(params);
  if (max_norm <= 0.0 || !(norm > max_norm)) return norm;
  const double scale = max_norm / norm;
  for (auto& [name, t] : params.entries()) {
    if (!t.has_grad()) continue;
    for (double& g : t.mutable_grad()) g *= scale;
  }
  return norm;
}

// ---- training ------------------------------------------------------------------

std::vector<PlannedItem> EpochPlan(const TrainConfig& config, std::span<const MixtureSample> data,
                                   int epoch) {
  std::mt19937_64 rng(DeriveSeed(DeriveSeed(config.seed, "epoch"), static_cast<std::uint64_t>(epoch)));
  std::vector<PlannedItem> plan(data.size());
  for (std::size_t i = 0; i < plan.size(); ++i) plan[i].index = i;
  for (std::size_t i = plan.size(); i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(plan[i - 1], plan[j]);
  }
  auto offset = [&](int requested, std::size_t available) -> std::size_t {
    const std::size_t len = CropLength(requested, available);
    if (len >= available) return 0;
    return std::uniform_int_distribution<std::size_t>(0, available - len)(rng);
  };
  for (auto& item : plan) {
    const MixtureSample& s = data[item.index];
    item.offset = offset(config.segment_samples, s.mixture.cols());
    item.enroll_offset = offset(config.enrollment_samples, s.enrollment.numel());
  }
  return plan;
}

double MeanLoss(const ModelConfig& model, const ModelParams& params, const TrainConfig& config,
                std::span<const MixtureSample> data, std::span<const PlannedItem> plan) {
  if (plan.empty()) throw std::invalid_argument("mean_loss: empty plan");
  std::vector<double> losses(plan.size());
  ParallelFor(plan.size(), config.workers, [&](std::size_t i) {
    losses[i] = RunItem(model, params, config, data[plan[i].index], plan[i], false).loss;
  });
  double sum = 0.0;
  for (double l : losses) sum += l;
  return sum / static_cast<double>(losses.size());
}

Tensor Extract(const ModelConfig& model, const ModelParams& params, const MixtureSample& sample,
               std::size_t max_samples) {
  const std::size_t len = max_samples == 0 ? sample.mixture.cols() : std::min(max_samples, sample.mixture.cols());
  Graph g(false);
  return Forward(g, model, params, CropColumns(sample.mixture, 0, len), sample.enrollment);
}

double ValidationSiSdr(const ModelConfig& model, const ModelParams& params,
                       std::span<const MixtureSample> data, int segment_samples, int workers) {
  if (data.empty()) throw std::invalid_argument("validation set is empty");
  std::vector<double> scores(data.size());
  ParallelFor(data.size(), workers, [&](std::size_t i) {
    const MixtureSample& s = data[i];
    const std::size_t len = CropLength(segment_samples, s.mixture.cols());
    const Tensor est = Extract(model, params, s, len);
    scores[i] = SiSdr(est.data(), s.target_clean_ch1.data().subspan(0, len));
  });
  double sum = 0.0;
  for (double v : scores) sum += v;
  return sum / static_cast<double>(scores.size());
}

nlohmann::ordered_json RunRecord::ToJson() const {
  nlohmann::ordered_json j;
  j["system"] = system;
  j["model"] = model;
  j["train"] = train;
  j["parameter_count"] = parameter_count;
  j["initial_val_sisdr"] = initial_val_sisdr;
  auto& ep = j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : epochs) {
    ep.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_sisdr", e.val_sisdr},
                  {"lr", e.lr}, {"seconds", e.seconds}, {"improved", e.improved}});
  }
  j["best_epoch"] = best_epoch;
  j["best_val_sisdr"] = best_val_sisdr;
  j["best_checkpoint"] = best_checkpoint;
  j["early_stopped"] = early_stopped;
  if (test_summary) j["test"] = *test_summary;
  return j;
}

RunRecord Train(const ModelConfig& model, const TrainConfig& config,
                std::span<const MixtureSample> train, std::span<const MixtureSample> val,
                const std::filesystem::path& out, std::string system, const TrainLog& log) {
  model.Validate();
  config.Validate();
  if (train.empty()) throw std::invalid_argument("training set is empty");
  if (val.empty()) throw std::invalid_argument("validation set is empty");
  for (const auto& s : train) CheckSample(s);
  for (const auto& s : val) CheckSample(s);
  std::filesystem::create_directories(out);

  RunRecord rec;
  rec.system = std::move(system);
  rec.model = model;
  rec.train = config;
  ModelParams params = InitParams(model);
  rec.parameter_count = params.ParameterCount();
  AdamState state = InitAdam(params);
  AdamConfig adam{config.lr, config.beta1, config.beta2, config.adam_eps};
  rec.initial_val_sisdr = ValidationSiSdr(model, params, val, config.val_segment_samples, config.workers);
  if (log) {
    log(rec.system + ": " + std::to_string(rec.parameter_count) + " parameters, initial val SI-SDR " +
        Fixed(rec.initial_val_sisdr) + " dB");
  }

  const auto best_path = out / "best.ckpt";
  rec.best_checkpoint = best_path.string();
  double best = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  int stagnant = 0;
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = Clock::now();
    const auto plan = EpochPlan(config, train, epoch - 1);
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < plan.size(); b0 += batch) {
      const std::size_t n = std::min(batch, plan.size() - b0);
      std::vector<ItemResult> results(n);
      ParallelFor(n, config.workers, [&](std::size_t i) {
        results[i] = RunItem(model, params, config, train[plan[b0 + i].index], plan[b0 + i], true);
      });
      // Fixed summation order keeps the result independent of `workers`.
      auto& entries = params.entries();
      for (std::size_t p = 0; p < entries.size(); ++p) {
        auto g = entries[p].second.mutable_grad();
        std::fill(g.begin(), g.end(), 0.0);
        for (const auto& r : results) {
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += r.grads[p][k];
        }
        for (double& v : g) v /= static_cast<double>(n);
      }
      for (const auto& r : results) loss_sum += r.loss;
      ClipGradNorm(params, config.clip_norm);
      AdamStep(params, state, adam);
    }

    EpochRecord e;
    e.epoch = epoch;
    e.train_loss = loss_sum / static_cast<double>(plan.size());
    e.lr = adam.lr;
    e.val_sisdr = ValidationSiSdr(model, params, val, config.val_segment_samples, config.workers);
    e.improved = e.val_sisdr > best;
    if (e.improved) {
      best = e.val_sisdr;
      rec.best_epoch = epoch;
      rec.best_val_sisdr = best;
      SaveCheckpoint(best_path, model, params);
      since_best = 0;
      stagnant = 0;
    } else {
      ++since_best;
      if (++stagnant >= config.lr_halve_after) {
        adam.lr *= 0.5;
        stagnant = 0;
      }
    }
    e.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    rec.epochs.push_back(e);
    if (log) {
      log(rec.system + ": epoch " + std::to_string(epoch) + " loss " + Fixed(e.train_loss, 3) + " val " +
          Fixed(e.val_sisdr) + " dB" + (e.improved ? " *" : "") + " (" + Fixed(e.seconds, 1) + " s)");
    }
    if (since_best >= config.patience) {
      rec.early_stopped = true;
      break;
    }
  }
  SaveCheckpoint(out / "last.ckpt", model, params);
  WriteText(out / "run.json", rec.ToJson().dump(2) + "\n");
  return rec;
}

// ---- grid -------------------------------------------------------------------

std::vector<SystemSpec> StandardSystems(const ModelConfig& base) {
  std::vector<SystemSpec> out;
  auto add = [&](std::string name, std::string key, Combination comb, CdVariant variant, bool sa,
                 bool tied = false) {
    ModelConfig m = base;
    m.combination = comb;
    m.cd_variant = variant;
    m.adapt_w2 = sa;
    m.tied_encoders = tied;
    out.push_back({std::move(name), std::move(key), m});
  };
  add("TSB", "tsb", Combination::kSingleChannel, CdVariant::kNone, false);
  add("Para-Enc", "para_enc", Combination::kParaEnc, CdVariant::kNone, false);
  add("Para-Enc", "para_enc_sa", Combination::kParaEnc, CdVariant::kNone, true);
  add("CD-Old", "cd_old", Combination::kCdOld, CdVariant::kOriginal, false);
  add("CD-Old", "cd_old_sa", Combination::kCdOld, CdVariant::kOriginal, true);
  add("CD-Old-Tied", "cd_old_tied_sa", Combination::kCdOld, CdVariant::kOriginal, true, true);
  add("CD-Unrolled", "cd_unrolled", Combination::kCdOld, CdVariant::kUnrolled, false);
  add("CD-Unrolled", "cd_unrolled_sa", Combination::kCdOld, CdVariant::kUnrolled, true);
  add("CD-Cosine", "cd_cosine", Combination::kCdOld, CdVariant::kCosine, false);
  add("CD-Cosine", "cd_cosine_sa", Combination::kCdOld, CdVariant::kCosine, true);
  add("CD-Para-a", "cd_para_a", Combination::kCdParaA, CdVariant::kUnrolled, true);
  add("CD-Para-b", "cd_para_b", Combination::kCdParaB, CdVariant::kUnrolled, true);
  return out;
}

std::vector<SystemSpec> SelectSystems(const ModelConfig& base, std::span<const std::string> keys) {
  const auto all = StandardSystems(base);
  std::vector<SystemSpec> out;
  for (const auto& key : keys) {
    if (key == "all") {
      out.insert(out.end(), all.begin(), all.end());
      continue;
    }
    auto it = std::find_if(all.begin(), all.end(), [&](const SystemSpec& s) { return s.key == key; });
    if (it == all.end()) {
      std::string known;
      for (const auto& s : all) known += (known.empty() ? "" : ", ") + s.key;
      throw std::invalid_argument("unknown system '" + key + "' (known: " + known + ")");
    }
    out.push_back(*it);
  }
  if (out.empty()) throw std::invalid_argument("no systems selected");
  return out;
}

std::string GridReport::Csv() const {
  std::ostringstream os;
  os << "system,key,sa,ff_sisdr,mm_sisdr,fm_sisdr,avg_sisdr,ff_sisdri,mm_sisdri,fm_sisdri,avg_sisdri\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    const auto& p = r.report;
    os << r.system << ',' << r.key << ',' << r.sa << ',' << p.ff.sisdr_est << ',' << p.mm.sisdr_est << ','
       << p.fm.sisdr_est << ',' << p.overall.sisdr_est << ',' << p.ff.improvement << ','
       << p.mm.improvement << ',' << p.fm.improvement << ',' << p.overall.improvement << '\n';
  }
  return os.str();
}

std::string GridReport::Table() const {
  const std::vector<std::string> header = {"System", "SA", "FF", "MM", "FM", "Avg"};
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    const auto& p = r.report;
    cells.push_back({r.system, r.sa, Fixed(p.ff.improvement), Fixed(p.mm.improvement),
                     Fixed(p.fm.improvement), Fixed(p.overall.improvement)});
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) os << " | ";
      // Text columns left, numbers right.
      if (c < 2) os << std::left << std::setw(static_cast<int>(width[c])) << row[c];
      else os << std::right << std::setw(static_cast<int>(width[c])) << row[c];
    }
    os << '\n';
  };
  line(header);
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c > 0) os << "-+-";
    os << std::string(width[c], '-');
  }
  os << '\n';
  for (const auto& row : cells) line(row);
  os << "(SI-SDR improvement over the unprocessed channel-1 mixture, dB)\n";
  return os.str();
}

GridRow MixtureRow(std::span<const MixtureSample> test) {
  GridRow row;
  row.system = "Mixture";
  row.key = "mixture";
  row.sa = "-";
  row.report = Evaluate(test, [](const MixtureSample& m) {
    const std::size_t n = m.mixture.cols();
    return Tensor({1, n}, {m.mixture.data().begin(), m.mixture.data().begin() + static_cast<long>(n)});
  });
  return row;
}

GridReport RunGrid(std::span<const SystemSpec> systems, const TrainConfig& config,
                   std::span<const MixtureSample> train, std::span<const MixtureSample> val,
                   std::span<const MixtureSample> test, const std::filesystem::path& out,
                   const TrainLog& log, bool include_mixture) {
  if (systems.empty()) throw std::invalid_argument("grid: no systems");
  GridReport grid;
  if (include_mixture) grid.rows.push_back(MixtureRow(test));
  for (const auto& spec : systems) {
    const auto dir = out / spec.key;
    RunRecord rec = Train(spec.model, config, train, val, dir, spec.name + (spec.model.adapt_w2 ? " +SA" : ""), log);
    const auto [model, params] = LoadCheckpoint(rec.best_checkpoint);
    const EvalReport report = Evaluate(
        test, [&](const MixtureSample& m) { return Extract(model, params, m); }, config.workers);
    report.Write(dir / "test_scores.csv", dir / "test_summary.json");
    rec.test_summary = report.SummaryJson();
    WriteText(dir / "run.json", rec.ToJson().dump(2) + "\n");
    grid.rows.push_back({spec.name, spec.key, spec.model.adapt_w2 ? "yes" : "-", report});
    if (log) log(spec.name + ": test SI-SDRi " + Fixed(report.overall.improvement) + " dB");
  }
  WriteText(out / "grid.csv", grid.Csv());
  WriteText(out / "grid.txt", grid.Table());
  return grid;
}

}  // namespace cdtse
