#include "cdtse/metrics.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace cdtse {

namespace {

constexpr double kDbPerNeper = 10.0 / std::numbers::ln10;

std::vector<double> ZeroMean(std::span<const double> x) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - mean;
  return out;
}

void CheckPair(std::size_t est, std::size_t ref, const char* where) {
  if (est == 0 || ref == 0) throw std::invalid_argument(std::string(where) + ": empty signal");
  if (est != ref) {
    throw std::invalid_argument(std::string(where) + ": length mismatch (" + std::to_string(est) +
                                " vs " + std::to_string(ref) + ")");
  }
}

struct Projection {
  std::vector<double> x, s, e;
  double alpha = 0.0, num = 0.0, nn = 0.0;
};

Projection Project(std::span<const double> estimate, std::span<const double> reference, const char* where) {
  CheckPair(estimate.size(), reference.size(), where);
  Projection p;
  p.x = ZeroMean(estimate);
  p.s = ZeroMean(reference);
  const double ss = Dot(p.s, p.s);
  if (!(ss > 0.0)) throw std::invalid_argument(std::string(where) + ": reference has no energy");
  p.alpha = Dot(p.x, p.s) / ss;
  p.e.resize(p.x.size());
  for (std::size_t i = 0; i < p.x.size(); ++i) p.e[i] = p.x[i] - p.alpha * p.s[i];
  p.num = p.alpha * p.alpha * ss;
  p.nn = Dot(p.e, p.e);
  return p;
}

void Accumulate(ConditionMean& m, const UtteranceScore& s) {
  ++m.count;
  m.sisdr_est += s.sisdr_est;
  m.sisdr_mix += s.sisdr_mix;
  m.improvement += s.improvement;
}

void Finish(ConditionMean& m) {
  if (m.count == 0) return;
  const double n = static_cast<double>(m.count);
  m.sisdr_est /= n;
  m.sisdr_mix /= n;
  m.improvement /= n;
}

nlohmann::ordered_json MeanJson(const ConditionMean& m) {
  return {{"count", m.count}, {"sisdr_est", m.sisdr_est}, {"sisdr_mix", m.sisdr_mix},
          {"improvement", m.improvement}};
}

std::span<const double> Channel1(const Tensor& mixture) {
  if (mixture.rank() != 2 || mixture.rows() < 1) {
    throw ShapeError("evaluate: mixture must be [channels, samples], got " + ShapeToString(mixture.shape()));
  }
  return mixture.data().subspan(0, mixture.cols());
}

UtteranceScore Score(const MixtureSample& m, const Extractor& extract) {
  const Tensor est = extract(m);
  UtteranceScore s;
  s.utt_id = m.utt_id;
  s.condition = m.condition;
  s.sisdr_est = SiSdr(est.data(), m.target_clean_ch1.data());
  s.sisdr_mix = SiSdr(Channel1(m.mixture), m.target_clean_ch1.data());
  s.improvement = s.sisdr_est - s.sisdr_mix;
  return s;
}

}  // namespace

double SiSdr(std::span<const double> estimate, std::span<const double> reference) {
  const Projection p = Project(estimate, reference, "si_sdr");
  if (p.num == 0.0) return -kSiSdrClampDb;
  if (p.nn == 0.0) return kSiSdrClampDb;
  return std::clamp(kDbPerNeper * std::log(p.num / p.nn), -kSiSdrClampDb, kSiSdrClampDb);
}

double SiSdr(const Tensor& estimate, const Tensor& reference) {
  return SiSdr(estimate.data(), reference.data());
}

Tensor SiSdrLoss(Graph& g, const Tensor& estimate, const Tensor& reference) {
  if (!estimate.defined() || !reference.defined()) throw std::invalid_argument("si_sdr_loss: undefined operand");
  Projection p = Project(estimate.data(), reference.data(), "si_sdr_loss");
  const double num = std::max(p.num, kEps);
  const double nn = std::max(p.nn, kEps);
  Tensor y = Tensor::Scalar(-kDbPerNeper * (std::log(num) - std::log(nn)));
  if (g.NeedsGrad({&estimate})) {
    g.Record("si_sdr_loss", y, [estimate, p = std::move(p)](std::span<const double> gy) {
      // Floored energies are constants.
      const double cn = p.num > kEps ? 2.0 * p.alpha / p.num : 0.0;
      const double ce = p.nn > kEps ? 2.0 / p.nn : 0.0;
      const std::size_t n = p.x.size();
      std::vector<double> d(n);
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        d[i] = -kDbPerNeper * (cn * p.s[i] - ce * p.e[i]);
        mean += d[i];
      }
      mean /= static_cast<double>(n);
      auto gx = estimate.mutable_grad();
      for (std::size_t i = 0; i < n; ++i) gx[i] += gy[0] * (d[i] - mean);
    });
  }
  return y;
}

const ConditionMean& EvalReport::For(Condition c) const {
  switch (c) {
    case Condition::kFF: return ff;
    case Condition::kMM: return mm;
    case Condition::kFM: return fm;
  }
  return fm;
}

nlohmann::ordered_json EvalReport::SummaryJson() const {
  return {{"FF", MeanJson(ff)}, {"MM", MeanJson(mm)}, {"FM", MeanJson(fm)}, {"overall", MeanJson(overall)}};
}

std::string EvalReport::Csv() const {
  std::ostringstream os;
  os << "utt_id,condition,sisdr_est,sisdr_mix,improvement\n";
  os << std::setprecision(17);
  for (const auto& u : utterances) {
    os << u.utt_id << ',' << ToString(u.condition) << ',' << u.sisdr_est << ',' << u.sisdr_mix << ','
       << u.improvement << '\n';
  }
  return os.str();
}

void EvalReport::Write(const std::filesystem::path& csv, const std::filesystem::path& summary) const {
  auto put = [](const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << text;
    if (!os) throw std::runtime_error("cannot write " + path.string());
  };
  put(csv, Csv());
  put(summary, SummaryJson().dump(2) + "\n");
}

EvalReport MakeReport(std::vector<UtteranceScore> scores) {
  EvalReport r;
  r.utterances = std::move(scores);
  for (const auto& s : r.utterances) {
    Accumulate(s.condition == Condition::kFF ? r.ff : s.condition == Condition::kMM ? r.mm : r.fm, s);
    Accumulate(r.overall, s);
  }
  for (ConditionMean* m : {&r.ff, &r.mm, &r.fm, &r.overall}) Finish(*m);
  return r;
}

EvalReport Evaluate(std::span<const MixtureSample> dataset, const Extractor& extract, int workers) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<UtteranceScore> scores(dataset.size());
  const auto n_threads = static_cast<std::size_t>(std::clamp<long>(workers, 1, static_cast<long>(std::max<std::size_t>(dataset.size(), 1))));
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < dataset.size(); ++i) scores[i] = Score(dataset[i], extract);
    return MakeReport(std::move(scores));
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n_threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < dataset.size(); i = next++) {
        try {
          scores[i] = Score(dataset[i], extract);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          next = dataset.size();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  return MakeReport(std::move(scores));
}

}  // namespace cdtse
