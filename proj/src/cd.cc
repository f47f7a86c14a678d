#include "cdtse/cd.h"

#include <algorithm>
#include <cmath>
#include <string>

namespace cdtse {

namespace {

// q(phi) = e^phi / (e + e^phi), written so that q(1) = 1/2 exactly.
inline double SoftmaxAgainstReference(double phi) {
  return 1.0 / (1.0 + std::exp(1.0 - phi));
}

ScoreVector MapScores(Graph& g, const SimilarityVector& phi, CdVariant variant,
                      const char* name, double (*score)(double),
                      double (*slope)(double)) {
  const Tensor& in = phi.values;
  if (!in.defined() || in.rank() != 2 || in.cols() != 1) {
    throw ShapeError(std::string(name) + ": similarity must be N x 1");
  }
  std::vector<double> out(in.numel());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = score(in.at(j));
  Tensor s(in.shape(), std::move(out));
  if (g.NeedsGrad({&in})) {
    g.Record(name, s, [in, slope](std::span<const double> gy) mutable {
      auto gp = in.mutable_grad();
      for (std::size_t j = 0; j < gp.size(); ++j) gp[j] += gy[j] * slope(in.at(j));
    });
  }
  return {s, variant};
}

double OriginalSlope(double phi) {
  const double s = OriginalScore(phi);
  return -s * (1.0 - s);
}

double UnrolledSlope(double phi) {
  const double q = SoftmaxAgainstReference(phi);
  return -2.0 * q * (1.0 - q);
}

double CosineSlope(double) { return -0.5; }

}  // namespace

std::string_view ToString(CdVariant variant) {
  switch (variant) {
    case CdVariant::kNone: return "none";
    case CdVariant::kOriginal: return "original";
    case CdVariant::kUnrolled: return "unrolled";
    case CdVariant::kCosine: return "cosine";
  }
  return "none";
}

CdVariant ParseCdVariant(std::string_view name) {
  if (name == "none") return CdVariant::kNone;
  if (name == "original") return CdVariant::kOriginal;
  if (name == "unrolled") return CdVariant::kUnrolled;
  if (name == "cosine") return CdVariant::kCosine;
  throw std::invalid_argument("unknown CD variant '" + std::string(name) +
                              "' (expected none|original|unrolled|cosine)");
}

EncoderRepresentation::EncoderRepresentation(Tensor m, int channel)
    : matrix(std::move(m)), channel_index(channel) {
  if (!matrix.defined() || matrix.rank() != 2) {
    throw ShapeError("encoder representation must be an N x T matrix");
  }
  if (!AllFinite(matrix.data())) {
    throw std::domain_error("encoder representation has non-finite entries");
  }
}

std::pair<double, double> ScoreRange(CdVariant variant) {
  const double e2 = std::exp(2.0);
  switch (variant) {
    case CdVariant::kOriginal: return {0.5, e2 / (e2 + 1.0)};
    case CdVariant::kUnrolled: return {0.0, (e2 - 1.0) / (e2 + 1.0)};
    case CdVariant::kCosine: return {0.0, 1.0};
    case CdVariant::kNone: break;
  }
  throw std::invalid_argument("score range: variant 'none' has no scores");
}

// 1 - q(phi) = 1 / (1 + e^(phi - 1))
double OriginalScore(double phi) { return 1.0 / (1.0 + std::exp(phi - 1.0)); }

double UnrolledScore(double phi) {
  return 1.0 - 2.0 * SoftmaxAgainstReference(phi);
}

double CosineScore(double phi) { return (1.0 - phi) / 2.0; }

double Score(CdVariant variant, double phi) {
  switch (variant) {
    case CdVariant::kOriginal: return OriginalScore(phi);
    case CdVariant::kUnrolled: return UnrolledScore(phi);
    case CdVariant::kCosine: return CosineScore(phi);
    case CdVariant::kNone: break;
  }
  throw std::invalid_argument("score: variant 'none' has no scores");
}

SimilarityVector RowCosineSimilarity(Graph& g, const EncoderRepresentation& w1,
                                     const EncoderRepresentation& w2,
                                     bool detach) {
  const Tensor& a = w1.matrix;
  const Tensor& b = w2.matrix;
  if (a.shape() != b.shape()) {
    throw ShapeError("row_cosine_similarity: shapes differ " +
                     ShapeToString(a.shape()) + " vs " +
                     ShapeToString(b.shape()));
  }
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  const double eps2 = kEps * kEps;
  std::vector<double> phi(rows, 0.0);
  // Per-row statistics kept for the backward pass.
  std::vector<double> mean_a(rows), mean_b(rows), norm2_a(rows), norm2_b(rows);
  std::vector<char> guarded(rows, 0);
  for (std::size_t j = 0; j < rows; ++j) {
    const double* ar = a.data().data() + j * cols;
    const double* br = b.data().data() + j * cols;
    double ma = 0.0, mb = 0.0;
    for (std::size_t t = 0; t < cols; ++t) {
      ma += ar[t];
      mb += br[t];
    }
    ma /= static_cast<double>(cols);
    mb /= static_cast<double>(cols);
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t t = 0; t < cols; ++t) {
      const double da = ar[t] - ma;
      const double db = br[t] - mb;
      ab += da * db;
      aa += da * da;
      bb += db * db;
    }
    mean_a[j] = ma;
    mean_b[j] = mb;
    norm2_a[j] = aa;
    norm2_b[j] = bb;
    if (aa < eps2 || bb < eps2) {
      guarded[j] = 1;
      continue;
    }
    // sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb): identical rows give
    // exactly 1.
    phi[j] = std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
  }
  Tensor out({rows, 1}, phi);
  if (!detach && g.NeedsGrad({&a, &b})) {
    g.Record("row_cosine_similarity", out,
             [a, b, rows, cols, phi = std::move(phi), mean_a = std::move(mean_a),
              mean_b = std::move(mean_b), norm2_a = std::move(norm2_a),
              norm2_b = std::move(norm2_b),
              guarded = std::move(guarded)](std::span<const double> gy) mutable {
               double* ga = a.requires_grad() ? a.mutable_grad().data() : nullptr;
               double* gb = b.requires_grad() ? b.mutable_grad().data() : nullptr;
               for (std::size_t j = 0; j < rows; ++j) {
                 if (guarded[j] || gy[j] == 0.0) continue;
                 const double* ar = a.data().data() + j * cols;
                 const double* br = b.data().data() + j * cols;
                 const double inv = 1.0 / std::sqrt(norm2_a[j] * norm2_b[j]);
                 const double ka = phi[j] / norm2_a[j];
                 const double kb = phi[j] / norm2_b[j];
                 for (std::size_t t = 0; t < cols; ++t) {
                   const double da = ar[t] - mean_a[j];
                   const double db = br[t] - mean_b[j];
                   if (ga) ga[j * cols + t] += gy[j] * (db * inv - ka * da);
                   if (gb) gb[j * cols + t] += gy[j] * (da * inv - kb * db);
                 }
               }
             });
  }
  return {out};
}

ScoreVector ScoreOriginal(Graph& g, const SimilarityVector& phi) {
  return MapScores(g, phi, CdVariant::kOriginal, "score_original",
                   &OriginalScore, &OriginalSlope);
}

ScoreVector ScoreUnrolled(Graph& g, const SimilarityVector& phi) {
  return MapScores(g, phi, CdVariant::kUnrolled, "score_unrolled",
                   &UnrolledScore, &UnrolledSlope);
}

ScoreVector ScoreCosine(Graph& g, const SimilarityVector& phi) {
  return MapScores(g, phi, CdVariant::kCosine, "score_cosine", &CosineScore,
                   &CosineSlope);
}

ScoreVector ScoreFor(Graph& g, CdVariant variant, const SimilarityVector& phi) {
  switch (variant) {
    case CdVariant::kOriginal: return ScoreOriginal(g, phi);
    case CdVariant::kUnrolled: return ScoreUnrolled(g, phi);
    case CdVariant::kCosine: return ScoreCosine(g, phi);
    case CdVariant::kNone: break;
  }
  throw std::invalid_argument("channel decorrelation needs a CD variant");
}

Tensor ApplyDecorrelation(Graph& g, const EncoderRepresentation& w2,
                          const ScoreVector& s) {
  if (!s.values.defined() || s.values.rank() != 2 || s.values.cols() != 1 ||
      s.values.rows() != w2.dims()) {
    throw ShapeError("apply_decorrelation: score vector must be " +
                     std::to_string(w2.dims()) + " x 1");
  }
  return Mul(g, w2.matrix, s.values);
}

Tensor ChannelDecorrelate(Graph& g, const EncoderRepresentation& w1,
                          const EncoderRepresentation& w2,
                          const CdOptions& options) {
  const SimilarityVector phi =
      RowCosineSimilarity(g, w1, w2, options.detach_similarity);
  const ScoreVector s = ScoreFor(g, options.variant, phi);
  return ApplyDecorrelation(g, w2, s);
}

}  // namespace cdtse
