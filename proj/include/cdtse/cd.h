#pragma once

#include <string_view>
#include <utility>

#include "cdtse/tensor.h"

namespace cdtse {

enum class CdVariant { kNone, kOriginal, kUnrolled, kCosine };

std::string_view ToString(CdVariant variant);
// Accepts "none", "original", "unrolled", "cosine".
CdVariant ParseCdVariant(std::string_view name);

// One channel's N x T encoder output (rows are embedding dimensions).
struct EncoderRepresentation {
  EncoderRepresentation() = default;
  // Throws ShapeError unless `m` is a finite rank-2 tensor.
  explicit EncoderRepresentation(Tensor m, int channel = 0);

  Tensor matrix;
  int channel_index = 0;

  std::size_t dims() const { return matrix.rows(); }
  std::size_t frames() const { return matrix.cols(); }
};

// N x 1 per-dimension inter-channel correlation, entries in [-1, 1].
struct SimilarityVector {
  Tensor values;
};

// N x 1 differentiated scores.
struct ScoreVector {
  Tensor values;
  CdVariant variant = CdVariant::kNone;
};

// Closed interval every score of `variant` lies in.
std::pair<double, double> ScoreRange(CdVariant variant);

// Scalar forms of the score transforms; s(phi) for phi in [-1, 1].
double OriginalScore(double phi);
double UnrolledScore(double phi);
double CosineScore(double phi);
double Score(CdVariant variant, double phi);

// Cosine of the zero-meaned rows j of w1 and w2. Rows whose zero-meaned norm
// is below kEps get phi = 0 and pass no gradient. With `detach` the result is
// treated as a constant by backprop.
SimilarityVector RowCosineSimilarity(Graph& g, const EncoderRepresentation& w1,
                                     const EncoderRepresentation& w2,
                                     bool detach = false);

// s = 1 - e^phi / (e + e^phi)
ScoreVector ScoreOriginal(Graph& g, const SimilarityVector& phi);
// s = 1 - 2 e^phi / (e + e^phi)
ScoreVector ScoreUnrolled(Graph& g, const SimilarityVector& phi);
// s = (1 - phi) / 2
ScoreVector ScoreCosine(Graph& g, const SimilarityVector& phi);
ScoreVector ScoreFor(Graph& g, CdVariant variant, const SimilarityVector& phi);

// W_cd[j, t] = w2[j, t] * s_j
Tensor ApplyDecorrelation(Graph& g, const EncoderRepresentation& w2,
                          const ScoreVector& s);

struct CdOptions {
  CdVariant variant = CdVariant::kUnrolled;
  bool detach_similarity = false;
};

// Differential spatial information of channel 2 relative to channel 1.
Tensor ChannelDecorrelate(Graph& g, const EncoderRepresentation& w1,
                          const EncoderRepresentation& w2,
                          const CdOptions& options);

}  // namespace cdtse
