#include "cdtse/tensor.h"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <numeric>
#include <sstream>

namespace cdtse {

namespace {

std::size_t Product(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

void RequireRank(const Tensor& t, std::size_t rank, const char* op,
                 const char* name) {
  if (!t.defined() || t.rank() != rank) {
    std::ostringstream os;
    os << op << ": " << name << " must have rank " << rank << ", got "
       << (t.defined() ? ShapeToString(t.shape()) : std::string("undefined"));
    throw ShapeError(os.str());
  }
}

void Fail(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

// Accumulates `scale * src` into dst.
inline void Axpy(double scale, const double* src, double* dst, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += scale * src[i];
}

inline double StableSigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Broadcast classification for binary ops.
enum class Broadcast { kSame, kColumn };

Broadcast CheckBinary(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.defined() || !b.defined()) Fail(op, "undefined operand");
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (a.rank() == 2 && b.rank() == 2 && b.cols() == 1 &&
      b.rows() == a.rows()) {
    return Broadcast::kColumn;
  }
  Fail(op, "incompatible shapes " + ShapeToString(a.shape()) + " and " +
               ShapeToString(b.shape()) +
               " (expected equal shapes or an N x 1 column for the second)");
  return Broadcast::kSame;
}

}  // namespace

std::string ShapeToString(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (shape.empty()) throw ShapeError("tensor: empty shape");
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor: zero extent in " + ShapeToString(shape));
  }
  if (Product(shape) != data.size()) {
    throw ShapeError("tensor: shape " + ShapeToString(shape) + " needs " +
                     std::to_string(Product(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::Zeros(Shape shape, bool requires_grad) {
  const std::size_t n = Product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::Filled(Shape shape, double value) {
  const std::size_t n = Product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::Scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::Row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::Column(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n, 1}, std::move(values));
}

const Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
  return *impl_;
}

Tensor::Impl& Tensor::impl() {
  if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) +
                     " out of range for " + ShapeToString(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<const double> Tensor::data() const { return impl().data; }

std::span<double> Tensor::mutable_data() { return impl().data; }

double Tensor::at(std::size_t r, std::size_t c) const {
  return impl().data[r * cols() + c];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("tensor: item() on non-scalar " + ShapeToString(shape()));
  }
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

void Tensor::set_requires_grad(bool value) { impl().requires_grad = value; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<const double> Tensor::grad() const { return impl().grad; }

std::span<double> Tensor::mutable_grad() const {
  Impl& i = *impl_;
  if (i.grad.empty()) i.grad.assign(i.data.size(), 0.0);
  return i.grad;
}

void Tensor::zero_grad() {
  Impl& i = impl();
  std::fill(i.grad.begin(), i.grad.end(), 0.0);
}

Tensor Tensor::Clone() const {
  Tensor t(impl().shape, impl().data, impl().requires_grad);
  t.impl_->grad = impl().grad;
  return t;
}

Tensor Tensor::Detach() const { return Tensor(impl().shape, impl().data); }

// ---- Graph -----------------------------------------------------------------

bool Graph::NeedsGrad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void Graph::Record(std::string_view name, const Tensor& output,
                   BackwardFn backward) {
  Tensor out = output;
  out.set_requires_grad(true);
  nodes_.push_back(Node{std::string(name), out, std::move(backward)});
}

void Graph::Backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss.defined() ? ShapeToString(loss.shape())
                                     : std::string("undefined")));
  }
  if (consumed_) throw std::logic_error("backward: graph already consumed");
  consumed_ = true;
  if (!loss.requires_grad()) return;
  Tensor l = loss;
  l.mutable_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward(it->output.grad());
  }
  // Intermediate buffers are no longer needed; leaves keep theirs.
  nodes_.clear();
}

// ---- convolutions ----------------------------------------------------------

namespace {

// Output indices t for which t*stride + offset lies in [0, length).
struct ValidRange {
  long lo;
  long hi;
};

ValidRange Valid(long offset, long stride, long length, long t_out) {
  long lo = 0;
  if (offset < 0) lo = (-offset + stride - 1) / stride;
  long hi = 0;
  if (length - 1 - offset >= 0) hi = (length - 1 - offset) / stride + 1;
  hi = std::min(hi, t_out);
  if (hi < lo) hi = lo;
  return {lo, hi};
}

// Weight element (r, c, k) of a correlation kernel viewed through strides.
struct KernelView {
  const double* data;
  long stride_r;
  long stride_c;
  long stride_k;
  long taps;
  double at(long r, long c, long k) const { return data[r * stride_r + c * stride_c + k * stride_k]; }
};

// out[r, s] += sum over (c, k), in that order, of w(r, c, k) * in[c, s + base + k * step],
// skipping taps that fall outside [0, in_len). Tiles of kRows x kCols outputs
// keep their partial sums in registers; each output still starts from zero and
// sees its terms in the same order as the one-output-at-a-time loop.
using Vec8 = double __attribute__((vector_size(64)));
// Same vector, but allowed at any double-aligned address.
using Vec8Unaligned = double __attribute__((vector_size(64), aligned(8)));

inline Vec8 Load8(const double* p) { return *reinterpret_cast<const Vec8Unaligned*>(p); }

template <int kRows>
void CorrelateTile(const double* in, long in_rows, long in_len, const KernelView& w, long r0,
                   long s0, long base, long step, double* out, long out_len) {
  Vec8 lo[kRows] = {};
  Vec8 hi[kRows] = {};
  for (long c = 0; c < in_rows; ++c) {
    const double* row = in + c * in_len + s0 + base;
    for (long k = 0; k < w.taps; ++k) {
      const double* src = row + k * step;
      const Vec8 a = Load8(src);
      const Vec8 b = Load8(src + 8);
      for (int i = 0; i < kRows; ++i) {
        const double wv = w.at(r0 + i, c, k);
        lo[i] += wv * a;
        hi[i] += wv * b;
      }
    }
  }
  for (int i = 0; i < kRows; ++i) {
    double* o = out + (r0 + i) * out_len + s0;
    for (int j = 0; j < 8; ++j) {
      o[j] += lo[i][j];
      o[j + 8] += hi[i][j];
    }
  }
}

// Right-edge tile narrower than a vector; same summation order.
template <int kRows>
void CorrelateNarrowTile(const double* in, long in_rows, long in_len, const KernelView& w,
                         long r0, long s0, long width, long base, long step, double* out,
                         long out_len) {
  double acc[kRows][16] = {};
  for (long c = 0; c < in_rows; ++c) {
    const double* row = in + c * in_len + s0 + base;
    for (long k = 0; k < w.taps; ++k) {
      const double* src = row + k * step;
      for (int i = 0; i < kRows; ++i) {
        const double wv = w.at(r0 + i, c, k);
        for (long j = 0; j < width; ++j) acc[i][j] += wv * src[j];
      }
    }
  }
  for (int i = 0; i < kRows; ++i) {
    for (long j = 0; j < width; ++j) out[(r0 + i) * out_len + s0 + j] += acc[i][j];
  }
}

void CorrelateScalar(const double* in, long in_rows, long in_len, const KernelView& w, long r,
                     long s, long base, long step, double* out, long out_len) {
  double acc = 0.0;
  for (long c = 0; c < in_rows; ++c) {
    for (long k = 0; k < w.taps; ++k) {
      const long idx = s + base + k * step;
      if (idx < 0 || idx >= in_len) continue;
      acc += w.at(r, c, k) * in[c * in_len + idx];
    }
  }
  out[r * out_len + s] += acc;
}

void Correlate(const double* in, long in_rows, long in_len, const KernelView& w, long out_rows,
               long base, long step, double* out, long out_len) {
  constexpr int kRows = 4;
  constexpr int kCols = 16;
  // Output positions whose every tap is in range.
  const long first = std::min(base, base + (w.taps - 1) * step);
  const long last = std::max(base, base + (w.taps - 1) * step);
  const long lo = std::clamp(-first, 0L, out_len);
  const long hi = std::clamp(in_len - last, lo, out_len);
  const long tiled_hi = lo + (hi - lo) / kCols * kCols;
  const long narrow = hi - tiled_hi;
  long r = 0;
  for (; r + kRows <= out_rows; r += kRows) {
    for (long s = lo; s < tiled_hi; s += kCols) {
      CorrelateTile<kRows>(in, in_rows, in_len, w, r, s, base, step, out, out_len);
    }
    if (narrow > 0) {
      CorrelateNarrowTile<kRows>(in, in_rows, in_len, w, r, tiled_hi, narrow, base, step, out,
                                 out_len);
    }
  }
  for (; r < out_rows; ++r) {
    for (long s = lo; s < tiled_hi; s += kCols) {
      CorrelateTile<1>(in, in_rows, in_len, w, r, s, base, step, out, out_len);
    }
    if (narrow > 0) {
      CorrelateNarrowTile<1>(in, in_rows, in_len, w, r, tiled_hi, narrow, base, step, out,
                             out_len);
    }
  }
  for (r = 0; r < out_rows; ++r) {
    for (long s = 0; s < lo; ++s) CorrelateScalar(in, in_rows, in_len, w, r, s, base, step, out, out_len);
    for (long s = hi; s < out_len; ++s) {
      CorrelateScalar(in, in_rows, in_len, w, r, s, base, step, out, out_len);
    }
  }
}

// g[r, c, k] += sum_s a[r, s] * b[c, s + base + k * step] over in-range s.
void CorrelateGrad(const double* a, long a_rows, long len, const double* b, long b_rows,
                   long b_len, long taps, long base, long step, double* g, long stride_r,
                   long stride_c, long stride_k) {
  auto reduce = [](const Vec8& v) {
    return ((v[0] + v[1]) + (v[2] + v[3])) + ((v[4] + v[5]) + (v[6] + v[7]));
  };
  for (long k = 0; k < taps; ++k) {
    const ValidRange v = Valid(base + k * step, 1, b_len, len);
    const long n = v.hi - v.lo;
    const long n_tiled = n / 8 * 8;
    const long shift = v.lo + base + k * step;
    for (long c = 0; c < b_rows; c += 2) {
      const int cs = c + 1 < b_rows ? 2 : 1;
      const double* bp[2] = {b + c * b_len + shift, b + (c + cs - 1) * b_len + shift};
      for (long r = 0; r < a_rows; r += 4) {
        const int rs = static_cast<int>(std::min(4L, a_rows - r));
        const double* ap[4];
        for (int i = 0; i < 4; ++i) ap[i] = a + (r + std::min(i, rs - 1)) * len + v.lo;
        Vec8 acc[4][2] = {};
        for (long s = 0; s < n_tiled; s += 8) {
          const Vec8 b0 = Load8(bp[0] + s);
          const Vec8 b1 = Load8(bp[1] + s);
          for (int i = 0; i < 4; ++i) {
            const Vec8 av = Load8(ap[i] + s);
            acc[i][0] += av * b0;
            acc[i][1] += av * b1;
          }
        }
        for (int i = 0; i < rs; ++i) {
          for (int j = 0; j < cs; ++j) {
            double total = reduce(acc[i][j]);
            for (long s = n_tiled; s < n; ++s) total += ap[i][s] * bp[j][s];
            g[(r + i) * stride_r + (c + j) * stride_c + k * stride_k] += total;
          }
        }
      }
    }
  }
}

}  // namespace

Tensor Conv1d(Graph& g, const Tensor& x, const Tensor& w, int stride,
              int dilation, int padding) {
  RequireRank(x, 2, "conv1d", "input");
  RequireRank(w, 3, "conv1d", "kernels");
  if (stride < 1) Fail("conv1d", "stride must be >= 1");
  if (dilation < 1) Fail("conv1d", "dilation must be >= 1");
  if (padding < 0) Fail("conv1d", "padding must be >= 0");
  const long cin = static_cast<long>(x.rows());
  const long t_in = static_cast<long>(x.cols());
  const long cout = static_cast<long>(w.dim(0));
  const long k_len = static_cast<long>(w.dim(2));
  if (static_cast<long>(w.dim(1)) != cin) {
    Fail("conv1d", "kernel input channels (dim 1) = " +
                       std::to_string(w.dim(1)) + " but input has " +
                       std::to_string(cin) + " channels (dim 0)");
  }
  const long span = (k_len - 1) * dilation + 1;
  if (t_in + 2 * padding < span) {
    Fail("conv1d", "time axis (dim 1) length " + std::to_string(t_in) +
                       " shorter than receptive field " + std::to_string(span));
  }
  const long t_out = (t_in + 2 * padding - span) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(cout * t_out), 0.0);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  if (stride == 1) {
    Correlate(xd, cin, t_in, {wd, cin * k_len, k_len, 1, k_len}, cout, -padding, dilation,
              out.data(), t_out);
  } else {
    for (long co = 0; co < cout; ++co) {
      double* o = out.data() + co * t_out;
      for (long ci = 0; ci < cin; ++ci) {
        const double* xr = xd + ci * t_in;
        for (long k = 0; k < k_len; ++k) {
          const double wv = wd[(co * cin + ci) * k_len + k];
          const long offset = k * dilation - padding;
          const ValidRange r = Valid(offset, stride, t_in, t_out);
          for (long t = r.lo; t < r.hi; ++t) o[t] += wv * xr[t * stride + offset];
        }
      }
    }
  }
  Tensor y({static_cast<std::size_t>(cout), static_cast<std::size_t>(t_out)},
           std::move(out));
  if (g.NeedsGrad({&x, &w})) {
    g.Record("conv1d", y,
             [x, w, stride, dilation, padding, cin, t_in, cout, k_len,
              t_out](std::span<const double> gy) mutable {
               const double* xd = x.data().data();
               const double* wd = w.data().data();
               double* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
               double* gw = w.requires_grad() ? w.mutable_grad().data() : nullptr;
               if (stride == 1) {
                 // gx[ci, s] = sum over (co, k) of w[co, ci, k] * gy[co, s + padding - k * dilation]
                 if (gx) {
                   Correlate(gy.data(), cout, t_out, {wd, k_len, cin * k_len, 1, k_len}, cin,
                             padding, -dilation, gx, t_in);
                 }
                 if (gw) {
                   CorrelateGrad(gy.data(), cout, t_out, xd, cin, t_in, k_len, -padding,
                                 dilation, gw, cin * k_len, k_len, 1);
                 }
                 return;
               }
               for (long co = 0; co < cout; ++co) {
                 const double* go = gy.data() + co * t_out;
                 for (long ci = 0; ci < cin; ++ci) {
                   const double* xr = xd + ci * t_in;
                   for (long k = 0; k < k_len; ++k) {
                     const long widx = (co * cin + ci) * k_len + k;
                     const long offset = k * dilation - padding;
                     const ValidRange r = Valid(offset, stride, t_in, t_out);
                     double acc = 0.0;
                     for (long t = r.lo; t < r.hi; ++t) {
                       const long idx = t * stride + offset;
                       if (gx) gx[ci * t_in + idx] += wd[widx] * go[t];
                       acc += go[t] * xr[idx];
                     }
                     if (gw) gw[widx] += acc;
                   }
                 }
               }
             });
  }
  return y;
}

Tensor ConvTranspose1d(Graph& g, const Tensor& x, const Tensor& w, int stride) {
  RequireRank(x, 2, "conv_transpose1d", "input");
  RequireRank(w, 3, "conv_transpose1d", "kernels");
  if (stride < 1) Fail("conv_transpose1d", "stride must be >= 1");
  const long cin = static_cast<long>(x.rows());
  const long t_in = static_cast<long>(x.cols());
  if (static_cast<long>(w.dim(0)) != cin) {
    Fail("conv_transpose1d", "kernel input channels (dim 0) = " +
                                 std::to_string(w.dim(0)) + " but input has " +
                                 std::to_string(cin) + " channels (dim 0)");
  }
  const long cout = static_cast<long>(w.dim(1));
  const long k_len = static_cast<long>(w.dim(2));
  const long t_out = (t_in - 1) * stride + k_len;
  std::vector<double> out(static_cast<std::size_t>(cout * t_out), 0.0);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  for (long co = 0; co < cout; ++co) {
    double* o = out.data() + co * t_out;
    for (long ci = 0; ci < cin; ++ci) {
      const double* xr = xd + ci * t_in;
      for (long k = 0; k < k_len; ++k) {
        const double wv = wd[(ci * cout + co) * k_len + k];
        if (stride == 1) {
          Axpy(wv, xr, o + k, static_cast<std::size_t>(t_in));
        } else {
          for (long t = 0; t < t_in; ++t) o[t * stride + k] += xr[t] * wv;
        }
      }
    }
  }
  Tensor y({static_cast<std::size_t>(cout), static_cast<std::size_t>(t_out)},
           std::move(out));
  if (g.NeedsGrad({&x, &w})) {
    g.Record("conv_transpose1d", y,
             [x, w, stride, cin, t_in, cout, k_len,
              t_out](std::span<const double> gy) mutable {
               const double* xd = x.data().data();
               const double* wd = w.data().data();
               double* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
               double* gw = w.requires_grad() ? w.mutable_grad().data() : nullptr;
               for (long co = 0; co < cout; ++co) {
                 const double* go = gy.data() + co * t_out;
                 for (long ci = 0; ci < cin; ++ci) {
                   const double* xr = xd + ci * t_in;
                   for (long k = 0; k < k_len; ++k) {
                     const long widx = (ci * cout + co) * k_len + k;
                     if (stride == 1) {
                       const std::size_t n = static_cast<std::size_t>(t_in);
                       if (gx) Axpy(wd[widx], go + k, gx + ci * t_in, n);
                       if (gw) gw[widx] += Dot({xr, n}, {go + k, n});
                     } else {
                       double acc = 0.0;
                       for (long t = 0; t < t_in; ++t) {
                         const double gv = go[t * stride + k];
                         if (gx) gx[ci * t_in + t] += wd[widx] * gv;
                         acc += xr[t] * gv;
                       }
                       if (gw) gw[widx] += acc;
                     }
                   }
                 }
               }
             });
  }
  return y;
}

Tensor DepthwiseConv1d(Graph& g, const Tensor& x, const Tensor& w,
                       int dilation, int padding) {
  RequireRank(x, 2, "depthwise_conv1d", "input");
  RequireRank(w, 2, "depthwise_conv1d", "kernels");
  if (dilation < 1) Fail("depthwise_conv1d", "dilation must be >= 1");
  if (padding < 0) Fail("depthwise_conv1d", "padding must be >= 0");
  const long ch = static_cast<long>(x.rows());
  const long t_in = static_cast<long>(x.cols());
  if (static_cast<long>(w.rows()) != ch) {
    Fail("depthwise_conv1d", "kernel channels (dim 0) = " +
                                 std::to_string(w.rows()) + " but input has " +
                                 std::to_string(ch));
  }
  const long k_len = static_cast<long>(w.cols());
  const long span = (k_len - 1) * dilation + 1;
  if (t_in + 2 * padding < span) {
    Fail("depthwise_conv1d", "time axis (dim 1) shorter than receptive field");
  }
  const long t_out = t_in + 2 * padding - span + 1;
  std::vector<double> out(static_cast<std::size_t>(ch * t_out), 0.0);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  for (long c = 0; c < ch; ++c) {
    double* o = out.data() + c * t_out;
    const double* xr = xd + c * t_in;
    for (long k = 0; k < k_len; ++k) {
      const long offset = k * dilation - padding;
      const ValidRange r = Valid(offset, 1, t_in, t_out);
      Axpy(wd[c * k_len + k], xr + r.lo + offset, o + r.lo,
           static_cast<std::size_t>(r.hi - r.lo));
    }
  }
  Tensor y({static_cast<std::size_t>(ch), static_cast<std::size_t>(t_out)},
           std::move(out));
  if (g.NeedsGrad({&x, &w})) {
    g.Record("depthwise_conv1d", y,
             [x, w, dilation, padding, ch, t_in, k_len,
              t_out](std::span<const double> gy) mutable {
               const double* xd = x.data().data();
               const double* wd = w.data().data();
               double* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
               double* gw = w.requires_grad() ? w.mutable_grad().data() : nullptr;
               for (long c = 0; c < ch; ++c) {
                 const double* go = gy.data() + c * t_out;
                 const double* xr = xd + c * t_in;
                 for (long k = 0; k < k_len; ++k) {
                   const long offset = k * dilation - padding;
                   const ValidRange r = Valid(offset, 1, t_in, t_out);
                   const std::size_t n = static_cast<std::size_t>(r.hi - r.lo);
                   if (gx) Axpy(wd[c * k_len + k], go + r.lo, gx + c * t_in + r.lo + offset, n);
                   if (gw) gw[c * k_len + k] += Dot({go + r.lo, n}, {xr + r.lo + offset, n});
                 }
               }
             });
  }
  return y;
}

// ---- elementwise -----------------------------------------------------------

namespace {

template <typename Fwd, typename GradA, typename GradB>
Tensor Binary(Graph& g, const Tensor& a, const Tensor& b, const char* name,
              Fwd fwd, GradA grad_a, GradB grad_b) {
  const Broadcast mode = CheckBinary(a, b, name);
  const std::size_t n = a.numel();
  const std::size_t cols = a.rank() == 2 ? a.cols() : n;
  const std::size_t rows = n / cols;
  std::vector<double> out(n);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  if (mode == Broadcast::kSame) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i]);
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      const double bv = bd[r];
      for (std::size_t t = r * cols; t < (r + 1) * cols; ++t) out[t] = fwd(ad[t], bv);
    }
  }
  Tensor y(a.shape(), std::move(out));
  if (g.NeedsGrad({&a, &b})) {
    g.Record(name, y, [a, b, mode, n, cols, rows, grad_a,
                       grad_b](std::span<const double> gy) mutable {
      const double* ad = a.data().data();
      const double* bd = b.data().data();
      double* ga = a.requires_grad() ? a.mutable_grad().data() : nullptr;
      double* gb = b.requires_grad() ? b.mutable_grad().data() : nullptr;
      if (mode == Broadcast::kSame) {
        if (ga) for (std::size_t i = 0; i < n; ++i) ga[i] += grad_a(gy[i], ad[i], bd[i]);
        if (gb) for (std::size_t i = 0; i < n; ++i) gb[i] += grad_b(gy[i], ad[i], bd[i]);
        return;
      }
      for (std::size_t r = 0; r < rows; ++r) {
        const double bv = bd[r];
        const std::size_t lo = r * cols;
        const std::size_t hi = lo + cols;
        if (ga) for (std::size_t t = lo; t < hi; ++t) ga[t] += grad_a(gy[t], ad[t], bv);
        if (gb) {
          double acc = 0.0;
          for (std::size_t t = lo; t < hi; ++t) acc += grad_b(gy[t], ad[t], bv);
          gb[r] += acc;
        }
      }
    });
  }
  return y;
}

template <typename Fwd, typename Deriv>
Tensor Unary(Graph& g, const Tensor& x, const char* name, Fwd fwd,
             Deriv deriv) {
  if (!x.defined()) Fail(name, "undefined operand");
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  const double* xd = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(xd[i]);
  Tensor y(x.shape(), std::move(out));
  if (g.NeedsGrad({&x})) {
    g.Record(name, y, [x, y, n, deriv](std::span<const double> gy) mutable {
      const double* xd = x.data().data();
      const double* yd = y.data().data();
      double* gx = x.mutable_grad().data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * deriv(xd[i], yd[i]);
    });
  }
  return y;
}

}  // namespace

Tensor Add(Graph& g, const Tensor& a, const Tensor& b) {
  return Binary(
      g, a, b, "add", [](double x, double y) { return x + y; },
      [](double gy, double, double) { return gy; },
      [](double gy, double, double) { return gy; });
}

Tensor Sub(Graph& g, const Tensor& a, const Tensor& b) {
  return Binary(
      g, a, b, "sub", [](double x, double y) { return x - y; },
      [](double gy, double, double) { return gy; },
      [](double gy, double, double) { return -gy; });
}

Tensor Mul(Graph& g, const Tensor& a, const Tensor& b) {
  return Binary(
      g, a, b, "mul", [](double x, double y) { return x * y; },
      [](double gy, double, double y) { return gy * y; },
      [](double gy, double x, double) { return gy * x; });
}

Tensor Sigmoid(Graph& g, const Tensor& x) {
  return Unary(
      g, x, "sigmoid", [](double v) { return StableSigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor Relu(Graph& g, const Tensor& x) {
  return Unary(
      g, x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor Tanh(Graph& g, const Tensor& x) {
  return Unary(
      g, x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor PRelu(Graph& g, const Tensor& x, const Tensor& alpha) {
  RequireRank(x, 2, "prelu", "input");
  RequireRank(alpha, 2, "prelu", "alpha");
  const bool shared = alpha.rows() == 1 && alpha.cols() == 1;
  if (!shared && (alpha.rows() != x.rows() || alpha.cols() != 1)) {
    Fail("prelu", "alpha must be 1 x 1 or " + std::to_string(x.rows()) +
                      " x 1, got " + ShapeToString(alpha.shape()));
  }
  const std::size_t cols = x.cols();
  const std::size_t n = x.numel();
  const std::size_t rows = x.rows();
  std::vector<double> out(n);
  const double* xd = x.data().data();
  const double* ad = alpha.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double a = ad[shared ? 0 : r];
    for (std::size_t t = r * cols; t < (r + 1) * cols; ++t) {
      out[t] = xd[t] > 0.0 ? xd[t] : a * xd[t];
    }
  }
  Tensor y(x.shape(), std::move(out));
  if (g.NeedsGrad({&x, &alpha})) {
    g.Record("prelu", y, [x, alpha, shared, cols,
                          rows](std::span<const double> gy) mutable {
      const double* xd = x.data().data();
      const double* ad = alpha.data().data();
      double* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
      double* ga = alpha.requires_grad() ? alpha.mutable_grad().data() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        const double a = ad[shared ? 0 : r];
        const std::size_t lo = r * cols;
        const std::size_t hi = lo + cols;
        if (gx) {
          for (std::size_t t = lo; t < hi; ++t) gx[t] += xd[t] > 0.0 ? gy[t] : gy[t] * a;
        }
        if (ga) {
          double acc = 0.0;
          for (std::size_t t = lo; t < hi; ++t) acc += xd[t] > 0.0 ? 0.0 : gy[t] * xd[t];
          ga[shared ? 0 : r] += acc;
        }
      }
    });
  }
  return y;
}

Tensor Elementwise(Graph& g, ElementwiseKind kind, const Tensor& a,
                   const Tensor* b) {
  auto need_b = [&]() -> const Tensor& {
    if (b == nullptr) Fail("elementwise", "operation needs a second operand");
    return *b;
  };
  switch (kind) {
    case ElementwiseKind::kAdd: return Add(g, a, need_b());
    case ElementwiseKind::kSub: return Sub(g, a, need_b());
    case ElementwiseKind::kMul: return Mul(g, a, need_b());
    case ElementwiseKind::kSigmoid: return Sigmoid(g, a);
    case ElementwiseKind::kRelu: return Relu(g, a);
    case ElementwiseKind::kTanh: return Tanh(g, a);
    case ElementwiseKind::kPRelu: return PRelu(g, a, need_b());
  }
  throw std::logic_error("elementwise: unknown kind");
}

// ---- normalization & reductions -------------------------------------------

Tensor GlobalLayerNorm(Graph& g, const Tensor& x, const Tensor& gain,
                       const Tensor& bias, double eps) {
  RequireRank(x, 2, "global_layer_norm", "input");
  if (!(eps > 0.0)) Fail("global_layer_norm", "eps must be > 0");
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  const Shape param_shape{rows, 1};
  if (gain.shape() != param_shape || bias.shape() != param_shape) {
    Fail("global_layer_norm", "gain and bias must be " +
                                  ShapeToString(param_shape));
  }
  const std::size_t n = x.numel();
  const double* xd = x.data().data();
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += xd[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += (xd[i] - mean) * (xd[i] - mean);
  var /= static_cast<double>(n);
  const double inv_std = 1.0 / std::sqrt(var + eps);
  std::vector<double> normalized(n);
  std::vector<double> out(n);
  const double* gd = gain.data().data();
  const double* bd = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      normalized[i] = (xd[i] - mean) * inv_std;
      out[i] = gd[r] * normalized[i] + bd[r];
    }
  }
  Tensor y(x.shape(), std::move(out));
  if (g.NeedsGrad({&x, &gain, &bias})) {
    g.Record("global_layer_norm", y,
             [x, gain, bias, normalized = std::move(normalized), inv_std, rows,
              cols, n](std::span<const double> gy) mutable {
               const double* gd = gain.data().data();
               double* gg = gain.requires_grad() ? gain.mutable_grad().data() : nullptr;
               double* gb = bias.requires_grad() ? bias.mutable_grad().data() : nullptr;
               double sum_g = 0.0;
               double sum_gx = 0.0;
               for (std::size_t r = 0; r < rows; ++r) {
                 double acc_g = 0.0;
                 double acc_b = 0.0;
                 for (std::size_t c = 0; c < cols; ++c) {
                   const std::size_t i = r * cols + c;
                   const double gxhat = gy[i] * gd[r];
                   sum_g += gxhat;
                   sum_gx += gxhat * normalized[i];
                   acc_g += gy[i] * normalized[i];
                   acc_b += gy[i];
                 }
                 if (gg) gg[r] += acc_g;
                 if (gb) gb[r] += acc_b;
               }
               if (!x.requires_grad()) return;
               const double mean_g = sum_g / static_cast<double>(n);
               const double mean_gx = sum_gx / static_cast<double>(n);
               double* gx = x.mutable_grad().data();
               for (std::size_t r = 0; r < rows; ++r) {
                 for (std::size_t c = 0; c < cols; ++c) {
                   const std::size_t i = r * cols + c;
                   const double gxhat = gy[i] * gd[r];
                   gx[i] += inv_std * (gxhat - mean_g - normalized[i] * mean_gx);
                 }
               }
             });
  }
  return y;
}

Tensor Sum(Graph& g, const Tensor& x) {
  if (!x.defined()) Fail("sum", "undefined operand");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor y = Tensor::Scalar(acc);
  if (g.NeedsGrad({&x})) {
    g.Record("sum", y, [x](std::span<const double> gy) mutable {
      for (double& v : x.mutable_grad()) v += gy[0];
    });
  }
  return y;
}

Tensor MeanOverTime(Graph& g, const Tensor& x) {
  RequireRank(x, 2, "mean_over_time", "input");
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  std::vector<double> out(rows, 0.0);
  const double* xd = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += xd[r * cols + c];
    out[r] = acc / static_cast<double>(cols);
  }
  Tensor y({rows, 1}, std::move(out));
  if (g.NeedsGrad({&x})) {
    g.Record("mean_over_time", y, [x, rows, cols](std::span<const double> gy) mutable {
      double* gx = x.mutable_grad().data();
      const double inv = 1.0 / static_cast<double>(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gy[r] * inv;
      }
    });
  }
  return y;
}

Tensor ConcatRows(Graph& g, const Tensor& a, const Tensor& b) {
  RequireRank(a, 2, "concat_rows", "first operand");
  RequireRank(b, 2, "concat_rows", "second operand");
  if (a.cols() != b.cols()) {
    Fail("concat_rows", "column counts differ (dim 1): " +
                            std::to_string(a.cols()) + " vs " +
                            std::to_string(b.cols()));
  }
  std::vector<double> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  Tensor y({a.rows() + b.rows(), a.cols()}, std::move(out));
  if (g.NeedsGrad({&a, &b})) {
    g.Record("concat_rows", y, [a, b](std::span<const double> gy) mutable {
      const std::size_t na = a.numel();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < na; ++i) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[na + i];
      }
    });
  }
  return y;
}

Tensor SelectRow(Graph& g, const Tensor& x, std::size_t row) {
  RequireRank(x, 2, "select_row", "input");
  if (row >= x.rows()) {
    Fail("select_row", "row " + std::to_string(row) + " out of range (dim 0 = " +
                           std::to_string(x.rows()) + ")");
  }
  const std::size_t cols = x.cols();
  auto first = x.data().begin() + static_cast<std::ptrdiff_t>(row * cols);
  Tensor y({1, cols}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(cols)));
  if (g.NeedsGrad({&x})) {
    g.Record("select_row", y, [x, row, cols](std::span<const double> gy) mutable {
      double* gx = x.mutable_grad().data() + row * cols;
      for (std::size_t c = 0; c < cols; ++c) gx[c] += gy[c];
    });
  }
  return y;
}

Tensor SliceColumns(Graph& g, const Tensor& x, std::size_t begin,
                    std::size_t length) {
  RequireRank(x, 2, "slice_columns", "input");
  if (length == 0 || begin + length > x.cols()) {
    Fail("slice_columns", "range [" + std::to_string(begin) + ", " +
                              std::to_string(begin + length) +
                              ") exceeds dim 1 = " + std::to_string(x.cols()));
  }
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  std::vector<double> out(rows * length);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(r * cols + begin),
                length, out.begin() + static_cast<std::ptrdiff_t>(r * length));
  }
  Tensor y({rows, length}, std::move(out));
  if (g.NeedsGrad({&x})) {
    g.Record("slice_columns", y, [x, begin, length, rows,
                                  cols](std::span<const double> gy) mutable {
      double* gx = x.mutable_grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < length; ++c) {
          gx[r * cols + begin + c] += gy[r * length + c];
        }
      }
    });
  }
  return y;
}

Tensor FitLength(Graph& g, const Tensor& x, std::size_t length) {
  RequireRank(x, 2, "fit_length", "input");
  if (length == 0) Fail("fit_length", "length must be positive");
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  if (cols == length) return x;
  const std::size_t keep = std::min(cols, length);
  std::vector<double> out(rows * length, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(r * cols), keep,
                out.begin() + static_cast<std::ptrdiff_t>(r * length));
  }
  Tensor y({rows, length}, std::move(out));
  if (g.NeedsGrad({&x})) {
    g.Record("fit_length", y, [x, rows, cols, length,
                               keep](std::span<const double> gy) mutable {
      double* gx = x.mutable_grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < keep; ++c) gx[r * cols + c] += gy[r * length + c];
      }
    });
  }
  return y;
}

// ---- gradient checking -----------------------------------------------------

double GradCheck(const MultiScalarFn& f, std::span<const Tensor> xs, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: h must be > 0");
  std::vector<Tensor> leaves;
  leaves.reserve(xs.size());
  for (const Tensor& x : xs) leaves.emplace_back(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  Graph graph;
  Tensor loss = f(graph, leaves);
  if (loss.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  if (!AllFinite(loss.data())) throw std::runtime_error("grad_check: non-finite loss");
  graph.Backward(loss);

  auto evaluate = [&](const std::vector<Tensor>& inputs) {
    Graph no_grad(false);
    const double v = f(no_grad, inputs).item();
    if (!std::isfinite(v)) {
      throw std::runtime_error("grad_check: non-finite value under perturbation");
    }
    return v;
  };

  double worst = 0.0;
  std::vector<Tensor> probe;
  for (const Tensor& x : xs) probe.push_back(x.Detach());
  for (std::size_t j = 0; j < xs.size(); ++j) {
    std::vector<double> analytic(xs[j].numel(), 0.0);
    if (leaves[j].has_grad()) {
      std::copy(leaves[j].grad().begin(), leaves[j].grad().end(), analytic.begin());
    }
    if (!AllFinite(analytic)) throw std::runtime_error("grad_check: non-finite gradient");
    std::span<double> p = probe[j].mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double original = p[i];
      p[i] = original + h;
      const double up = evaluate(probe);
      p[i] = original - h;
      const double down = evaluate(probe);
      p[i] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double err =
          std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]), 1e-8);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double GradCheck(const ScalarFn& f, const Tensor& x, double h) {
  MultiScalarFn wrapped = [&f](Graph& g, std::span<const Tensor> xs) {
    return f(g, xs[0]);
  };
  const Tensor inputs[] = {x};
  return GradCheck(wrapped, inputs, h);
}

// ---- helpers ---------------------------------------------------------------

double Dot(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = std::min(a.size(), b.size());
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc[0] += a[i] * b[i];
    acc[1] += a[i + 1] * b[i + 1];
    acc[2] += a[i + 2] * b[i + 2];
    acc[3] += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) acc[0] += a[i] * b[i];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

bool AllFinite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace cdtse
