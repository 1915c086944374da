#ifndef ICLSTREAMS_TENSOR_HPP
#define ICLSTREAMS_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "iclstreams/errors.hpp"
#include "iclstreams/rng.hpp"

namespace icls {

// Dense tensor of rank 1 or 2, row-major contiguous, with an optional
// gradient buffer of the same shape. Copying a TensorT copies the handle,
// not the storage; ops below return fresh tensors.
template <typename Real>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->value.assign(numel_of(t.s_->shape), Real(0));
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static TensorT from(std::vector<int> shape, std::vector<Real> data,
                      bool requires_grad = false) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->value = std::move(data);
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(Real v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return s_ != nullptr; }
  const std::vector<int>& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(s_->value.size()); }

  // Rank-2 accessors. A rank-1 tensor of length n is treated as n x 1.
  int rows() const { return s_->shape[0]; }
  int cols() const { return rank() >= 2 ? s_->shape[1] : 1; }

  Real* data() { return s_->value.data(); }
  const Real* data() const { return s_->value.data(); }
  std::span<Real> values() { return s_->value; }
  std::span<const Real> values() const { return s_->value; }

  Real& at(int i) { return s_->value[static_cast<std::size_t>(i)]; }
  Real at(int i) const { return s_->value[static_cast<std::size_t>(i)]; }
  Real& at(int i, int j) {
    return s_->value[static_cast<std::size_t>(i) * cols() + j];
  }
  Real at(int i, int j) const {
    return s_->value[static_cast<std::size_t>(i) * cols() + j];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool b) { s_->requires_grad = b; }

  bool has_grad() const { return !s_->grad.empty(); }

  // Grad buffer, allocated (zeroed) on first touch.
  Real* grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->value.size(), Real(0));
    return s_->grad.data();
  }
  std::span<const Real> grad_view() const { return s_->grad; }
  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), Real(0));
  }
  void drop_grad() { s_->grad.clear(); }

  bool same_storage(const TensorT& o) const { return s_ == o.s_; }

  static std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << 'x';
      os << shape[i];
    }
    os << ']';
    return os.str();
  }
  std::string shape_str() const { return shape_str(s_->shape); }

 private:
  struct Storage {
    std::vector<int> shape;
    std::vector<Real> value;
    std::vector<Real> grad;  // empty until first use
    bool requires_grad = false;
  };

  static std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("non-positive dimension in " + shape_str(shape));
      n *= d;
    }
    return n;
  }

  std::shared_ptr<Storage> s_;
};

// Ordered record of primitive ops. Each entry holds the op output and a
// closure that pushes gradients from that output back to the op inputs;
// entries are appended in execution order, so reverse iteration is a valid
// backward traversal. Grad buffers of recorded outputs are transient (reset
// on every backward pass); grads of leaf tensors accumulate across passes.
template <typename Real>
class TapeT {
 public:
  void record(TensorT<Real> out, std::function<void()> backward_step) {
    steps_.push_back(Step{std::move(out), std::move(backward_step)});
  }
  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  void run_backward(const TensorT<Real>& loss) {
    for (auto& s : steps_) s.out.zero_grad();
    const_cast<TensorT<Real>&>(loss).grad()[0] += Real(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->backward();
  }

 private:
  struct Step {
    TensorT<Real> out;
    std::function<void()> backward;
  };
  std::vector<Step> steps_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

namespace detail {

template <typename Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using EMap = Eigen::Map<EMat<Real>>;
template <typename Real>
using ECMap = Eigen::Map<const EMat<Real>>;

template <typename Real>
ECMap<Real> cmap(const TensorT<Real>& t) {
  return ECMap<Real>(t.data(), t.rows(), t.cols());
}
template <typename Real>
EMap<Real> map_grad(TensorT<Real>& t) {
  return EMap<Real>(t.grad(), t.rows(), t.cols());
}
template <typename Real>
EMap<Real> map_value(TensorT<Real>& t) {
  return EMap<Real>(t.data(), t.rows(), t.cols());
}
template <typename Real>
bool want_tape(const TapeT<Real>* tape, bool any_requires) {
  return tape != nullptr && any_requires;
}

template <typename Real>
void check_same_shape(const TensorT<Real>& a, const TensorT<Real>& b,
                      const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops. Every op takes the tape first; pass nullptr for pure
// evaluation (no graph is recorded and backward() will not see the op).
// ---------------------------------------------------------------------------

// C = A * B  (m x k) * (k x n). Fixed reduction order: the inner product over
// k is evaluated in a deterministic order for a given build, so repeated runs
// are bit-identical.
template <typename Real>
TensorT<Real> matmul(TapeT<Real>* tape, const TensorT<Real>& a,
                     const TensorT<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul: incompatible shapes " + a.shape_str() + " and " +
                     b.shape_str());
  auto out = TensorT<Real>::zeros({a.rows(), b.cols()},
                                  a.requires_grad() || b.requires_grad());
  detail::map_value(out).noalias() = detail::cmap(a) * detail::cmap(b);
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [a = a, b = b, out]() mutable {
      detail::ECMap<Real> dc(out.grad(), out.rows(), out.cols());
      if (a.requires_grad())
        detail::map_grad(a).noalias() += dc * detail::cmap(b).transpose();
      if (b.requires_grad())
        detail::map_grad(b).noalias() += detail::cmap(a).transpose() * dc;
    });
  }
  return out;
}

// C = A + B, same shape.
template <typename Real>
TensorT<Real> add(TapeT<Real>* tape, const TensorT<Real>& a,
                  const TensorT<Real>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = TensorT<Real>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out.data();
  for (std::int64_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [a = a, b = b, out]() mutable {
      const Real* g = out.grad();
      if (a.requires_grad()) {
        Real* ga = a.grad();
        for (std::int64_t i = 0; i < out.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        Real* gb = b.grad();
        for (std::int64_t i = 0; i < out.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

// C = M + v per column (bias add; v has M.rows() entries).
template <typename Real>
TensorT<Real> add_colvec(TapeT<Real>* tape, const TensorT<Real>& m,
                         const TensorT<Real>& v) {
  if (m.rank() != 2 || v.size() != m.rows())
    throw ShapeError("add_colvec: shape mismatch " + m.shape_str() + " vs " +
                     v.shape_str());
  auto out = TensorT<Real>::zeros(m.shape(), m.requires_grad() || v.requires_grad());
  const int r = m.rows(), c = m.cols();
  for (int i = 0; i < r; ++i) {
    const Real bias = v.at(i);
    const Real* src = m.data() + static_cast<std::size_t>(i) * c;
    Real* dst = out.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) dst[j] = src[j] + bias;
  }
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [m = m, v = v, out, r, c]() mutable {
      const Real* g = out.grad();
      if (m.requires_grad()) {
        Real* gm = m.grad();
        for (std::int64_t i = 0; i < out.size(); ++i) gm[i] += g[i];
      }
      if (v.requires_grad()) {
        Real* gv = v.grad();
        for (int i = 0; i < r; ++i) {
          Real acc = 0;
          const Real* row = g + static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j) acc += row[j];
          gv[i] += acc;
        }
      }
    });
  }
  return out;
}

// C = M + tile(P): P is r x s, M is r x (s*blocks); P is added to every
// column block. Used to add shared positional embeddings to a batch.
template <typename Real>
TensorT<Real> add_tiled(TapeT<Real>* tape, const TensorT<Real>& m,
                        const TensorT<Real>& p) {
  if (m.rank() != 2 || p.rank() != 2 || m.rows() != p.rows() ||
      m.cols() % p.cols() != 0)
    throw ShapeError("add_tiled: shape mismatch " + m.shape_str() + " vs " +
                     p.shape_str());
  auto out = TensorT<Real>::zeros(m.shape(), m.requires_grad() || p.requires_grad());
  const int r = m.rows(), c = m.cols(), s = p.cols();
  for (int i = 0; i < r; ++i) {
    const Real* src = m.data() + static_cast<std::size_t>(i) * c;
    const Real* tile = p.data() + static_cast<std::size_t>(i) * s;
    Real* dst = out.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) dst[j] = src[j] + tile[j % s];
  }
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [m = m, p = p, out, r, c, s]() mutable {
      const Real* g = out.grad();
      if (m.requires_grad()) {
        Real* gm = m.grad();
        for (std::int64_t i = 0; i < out.size(); ++i) gm[i] += g[i];
      }
      if (p.requires_grad()) {
        Real* gp = p.grad();
        for (int i = 0; i < r; ++i) {
          const Real* row = g + static_cast<std::size_t>(i) * c;
          Real* prow = gp + static_cast<std::size_t>(i) * s;
          for (int j = 0; j < c; ++j) prow[j % s] += row[j];
        }
      }
    });
  }
  return out;
}

// C = c * A for a plain (non-differentiated) scalar c.
template <typename Real>
TensorT<Real> scale(TapeT<Real>* tape, const TensorT<Real>& a, Real c) {
  auto out = TensorT<Real>::zeros(a.shape(), a.requires_grad());
  const Real* pa = a.data();
  Real* po = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = c * pa[i];
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [a = a, out, c]() mutable {
      const Real* g = out.grad();
      Real* ga = a.grad();
      for (std::int64_t i = 0; i < out.size(); ++i) ga[i] += c * g[i];
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> relu(TapeT<Real>* tape, const TensorT<Real>& a) {
  auto out = TensorT<Real>::zeros(a.shape(), a.requires_grad());
  const Real* pa = a.data();
  Real* po = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] > Real(0) ? pa[i] : Real(0);
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [a = a, out]() mutable {
      const Real* g = out.grad();
      const Real* pa = a.data();
      Real* ga = a.grad();
      for (std::int64_t i = 0; i < out.size(); ++i)
        if (pa[i] > Real(0)) ga[i] += g[i];
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> transpose(TapeT<Real>* tape, const TensorT<Real>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank-2 tensor required");
  auto out = TensorT<Real>::zeros({a.cols(), a.rows()}, a.requires_grad());
  detail::map_value(out) = detail::cmap(a).transpose();
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [a = a, out]() mutable {
      detail::ECMap<Real> dg(out.grad(), out.rows(), out.cols());
      detail::map_grad(a) += dg.transpose();
    });
  }
  return out;
}

// Row i of A as a rank-1 tensor.
template <typename Real>
TensorT<Real> row_select(TapeT<Real>* tape, const TensorT<Real>& a, int i) {
  if (a.rank() != 2 || i < 0 || i >= a.rows())
    throw IndexError("row_select: row " + std::to_string(i) + " out of " +
                     a.shape_str());
  auto out = TensorT<Real>::zeros({a.cols()}, a.requires_grad());
  std::copy_n(a.data() + static_cast<std::size_t>(i) * a.cols(), a.cols(),
              out.data());
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [a = a, out, i]() mutable {
      const Real* g = out.grad();
      Real* ga = a.grad() + static_cast<std::size_t>(i) * a.cols();
      for (int j = 0; j < a.cols(); ++j) ga[j] += g[j];
    });
  }
  return out;
}

// Column j of A as a rank-1 tensor.
template <typename Real>
TensorT<Real> col_select(TapeT<Real>* tape, const TensorT<Real>& a, int j) {
  if (a.rank() != 2 || j < 0 || j >= a.cols())
    throw IndexError("col_select: column " + std::to_string(j) + " out of " +
                     a.shape_str());
  auto out = TensorT<Real>::zeros({a.rows()}, a.requires_grad());
  for (int i = 0; i < a.rows(); ++i) out.at(i) = a.at(i, j);
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [a = a, out, j]() mutable {
      const Real* g = out.grad();
      Real* ga = a.grad();
      for (int i = 0; i < a.rows(); ++i)
        ga[static_cast<std::size_t>(i) * a.cols() + j] += g[i];
    });
  }
  return out;
}

// Rows [r0, r1) of A.
template <typename Real>
TensorT<Real> row_range(TapeT<Real>* tape, const TensorT<Real>& a, int r0,
                        int r1) {
  if (a.rank() != 2 || r0 < 0 || r1 > a.rows() || r0 >= r1)
    throw IndexError("row_range: [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ") out of " + a.shape_str());
  auto out = TensorT<Real>::zeros({r1 - r0, a.cols()}, a.requires_grad());
  std::copy_n(a.data() + static_cast<std::size_t>(r0) * a.cols(),
              static_cast<std::size_t>(r1 - r0) * a.cols(), out.data());
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [a = a, out, r0]() mutable {
      const Real* g = out.grad();
      Real* ga = a.grad() + static_cast<std::size_t>(r0) * a.cols();
      for (std::int64_t i = 0; i < out.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

// Columns [c0, c1) of A.
template <typename Real>
TensorT<Real> col_range(TapeT<Real>* tape, const TensorT<Real>& a, int c0,
                        int c1) {
  if (a.rank() != 2 || c0 < 0 || c1 > a.cols() || c0 >= c1)
    throw IndexError("col_range: [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") out of " + a.shape_str());
  auto out = TensorT<Real>::zeros({a.rows(), c1 - c0}, a.requires_grad());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = c0; j < c1; ++j) out.at(i, j - c0) = a.at(i, j);
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [a = a, out, c0]() mutable {
      const Real* g = out.grad();
      Real* ga = a.grad();
      for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < out.cols(); ++j)
          ga[static_cast<std::size_t>(i) * a.cols() + c0 + j] +=
              g[static_cast<std::size_t>(i) * out.cols() + j];
    });
  }
  return out;
}

// Vertical concatenation; all inputs share the column count.
template <typename Real>
TensorT<Real> concat_rows(TapeT<Real>* tape,
                          const std::vector<TensorT<Real>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  int rows = 0;
  bool any_grad = false;
  const int c = parts[0].cols();
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != c)
      throw ShapeError("concat_rows: column mismatch at " + p.shape_str());
    rows += p.rows();
    any_grad = any_grad || p.requires_grad();
  }
  auto out = TensorT<Real>::zeros({rows, c}, any_grad);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.data(), p.size(), out.data() + off);
    off += static_cast<std::size_t>(p.size());
  }
  if (detail::want_tape(tape, any_grad)) {
    tape->record(out, [parts = parts, out]() mutable {
      const Real* g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          Real* gp = p.grad();
          for (std::int64_t i = 0; i < p.size(); ++i) gp[i] += g[off + i];
        }
        off += static_cast<std::size_t>(p.size());
      }
    });
  }
  return out;
}

// Scalar sum of all entries.
template <typename Real>
TensorT<Real> sum(TapeT<Real>* tape, const TensorT<Real>& a) {
  auto out = TensorT<Real>::zeros({1}, a.requires_grad());
  Real acc = 0;
  const Real* pa = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) acc += pa[i];
  out.at(0) = acc;
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [a = a, out]() mutable {
      const Real g = out.grad()[0];
      Real* ga = a.grad();
      for (std::int64_t i = 0; i < a.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

namespace detail {

// Shared softmax-over-column-segments kernel. The input is r x (s*blocks)
// when block_cols == s; each column is normalized independently over its
// allowed rows. With causal masking, column j of a block only sees rows
// [0, j]. Rows outside the mask get exact zeros.
template <typename Real>
void softmax_columns_forward(const TensorT<Real>& in, TensorT<Real>& out,
                             int block_cols, bool causal, const char* op) {
  const int r = in.rows(), c = in.cols();
  const Real* src = in.data();
  for (std::int64_t i = 0; i < in.size(); ++i)
    if (std::isnan(static_cast<double>(src[i])))
      throw NumericError(std::string(op) + ": NaN in input");
  for (int j = 0; j < c; ++j) {
    const int pos = j % block_cols;
    const int limit = causal ? pos + 1 : r;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int i = 0; i < limit; ++i) mx = std::max(mx, in.at(i, j));
    Real denom = 0;
    for (int i = 0; i < limit; ++i) {
      const Real e = std::exp(in.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (int i = 0; i < limit; ++i) out.at(i, j) /= denom;
    for (int i = limit; i < r; ++i) out.at(i, j) = Real(0);
  }
}

// d in[:,j] = a_j .* (d out[:,j] - <d out[:,j], a_j>); masked rows have
// a == 0, so they contribute nothing and receive nothing.
template <typename Real>
void softmax_columns_backward(TensorT<Real>& in, const TensorT<Real>& out) {
  const int r = out.rows(), c = out.cols();
  const Real* g = const_cast<TensorT<Real>&>(out).grad();
  Real* gi = in.grad();
  for (int j = 0; j < c; ++j) {
    Real dot = 0;
    for (int i = 0; i < r; ++i)
      dot += g[static_cast<std::size_t>(i) * c + j] * out.at(i, j);
    for (int i = 0; i < r; ++i) {
      const std::size_t idx = static_cast<std::size_t>(i) * c + j;
      gi[idx] += out.at(i, j) * (g[idx] - dot);
    }
  }
}

}  // namespace detail

// Column-wise softmax; every output column sums to 1.
template <typename Real>
TensorT<Real> softmax_columns(TapeT<Real>* tape, const TensorT<Real>& m) {
  if (m.rank() != 2) throw ShapeError("softmax_columns: rank-2 tensor required");
  auto out = TensorT<Real>::zeros(m.shape(), m.requires_grad());
  detail::softmax_columns_forward(m, out, m.cols(), false, "softmax_columns");
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [m = m, out]() mutable { detail::softmax_columns_backward(m, out); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Block ops: a batch of sequences lives in one r x (s*B) tensor, columns
// grouped per sequence. These run one attention instance per block, which
// keeps the tape short and the matrix products large.
// ---------------------------------------------------------------------------

// S_b = scale * K_b^T * Q_b for every s-column block; S is s x (s*B).
template <typename Real>
TensorT<Real> block_scores(TapeT<Real>* tape, const TensorT<Real>& k,
                           const TensorT<Real>& q, int s, Real score_scale) {
  detail::check_same_shape(k, q, "block_scores");
  if (k.rank() != 2 || s <= 0 || k.cols() % s != 0)
    throw ShapeError("block_scores: columns of " + k.shape_str() +
                     " not divisible into blocks of " + std::to_string(s));
  const int d = k.rows(), blocks = k.cols() / s;
  auto out = TensorT<Real>::zeros({s, s * blocks},
                                  k.requires_grad() || q.requires_grad());
  for (int b = 0; b < blocks; ++b) {
    detail::ECMap<Real> kb(k.data(), d, k.cols());
    detail::ECMap<Real> qb(q.data(), d, q.cols());
    detail::EMap<Real> ob(out.data(), s, out.cols());
    ob.middleCols(b * s, s).noalias() =
        score_scale * kb.middleCols(b * s, s).transpose() * qb.middleCols(b * s, s);
  }
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [k = k, q = q, out, s, blocks, d, score_scale]() mutable {
      detail::ECMap<Real> gm(out.grad(), s, out.cols());
      detail::ECMap<Real> kb(k.data(), d, k.cols());
      detail::ECMap<Real> qb(q.data(), d, q.cols());
      for (int b = 0; b < blocks; ++b) {
        auto gs = gm.middleCols(b * s, s);
        if (k.requires_grad()) {
          detail::EMap<Real> gk(k.grad(), d, k.cols());
          gk.middleCols(b * s, s).noalias() +=
              score_scale * qb.middleCols(b * s, s) * gs.transpose();
        }
        if (q.requires_grad()) {
          detail::EMap<Real> gq(q.grad(), d, q.cols());
          gq.middleCols(b * s, s).noalias() +=
              score_scale * kb.middleCols(b * s, s) * gs;
        }
      }
    });
  }
  return out;
}

// Per-block column softmax with optional causal mask (column j of each block
// attends to rows 0..j).
template <typename Real>
TensorT<Real> block_softmax_columns(TapeT<Real>* tape, const TensorT<Real>& m,
                                    int s, bool causal) {
  if (m.rank() != 2 || m.rows() != s || m.cols() % s != 0)
    throw ShapeError("block_softmax_columns: bad block layout " + m.shape_str());
  auto out = TensorT<Real>::zeros(m.shape(), m.requires_grad());
  detail::softmax_columns_forward(m, out, s, causal, "block_softmax_columns");
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [m = m, out]() mutable { detail::softmax_columns_backward(m, out); });
  }
  return out;
}

// O_b = V_b * A_b per block. V is d x (s*B), A is s x (s*B).
template <typename Real>
TensorT<Real> block_attend(TapeT<Real>* tape, const TensorT<Real>& v,
                           const TensorT<Real>& a, int s) {
  if (v.rank() != 2 || a.rank() != 2 || a.rows() != s ||
      v.cols() != a.cols() || v.cols() % s != 0)
    throw ShapeError("block_attend: incompatible " + v.shape_str() + " and " +
                     a.shape_str());
  const int d = v.rows(), blocks = v.cols() / s;
  auto out = TensorT<Real>::zeros({d, v.cols()},
                                  v.requires_grad() || a.requires_grad());
  detail::ECMap<Real> vm(v.data(), d, v.cols());
  detail::ECMap<Real> am(a.data(), s, a.cols());
  detail::EMap<Real> om(out.data(), d, out.cols());
  for (int b = 0; b < blocks; ++b)
    om.middleCols(b * s, s).noalias() =
        vm.middleCols(b * s, s) * am.middleCols(b * s, s);
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [v = v, a = a, out, s, blocks, d]() mutable {
      detail::ECMap<Real> gm(out.grad(), d, out.cols());
      detail::ECMap<Real> vm(v.data(), d, v.cols());
      detail::ECMap<Real> am(a.data(), s, a.cols());
      for (int b = 0; b < blocks; ++b) {
        if (v.requires_grad()) {
          detail::EMap<Real> gv(v.grad(), d, v.cols());
          gv.middleCols(b * s, s).noalias() +=
              gm.middleCols(b * s, s) * am.middleCols(b * s, s).transpose();
        }
        if (a.requires_grad()) {
          detail::EMap<Real> ga(a.grad(), s, a.cols());
          ga.middleCols(b * s, s).noalias() +=
              vm.middleCols(b * s, s).transpose() * gm.middleCols(b * s, s);
        }
      }
    });
  }
  return out;
}

// Column `idx` of every block, gathered into an r x B matrix.
template <typename Real>
TensorT<Real> select_block_columns(TapeT<Real>* tape, const TensorT<Real>& m,
                                   int s, int idx) {
  if (m.rank() != 2 || m.cols() % s != 0 || idx < 0 || idx >= s)
    throw IndexError("select_block_columns: bad index " + std::to_string(idx));
  const int blocks = m.cols() / s, r = m.rows();
  auto out = TensorT<Real>::zeros({r, blocks}, m.requires_grad());
  for (int i = 0; i < r; ++i)
    for (int b = 0; b < blocks; ++b) out.at(i, b) = m.at(i, b * s + idx);
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [m = m, out, s, idx, blocks, r]() mutable {
      const Real* g = out.grad();
      Real* gm = m.grad();
      for (int i = 0; i < r; ++i)
        for (int b = 0; b < blocks; ++b)
          gm[static_cast<std::size_t>(i) * m.cols() + b * s + idx] +=
              g[static_cast<std::size_t>(i) * blocks + b];
    });
  }
  return out;
}

// Embedding lookup: table is vocab x d (one row per id); the result is d x T
// with column t = table row ids[t].
template <typename Real>
TensorT<Real> embed_columns(TapeT<Real>* tape, const TensorT<Real>& table,
                            const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embed_columns: rank-2 table required");
  const int d = table.cols(), n = static_cast<int>(ids.size());
  for (int id : ids)
    if (id < 0 || id >= table.rows())
      throw IndexError("embed_columns: id " + std::to_string(id) +
                       " out of range [0," + std::to_string(table.rows()) + ")");
  auto out = TensorT<Real>::zeros({d, n}, table.requires_grad());
  for (int t = 0; t < n; ++t) {
    const Real* row = table.data() + static_cast<std::size_t>(ids[t]) * d;
    for (int i = 0; i < d; ++i) out.at(i, t) = row[i];
  }
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [table = table, out, ids, d, n]() mutable {
      const Real* g = out.grad();
      Real* gt = table.grad();
      for (int t = 0; t < n; ++t) {
        Real* row = gt + static_cast<std::size_t>(ids[t]) * d;
        for (int i = 0; i < d; ++i)
          row[i] += g[static_cast<std::size_t>(i) * n + t];
      }
    });
  }
  return out;
}

// Per-column layer normalization with learned gain/bias (both length r):
// y = gain .* (x - mean) / sqrt(var + eps) + bias.
template <typename Real>
TensorT<Real> layernorm_columns(TapeT<Real>* tape, const TensorT<Real>& x,
                                const TensorT<Real>& gain,
                                const TensorT<Real>& bias, Real eps = Real(1e-5)) {
  if (x.rank() != 2 || gain.size() != x.rows() || bias.size() != x.rows())
    throw ShapeError("layernorm_columns: shape mismatch " + x.shape_str());
  const int r = x.rows(), c = x.cols();
  auto out = TensorT<Real>::zeros(
      x.shape(), x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  // Cache the normalized values and inverse stddev for backward.
  auto xhat = TensorT<Real>::zeros(x.shape());
  std::vector<Real> inv_std(static_cast<std::size_t>(c));
  for (int j = 0; j < c; ++j) {
    Real mean = 0;
    for (int i = 0; i < r; ++i) mean += x.at(i, j);
    mean /= Real(r);
    Real var = 0;
    for (int i = 0; i < r; ++i) {
      const Real d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= Real(r);
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(j)] = is;
    for (int i = 0; i < r; ++i) {
      const Real h = (x.at(i, j) - mean) * is;
      xhat.at(i, j) = h;
      out.at(i, j) = gain.at(i) * h + bias.at(i);
    }
  }
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [x = x, gain = gain, bias = bias, out, xhat, inv_std, r, c]() mutable {
      const Real* g = out.grad();
      for (int j = 0; j < c; ++j) {
        Real sum_gy = 0, sum_gyx = 0;
        for (int i = 0; i < r; ++i) {
          const Real gy = g[static_cast<std::size_t>(i) * c + j] * gain.at(i);
          sum_gy += gy;
          sum_gyx += gy * xhat.at(i, j);
        }
        if (x.requires_grad()) {
          Real* gx = x.grad();
          const Real is = inv_std[static_cast<std::size_t>(j)];
          for (int i = 0; i < r; ++i) {
            const Real gy = g[static_cast<std::size_t>(i) * c + j] * gain.at(i);
            gx[static_cast<std::size_t>(i) * c + j] +=
                is * (gy - (sum_gy + xhat.at(i, j) * sum_gyx) / Real(r));
          }
        }
      }
      if (gain.requires_grad()) {
        Real* gg = gain.grad();
        for (int i = 0; i < r; ++i) {
          Real acc = 0;
          for (int j = 0; j < c; ++j)
            acc += g[static_cast<std::size_t>(i) * c + j] * xhat.at(i, j);
          gg[i] += acc;
        }
      }
      if (bias.requires_grad()) {
        Real* gb = bias.grad();
        for (int i = 0; i < r; ++i) {
          Real acc = 0;
          for (int j = 0; j < c; ++j) acc += g[static_cast<std::size_t>(i) * c + j];
          gb[i] += acc;
        }
      }
    });
  }
  return out;
}

namespace detail {
template <typename Real>
Real logsumexp(const Real* x, int n, int stride) {
  Real mx = -std::numeric_limits<Real>::infinity();
  for (int i = 0; i < n; ++i) mx = std::max(mx, x[static_cast<std::size_t>(i) * stride]);
  Real acc = 0;
  for (int i = 0; i < n; ++i)
    acc += std::exp(x[static_cast<std::size_t>(i) * stride] - mx);
  return mx + std::log(acc);
}
}  // namespace detail

// -log softmax(logits)[target] for a rank-1 logits vector.
template <typename Real>
TensorT<Real> cross_entropy_logits(TapeT<Real>* tape, const TensorT<Real>& logits,
                                   int target) {
  if (logits.rank() != 1)
    throw ShapeError("cross_entropy_logits: rank-1 logits required, got " +
                     logits.shape_str());
  const int n = static_cast<int>(logits.size());
  if (target < 0 || target >= n)
    throw IndexError("cross_entropy_logits: target " + std::to_string(target) +
                     " out of range [0," + std::to_string(n) + ")");
  const Real lse = detail::logsumexp(logits.data(), n, 1);
  auto out = TensorT<Real>::scalar(lse - logits.at(target), logits.requires_grad());
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [logits = logits, out, target, lse, n]() mutable {
      const Real g = out.grad()[0];
      Real* gl = logits.grad();
      for (int i = 0; i < n; ++i) {
        const Real p = std::exp(logits.at(i) - lse);
        gl[i] += g * (p - (i == target ? Real(1) : Real(0)));
      }
    });
  }
  return out;
}

// Mean cross-entropy over columns: logits is l x n, targets has n entries.
template <typename Real>
TensorT<Real> cross_entropy_columns(TapeT<Real>* tape, const TensorT<Real>& logits,
                                    const std::vector<int>& targets) {
  if (logits.rank() != 2 ||
      logits.cols() != static_cast<int>(targets.size()))
    throw ShapeError("cross_entropy_columns: logits " + logits.shape_str() +
                     " vs " + std::to_string(targets.size()) + " targets");
  const int l = logits.rows(), n = logits.cols();
  std::vector<Real> lse(static_cast<std::size_t>(n));
  Real acc = 0;
  for (int j = 0; j < n; ++j) {
    if (targets[j] < 0 || targets[j] >= l)
      throw IndexError("cross_entropy_columns: target " +
                       std::to_string(targets[j]) + " out of range [0," +
                       std::to_string(l) + ")");
    lse[static_cast<std::size_t>(j)] = detail::logsumexp(logits.data() + j, l, n);
    acc += lse[static_cast<std::size_t>(j)] - logits.at(targets[j], j);
  }
  auto out = TensorT<Real>::scalar(acc / Real(n), logits.requires_grad());
  if (detail::want_tape(tape, out.requires_grad())) {
    tape->record(out, [logits = logits, out, targets, lse, l, n]() mutable {
      const Real g = out.grad()[0] / Real(n);
      Real* gl = logits.grad();
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < l; ++i) {
          const Real p = std::exp(logits.at(i, j) - lse[static_cast<std::size_t>(j)]);
          gl[static_cast<std::size_t>(i) * n + j] +=
              g * (p - (i == targets[j] ? Real(1) : Real(0)));
        }
    });
  }
  return out;
}

// Seed d loss/d loss = 1 and sweep the tape backwards. Leaf gradients
// accumulate across repeated calls; op-output gradients are per-pass.
template <typename Real>
void backward(TapeT<Real>& tape, const TensorT<Real>& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got " + loss.shape_str());
  if (!loss.requires_grad())
    throw ContractError("backward: loss does not require grad");
  tape.run_backward(loss);
}

// p <- p - lr * grad(p); grads are zeroed afterwards.
template <typename Real>
void sgd_step(std::span<TensorT<Real>* const> params, Real lr) {
  for (TensorT<Real>* p : params) {
    if (!p->has_grad())
      throw ContractError("sgd_step: parameter " + p->shape_str() +
                          " has no gradient");
  }
  for (TensorT<Real>* p : params) {
    Real* v = p->data();
    const Real* g = p->grad();
    for (std::int64_t i = 0; i < p->size(); ++i) v[i] -= lr * g[i];
    p->zero_grad();
  }
}

template <typename Real>
void sgd_step(const std::vector<TensorT<Real>*>& params, Real lr) {
  sgd_step(std::span<TensorT<Real>* const>(params.data(), params.size()), lr);
}

template <typename Real>
void zero_grads(const std::vector<TensorT<Real>*>& params) {
  for (auto* p : params) p->zero_grad();
}

// i.i.d. normal fill, N(0, stddev^2). Draws are made in double and rounded,
// so float and double tensors seeded alike hold the same values.
template <typename Real>
void fill_normal(TensorT<Real>& t, CounterRng& rng, double stddev) {
  Real* p = t.data();
  for (std::int64_t i = 0; i < t.size(); ++i)
    p[i] = static_cast<Real>(rng.normal(stddev));
}

template <typename Real>
bool all_finite(const TensorT<Real>& t) {
  const Real* p = t.data();
  for (std::int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(static_cast<double>(p[i]))) return false;
  return true;
}

}  // namespace icls

#endif  // ICLSTREAMS_TENSOR_HPP
