#ifndef ICLSTREAMS_ICL_TRANSFORMER_HPP
#define ICLSTREAMS_ICL_TRANSFORMER_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "iclstreams/errors.hpp"
#include "iclstreams/rng.hpp"
#include "iclstreams/taskgen.hpp"
#include "iclstreams/tensor.hpp"
#include "iclstreams/variant.hpp"

namespace icls {

// Two-layer single-head Transformer for the object--label task: learned
// positional embeddings, causal masked attention with 1/sqrt(k) scaling,
// residual connections around each attention layer, then a three-layer MLP
// that reads the final-token column and emits a completion vector in token
// space. Class probabilities come from a softmax over dot products between
// that completion and the episode's label embeddings, so relabeled or
// freshly drawn label sets are scored against their own vectors.

struct ToyConfig {
  int e = 64;         // token embedding dimension
  int s = 16;         // sequence length (2 * num_pairs)
  int attn_dim = 128; // reduced dimension of keys/queries/values
  int mlp_hidden = 128;
};

template <typename Real>
struct ToyParamsT {
  ToyConfig cfg;
  TensorT<Real> pos;                    // e x s
  TensorT<Real> wq1, wk1, wv1;          // attn_dim x e
  TensorT<Real> wo1;                    // e x attn_dim
  TensorT<Real> wq2, wk2, wv2, wo2;
  TensorT<Real> w1, b1, w2, b2, w3, b3; // h x e, h, h x h, h, e x h, e

  std::vector<std::pair<std::string, TensorT<Real>*>> named_parameters() {
    return {{"pos", &pos}, {"wq1", &wq1}, {"wk1", &wk1}, {"wv1", &wv1},
            {"wo1", &wo1}, {"wq2", &wq2}, {"wk2", &wk2}, {"wv2", &wv2},
            {"wo2", &wo2}, {"w1", &w1},   {"b1", &b1},   {"w2", &w2},
            {"b2", &b2},   {"w3", &w3},   {"b3", &b3}};
  }

  std::vector<TensorT<Real>*> parameters() {
    std::vector<TensorT<Real>*> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    for (auto* t : parameters()) n += t->size();
    return n;
  }
};

using ToyParams = ToyParamsT<float>;

// Weights ~ N(0, 1/fan_in), biases zero, deterministic per seed.
template <typename Real>
ToyParamsT<Real> init_toy_params(const ToyConfig& cfg, std::uint64_t seed) {
  if (cfg.e < 1 || cfg.s < 2 || cfg.attn_dim < 1 || cfg.mlp_hidden < 1)
    throw ConfigError("init_toy_params: dimensions must be positive");
  ToyParamsT<Real> p;
  p.cfg = cfg;
  const int e = cfg.e, s = cfg.s, k = cfg.attn_dim, h = cfg.mlp_hidden;
  auto make = [](std::vector<int> shape) {
    return TensorT<Real>::zeros(std::move(shape), true);
  };
  p.pos = make({e, s});
  p.wq1 = make({k, e});
  p.wk1 = make({k, e});
  p.wv1 = make({k, e});
  p.wo1 = make({e, k});
  p.wq2 = make({k, e});
  p.wk2 = make({k, e});
  p.wv2 = make({k, e});
  p.wo2 = make({e, k});
  p.w1 = make({h, e});
  p.b1 = make({h});
  p.w2 = make({h, h});
  p.b2 = make({h});
  p.w3 = make({e, h});
  p.b3 = make({e});

  CounterRng rng = CounterRng(seed).stream(streams::kInit);
  auto fan_in_fill = [&rng](TensorT<Real>& t, int fan_in) {
    fill_normal(t, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  };
  fan_in_fill(p.pos, e);
  fan_in_fill(p.wq1, e);
  fan_in_fill(p.wk1, e);
  fan_in_fill(p.wv1, e);
  fan_in_fill(p.wo1, k);
  fan_in_fill(p.wq2, e);
  fan_in_fill(p.wk2, e);
  fan_in_fill(p.wv2, e);
  fan_in_fill(p.wo2, k);
  fan_in_fill(p.w1, e);
  fan_in_fill(p.w2, h);
  fan_in_fill(p.w3, h);
  // biases stay zero
  return p;
}

// Residual-stream state after both attention layers. x packs a batch as
// e x (s*B); the variant's first-layer matrix is added to the matching
// second-layer matrix before attention.
template <typename Real>
TensorT<Real> toy_hidden(TapeT<Real>* tape, ToyParamsT<Real>& p,
                         const TensorT<Real>& x, StreamVariant variant) {
  const int e = p.cfg.e, s = p.cfg.s;
  if (x.rank() != 2 || x.rows() != e || x.cols() % s != 0)
    throw ShapeError("toy_hidden: input " + x.shape_str() +
                     " does not pack e x (s*batch) with e=" + std::to_string(e) +
                     " s=" + std::to_string(s));
  const Real score_scale = Real(1) / std::sqrt(static_cast<Real>(p.cfg.attn_dim));

  auto h0 = add_tiled(tape, x, p.pos);

  auto q1 = matmul(tape, p.wq1, h0);
  auto k1 = matmul(tape, p.wk1, h0);
  auto v1 = matmul(tape, p.wv1, h0);
  auto a1 = block_softmax_columns(
      tape, block_scores(tape, k1, q1, s, score_scale), s, /*causal=*/true);
  auto h1 = add(tape, h0, matmul(tape, p.wo1, block_attend(tape, v1, a1, s)));

  auto q2 = matmul(tape, p.wq2, h1);
  auto k2 = matmul(tape, p.wk2, h1);
  auto v2 = matmul(tape, p.wv2, h1);
  switch (variant) {
    case StreamVariant::Classic: break;
    case StreamVariant::Queries: q2 = add(tape, q2, q1); break;
    case StreamVariant::Keys: k2 = add(tape, k2, k1); break;
    case StreamVariant::Values: v2 = add(tape, v2, v1); break;
  }
  auto a2 = block_softmax_columns(
      tape, block_scores(tape, k2, q2, s, score_scale), s, /*causal=*/true);
  return add(tape, h1, matmul(tape, p.wo2, block_attend(tape, v2, a2, s)));
}

// Completion vectors for the final token of every sequence: e x B.
template <typename Real>
TensorT<Real> toy_completion(TapeT<Real>* tape, ToyParamsT<Real>& p,
                             const TensorT<Real>& x, StreamVariant variant) {
  auto h2 = toy_hidden(tape, p, x, variant);
  auto last = select_block_columns(tape, h2, p.cfg.s, p.cfg.s - 1);
  auto z1 = relu(tape, add_colvec(tape, matmul(tape, p.w1, last), p.b1));
  auto z2 = relu(tape, add_colvec(tape, matmul(tape, p.w2, z1), p.b2));
  return add_colvec(tape, matmul(tape, p.w3, z2), p.b3);
}

// Class logits against a label table (L x e, one label embedding per row):
// logits[c][b] = dot(label_c, completion_b).
template <typename Real>
TensorT<Real> toy_logits(TapeT<Real>* tape, ToyParamsT<Real>& p,
                         const TensorT<Real>& x, const TensorT<Real>& labels,
                         StreamVariant variant) {
  if (labels.rank() != 2 || labels.cols() != p.cfg.e)
    throw ShapeError("toy_logits: label table " + labels.shape_str() +
                     " does not match e=" + std::to_string(p.cfg.e));
  return matmul(tape, labels, toy_completion(tape, p, x, variant));
}

// Single-sequence forward: logits over the table's label classes.
inline Tensor toy_forward(ToyParams& p, const Tensor& x, const Tensor& labels,
                          StreamVariant variant) {
  auto logits = toy_logits<float>(nullptr, p, x, labels, variant);
  return col_select<float>(nullptr, logits, 0);
}

// Mean cross-entropy over a training batch; parameter grads populated.
inline float toy_loss_and_grad(ToyParams& p, const SequenceBatch& batch,
                               StreamVariant variant) {
  if (!batch.labels_shared.defined())
    throw ConfigError("toy_loss_and_grad: batch has no shared label table "
                      "(train on Test/IW batches)");
  Tape tape;
  auto logits = toy_logits(&tape, p, batch.x, batch.labels_shared, variant);
  auto loss = cross_entropy_columns(&tape, logits, batch.target);
  backward(tape, loss);
  return loss.at(0);
}

struct EvalResult {
  double accuracy = 0;
  double mean_loss = 0;
};

// Accuracy and mean loss without building a tape. IC/IC2 batches are scored
// against their own per-sample label tables.
inline EvalResult toy_eval(ToyParams& p, const SequenceBatch& batch,
                           StreamVariant variant) {
  auto completion = toy_completion<float>(nullptr, p, batch.x, variant);
  const int L = batch.labels_for(0).rows();
  EvalResult res;
  for (int b = 0; b < batch.batch; ++b) {
    const Tensor& labels = batch.labels_for(b);
    double best = 0;
    int best_c = 0;
    double target_logit = 0;
    double lse_max = -1e300;
    std::vector<double> logits(static_cast<std::size_t>(L));
    for (int c = 0; c < L; ++c) {
      double acc = 0;
      for (int i = 0; i < p.cfg.e; ++i)
        acc += static_cast<double>(labels.at(c, i)) * completion.at(i, b);
      logits[static_cast<std::size_t>(c)] = acc;
      if (c == 0 || acc > best) {
        best = acc;
        best_c = c;
      }
      lse_max = std::max(lse_max, acc);
    }
    double denom = 0;
    for (int c = 0; c < L; ++c) denom += std::exp(logits[static_cast<std::size_t>(c)] - lse_max);
    target_logit = logits[static_cast<std::size_t>(batch.target[b])];
    res.mean_loss += (lse_max + std::log(denom)) - target_logit;
    if (best_c == batch.target[b]) res.accuracy += 1.0;
  }
  res.accuracy /= batch.batch;
  res.mean_loss /= batch.batch;
  return res;
}

}  // namespace icls

#endif  // ICLSTREAMS_ICL_TRANSFORMER_HPP
