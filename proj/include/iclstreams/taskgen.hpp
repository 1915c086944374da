#ifndef ICLSTREAMS_TASKGEN_HPP
#define ICLSTREAMS_TASKGEN_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "iclstreams/errors.hpp"
#include "iclstreams/rng.hpp"
#include "iclstreams/tensor.hpp"

namespace icls {

// Fixed class embeddings for the synthetic object--label task. Component
// variance is 1/e so every mu vector has unit expected norm. Object class i
// is paired with label class i throughout training, which is what makes the
// in-weights probe (memorize the pairing) and the relabeling probe
// (override it) meaningful.
struct EmbeddingTable {
  int e = 0;
  Tensor object_mu;  // K x e, one class per row
  Tensor label_mu;   // L x e
  std::uint64_t seed = 0;

  int num_objects() const { return object_mu.rows(); }
  int num_labels() const { return label_mu.rows(); }
};

enum class TaskKind { Test, IW, IC, IC2 };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Test: return "Test";
    case TaskKind::IW: return "IW";
    case TaskKind::IC: return "IC";
    case TaskKind::IC2: return "IC2";
  }
  return "?";
}

inline TaskKind task_from_name(const std::string& s) {
  if (s == "Test") return TaskKind::Test;
  if (s == "IW") return TaskKind::IW;
  if (s == "IC") return TaskKind::IC;
  if (s == "IC2") return TaskKind::IC2;
  throw ConfigError("unknown task kind: " + s);
}

// A batch of token sequences. x packs the batch as one e x (s*batch) matrix,
// columns grouped per sample; sample b is the block x[:, b*s .. (b+1)*s).
// Columns alternate object, label; the final column of every sample is the
// zeroed query label. Labels used for classification readout are the
// training table's for Test/IW and per-sample fresh tables for IC/IC2.
struct SequenceBatch {
  int e = 0, s = 0, batch = 0;
  TaskKind kind = TaskKind::Test;
  float epsilon = 0;
  Tensor x;
  std::vector<int> target;  // true final-label class index per sample
  std::vector<std::vector<std::pair<int, int>>> pair_ids;  // (object, label) classes
  Tensor labels_shared;                    // L x e; defined for Test/IW
  std::vector<Tensor> labels_per_sample;   // L x e each; defined for IC/IC2

  const Tensor& labels_for(int b) const {
    return labels_per_sample.empty() ? labels_shared : labels_per_sample[b];
  }

  // Copy of sample b as a standalone e x s matrix.
  Tensor sample(int b) const {
    auto m = Tensor::zeros({e, s});
    for (int i = 0; i < e; ++i)
      for (int j = 0; j < s; ++j) m.at(i, j) = x.at(i, b * s + j);
    return m;
  }
};

inline EmbeddingTable make_table(int K, int L, int e, std::uint64_t seed) {
  if (K < 1 || L < 1 || e < 1)
    throw ConfigError("make_table: K, L, e must all be positive");
  EmbeddingTable t;
  t.e = e;
  t.seed = seed;
  t.object_mu = Tensor::zeros({K, e});
  t.label_mu = Tensor::zeros({L, e});
  const double stddev = 1.0 / std::sqrt(static_cast<double>(e));
  CounterRng root(seed);
  auto obj_rng = root.stream(streams::kTable).stream(0);
  auto lab_rng = root.stream(streams::kTable).stream(1);
  fill_normal(t.object_mu, obj_rng, stddev);
  fill_normal(t.label_mu, lab_rng, stddev);
  return t;
}

// o = (mu + eps*eta) / sqrt(1 + eps^2), eta ~ N(0, 1/e) fresh per call.
// eps = 0 returns mu exactly.
inline void write_object_instance(const float* mu, int e, float epsilon,
                                  CounterRng& rng, float* dst, int stride) {
  if (epsilon == 0.0f) {
    for (int i = 0; i < e; ++i) dst[static_cast<std::size_t>(i) * stride] = mu[i];
    return;
  }
  const double denom = std::sqrt(1.0 + static_cast<double>(epsilon) * epsilon);
  const double eta_std = 1.0 / std::sqrt(static_cast<double>(e));
  for (int i = 0; i < e; ++i)
    dst[static_cast<std::size_t>(i) * stride] = static_cast<float>(
        (mu[i] + epsilon * rng.normal(eta_std)) / denom);
}

inline std::vector<float> instantiate_object(const EmbeddingTable& table,
                                             int object_class, float epsilon,
                                             CounterRng& rng) {
  if (epsilon < 0) throw ConfigError("instantiate_object: epsilon must be >= 0");
  if (object_class < 0 || object_class >= table.num_objects())
    throw IndexError("instantiate_object: class " + std::to_string(object_class) +
                     " out of range");
  std::vector<float> out(static_cast<std::size_t>(table.e));
  const float* mu = table.object_mu.data() +
                    static_cast<std::size_t>(object_class) * table.e;
  write_object_instance(mu, table.e, epsilon, rng, out.data(), 1);
  return out;
}

namespace detail {

// First m entries of a partial Fisher-Yates shuffle of 0..K-1.
inline std::vector<int> sample_distinct(int K, int m, CounterRng& rng) {
  std::vector<int> pool(static_cast<std::size_t>(K));
  for (int i = 0; i < K; ++i) pool[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < m; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(K - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(m));
  return pool;
}

}  // namespace detail

// Draw `batch` sequences of `num_pairs` object--label pairs. The final pair
// holds a fresh instance of the query object and a zeroed label column.
//
//   Test: query class appears at exactly one earlier slot (uniform choice).
//   IW:   query class is in the table but absent from the context.
//   IC:   everything drawn from a per-sample fresh table.
//   IC2:  objects from the training table, label vectors fresh per sample.
inline SequenceBatch sample_batch(const EmbeddingTable& table, TaskKind kind,
                                  int num_pairs, int batch, float epsilon,
                                  CounterRng& rng) {
  if (num_pairs < 2) throw ConfigError("sample_batch: num_pairs must be >= 2");
  if (batch < 1) throw ConfigError("sample_batch: batch must be >= 1");
  if (epsilon < 0) throw ConfigError("sample_batch: epsilon must be >= 0");
  if (table.num_objects() != table.num_labels())
    throw ConfigError("sample_batch: table needs K == L for the paired task");
  const int K = table.num_objects();
  const int context_pairs = num_pairs - 1;
  const int needed = (kind == TaskKind::IW) ? num_pairs : context_pairs;
  if (needed > K)
    throw ConfigError("sample_batch: " + std::to_string(num_pairs) +
                      " pairs need " + std::to_string(needed) +
                      " distinct classes but the table has " + std::to_string(K));

  SequenceBatch out;
  out.e = table.e;
  out.s = 2 * num_pairs;
  out.batch = batch;
  out.kind = kind;
  out.epsilon = epsilon;
  out.x = Tensor::zeros({table.e, out.s * batch});
  out.target.resize(static_cast<std::size_t>(batch));
  out.pair_ids.resize(static_cast<std::size_t>(batch));
  if (kind == TaskKind::Test || kind == TaskKind::IW)
    out.labels_shared = table.label_mu;

  const double mu_std = 1.0 / std::sqrt(static_cast<double>(table.e));
  for (int b = 0; b < batch; ++b) {
    // Per-sample provenance: IC swaps in a fresh table, IC2 fresh labels.
    const Tensor* obj_mu = &table.object_mu;
    const Tensor* lab_mu = &table.label_mu;
    Tensor fresh_obj, fresh_lab;
    if (kind == TaskKind::IC) {
      fresh_obj = Tensor::zeros({K, table.e});
      fresh_lab = Tensor::zeros({K, table.e});
      fill_normal(fresh_obj, rng, mu_std);
      fill_normal(fresh_lab, rng, mu_std);
      obj_mu = &fresh_obj;
      lab_mu = &fresh_lab;
      out.labels_per_sample.push_back(fresh_lab);
    } else if (kind == TaskKind::IC2) {
      fresh_lab = Tensor::zeros({K, table.e});
      fill_normal(fresh_lab, rng, mu_std);
      lab_mu = &fresh_lab;
      out.labels_per_sample.push_back(fresh_lab);
    }

    // Context classes and the query's in-context slot.
    std::vector<int> classes;
    int query_class;
    if (kind == TaskKind::IW) {
      classes = detail::sample_distinct(K, num_pairs, rng);
      query_class = classes.back();
      classes.pop_back();
    } else {
      classes = detail::sample_distinct(K, context_pairs, rng);
      const int slot = static_cast<int>(rng.uniform_int(
          static_cast<std::uint64_t>(context_pairs)));
      query_class = classes[static_cast<std::size_t>(slot)];
    }

    float* base = out.x.data();
    const int total_cols = out.s * batch;
    auto col_ptr = [&](int col) { return base + b * out.s + col; };
    auto& ids = out.pair_ids[static_cast<std::size_t>(b)];
    for (int pair = 0; pair < context_pairs; ++pair) {
      const int c = classes[static_cast<std::size_t>(pair)];
      const float* om = obj_mu->data() + static_cast<std::size_t>(c) * table.e;
      write_object_instance(om, table.e, epsilon, rng, col_ptr(2 * pair),
                            total_cols);
      const float* lm = lab_mu->data() + static_cast<std::size_t>(c) * table.e;
      for (int i = 0; i < table.e; ++i)
        base[static_cast<std::size_t>(i) * total_cols + b * out.s + 2 * pair + 1] =
            lm[i];
      ids.emplace_back(c, c);
    }
    // Final pair: fresh instance of the query object, zeroed label.
    const float* qm = obj_mu->data() + static_cast<std::size_t>(query_class) * table.e;
    write_object_instance(qm, table.e, epsilon, rng, col_ptr(out.s - 2),
                          total_cols);
    ids.emplace_back(query_class, query_class);
    out.target[static_cast<std::size_t>(b)] = query_class;
  }
  return out;
}

// Debug dump: header `e s batch kind epsilon`, then for each sample its
// e x s block as e rows of s space-separated floats.
inline void dump_batch(const SequenceBatch& batch, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("dump_batch: cannot open " + path);
  f << batch.e << ' ' << batch.s << ' ' << batch.batch << ' '
    << task_name(batch.kind) << ' ';
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(batch.epsilon));
  f << buf << '\n';
  const int total_cols = batch.s * batch.batch;
  for (int b = 0; b < batch.batch; ++b)
    for (int i = 0; i < batch.e; ++i) {
      for (int j = 0; j < batch.s; ++j) {
        std::snprintf(buf, sizeof(buf), "%.9g",
                      static_cast<double>(batch.x.data()
                          [static_cast<std::size_t>(i) * total_cols + b * batch.s + j]));
        f << buf << (j + 1 == batch.s ? '\n' : ' ');
      }
    }
  if (!f) throw IoError("dump_batch: write failed for " + path);
}

}  // namespace icls

#endif  // ICLSTREAMS_TASKGEN_HPP
