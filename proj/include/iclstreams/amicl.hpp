#ifndef ICLSTREAMS_AMICL_HPP
#define ICLSTREAMS_AMICL_HPP

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "iclstreams/errors.hpp"
#include "iclstreams/rng.hpp"
#include "iclstreams/taskgen.hpp"
#include "iclstreams/tensor.hpp"

namespace icls {

// Parameter-free associative-memory ICL model. Keys and queries are bigram
// averages of adjacent tokens, values are the tokens themselves, and
// retrieval is similarity -> separation -> product with the values.

enum class SimilarityFn { DotProduct, PearsonCorrelation, ManhattanDistance, EuclideanDistance };
enum class SeparationFn { Identity, Softmax, Argmax };

inline const char* similarity_name(SimilarityFn f) {
  switch (f) {
    case SimilarityFn::DotProduct: return "dot";
    case SimilarityFn::PearsonCorrelation: return "pearson";
    case SimilarityFn::ManhattanDistance: return "manhattan";
    case SimilarityFn::EuclideanDistance: return "euclidean";
  }
  return "?";
}

inline const char* separation_name(SeparationFn f) {
  switch (f) {
    case SeparationFn::Identity: return "identity";
    case SeparationFn::Softmax: return "softmax";
    case SeparationFn::Argmax: return "argmax";
  }
  return "?";
}

inline SimilarityFn similarity_from_name(const std::string& s) {
  if (s == "dot") return SimilarityFn::DotProduct;
  if (s == "pearson") return SimilarityFn::PearsonCorrelation;
  if (s == "manhattan") return SimilarityFn::ManhattanDistance;
  if (s == "euclidean") return SimilarityFn::EuclideanDistance;
  throw ConfigError("unknown similarity '" + s +
                    "' (valid: dot, pearson, manhattan, euclidean)");
}

inline SeparationFn separation_from_name(const std::string& s) {
  if (s == "identity") return SeparationFn::Identity;
  if (s == "softmax") return SeparationFn::Softmax;
  if (s == "argmax") return SeparationFn::Argmax;
  throw ConfigError("unknown separation '" + s +
                    "' (valid: identity, softmax, argmax)");
}

struct AmiclConfig {
  float a = 2.0f;
  SimilarityFn similarity = SimilarityFn::DotProduct;
  SeparationFn separation = SeparationFn::Argmax;
};

struct KqvTriple {
  Tensor k, q, v;  // each e x s
};

// Bigram key/query assignment with wrapped indices: for column c (0-based),
// k_c = q_c = (a*x_{c-1} + x_c) / (a+1), where x_{-1} wraps to the final
// column. The final position keeps its bigram query but gets a zero key so
// the corrupted slot can never retrieve itself.
inline KqvTriple build_kqv(const Tensor& x, float a) {
  if (x.rank() != 2 || x.cols() < 2)
    throw ContractError("build_kqv: need at least 2 token columns");
  if (a < 0) throw ConfigError("build_kqv: a must be >= 0");
  const int e = x.rows(), s = x.cols();
  KqvTriple out;
  out.k = Tensor::zeros({e, s});
  out.q = Tensor::zeros({e, s});
  out.v = x;
  const float denom = a + 1.0f;
  for (int c = 0; c < s; ++c) {
    const int prev = (c == 0) ? s - 1 : c - 1;
    for (int i = 0; i < e; ++i) {
      const float bigram = (a * x.at(i, prev) + x.at(i, c)) / denom;
      out.q.at(i, c) = bigram;
      if (c < s - 1) out.k.at(i, c) = bigram;  // k at the final column stays 0
    }
  }
  return out;
}

namespace detail {

// Column-pair similarity, scalar loops so results are reproducible
// independent of any matrix backend. Distances are negated so that larger
// always means more similar.
inline float similarity_cols(const Tensor& k, int ki, const Tensor& q, int qi,
                             SimilarityFn fn) {
  const int e = k.rows();
  switch (fn) {
    case SimilarityFn::DotProduct: {
      float acc = 0;
      for (int i = 0; i < e; ++i) acc += k.at(i, ki) * q.at(i, qi);
      return acc;
    }
    case SimilarityFn::PearsonCorrelation: {
      float mk = 0, mq = 0;
      for (int i = 0; i < e; ++i) {
        mk += k.at(i, ki);
        mq += q.at(i, qi);
      }
      mk /= e;
      mq /= e;
      float skk = 0, sqq = 0, skq = 0;
      for (int i = 0; i < e; ++i) {
        const float dk = k.at(i, ki) - mk;
        const float dq = q.at(i, qi) - mq;
        skk += dk * dk;
        sqq += dq * dq;
        skq += dk * dq;
      }
      if (skk == 0.0f || sqq == 0.0f) return 0.0f;  // zero-variance key/query
      return skq / std::sqrt(skk * sqq);
    }
    case SimilarityFn::ManhattanDistance: {
      float acc = 0;
      for (int i = 0; i < e; ++i) acc += std::abs(k.at(i, ki) - q.at(i, qi));
      return -acc;
    }
    case SimilarityFn::EuclideanDistance: {
      float acc = 0;
      for (int i = 0; i < e; ++i) {
        const float d = k.at(i, ki) - q.at(i, qi);
        acc += d * d;
      }
      return -std::sqrt(acc);
    }
  }
  return 0;
}

inline int argmax_lowest_tie(const float* v, int n, int stride = 1) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (v[static_cast<std::size_t>(i) * stride] >
        v[static_cast<std::size_t>(best) * stride])
      best = i;
  return best;
}

inline void separate_column(std::vector<float>& col, SeparationFn fn) {
  const int n = static_cast<int>(col.size());
  switch (fn) {
    case SeparationFn::Identity:
      return;
    case SeparationFn::Softmax: {
      float mx = col[0];
      for (int i = 1; i < n; ++i) mx = std::max(mx, col[i]);
      float denom = 0;
      for (int i = 0; i < n; ++i) {
        col[static_cast<std::size_t>(i)] = std::exp(col[static_cast<std::size_t>(i)] - mx);
        denom += col[static_cast<std::size_t>(i)];
      }
      for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] /= denom;
      return;
    }
    case SeparationFn::Argmax: {
      const int best = argmax_lowest_tie(col.data(), n);
      std::fill(col.begin(), col.end(), 0.0f);
      col[static_cast<std::size_t>(best)] = 1.0f;
      return;
    }
  }
}

}  // namespace detail

struct AttendResult {
  Tensor scores;     // s x s, scores[i][j] = similarity(k_i, q_j)
  Tensor attention;  // s x s, separation applied per query column
  Tensor output;     // e x s, column j = V * attention[:, j]
};

// Full retrieval pipeline. For Argmax separation the output column is a
// bit-exact copy of the selected value column.
inline AttendResult attend_detail(const KqvTriple& kqv, const AmiclConfig& cfg) {
  const Tensor& k = kqv.k;
  const Tensor& q = kqv.q;
  const Tensor& v = kqv.v;
  if (k.shape() != q.shape() || k.shape() != v.shape())
    throw ShapeError("attend: K/Q/V shapes disagree");
  const int e = k.rows(), s = k.cols();
  AttendResult res;
  res.scores = Tensor::zeros({s, s});
  res.attention = Tensor::zeros({s, s});
  res.output = Tensor::zeros({e, s});
  std::vector<float> col(static_cast<std::size_t>(s));
  for (int j = 0; j < s; ++j) {
    for (int i = 0; i < s; ++i) {
      const float sim = detail::similarity_cols(k, i, q, j, cfg.similarity);
      res.scores.at(i, j) = sim;
      col[static_cast<std::size_t>(i)] = sim;
    }
    detail::separate_column(col, cfg.separation);
    for (int i = 0; i < s; ++i) res.attention.at(i, j) = col[static_cast<std::size_t>(i)];
    if (cfg.separation == SeparationFn::Argmax) {
      const int best = detail::argmax_lowest_tie(col.data(), s);
      for (int i = 0; i < e; ++i) res.output.at(i, j) = v.at(i, best);
    } else {
      for (int i = 0; i < e; ++i) {
        float acc = 0;
        for (int t = 0; t < s; ++t) acc += v.at(i, t) * col[static_cast<std::size_t>(t)];
        res.output.at(i, j) = acc;
      }
    }
  }
  return res;
}

inline Tensor attend(const KqvTriple& kqv, const AmiclConfig& cfg) {
  return attend_detail(kqv, cfg).output;
}

// Completion of the final (corrupted) token only. Same math as attend()
// restricted to the last query column; the unit tests pin the equivalence.
inline std::vector<float> complete_query(const Tensor& x, const AmiclConfig& cfg) {
  auto kqv = build_kqv(x, cfg.a);
  const int e = x.rows(), s = x.cols();
  std::vector<float> col(static_cast<std::size_t>(s));
  for (int i = 0; i < s; ++i)
    col[static_cast<std::size_t>(i)] =
        detail::similarity_cols(kqv.k, i, kqv.q, s - 1, cfg.similarity);
  detail::separate_column(col, cfg.separation);
  std::vector<float> out(static_cast<std::size_t>(e));
  if (cfg.separation == SeparationFn::Argmax) {
    const int best = detail::argmax_lowest_tie(col.data(), s);
    for (int i = 0; i < e; ++i) out[static_cast<std::size_t>(i)] = x.at(i, best);
  } else {
    for (int i = 0; i < e; ++i) {
      float acc = 0;
      for (int t = 0; t < s; ++t) acc += x.at(i, t) * col[static_cast<std::size_t>(t)];
      out[static_cast<std::size_t>(i)] = acc;
    }
  }
  return out;
}

// Nearest label class by dot product; ties break to the lowest index.
inline int predict_label(std::span<const float> completion,
                         const EmbeddingTable& table) {
  if (table.num_labels() < 1) throw ConfigError("predict_label: empty label table");
  if (static_cast<int>(completion.size()) != table.e)
    throw ShapeError("predict_label: completion dim " +
                     std::to_string(completion.size()) + " vs table e=" +
                     std::to_string(table.e));
  int best = 0;
  float best_score = 0;
  for (int c = 0; c < table.num_labels(); ++c) {
    float acc = 0;
    const float* mu = table.label_mu.data() + static_cast<std::size_t>(c) * table.e;
    for (int i = 0; i < table.e; ++i) acc += completion[static_cast<std::size_t>(i)] * mu[i];
    if (c == 0 || acc > best_score) {
      best = c;
      best_score = acc;
    }
  }
  return best;
}

// Proportion of correct completions over fresh-task trials. Each trial draws
// its own class table (K = L = s/2) and one Test sequence.
inline double run_trials(const AmiclConfig& cfg, int e, int s, int trials,
                         float epsilon, CounterRng root) {
  if (trials < 1) throw ConfigError("run_trials: trials must be >= 1");
  if (s < 4 || s % 2 != 0)
    throw ConfigError("run_trials: s must be even and >= 4, got " + std::to_string(s));
  const int num_pairs = s / 2;
  int correct = 0;
  for (int t = 0; t < trials; ++t) {
    auto rng = root.stream(static_cast<std::uint64_t>(t));
    auto table = make_table(num_pairs, num_pairs, e, rng.next_u64());
    auto batch = sample_batch(table, TaskKind::Test, num_pairs, 1, epsilon, rng);
    auto completion = complete_query(batch.x, cfg);
    if (predict_label(completion, table) == batch.target[0]) ++correct;
  }
  return static_cast<double>(correct) / trials;
}

struct SweepRow {
  SimilarityFn similarity;
  SeparationFn separation;
  float a;
  int e, s, trials;
  double accuracy;
};

// Cartesian grid sweep; cell order is the nested loop order below and each
// cell gets its own child stream, so results do not depend on evaluation
// order or thread schedule.
inline std::vector<SweepRow> sweep(const std::vector<SimilarityFn>& sims,
                                   const std::vector<SeparationFn>& seps,
                                   const std::vector<float>& a_values,
                                   const std::vector<int>& e_values,
                                   const std::vector<int>& s_values, int trials,
                                   float epsilon, std::uint64_t seed) {
  if (trials < 1) throw ConfigError("sweep: trials must be >= 1");
  std::vector<SweepRow> rows;
  CounterRng root = CounterRng(seed).stream(streams::kSweep);
  std::uint64_t cell = 0;
  for (auto sim : sims)
    for (auto sep : seps)
      for (float a : a_values)
        for (int e : e_values)
          for (int s : s_values) {
            AmiclConfig cfg{a, sim, sep};
            const double acc =
                run_trials(cfg, e, s, trials, epsilon, root.stream(cell));
            rows.push_back(SweepRow{sim, sep, a, e, s, trials, acc});
            ++cell;
          }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows,
                            const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("write_sweep_csv: cannot open " + path);
  f << "similarity,separation,a,e,s,trials,accuracy\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(r.a));
    f << similarity_name(r.similarity) << ',' << separation_name(r.separation)
      << ',' << buf << ',' << r.e << ',' << r.s << ',' << r.trials << ',';
    std::snprintf(buf, sizeof(buf), "%.9g", r.accuracy);
    f << buf << '\n';
  }
  if (!f) throw IoError("write_sweep_csv: write failed for " + path);
}

}  // namespace icls

#endif  // ICLSTREAMS_AMICL_HPP
