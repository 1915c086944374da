#ifndef ICLSTREAMS_LM_DECODER_HPP
#define ICLSTREAMS_LM_DECODER_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "iclstreams/corpus.hpp"
#include "iclstreams/errors.hpp"
#include "iclstreams/rng.hpp"
#include "iclstreams/tensor.hpp"
#include "iclstreams/variant.hpp"

namespace icls {

// GPT-style byte-level decoder with an optional per-head residual value
// stream: in every layer but the first, each head's value matrix receives
// the value matrix of the same-index head in the previous layer, captured
// before attention weighting. Head row blocks line up across layers, so the
// per-head wiring is a single matrix addition and adds no parameters.

struct LmConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int context = 128;
  int vocab = tokens::kVocab;
  StreamVariant variant = StreamVariant::Classic;  // Classic or Values only
  bool layernorm = true;
  bool tie_embeddings = true;
  int mlp_ratio = 4;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || context < 1 || vocab < 2)
      throw ConfigError("LmConfig: dimensions must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("LmConfig: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    if (variant != StreamVariant::Classic && variant != StreamVariant::Values)
      throw ConfigError("LmConfig: decoder supports classic or values variants");
    if (mlp_ratio < 1) throw ConfigError("LmConfig: mlp_ratio must be >= 1");
  }
};

template <typename Real>
struct LmParamsT {
  LmConfig cfg;
  TensorT<Real> wte;  // vocab x d
  TensorT<Real> wpe;  // context x d
  struct Layer {
    TensorT<Real> ln1_g, ln1_b;
    TensorT<Real> wq, wk, wv, wo;  // d x d
    TensorT<Real> ln2_g, ln2_b;
    TensorT<Real> fc1, fc1_b;  // (ratio*d) x d, ratio*d
    TensorT<Real> fc2, fc2_b;  // d x (ratio*d), d
  };
  std::vector<Layer> layers;
  TensorT<Real> lnf_g, lnf_b;
  TensorT<Real> lm_head;  // vocab x d, only when not weight-tied

  std::vector<std::pair<std::string, TensorT<Real>*>> named_parameters() {
    std::vector<std::pair<std::string, TensorT<Real>*>> out;
    out.emplace_back("wte", &wte);
    out.emplace_back("wpe", &wpe);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      if (cfg.layernorm) {
        out.emplace_back(p + "ln1_g", &l.ln1_g);
        out.emplace_back(p + "ln1_b", &l.ln1_b);
      }
      out.emplace_back(p + "wq", &l.wq);
      out.emplace_back(p + "wk", &l.wk);
      out.emplace_back(p + "wv", &l.wv);
      out.emplace_back(p + "wo", &l.wo);
      if (cfg.layernorm) {
        out.emplace_back(p + "ln2_g", &l.ln2_g);
        out.emplace_back(p + "ln2_b", &l.ln2_b);
      }
      out.emplace_back(p + "fc1", &l.fc1);
      out.emplace_back(p + "fc1_b", &l.fc1_b);
      out.emplace_back(p + "fc2", &l.fc2);
      out.emplace_back(p + "fc2_b", &l.fc2_b);
    }
    if (cfg.layernorm) {
      out.emplace_back("lnf_g", &lnf_g);
      out.emplace_back("lnf_b", &lnf_b);
    }
    if (!cfg.tie_embeddings) out.emplace_back("lm_head", &lm_head);
    return out;
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

using LmParams = LmParamsT<float>;

template <typename Real>
LmParamsT<Real> init_lm_params(const LmConfig& cfg) {
  cfg.validate();
  LmParamsT<Real> p;
  p.cfg = cfg;
  const int d = cfg.d_model, hd = cfg.mlp_ratio * d;
  CounterRng rng = CounterRng(cfg.seed).stream(streams::kInit);
  auto weight = [&rng](std::vector<int> shape, int fan_in) {
    auto t = TensorT<Real>::zeros(std::move(shape), true);
    fill_normal(t, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    return t;
  };
  auto zeros = [](std::vector<int> shape) {
    return TensorT<Real>::zeros(std::move(shape), true);
  };
  auto ones = [](std::vector<int> shape) {
    auto t = TensorT<Real>::zeros(std::move(shape), true);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = Real(1);
    return t;
  };

  // Embedding tables use the conventional small-scale init; with weight
  // tying this also keeps an untrained model's next-token distribution
  // close to uniform.
  auto embedding = [&rng](std::vector<int> shape) {
    auto t = TensorT<Real>::zeros(std::move(shape), true);
    fill_normal(t, rng, 0.02);
    return t;
  };
  p.wte = embedding({cfg.vocab, d});
  p.wpe = embedding({cfg.context, d});
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : p.layers) {
    l.ln1_g = ones({d});
    l.ln1_b = zeros({d});
    l.wq = weight({d, d}, d);
    l.wk = weight({d, d}, d);
    l.wv = weight({d, d}, d);
    l.wo = weight({d, d}, d);
    l.ln2_g = ones({d});
    l.ln2_b = zeros({d});
    l.fc1 = weight({hd, d}, d);
    l.fc1_b = zeros({hd});
    l.fc2 = weight({d, hd}, hd);
    l.fc2_b = zeros({d});
  }
  p.lnf_g = ones({d});
  p.lnf_b = zeros({d});
  if (!cfg.tie_embeddings) p.lm_head = weight({cfg.vocab, d}, d);
  return p;
}

// Per-layer value matrices (post stream addition), for tests and probes.
template <typename Real>
struct LmTrace {
  std::vector<TensorT<Real>> layer_values;
};

// Per-position next-token logits, vocab x T.
template <typename Real>
TensorT<Real> lm_forward(TapeT<Real>* tape, LmParamsT<Real>& p,
                         const std::vector<int>& ids,
                         LmTrace<Real>* trace = nullptr) {
  const LmConfig& cfg = p.cfg;
  const int T = static_cast<int>(ids.size());
  if (T < 1) throw ContractError("lm_forward: empty token sequence");
  if (T > cfg.context)
    throw ContractError("lm_forward: sequence of " + std::to_string(T) +
                        " tokens exceeds context " + std::to_string(cfg.context));
  for (int id : ids)
    if (id < 0 || id >= cfg.vocab)
      throw IndexError("lm_forward: token id " + std::to_string(id) +
                       " out of vocab " + std::to_string(cfg.vocab));

  std::vector<int> positions(static_cast<std::size_t>(T));
  std::iota(positions.begin(), positions.end(), 0);
  auto x = add(tape, embed_columns(tape, p.wte, ids),
               embed_columns(tape, p.wpe, positions));

  const int hd = cfg.head_dim();
  const Real score_scale = Real(1) / std::sqrt(static_cast<Real>(hd));
  TensorT<Real> prev_values;
  for (int li = 0; li < cfg.n_layers; ++li) {
    auto& l = p.layers[static_cast<std::size_t>(li)];
    auto a_in = cfg.layernorm ? layernorm_columns(tape, x, l.ln1_g, l.ln1_b) : x;
    auto q = matmul(tape, l.wq, a_in);
    auto k = matmul(tape, l.wk, a_in);
    auto v = matmul(tape, l.wv, a_in);
    if (cfg.variant == StreamVariant::Values && li > 0)
      v = add(tape, v, prev_values);
    prev_values = v;  // donated pre-weighting, accumulated across layers
    if (trace) trace->layer_values.push_back(v);

    std::vector<TensorT<Real>> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto qh = row_range(tape, q, h * hd, (h + 1) * hd);
      auto kh = row_range(tape, k, h * hd, (h + 1) * hd);
      auto vh = row_range(tape, v, h * hd, (h + 1) * hd);
      auto attn = block_softmax_columns(
          tape, block_scores(tape, kh, qh, T, score_scale), T, /*causal=*/true);
      head_outputs.push_back(block_attend(tape, vh, attn, T));
    }
    auto cat = concat_rows(tape, head_outputs);
    x = add(tape, x, matmul(tape, l.wo, cat));

    auto m_in = cfg.layernorm ? layernorm_columns(tape, x, l.ln2_g, l.ln2_b) : x;
    auto z = relu(tape, add_colvec(tape, matmul(tape, l.fc1, m_in), l.fc1_b));
    x = add(tape, x, add_colvec(tape, matmul(tape, l.fc2, z), l.fc2_b));
  }
  auto xf = cfg.layernorm ? layernorm_columns(tape, x, p.lnf_g, p.lnf_b) : x;
  return matmul(tape, cfg.tie_embeddings ? p.wte : p.lm_head, xf);
}

// Mean next-token cross-entropy over a batch of windows; grads populated.
inline float lm_loss_and_grad(LmParams& p, const LmBatch& batch) {
  if (batch.inputs.empty()) throw ContractError("lm_loss_and_grad: empty batch");
  Tape tape;
  Tensor total;
  for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
    auto logits = lm_forward(&tape, p, batch.inputs[b]);
    auto loss = cross_entropy_columns(&tape, logits, batch.targets[b]);
    total = b == 0 ? loss : add(&tape, total, loss);
  }
  auto mean = scale(&tape, total, 1.0f / static_cast<float>(batch.inputs.size()));
  backward(tape, mean);
  return mean.at(0);
}

inline double lm_eval_loss(LmParams& p, const LmBatch& batch) {
  double acc = 0;
  for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
    auto logits = lm_forward<float>(nullptr, p, batch.inputs[b]);
    auto loss = cross_entropy_columns<float>(nullptr, logits, batch.targets[b]);
    acc += loss.at(0);
  }
  return acc / static_cast<double>(batch.inputs.size());
}

// Prompt tokenization: a document marker followed by the prompt bytes.
// Overlong prompts are truncated from the left; `truncated` reports it.
inline std::vector<int> encode_prompt(const LmConfig& cfg, const std::string& prompt,
                                      bool* truncated = nullptr) {
  std::vector<int> ids;
  ids.push_back(tokens::kDocMarker);
  for (unsigned char c : prompt) ids.push_back(static_cast<int>(c));
  bool trunc = false;
  // Keep room for at least one generated token.
  const int budget = cfg.context - 1;
  if (static_cast<int>(ids.size()) > budget) {
    ids.erase(ids.begin(), ids.end() - budget);
    trunc = true;
  }
  if (truncated) *truncated = trunc;
  return ids;
}

inline std::vector<double> next_token_distribution_ids(LmParams& p,
                                                       const std::vector<int>& ids) {
  auto logits = lm_forward<float>(nullptr, p, ids);
  const int T = logits.cols(), V = logits.rows();
  std::vector<double> probs(static_cast<std::size_t>(V));
  double mx = -1e300;
  for (int i = 0; i < V; ++i) mx = std::max(mx, static_cast<double>(logits.at(i, T - 1)));
  double denom = 0;
  for (int i = 0; i < V; ++i) {
    probs[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(logits.at(i, T - 1)) - mx);
    denom += probs[static_cast<std::size_t>(i)];
  }
  for (auto& v : probs) v /= denom;
  return probs;
}

// Softmax over the final-position logits; probabilities over the vocab.
inline std::vector<double> next_token_distribution(LmParams& p,
                                                   const std::string& prompt,
                                                   bool* truncated = nullptr) {
  auto ids = encode_prompt(p.cfg, prompt, truncated);
  return next_token_distribution_ids(p, ids);
}

// Ancestral sampling; temperature 0 means greedy argmax. Generation stops
// early if the model emits a document marker.
inline std::string generate(LmParams& p, const std::string& prompt, int max_new,
                            float temperature, CounterRng& rng) {
  if (temperature < 0) throw ConfigError("generate: temperature must be >= 0");
  auto ids = encode_prompt(p.cfg, prompt);
  std::vector<int> fresh;
  for (int step = 0; step < max_new; ++step) {
    std::vector<int> window = ids;
    if (static_cast<int>(window.size()) > p.cfg.context)
      window.erase(window.begin(), window.end() - p.cfg.context);
    auto logits = lm_forward<float>(nullptr, p, window);
    const int T = logits.cols(), V = logits.rows();
    int next;
    if (temperature == 0.0f) {
      next = 0;
      for (int i = 1; i < V; ++i)
        if (logits.at(i, T - 1) > logits.at(next, T - 1)) next = i;
    } else {
      double mx = -1e300;
      for (int i = 0; i < V; ++i)
        mx = std::max(mx, static_cast<double>(logits.at(i, T - 1)) / temperature);
      std::vector<double> cdf(static_cast<std::size_t>(V));
      double acc = 0;
      for (int i = 0; i < V; ++i) {
        acc += std::exp(static_cast<double>(logits.at(i, T - 1)) / temperature - mx);
        cdf[static_cast<std::size_t>(i)] = acc;
      }
      const double u = rng.next_double() * acc;
      next = V - 1;
      for (int i = 0; i < V; ++i)
        if (u < cdf[static_cast<std::size_t>(i)]) {
          next = i;
          break;
        }
    }
    if (next == tokens::kDocMarker) break;
    ids.push_back(next);
    fresh.push_back(next);
  }
  return prompt + decode_bytes(fresh);
}

struct IoiProbe {
  std::string prompt;
  std::string correct;
  std::string incorrect;
};

struct IoiResult {
  IoiProbe probe;
  double p_correct = 0;
  double p_incorrect = 0;
};

// The eight sentence/swap probes used for the indirect-object evaluation.
inline std::vector<IoiProbe> default_ioi_battery() {
  return {
      {"When John and Mary went to the shops, John gave the bag to", " Mary", " John"},
      {"When John and Mary went to the shops, Mary gave the bag to", " John", " Mary"},
      {"When Tom and James went to the park, Tom gave the ball to", " James", " Tom"},
      {"When Tom and James went to the park, James gave the ball to", " Tom", " James"},
      {"When Dan and Emily went to the shops, Dan gave an apple to", " Emily", " Dan"},
      {"When Dan and Emily went to the shops, Emily gave an apple to", " Dan", " Emily"},
      {"After Sam and Amy went to the park, Sam gave a drink to", " Amy", " Sam"},
      {"After Sam and Amy went to the park, Amy gave a drink to", " Sam", " Amy"},
  };
}

// One probe per line: prompt TAB correct_name TAB incorrect_name.
inline std::vector<IoiProbe> parse_ioi_battery(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("parse_ioi_battery: cannot open " + path);
  std::vector<IoiProbe> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    IoiProbe probe;
    if (!std::getline(ss, probe.prompt, '\t') ||
        !std::getline(ss, probe.correct, '\t') ||
        !std::getline(ss, probe.incorrect, '\t'))
      throw FormatError("parse_ioi_battery: line " + std::to_string(lineno) +
                        " of " + path + " is not prompt<TAB>correct<TAB>incorrect");
    out.push_back(std::move(probe));
  }
  if (out.empty()) throw FormatError("parse_ioi_battery: " + path + " has no probes");
  return out;
}

// Teacher-forced probability of a multi-token continuation: the product of
// stepwise conditional probabilities of the name's byte tokens.
inline double continuation_probability(LmParams& p, const std::string& prompt,
                                       const std::string& name) {
  if (name.empty()) throw ConfigError("continuation_probability: empty name");
  auto ids = encode_prompt(p.cfg, prompt);
  double prob = 1.0;
  for (unsigned char c : name) {
    if (static_cast<int>(ids.size()) >= p.cfg.context)
      ids.erase(ids.begin(), ids.begin() + 1);
    auto dist = next_token_distribution_ids(p, ids);
    prob *= dist[static_cast<std::size_t>(c)];
    ids.push_back(static_cast<int>(c));
  }
  return prob;
}

inline std::vector<IoiResult> ioi_probe(LmParams& p,
                                        const std::vector<IoiProbe>& battery) {
  if (battery.empty()) throw ContractError("ioi_probe: empty battery");
  std::vector<IoiResult> out;
  out.reserve(battery.size());
  for (const auto& probe : battery) {
    IoiResult r;
    r.probe = probe;
    r.p_correct = continuation_probability(p, probe.prompt, probe.correct);
    r.p_incorrect = continuation_probability(p, probe.prompt, probe.incorrect);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace icls

#endif  // ICLSTREAMS_LM_DECODER_HPP
