#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "seqlab/autodiff.hpp"
#include "seqlab/rng.hpp"
#include "seqlab/tensor.hpp"
#include "seqlab/vocab.hpp"

namespace seqlab {

// Single-layer GRU cell weights. Gates follow the usual convention:
//   z = sigmoid(x W_z + h U_z + b_z)
//   r = sigmoid(x W_r + h U_r + b_r)
//   n = tanh(x W_n + (r*h) U_n + b_n)
//   h' = (1-z)*n + z*h
struct GruCellParams {
  Tensor w_z, w_r, w_n;  // [emb, hidden]
  Tensor u_z, u_r, u_n;  // [hidden, hidden]
  Tensor b_z, b_r, b_n;  // [1, hidden]
};

// Encoder-decoder over a shared embedding. The encoder's final state seeds
// the decoder; the decoder's first input is the eos embedding. Parameters
// are exposed through a flat vector in canonical (name-sorted) order so that
// perturbations θ+Δ apply identically across runs.
struct ModelParams {
  std::size_t vocab = 0;
  std::size_t emb = 0;
  std::size_t hidden = 0;

  Tensor embedding;  // [vocab, emb]
  GruCellParams enc;
  GruCellParams dec;
  Tensor out_w;  // [hidden, vocab]
  Tensor out_b;  // [1, vocab]

  static ModelParams sized(std::size_t vocab, std::size_t emb,
                           std::size_t hidden) {
    ModelParams p;
    p.vocab = vocab;
    p.emb = emb;
    p.hidden = hidden;
    p.embedding = Tensor({vocab, emb});
    for (GruCellParams* c : {&p.enc, &p.dec}) {
      c->w_z = Tensor({emb, hidden});
      c->w_r = Tensor({emb, hidden});
      c->w_n = Tensor({emb, hidden});
      c->u_z = Tensor({hidden, hidden});
      c->u_r = Tensor({hidden, hidden});
      c->u_n = Tensor({hidden, hidden});
      c->b_z = Tensor({std::size_t(1), hidden});
      c->b_r = Tensor({std::size_t(1), hidden});
      c->b_n = Tensor({std::size_t(1), hidden});
    }
    p.out_w = Tensor({hidden, vocab});
    p.out_b = Tensor({std::size_t(1), vocab});
    return p;
  }

  // uniform(-0.1, 0.1) entries from a dedicated stream of `seed`
  static ModelParams init(std::size_t vocab, std::size_t emb,
                          std::size_t hidden, std::uint64_t seed) {
    ModelParams p = sized(vocab, emb, hidden);
    CounterRng rng(mix_key(seed, stream_tag::init));
    for (auto& [name, t] : p.tensors()) {
      (void)name;
      for (double& v : t->data) v = rng.uniform(-0.1, 0.1);
    }
    return p;
  }

  // Canonical enumeration: name-sorted, which the literal list below is.
  // flat_view/unflatten and the checkpoint format all derive from it.
  std::vector<std::pair<std::string, Tensor*>> tensors() {
    return {
        {"dec.b_n", &dec.b_n},   {"dec.b_r", &dec.b_r},
        {"dec.b_z", &dec.b_z},   {"dec.u_n", &dec.u_n},
        {"dec.u_r", &dec.u_r},   {"dec.u_z", &dec.u_z},
        {"dec.w_n", &dec.w_n},   {"dec.w_r", &dec.w_r},
        {"dec.w_z", &dec.w_z},   {"embedding", &embedding},
        {"enc.b_n", &enc.b_n},   {"enc.b_r", &enc.b_r},
        {"enc.b_z", &enc.b_z},   {"enc.u_n", &enc.u_n},
        {"enc.u_r", &enc.u_r},   {"enc.u_z", &enc.u_z},
        {"enc.w_n", &enc.w_n},   {"enc.w_r", &enc.w_r},
        {"enc.w_z", &enc.w_z},   {"out.bias", &out_b},
        {"out.weight", &out_w},
    };
  }

  std::vector<std::pair<std::string, const Tensor*>> tensors() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [name, t] : const_cast<ModelParams*>(this)->tensors())
      out.emplace_back(name, t);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : tensors()) {
      (void)name;
      n += t->numel();
    }
    return n;
  }

  // (name, size) pairs in canonical order; the flat vector is their
  // concatenation.
  std::vector<std::pair<std::string, std::size_t>> layout() const {
    std::vector<std::pair<std::string, std::size_t>> out;
    for (auto& [name, t] : tensors()) out.emplace_back(name, t->numel());
    return out;
  }

  std::vector<double> flat_view() const {
    std::vector<double> out;
    out.reserve(param_count());
    for (auto& [name, t] : tensors()) {
      (void)name;
      out.insert(out.end(), t->data.begin(), t->data.end());
    }
    return out;
  }

  void set_flat(const std::vector<double>& flat) {
    if (flat.size() != param_count())
      throw std::invalid_argument("set_flat: length mismatch");
    std::size_t off = 0;
    for (auto& [name, t] : tensors()) {
      (void)name;
      std::copy(flat.begin() + off, flat.begin() + off + t->numel(),
                t->data.begin());
      off += t->numel();
    }
  }
};

// θ + Δ as a fresh parameter set; the input is untouched.
inline ModelParams apply_perturbation(const ModelParams& p,
                                      const std::vector<double>& delta) {
  if (delta.size() != p.param_count())
    throw std::invalid_argument("apply_perturbation: length mismatch");
  ModelParams out = p;
  std::size_t off = 0;
  for (auto& [name, t] : out.tensors()) {
    (void)name;
    for (double& v : t->data) v += delta[off++];
  }
  return out;
}

// Rescale to max_norm when the L2 norm exceeds it; otherwise pass through
// unchanged (no rescaling roundoff below the threshold).
inline std::vector<double> clip_gradient(std::vector<double> g,
                                         double max_norm) {
  if (max_norm <= 0.0)
    throw std::invalid_argument("clip_gradient: max_norm must be positive");
  double n = l2_norm(g);
  if (n > max_norm) {
    double s = max_norm / n;
    for (double& v : g) v *= s;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Plain (tape-free) forward path. Used for decoding and candidate scoring
// where gradients are not needed. Arithmetic mirrors the graph ops in both
// formula and evaluation order, so the two paths agree bit for bit; the
// test suite checks that equivalence.

namespace detail {

// dst[j] = sum_p x[p] * W[p, j], ascending p, skipping exact zeros the same
// way Graph::matmul does.
inline void matvec(const double* x, const Tensor& W, double* dst) {
  std::size_t in = W.shape[0], out = W.shape[1];
  std::fill(dst, dst + out, 0.0);
  for (std::size_t p = 0; p < in; ++p) {
    double xv = x[p];
    if (xv == 0.0) continue;
    const double* wrow = &W.data[p * out];
    for (std::size_t j = 0; j < out; ++j) dst[j] += xv * wrow[j];
  }
}

inline double sigmoid(double v) {
  return (v >= 0.0) ? 1.0 / (1.0 + std::exp(-v))
                    : std::exp(v) / (1.0 + std::exp(v));
}

inline void check_finite(const std::vector<double>& v, const char* where) {
  for (double x : v)
    if (!std::isfinite(x))
      throw NonFiniteError(std::string("non-finite value in ") + where);
}

}  // namespace detail

// One GRU step on a raw state vector.
inline std::vector<double> gru_step(const GruCellParams& c, const double* x,
                                    const std::vector<double>& h) {
  std::size_t H = h.size();
  std::vector<double> xz(H), hz(H), xr(H), hr(H), xn(H), rhn(H);
  detail::matvec(x, c.w_z, xz.data());
  detail::matvec(h.data(), c.u_z, hz.data());
  detail::matvec(x, c.w_r, xr.data());
  detail::matvec(h.data(), c.u_r, hr.data());

  std::vector<double> z(H), r(H);
  for (std::size_t j = 0; j < H; ++j)
    z[j] = detail::sigmoid((xz[j] + hz[j]) + c.b_z.data[j]);
  for (std::size_t j = 0; j < H; ++j)
    r[j] = detail::sigmoid((xr[j] + hr[j]) + c.b_r.data[j]);

  std::vector<double> rh(H);
  for (std::size_t j = 0; j < H; ++j) rh[j] = r[j] * h[j];
  detail::matvec(x, c.w_n, xn.data());
  detail::matvec(rh.data(), c.u_n, rhn.data());

  std::vector<double> hp(H);
  for (std::size_t j = 0; j < H; ++j) {
    double n = std::tanh((xn[j] + rhn[j]) + c.b_n.data[j]);
    hp[j] = (n - z[j] * n) + z[j] * h[j];
  }
  detail::check_finite(hp, "gru_step");
  return hp;
}

inline std::vector<double> encode(const ModelParams& p, const TokenSeq& x) {
  std::vector<double> h(p.hidden, 0.0);
  for (std::size_t tok : x) {
    if (tok >= p.vocab) throw std::invalid_argument("encode: bad token index");
    h = gru_step(p.enc, &p.embedding.data[tok * p.emb], h);
  }
  return h;
}

// Next-token log distribution from a raw decoder state.
inline std::vector<double> output_log_probs(const ModelParams& p,
                                            const std::vector<double>& h) {
  std::vector<double> logits(p.vocab);
  detail::matvec(h.data(), p.out_w, logits.data());
  for (std::size_t v = 0; v < p.vocab; ++v) logits[v] += p.out_b.data[v];

  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits) m = std::max(m, v);
  double zsum = 0.0;
  for (double v : logits) zsum += std::exp(v - m);
  double lz = m + std::log(zsum);
  for (double& v : logits) v -= lz;
  detail::check_finite(logits, "output_log_probs");
  return logits;
}

// Decoder state advanced by one input token.
inline std::vector<double> decoder_advance(const ModelParams& p,
                                           const std::vector<double>& h,
                                           std::size_t token) {
  if (token >= p.vocab)
    throw std::invalid_argument("decoder: bad token index");
  return gru_step(p.dec, &p.embedding.data[token * p.emb], h);
}

// Incremental decoder: construction encodes X and feeds the eos start
// input, so log_probs() immediately gives p(y_1 | X).
class DecoderState {
 public:
  DecoderState(const ModelParams& p, const TokenSeq& x,
               std::size_t eos_index)
      : p_(&p), h_(encode(p, x)) {
    h_ = decoder_advance(p, h_, eos_index);
  }

  void advance(std::size_t token) { h_ = decoder_advance(*p_, h_, token); }

  std::vector<double> log_probs() const { return output_log_probs(*p_, h_); }

  const std::vector<double>& state() const { return h_; }

 private:
  const ModelParams* p_;
  std::vector<double> h_;
};

inline std::vector<double> next_token_log_probs(const ModelParams& p,
                                                const TokenSeq& x,
                                                const TokenSeq& prefix,
                                                std::size_t eos_index) {
  DecoderState ds(p, x, eos_index);
  for (std::size_t tok : prefix) ds.advance(tok);
  return ds.log_probs();
}

// log p_θ(Y|X); Y must end in eos (checked by callers against the vocab).
inline double sequence_log_prob(const ModelParams& p, const TokenSeq& x,
                                const TokenSeq& y, std::size_t eos_index) {
  if (y.empty()) throw std::invalid_argument("sequence_log_prob: empty Y");
  DecoderState ds(p, x, eos_index);
  double lp = 0.0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    lp += ds.log_probs()[y[t]];
    if (t + 1 < y.size()) ds.advance(y[t]);
  }
  return lp;
}

// Total batch NLL without a tape. Token terms accumulate in the same order
// as the graph build in nll_batch, so the two agree bit for bit.
inline double nll_plain(const ModelParams& p,
                        const std::vector<Example>& batch,
                        std::size_t eos_index) {
  if (batch.empty()) throw std::invalid_argument("nll_plain: empty batch");
  double total = 0.0;
  for (const Example& ex : batch) {
    DecoderState ds(p, ex.x, eos_index);
    for (std::size_t t = 0; t < ex.y.size(); ++t) {
      total += ds.log_probs()[ex.y[t]];
      if (t + 1 < ex.y.size()) ds.advance(ex.y[t]);
    }
  }
  return -total;
}

// ---------------------------------------------------------------------------
// Graph forward path (gradients).

struct GraphCell {
  Graph::NodeId w_z, w_r, w_n, u_z, u_r, u_n, b_z, b_r, b_n;
};

struct GraphModel {
  Graph::NodeId embedding;
  GraphCell enc, dec;
  Graph::NodeId out_w, out_b;
  std::size_t emb = 0, hidden = 0, vocab = 0;
};

inline GraphModel register_model(Graph& g, const ModelParams& p) {
  GraphModel m;
  m.emb = p.emb;
  m.hidden = p.hidden;
  m.vocab = p.vocab;
  auto cell = [&](const GruCellParams& c, const std::string& prefix) {
    GraphCell gc;
    gc.w_z = g.parameter(prefix + ".w_z", c.w_z);
    gc.w_r = g.parameter(prefix + ".w_r", c.w_r);
    gc.w_n = g.parameter(prefix + ".w_n", c.w_n);
    gc.u_z = g.parameter(prefix + ".u_z", c.u_z);
    gc.u_r = g.parameter(prefix + ".u_r", c.u_r);
    gc.u_n = g.parameter(prefix + ".u_n", c.u_n);
    gc.b_z = g.parameter(prefix + ".b_z", c.b_z);
    gc.b_r = g.parameter(prefix + ".b_r", c.b_r);
    gc.b_n = g.parameter(prefix + ".b_n", c.b_n);
    return gc;
  };
  m.embedding = g.parameter("embedding", p.embedding);
  m.enc = cell(p.enc, "enc");
  m.dec = cell(p.dec, "dec");
  m.out_w = g.parameter("out.weight", p.out_w);
  m.out_b = g.parameter("out.bias", p.out_b);
  return m;
}

inline Graph::NodeId gru_step_graph(Graph& g, const GraphCell& c,
                                    Graph::NodeId x, Graph::NodeId h) {
  auto z = g.sigmoid(g.add(g.add(g.matmul(x, c.w_z), g.matmul(h, c.u_z)),
                           c.b_z));
  auto r = g.sigmoid(g.add(g.add(g.matmul(x, c.w_r), g.matmul(h, c.u_r)),
                           c.b_r));
  auto n = g.tanh(g.add(
      g.add(g.matmul(x, c.w_n), g.matmul(g.mul(r, h), c.u_n)), c.b_n));
  return g.add(g.sub(n, g.mul(z, n)), g.mul(z, h));
}

inline Graph::NodeId encode_graph(Graph& g, const GraphModel& m,
                                  const TokenSeq& x) {
  Graph::NodeId h = g.constant(Tensor({std::size_t(1), m.hidden}));
  for (std::size_t tok : x)
    h = gru_step_graph(g, m.enc, g.embed_row(m.embedding, tok), h);
  return h;
}

inline Graph::NodeId step_log_probs_graph(Graph& g, const GraphModel& m,
                                          Graph::NodeId h) {
  return g.log_softmax(g.add(g.matmul(h, m.out_w), m.out_b));
}

// log p_θ(Y|X) as per-token picks appended to `picks`.
inline void sequence_log_prob_graph(Graph& g, const GraphModel& m,
                                    const Example& ex, std::size_t eos_index,
                                    std::vector<Graph::NodeId>& picks) {
  Graph::NodeId h = encode_graph(g, m, ex.x);
  h = gru_step_graph(g, m.dec, g.embed_row(m.embedding, eos_index), h);
  for (std::size_t t = 0; t < ex.y.size(); ++t) {
    picks.push_back(g.pick(step_log_probs_graph(g, m, h), ex.y[t]));
    if (t + 1 < ex.y.size())
      h = gru_step_graph(g, m.dec, g.embed_row(m.embedding, ex.y[t]), h);
  }
}

// Differentiable total NLL over a batch (sum over examples and tokens).
inline Graph::NodeId nll_batch(Graph& g, const GraphModel& m,
                               const std::vector<Example>& batch,
                               std::size_t eos_index) {
  if (batch.empty()) throw std::invalid_argument("nll_batch: empty batch");
  std::vector<Graph::NodeId> picks;
  for (const Example& ex : batch)
    sequence_log_prob_graph(g, m, ex, eos_index, picks);
  return g.scale(g.add_n(picks), -1.0);
}

// Flat-order gradient assembly from a named gradient map.
inline std::vector<double> flatten_grads(
    const ModelParams& p, const std::map<std::string, Tensor>& grads) {
  std::vector<double> out;
  out.reserve(p.param_count());
  for (auto& [name, t] : p.tensors()) {
    (void)name;
    const Tensor& gt = grads.at(name);
    out.insert(out.end(), gt.data.begin(), gt.data.end());
  }
  return out;
}

struct NllResult {
  double value = 0.0;
  std::vector<double> grad;  // flat canonical order
};

inline NllResult nll_and_gradient(const ModelParams& p,
                                  const std::vector<Example>& batch,
                                  std::size_t eos_index) {
  Graph g;
  GraphModel m = register_model(g, p);
  Graph::NodeId root = nll_batch(g, m, batch, eos_index);
  g.backward(root);
  NllResult r;
  r.value = g.value(root).data[0];
  r.grad = flatten_grads(p, g.param_grads());
  return r;
}

// exp(total NLL / total target tokens), eos counted.
inline double perplexity(const ModelParams& p,
                         const std::vector<Example>& data,
                         std::size_t eos_index) {
  if (data.empty()) throw std::invalid_argument("perplexity: empty data");
  double nll = 0.0;
  std::size_t toks = 0;
  for (const Example& ex : data) {
    nll -= sequence_log_prob(p, ex.x, ex.y, eos_index);
    toks += ex.y.size();
  }
  return std::exp(nll / double(toks));
}

}  // namespace seqlab
