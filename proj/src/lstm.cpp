#include "lens/lstm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "lens/rng.hpp"
#include "lens/util.hpp"

namespace lens {

using nlohmann::json;

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// y[r] += A[r,:] . x
inline void matvec_acc(const double* A, const double* x, double* y, int rows,
                       int cols) {
  for (int r = 0; r < rows; ++r) {
    const double* row = A + static_cast<size_t>(r) * cols;
    double acc = 0.0;
    for (int k = 0; k < cols; ++k) acc += row[k] * x[k];
    y[r] += acc;
  }
}

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x))
      throw std::invalid_argument(std::string("non-finite value in ") + what);
}

}  // namespace

void Model::validate() const {
  if (dims.vocab <= 0 || dims.embed <= 0 || dims.hidden <= 0 || dims.layers <= 0)
    throw std::invalid_argument("model dims must be positive");
  if (static_cast<int>(vocab.tokens.size()) != dims.vocab)
    throw std::invalid_argument("vocabulary size does not match dims.vocab");
  auto expect = [](size_t got, size_t want, const char* what) {
    if (got != want)
      throw std::invalid_argument(std::string("bad shape for ") + what);
  };
  expect(embedding.size(), static_cast<size_t>(dims.vocab) * dims.embed, "embedding");
  expect(layers.size(), static_cast<size_t>(dims.layers), "layers");
  for (int l = 0; l < dims.layers; ++l) {
    const LayerParams& p = layers[l];
    const int in = l == 0 ? dims.embed : dims.hidden;
    if (p.in_dim != in || p.hidden != dims.hidden)
      throw std::invalid_argument("layer dims inconsistent with model dims");
    expect(p.w_ih.size(), static_cast<size_t>(4) * dims.hidden * in, "w_ih");
    expect(p.w_hh.size(), static_cast<size_t>(4) * dims.hidden * dims.hidden, "w_hh");
    expect(p.bias.size(), static_cast<size_t>(4) * dims.hidden, "bias");
    check_finite(p.w_ih, "w_ih");
    check_finite(p.w_hh, "w_hh");
    check_finite(p.bias, "bias");
  }
  expect(w_out.size(), static_cast<size_t>(dims.vocab) * dims.hidden, "w_out");
  expect(b_out.size(), static_cast<size_t>(dims.vocab), "b_out");
  check_finite(embedding, "embedding");
  check_finite(w_out, "w_out");
  check_finite(b_out, "b_out");
}

Model init_model(const Dims& dims, const Vocab& vocab, uint64_t seed) {
  Model m;
  m.dims = dims;
  m.vocab = vocab;
  const double k = 1.0 / std::sqrt(static_cast<double>(dims.hidden));
  Rng rng = Rng::derive(seed, "model-init");
  auto fill = [&](std::vector<double>& v, size_t n) {
    v.resize(n);
    for (double& x : v) x = rng.real(-k, k);
  };
  fill(m.embedding, static_cast<size_t>(dims.vocab) * dims.embed);
  m.layers.resize(dims.layers);
  for (int l = 0; l < dims.layers; ++l) {
    LayerParams& p = m.layers[l];
    p.in_dim = l == 0 ? dims.embed : dims.hidden;
    p.hidden = dims.hidden;
    fill(p.w_ih, static_cast<size_t>(4) * dims.hidden * p.in_dim);
    fill(p.w_hh, static_cast<size_t>(4) * dims.hidden * dims.hidden);
    p.bias.assign(static_cast<size_t>(4) * dims.hidden, 0.0);
    // Forget-gate bias starts at +1 for long-range retention.
    for (int u = 0; u < dims.hidden; ++u) p.bias[kGateF * dims.hidden + u] = 1.0;
  }
  fill(m.w_out, static_cast<size_t>(dims.vocab) * dims.hidden);
  m.b_out.assign(dims.vocab, 0.0);
  m.vocab = vocab;
  return m;
}

// ---------------------------------------------------------------------------
// Units and masks
// ---------------------------------------------------------------------------

std::string UnitRef::display() const {
  return "L" + std::to_string(layer + 1) + "-U" + std::to_string(unit + 1);
}

UnitRef unit_from_flat(int flat0, int hidden) {
  return UnitRef{flat0 / hidden, flat0 % hidden};
}

std::optional<UnitRef> parse_unit(const std::string& text) {
  // Expected form: L<layer>-U<unit>, both 1-based.
  if (text.size() < 4 || text[0] != 'L') return std::nullopt;
  size_t dash = text.find("-U");
  if (dash == std::string::npos) return std::nullopt;
  try {
    size_t used = 0;
    int layer = std::stoi(text.substr(1, dash - 1), &used);
    if (used != dash - 1) return std::nullopt;
    int unit = std::stoi(text.substr(dash + 2), &used);
    if (used != text.size() - dash - 2) return std::nullopt;
    if (layer < 1 || unit < 1) return std::nullopt;
    return UnitRef{layer - 1, unit - 1};
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

AblationMask AblationMask::parse(const std::string& text) {
  AblationMask mask;
  if (text.empty()) return mask;
  for (const std::string& part : split(text, ',')) {
    if (part.empty()) continue;
    auto u = parse_unit(part);
    if (!u) throw std::invalid_argument("bad unit reference: '" + part + "'");
    mask.units.push_back(*u);
  }
  return mask;
}

std::string AblationMask::display() const {
  std::vector<std::string> parts;
  for (const UnitRef& u : units) parts.push_back(u.display());
  return join(parts, ",");
}

ResolvedMask resolve_mask(const AblationMask& mask, const Dims& dims,
                          bool clamp_cell) {
  ResolvedMask r;
  r.bits.assign(static_cast<size_t>(dims.layers) * dims.hidden, 0);
  r.clamp_cell = clamp_cell;
  for (const UnitRef& u : mask.units) {
    if (u.layer < 0 || u.layer >= dims.layers || u.unit < 0 || u.unit >= dims.hidden)
      throw std::out_of_range("ablation mask entry " + u.display() +
                              " outside model dims");
    r.bits[static_cast<size_t>(u.layer) * dims.hidden + u.unit] = 1;
    r.any = true;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

void reset_state(const Model& m, LstmState& s) {
  s.h.assign(static_cast<size_t>(m.dims.layers) * m.dims.hidden, 0.0);
  s.c.assign(static_cast<size_t>(m.dims.layers) * m.dims.hidden, 0.0);
}

void lstm_step(const Model& m, int token, LstmState& state,
               const ResolvedMask& mask, StepScratch& scratch,
               ActivationTrace* snapshot, int step_index) {
  const int H = m.dims.hidden;
  const int E = m.dims.embed;
  if (token < 0 || token >= m.dims.vocab)
    throw std::out_of_range("token id " + std::to_string(token) +
                            " outside vocabulary");

  scratch.x.assign(m.embedding.begin() + static_cast<size_t>(token) * E,
                   m.embedding.begin() + static_cast<size_t>(token + 1) * E);
  scratch.pre.resize(static_cast<size_t>(4) * H);

  for (int l = 0; l < m.dims.layers; ++l) {
    const LayerParams& p = m.layers[l];
    double* h = state.h.data() + static_cast<size_t>(l) * H;
    double* c = state.c.data() + static_cast<size_t>(l) * H;
    double* pre = scratch.pre.data();

    for (int r = 0; r < 4 * H; ++r) pre[r] = p.bias[r];
    matvec_acc(p.w_ih.data(), scratch.x.data(), pre, 4 * H, p.in_dim);
    matvec_acc(p.w_hh.data(), h, pre, 4 * H, H);

    const uint8_t* bits = mask.any ? mask.bits.data() + static_cast<size_t>(l) * H
                                   : nullptr;
    scratch.x.resize(H);
    for (int u = 0; u < H; ++u) {
      const double gi = sigmoid(pre[kGateI * H + u]);
      const double gf = sigmoid(pre[kGateF * H + u]);
      const double gg = std::tanh(pre[kGateG * H + u]);
      const double go = sigmoid(pre[kGateO * H + u]);
      double cu = gf * c[u] + gi * gg;
      double hu = go * std::tanh(cu);
      if (bits && bits[u]) {
        hu = 0.0;
        if (mask.clamp_cell) cu = 0.0;
      }
      c[u] = cu;
      h[u] = hu;
      scratch.x[u] = hu;
      if (snapshot) {
        const size_t idx = snapshot->idx(step_index, l, u);
        snapshot->i[idx] = gi;
        snapshot->f[idx] = gf;
        snapshot->g[idx] = gg;
        snapshot->o[idx] = go;
        snapshot->c[idx] = cu;
        snapshot->h[idx] = hu;
      }
    }
  }
}

double output_logit(const Model& m, const LstmState& state, int token_id) {
  const int H = m.dims.hidden;
  const double* h_top = state.h.data() + static_cast<size_t>(m.dims.layers - 1) * H;
  const double* row = m.w_out.data() + static_cast<size_t>(token_id) * H;
  double acc = m.b_out[token_id];
  for (int k = 0; k < H; ++k) acc += row[k] * h_top[k];
  return acc;
}

void output_logprobs(const Model& m, const LstmState& state,
                     std::vector<double>& out) {
  const int V = m.dims.vocab;
  const int H = m.dims.hidden;
  const double* h_top = state.h.data() + static_cast<size_t>(m.dims.layers - 1) * H;
  out.resize(V);
  double mx = -HUGE_VAL;
  for (int v = 0; v < V; ++v) {
    const double* row = m.w_out.data() + static_cast<size_t>(v) * H;
    double acc = m.b_out[v];
    for (int k = 0; k < H; ++k) acc += row[k] * h_top[k];
    out[v] = acc;
    mx = std::max(mx, acc);
  }
  double lse = 0.0;
  for (int v = 0; v < V; ++v) lse += std::exp(out[v] - mx);
  lse = mx + std::log(lse);
  for (int v = 0; v < V; ++v) out[v] -= lse;
}

ForwardResult forward(const Model& m, std::span<const int> tokens,
                      const AblationMask& mask, const ForwardOptions& opts) {
  ForwardResult res;
  const int T = static_cast<int>(tokens.size());
  ResolvedMask rm = resolve_mask(mask, m.dims, opts.clamp_cell);

  if (opts.record_trace) {
    res.trace.tokens.assign(tokens.begin(), tokens.end());
    res.trace.layers = m.dims.layers;
    res.trace.hidden = m.dims.hidden;
    const size_t n = static_cast<size_t>(T) * m.dims.layers * m.dims.hidden;
    for (auto* a : {&res.trace.h, &res.trace.c, &res.trace.i, &res.trace.f,
                    &res.trace.o, &res.trace.g})
      a->assign(n, 0.0);
  }
  if (opts.want_logprobs) res.logprobs.resize(static_cast<size_t>(T) * m.dims.vocab);

  LstmState state;
  reset_state(m, state);
  StepScratch scratch;
  std::vector<double> lp;
  if (opts.bos) lstm_step(m, m.vocab.eos(), state, rm, scratch);
  for (int t = 0; t < T; ++t) {
    lstm_step(m, tokens[t], state, rm, scratch,
              opts.record_trace ? &res.trace : nullptr, t);
    if (opts.want_logprobs) {
      output_logprobs(m, state, lp);
      std::copy(lp.begin(), lp.end(),
                res.logprobs.begin() + static_cast<size_t>(t) * m.dims.vocab);
    }
  }
  return res;
}

CellStep cell_step(const LayerParams& p, std::span<const double> x,
                   std::span<const double> h_prev, std::span<const double> c_prev) {
  const int H = p.hidden;
  if (static_cast<int>(x.size()) != p.in_dim ||
      static_cast<int>(h_prev.size()) != H || static_cast<int>(c_prev.size()) != H)
    throw std::invalid_argument("cell_step: shape mismatch");
  std::vector<double> pre(p.bias.begin(), p.bias.end());
  matvec_acc(p.w_ih.data(), x.data(), pre.data(), 4 * H, p.in_dim);
  matvec_acc(p.w_hh.data(), h_prev.data(), pre.data(), 4 * H, H);
  CellStep out;
  out.i.resize(H); out.f.resize(H); out.g.resize(H);
  out.o.resize(H); out.c.resize(H); out.h.resize(H);
  for (int u = 0; u < H; ++u) {
    out.i[u] = sigmoid(pre[kGateI * H + u]);
    out.f[u] = sigmoid(pre[kGateF * H + u]);
    out.g[u] = std::tanh(pre[kGateG * H + u]);
    out.o[u] = sigmoid(pre[kGateO * H + u]);
    out.c[u] = out.f[u] * c_prev[u] + out.i[u] * out.g[u];
    out.h[u] = out.o[u] * std::tanh(out.c[u]);
  }
  return out;
}

std::vector<ActivationTrace> collect_traces(const Model& m,
                                            const std::vector<std::vector<int>>& seqs,
                                            const AblationMask& mask,
                                            bool clamp_cell, bool bos) {
  std::vector<ActivationTrace> out(seqs.size());
  ForwardOptions opts;
  opts.record_trace = true;
  opts.clamp_cell = clamp_cell;
  opts.bos = bos;
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(seqs.size()); ++i) {
    out[i] = forward(m, seqs[i], mask, opts).trace;
  }
  return out;
}

void write_trace_csv(const ActivationTrace& trace, const Vocab& vocab,
                     const std::filesystem::path& p) {
  std::ostringstream out;
  out << "t,token,layer,unit,h,c,i,f,o,ctilde\n";
  for (int t = 0; t < trace.steps(); ++t) {
    for (int l = 0; l < trace.layers; ++l) {
      for (int u = 0; u < trace.hidden; ++u) {
        out << t << ',' << vocab.tokens.at(trace.tokens[t]) << ',' << (l + 1)
            << ',' << (u + 1) << ',' << fmt_double(trace.h_at(t, l, u)) << ','
            << fmt_double(trace.c_at(t, l, u)) << ','
            << fmt_double(trace.i_at(t, l, u)) << ','
            << fmt_double(trace.f_at(t, l, u)) << ','
            << fmt_double(trace.o_at(t, l, u)) << ','
            << fmt_double(trace.g_at(t, l, u)) << '\n';
      }
    }
  }
  write_file(p, out.str());
}

// ---------------------------------------------------------------------------
// Training (batched truncated BPTT)
// ---------------------------------------------------------------------------

Gradients Gradients::zeros_like(const Model& m) {
  Gradients g;
  g.embedding.assign(m.embedding.size(), 0.0);
  g.layers.resize(m.layers.size());
  for (size_t l = 0; l < m.layers.size(); ++l) {
    g.layers[l].w_ih.assign(m.layers[l].w_ih.size(), 0.0);
    g.layers[l].w_hh.assign(m.layers[l].w_hh.size(), 0.0);
    g.layers[l].bias.assign(m.layers[l].bias.size(), 0.0);
  }
  g.w_out.assign(m.w_out.size(), 0.0);
  g.b_out.assign(m.b_out.size(), 0.0);
  return g;
}

std::vector<ParamView> param_views(Model& m, const Gradients& g) {
  std::vector<ParamView> views;
  views.push_back({"embedding", m.embedding.data(), g.embedding.data(),
                   m.embedding.size()});
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const std::string base = "layer" + std::to_string(l + 1) + ".";
    views.push_back({base + "w_ih", m.layers[l].w_ih.data(),
                     g.layers[l].w_ih.data(), m.layers[l].w_ih.size()});
    views.push_back({base + "w_hh", m.layers[l].w_hh.data(),
                     g.layers[l].w_hh.data(), m.layers[l].w_hh.size()});
    views.push_back({base + "bias", m.layers[l].bias.data(),
                     g.layers[l].bias.data(), m.layers[l].bias.size()});
  }
  views.push_back({"w_out", m.w_out.data(), g.w_out.data(), m.w_out.size()});
  views.push_back({"b_out", m.b_out.data(), g.b_out.data(), m.b_out.size()});
  return views;
}

namespace {

// Batch-last layout helpers: arrays are [rows][B] with b contiguous.
// Y[r][b] += sum_k A[r][k] X[k][b]
void gemm_acc(const double* A, const double* X, double* Y, int rows, int cols,
              int B) {
  for (int r = 0; r < rows; ++r) {
    const double* arow = A + static_cast<size_t>(r) * cols;
    double* yrow = Y + static_cast<size_t>(r) * B;
    for (int k = 0; k < cols; ++k) {
      const double a = arow[k];
      if (a == 0.0) continue;
      const double* xrow = X + static_cast<size_t>(k) * B;
      for (int b = 0; b < B; ++b) yrow[b] += a * xrow[b];
    }
  }
}

// dA[r][k] += sum_b dY[r][b] X[k][b]
void gemm_grad_a(const double* dY, const double* X, double* dA, int rows,
                 int cols, int B) {
  for (int r = 0; r < rows; ++r) {
    const double* dyrow = dY + static_cast<size_t>(r) * B;
    double* darow = dA + static_cast<size_t>(r) * cols;
    for (int k = 0; k < cols; ++k) {
      const double* xrow = X + static_cast<size_t>(k) * B;
      double acc = 0.0;
      for (int b = 0; b < B; ++b) acc += dyrow[b] * xrow[b];
      darow[k] += acc;
    }
  }
}

// dX[k][b] += sum_r A[r][k] dY[r][b]
void gemm_grad_x(const double* A, const double* dY, double* dX, int rows,
                 int cols, int B) {
  for (int r = 0; r < rows; ++r) {
    const double* arow = A + static_cast<size_t>(r) * cols;
    const double* dyrow = dY + static_cast<size_t>(r) * B;
    for (int k = 0; k < cols; ++k) {
      const double a = arow[k];
      if (a == 0.0) continue;
      double* dxrow = dX + static_cast<size_t>(k) * B;
      for (int b = 0; b < B; ++b) dxrow[b] += a * dyrow[b];
    }
  }
}

// One BPTT window over B parallel streams. Returns mean token cross-entropy
// and accumulates gradients (normalized by the token count W*B).
struct WindowWork {
  // forward activations, [t][l][H][B] flattened
  std::vector<double> gi, gf, gg, go, cc, hh;
  std::vector<double> emb;   // [t][E][B]
  std::vector<double> dz;    // [t][V][B]
  std::vector<double> pre;   // [4H][B]
  std::vector<double> dh, dc;  // [t][l][H][B]
  std::vector<double> da, dx;
  std::vector<double> logits;  // [V][B]
};

double window_forward_backward(const Model& m, const int* in_tokens,
                               const int* targets, int W, int B,
                               std::vector<double>& h0, std::vector<double>& c0,
                               Gradients& grad, WindowWork& wk) {
  const int H = m.dims.hidden;
  const int E = m.dims.embed;
  const int V = m.dims.vocab;
  const int L = m.dims.layers;
  const size_t lhb = static_cast<size_t>(L) * H * B;
  const size_t hb = static_cast<size_t>(H) * B;

  auto resize0 = [](std::vector<double>& v, size_t n) { v.assign(n, 0.0); };
  resize0(wk.gi, static_cast<size_t>(W) * lhb);
  resize0(wk.gf, static_cast<size_t>(W) * lhb);
  resize0(wk.gg, static_cast<size_t>(W) * lhb);
  resize0(wk.go, static_cast<size_t>(W) * lhb);
  resize0(wk.cc, static_cast<size_t>(W) * lhb);
  resize0(wk.hh, static_cast<size_t>(W) * lhb);
  resize0(wk.emb, static_cast<size_t>(W) * E * B);
  resize0(wk.dz, static_cast<size_t>(W) * V * B);
  resize0(wk.pre, static_cast<size_t>(4) * H * B);
  resize0(wk.dh, static_cast<size_t>(W) * lhb);
  resize0(wk.dc, static_cast<size_t>(W) * lhb);
  resize0(wk.da, static_cast<size_t>(4) * H * B);
  resize0(wk.dx, static_cast<size_t>(std::max(E, H)) * B);
  resize0(wk.logits, static_cast<size_t>(V) * B);

  const double inv_tokens = 1.0 / (static_cast<double>(W) * B);
  double loss = 0.0;

  auto at = [&](std::vector<double>& a, int t, int l) {
    return a.data() + (static_cast<size_t>(t) * L + l) * hb;
  };

  // ---- forward ----
  for (int t = 0; t < W; ++t) {
    // embedding gather
    for (int b = 0; b < B; ++b) {
      const int tok = in_tokens[static_cast<size_t>(b) * W + t];
      const double* erow = m.embedding.data() + static_cast<size_t>(tok) * E;
      for (int e = 0; e < E; ++e) wk.emb[(static_cast<size_t>(t) * E + e) * B + b] = erow[e];
    }
    const double* x = wk.emb.data() + static_cast<size_t>(t) * E * B;
    int in_dim = E;
    for (int l = 0; l < L; ++l) {
      const LayerParams& p = m.layers[l];
      std::fill(wk.pre.begin(), wk.pre.end(), 0.0);
      for (int r = 0; r < 4 * H; ++r) {
        double* prow = wk.pre.data() + static_cast<size_t>(r) * B;
        for (int b = 0; b < B; ++b) prow[b] = p.bias[r];
      }
      gemm_acc(p.w_ih.data(), x, wk.pre.data(), 4 * H, in_dim, B);
      const double* hp = t == 0 ? h0.data() + static_cast<size_t>(l) * hb
                                : at(wk.hh, t - 1, l);
      gemm_acc(p.w_hh.data(), hp, wk.pre.data(), 4 * H, H, B);

      const double* cp = t == 0 ? c0.data() + static_cast<size_t>(l) * hb
                                : at(wk.cc, t - 1, l);
      double* gi = at(wk.gi, t, l);
      double* gf = at(wk.gf, t, l);
      double* gg = at(wk.gg, t, l);
      double* go = at(wk.go, t, l);
      double* cc = at(wk.cc, t, l);
      double* hh = at(wk.hh, t, l);
      for (int u = 0; u < H; ++u) {
        for (int b = 0; b < B; ++b) {
          const size_t i = static_cast<size_t>(u) * B + b;
          const double vi = sigmoid(wk.pre[(kGateI * H + u) * static_cast<size_t>(B) + b]);
          const double vf = sigmoid(wk.pre[(kGateF * H + u) * static_cast<size_t>(B) + b]);
          const double vg = std::tanh(wk.pre[(kGateG * H + u) * static_cast<size_t>(B) + b]);
          const double vo = sigmoid(wk.pre[(kGateO * H + u) * static_cast<size_t>(B) + b]);
          const double vc = vf * cp[i] + vi * vg;
          gi[i] = vi; gf[i] = vf; gg[i] = vg; go[i] = vo;
          cc[i] = vc;
          hh[i] = vo * std::tanh(vc);
        }
      }
      x = hh;
      in_dim = H;
    }

    // output layer + loss + dz
    const double* htop = at(wk.hh, t, L - 1);
    std::fill(wk.logits.begin(), wk.logits.end(), 0.0);
    for (int v = 0; v < V; ++v) {
      double* zrow = wk.logits.data() + static_cast<size_t>(v) * B;
      for (int b = 0; b < B; ++b) zrow[b] = m.b_out[v];
    }
    gemm_acc(m.w_out.data(), htop, wk.logits.data(), V, H, B);
    double* dzt = wk.dz.data() + static_cast<size_t>(t) * V * B;
    for (int b = 0; b < B; ++b) {
      double mx = -HUGE_VAL;
      for (int v = 0; v < V; ++v)
        mx = std::max(mx, wk.logits[static_cast<size_t>(v) * B + b]);
      double lse = 0.0;
      for (int v = 0; v < V; ++v)
        lse += std::exp(wk.logits[static_cast<size_t>(v) * B + b] - mx);
      lse = mx + std::log(lse);
      const int tgt = targets[static_cast<size_t>(b) * W + t];
      loss += lse - wk.logits[static_cast<size_t>(tgt) * B + b];
      for (int v = 0; v < V; ++v) {
        const double pvb =
            std::exp(wk.logits[static_cast<size_t>(v) * B + b] - lse);
        dzt[static_cast<size_t>(v) * B + b] =
            (pvb - (v == tgt ? 1.0 : 0.0)) * inv_tokens;
      }
    }
  }

  // ---- backward ----
  for (int t = W - 1; t >= 0; --t) {
    // from the output layer into the top hidden layer
    const double* dzt = wk.dz.data() + static_cast<size_t>(t) * V * B;
    gemm_grad_a(dzt, at(wk.hh, t, L - 1), grad.w_out.data(), V, H, B);
    for (int v = 0; v < V; ++v) {
      const double* dzrow = dzt + static_cast<size_t>(v) * B;
      double acc = 0.0;
      for (int b = 0; b < B; ++b) acc += dzrow[b];
      grad.b_out[v] += acc;
    }
    gemm_grad_x(m.w_out.data(), dzt, at(wk.dh, t, L - 1), V, H, B);

    for (int l = L - 1; l >= 0; --l) {
      const LayerParams& p = m.layers[l];
      const double* gi = at(wk.gi, t, l);
      const double* gf = at(wk.gf, t, l);
      const double* gg = at(wk.gg, t, l);
      const double* go = at(wk.go, t, l);
      const double* cc = at(wk.cc, t, l);
      const double* cp = t == 0 ? c0.data() + static_cast<size_t>(l) * hb
                                : at(wk.cc, t - 1, l);
      double* dh = at(wk.dh, t, l);
      double* dcv = at(wk.dc, t, l);

      std::fill(wk.da.begin(), wk.da.end(), 0.0);
      for (int u = 0; u < H; ++u) {
        for (int b = 0; b < B; ++b) {
          const size_t i = static_cast<size_t>(u) * B + b;
          const double tc = std::tanh(cc[i]);
          const double dho = dh[i];
          const double dov = dho * tc;
          double dcu = dcv[i] + dho * go[i] * (1.0 - tc * tc);
          const double dfv = dcu * cp[i];
          const double div = dcu * gg[i];
          const double dgv = dcu * gi[i];
          wk.da[(kGateI * H + u) * static_cast<size_t>(B) + b] =
              div * gi[i] * (1.0 - gi[i]);
          wk.da[(kGateF * H + u) * static_cast<size_t>(B) + b] =
              dfv * gf[i] * (1.0 - gf[i]);
          wk.da[(kGateG * H + u) * static_cast<size_t>(B) + b] =
              dgv * (1.0 - gg[i] * gg[i]);
          wk.da[(kGateO * H + u) * static_cast<size_t>(B) + b] =
              dov * go[i] * (1.0 - go[i]);
          if (t > 0) at(wk.dc, t - 1, l)[i] += dcu * gf[i];
        }
      }

      const int in_dim = p.in_dim;
      const double* x = l == 0 ? wk.emb.data() + static_cast<size_t>(t) * E * B
                               : at(wk.hh, t, l - 1);
      gemm_grad_a(wk.da.data(), x, grad.layers[l].w_ih.data(), 4 * H, in_dim, B);
      const double* hp = t == 0 ? h0.data() + static_cast<size_t>(l) * hb
                                : at(wk.hh, t - 1, l);
      gemm_grad_a(wk.da.data(), hp, grad.layers[l].w_hh.data(), 4 * H, H, B);
      for (int r = 0; r < 4 * H; ++r) {
        const double* darow = wk.da.data() + static_cast<size_t>(r) * B;
        double acc = 0.0;
        for (int b = 0; b < B; ++b) acc += darow[b];
        grad.layers[l].bias[r] += acc;
      }
      if (l > 0) {
        gemm_grad_x(p.w_ih.data(), wk.da.data(), at(wk.dh, t, l - 1), 4 * H, H, B);
      } else {
        std::fill(wk.dx.begin(), wk.dx.end(), 0.0);
        gemm_grad_x(p.w_ih.data(), wk.da.data(), wk.dx.data(), 4 * H, E, B);
        for (int b = 0; b < B; ++b) {
          const int tok = in_tokens[static_cast<size_t>(b) * W + t];
          double* erow = grad.embedding.data() + static_cast<size_t>(tok) * E;
          for (int e = 0; e < E; ++e)
            erow[e] += wk.dx[static_cast<size_t>(e) * B + b];
        }
      }
      if (t > 0) gemm_grad_x(p.w_hh.data(), wk.da.data(), at(wk.dh, t - 1, l), 4 * H, H, B);
    }
  }

  // carry state into the next window (detached)
  for (int l = 0; l < L; ++l) {
    std::memcpy(h0.data() + static_cast<size_t>(l) * hb, at(wk.hh, W - 1, l),
                hb * sizeof(double));
    std::memcpy(c0.data() + static_cast<size_t>(l) * hb, at(wk.cc, W - 1, l),
                hb * sizeof(double));
  }
  return loss * inv_tokens;
}

double grad_norm(const std::vector<ParamView>& views) {
  double sq = 0.0;
  for (const auto& v : views)
    for (size_t i = 0; i < v.size; ++i) sq += v.grad[i] * v.grad[i];
  return std::sqrt(sq);
}

}  // namespace

double loss_and_grad(const Model& m, std::span<const int> input,
                     std::span<const int> target, Gradients& grad) {
  if (input.size() != target.size() || input.empty())
    throw std::invalid_argument("loss_and_grad: bad sequence lengths");
  grad = Gradients::zeros_like(m);
  const int W = static_cast<int>(input.size());
  std::vector<double> h0(static_cast<size_t>(m.dims.layers) * m.dims.hidden, 0.0);
  std::vector<double> c0 = h0;
  WindowWork wk;
  return window_forward_backward(m, input.data(), target.data(), W, 1, h0, c0,
                                 grad, wk);
}

double sequence_loss(const Model& m, std::span<const int> input,
                     std::span<const int> target) {
  if (input.size() != target.size() || input.empty())
    throw std::invalid_argument("sequence_loss: bad sequence lengths");
  LstmState state;
  reset_state(m, state);
  StepScratch scratch;
  ResolvedMask rm;  // empty
  rm.bits.assign(static_cast<size_t>(m.dims.layers) * m.dims.hidden, 0);
  std::vector<double> lp;
  double nll = 0.0;
  for (size_t t = 0; t < input.size(); ++t) {
    lstm_step(m, input[t], state, rm, scratch);
    output_logprobs(m, state, lp);
    nll -= lp.at(target[t]);
  }
  return nll / static_cast<double>(input.size());
}

TrainResult train(const Model& init, const std::vector<std::vector<int>>& sentences,
                  const TrainConfig& cfg) {
  TrainResult result;
  result.model = init;
  if (cfg.epochs <= 0) return result;
  if (sentences.empty()) throw std::invalid_argument("train: empty corpus");

  // Validation split: the tail fraction of sentences.
  size_t n_val = static_cast<size_t>(cfg.val_fraction * sentences.size());
  if (cfg.val_fraction > 0.0 && n_val == 0 && sentences.size() > 1) n_val = 1;
  std::vector<std::vector<int>> train_sents(sentences.begin(),
                                            sentences.end() - n_val);
  std::vector<std::vector<int>> val_sents(sentences.end() - n_val,
                                          sentences.end());
  if (train_sents.empty()) train_sents = sentences;
  if (val_sents.empty()) val_sents = train_sents;

  const int eos = init.vocab.eos();
  std::vector<int> stream;
  stream.push_back(eos);
  for (const auto& s : train_sents) stream.insert(stream.end(), s.begin(), s.end());
  const int B = std::max(1, std::min<int>(cfg.batch, static_cast<int>((stream.size() - 1) / std::max(1, cfg.bptt))));
  const size_t usable = stream.size() - 1;
  const size_t chunk = usable / B;
  if (chunk < 2) throw std::invalid_argument("train: corpus too small for batch size");

  Model model = init;
  Gradients grad = Gradients::zeros_like(model);
  auto views = param_views(model, grad);
  WindowWork wk;

  std::vector<double> h0(static_cast<size_t>(model.dims.layers) * model.dims.hidden * B);
  std::vector<double> c0 = h0;

  double lr = cfg.lr;
  double best_val = HUGE_VAL;
  long global_step = 0;

  std::vector<int> in_tok, tgt_tok;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::fill(h0.begin(), h0.end(), 0.0);
    std::fill(c0.begin(), c0.end(), 0.0);
    double loss_sum = 0.0;
    long token_count = 0;
    for (size_t pos = 0; pos < chunk; pos += cfg.bptt) {
      const int W = static_cast<int>(std::min<size_t>(cfg.bptt, chunk - pos));
      if (W <= 0) break;
      in_tok.resize(static_cast<size_t>(B) * W);
      tgt_tok.resize(static_cast<size_t>(B) * W);
      for (int b = 0; b < B; ++b) {
        const size_t base = static_cast<size_t>(b) * chunk + pos;
        for (int t = 0; t < W; ++t) {
          in_tok[static_cast<size_t>(b) * W + t] = stream[base + t];
          tgt_tok[static_cast<size_t>(b) * W + t] = stream[base + t + 1];
        }
      }
      for (auto& v : grad.embedding) v = 0.0;
      for (auto& gl : grad.layers) {
        std::fill(gl.w_ih.begin(), gl.w_ih.end(), 0.0);
        std::fill(gl.w_hh.begin(), gl.w_hh.end(), 0.0);
        std::fill(gl.bias.begin(), gl.bias.end(), 0.0);
      }
      std::fill(grad.w_out.begin(), grad.w_out.end(), 0.0);
      std::fill(grad.b_out.begin(), grad.b_out.end(), 0.0);

      const double loss = window_forward_backward(
          model, in_tok.data(), tgt_tok.data(), W, B, h0, c0, grad, wk);
      ++global_step;
      if (!std::isfinite(loss))
        throw std::runtime_error("NaN loss at training step " +
                                 std::to_string(global_step) + " (epoch " +
                                 std::to_string(epoch) + ")");
      loss_sum += loss * W * B;
      token_count += static_cast<long>(W) * B;

      double norm = grad_norm(views);
      double scale = lr;
      if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm)
        scale = lr * cfg.clip_norm / norm;
      for (auto& v : views)
        for (size_t i = 0; i < v.size; ++i) v.param[i] -= scale * v.grad[i];
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_ppl = std::exp(loss_sum / std::max<long>(1, token_count));
    log.val_ppl = perplexity(model, val_sents, AblationMask{});
    log.lr = lr;
    result.log.push_back(log);

    if (log.val_ppl < best_val - 1e-6) {
      best_val = log.val_ppl;
      result.model = model;
    } else {
      lr *= cfg.lr_decay;  // plateau
    }
  }
  return result;
}

double perplexity(const Model& m, const std::vector<std::vector<int>>& sentences,
                  const AblationMask& mask) {
  if (sentences.empty()) throw std::invalid_argument("perplexity: empty corpus");
  ResolvedMask rm = resolve_mask(mask, m.dims);
  const int eos = m.vocab.eos();

  std::vector<double> nll(sentences.size(), 0.0);
  std::vector<long> count(sentences.size(), 0);
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(sentences.size()); ++i) {
    const auto& s = sentences[i];
    if (s.empty()) continue;
    LstmState state;
    reset_state(m, state);
    StepScratch scratch;
    std::vector<double> lp;
    int prev = eos;
    double acc = 0.0;
    for (int tok : s) {
      lstm_step(m, prev, state, rm, scratch);
      output_logprobs(m, state, lp);
      acc -= lp.at(tok);
      prev = tok;
    }
    nll[i] = acc;
    count[i] = static_cast<long>(s.size());
  }
  double total = 0.0;
  long tokens = 0;
  for (size_t i = 0; i < nll.size(); ++i) {
    total += nll[i];
    tokens += count[i];
  }
  if (tokens == 0) throw std::invalid_argument("perplexity: empty corpus");
  return std::exp(total / static_cast<double>(tokens));
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

void save_checkpoint(const Model& m, const std::filesystem::path& p) {
  json j;
  j["format"] = "lstmlens-checkpoint";
  j["version"] = kCheckpointVersion;
  j["gate_order"] = "ifgo";
  j["dtype"] = "f64le";
  j["dims"] = {{"vocab", m.dims.vocab},
               {"embed", m.dims.embed},
               {"hidden", m.dims.hidden},
               {"layers", m.dims.layers}};
  j["vocab"] = m.vocab.tokens;
  j["embedding"] = encode_f64(m.embedding);
  json layers = json::array();
  for (const auto& l : m.layers) {
    layers.push_back({{"w_ih", encode_f64(l.w_ih)},
                      {"w_hh", encode_f64(l.w_hh)},
                      {"bias", encode_f64(l.bias)}});
  }
  j["layers"] = layers;
  j["w_out"] = encode_f64(m.w_out);
  j["b_out"] = encode_f64(m.b_out);
  write_file(p, j.dump(1));
}

Model load_checkpoint(const std::filesystem::path& p) {
  json j = json::parse(read_file(p));
  if (j.value("format", "") != "lstmlens-checkpoint")
    throw std::runtime_error("not a checkpoint file: " + p.string());
  if (j.at("version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(j.at("version").get<int>()));
  if (j.value("gate_order", "") != "ifgo")
    throw std::runtime_error("unsupported gate order");
  Model m;
  m.dims.vocab = j.at("dims").at("vocab").get<int>();
  m.dims.embed = j.at("dims").at("embed").get<int>();
  m.dims.hidden = j.at("dims").at("hidden").get<int>();
  m.dims.layers = j.at("dims").at("layers").get<int>();
  m.vocab = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
  m.embedding = decode_f64(j.at("embedding").get<std::string>());
  for (const auto& lj : j.at("layers")) {
    LayerParams l;
    l.hidden = m.dims.hidden;
    l.in_dim = m.layers.empty() ? m.dims.embed : m.dims.hidden;
    l.w_ih = decode_f64(lj.at("w_ih").get<std::string>());
    l.w_hh = decode_f64(lj.at("w_hh").get<std::string>());
    l.bias = decode_f64(lj.at("bias").get<std::string>());
    m.layers.push_back(std::move(l));
  }
  m.w_out = decode_f64(j.at("w_out").get<std::string>());
  m.b_out = decode_f64(j.at("b_out").get<std::string>());
  m.validate();  // rejects shape mismatches and non-finite payloads
  return m;
}

std::vector<std::vector<int>> tokenize_lines(const std::vector<std::string>& lines,
                                             const Vocab& vocab) {
  std::vector<std::vector<int>> out;
  out.reserve(lines.size());
  for (const auto& line : lines) {
    if (line.empty()) continue;
    std::vector<int> ids;
    for (const auto& tok : split(line, ' '))
      if (!tok.empty()) ids.push_back(vocab.id(tok));
    out.push_back(std::move(ids));
  }
  return out;
}

}  // namespace lens
