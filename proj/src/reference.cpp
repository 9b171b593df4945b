#include "lens/reference.hpp"

#include <cmath>
#include <stdexcept>

namespace lens::ref {

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

StepValues cell_step(const LayerParams& p, const std::vector<double>& x,
                     const std::vector<double>& h_prev,
                     const std::vector<double>& c_prev) {
  const int H = p.hidden;
  StepValues out;
  out.i = {std::vector<double>(H)};
  out.f = {std::vector<double>(H)};
  out.g = {std::vector<double>(H)};
  out.o = {std::vector<double>(H)};
  out.c = {std::vector<double>(H)};
  out.h = {std::vector<double>(H)};
  for (int u = 0; u < H; ++u) {
    double ai = p.bias[0 * H + u];
    double af = p.bias[1 * H + u];
    double ag = p.bias[2 * H + u];
    double ao = p.bias[3 * H + u];
    for (int k = 0; k < p.in_dim; ++k) {
      ai += p.w_ih[static_cast<size_t>(0 * H + u) * p.in_dim + k] * x[k];
      af += p.w_ih[static_cast<size_t>(1 * H + u) * p.in_dim + k] * x[k];
      ag += p.w_ih[static_cast<size_t>(2 * H + u) * p.in_dim + k] * x[k];
      ao += p.w_ih[static_cast<size_t>(3 * H + u) * p.in_dim + k] * x[k];
    }
    for (int k = 0; k < H; ++k) {
      ai += p.w_hh[static_cast<size_t>(0 * H + u) * H + k] * h_prev[k];
      af += p.w_hh[static_cast<size_t>(1 * H + u) * H + k] * h_prev[k];
      ag += p.w_hh[static_cast<size_t>(2 * H + u) * H + k] * h_prev[k];
      ao += p.w_hh[static_cast<size_t>(3 * H + u) * H + k] * h_prev[k];
    }
    out.i[0][u] = sig(ai);
    out.f[0][u] = sig(af);
    out.g[0][u] = std::tanh(ag);
    out.o[0][u] = sig(ao);
    out.c[0][u] = out.f[0][u] * c_prev[u] + out.i[0][u] * out.g[0][u];
    out.h[0][u] = out.o[0][u] * std::tanh(out.c[0][u]);
  }
  return out;
}

Result forward(const Model& m, std::span<const int> tokens,
               const std::vector<UnitRef>& masked, bool clamp_cell) {
  const int H = m.dims.hidden;
  const int E = m.dims.embed;
  const int V = m.dims.vocab;
  const int L = m.dims.layers;

  std::vector<std::vector<bool>> is_masked(L, std::vector<bool>(H, false));
  for (const UnitRef& u : masked) {
    if (u.layer < 0 || u.layer >= L || u.unit < 0 || u.unit >= H)
      throw std::out_of_range("mask entry outside dims");
    is_masked[u.layer][u.unit] = true;
  }

  std::vector<std::vector<double>> h(L, std::vector<double>(H, 0.0));
  std::vector<std::vector<double>> c(L, std::vector<double>(H, 0.0));

  Result res;
  for (int token : tokens) {
    if (token < 0 || token >= V) throw std::out_of_range("token outside vocabulary");
    std::vector<double> x(E);
    for (int e = 0; e < E; ++e)
      x[e] = m.embedding[static_cast<size_t>(token) * E + e];

    StepValues sv;
    for (int l = 0; l < L; ++l) {
      StepValues one = cell_step(m.layers[l], x, h[l], c[l]);
      for (int u = 0; u < H; ++u) {
        if (is_masked[l][u]) {
          one.h[0][u] = 0.0;
          if (clamp_cell) one.c[0][u] = 0.0;
        }
      }
      h[l] = one.h[0];
      c[l] = one.c[0];
      sv.i.push_back(one.i[0]);
      sv.f.push_back(one.f[0]);
      sv.g.push_back(one.g[0]);
      sv.o.push_back(one.o[0]);
      sv.c.push_back(one.c[0]);
      sv.h.push_back(one.h[0]);
      x = h[l];
    }
    res.steps.push_back(std::move(sv));

    std::vector<double> z(V);
    double mx = -HUGE_VAL;
    for (int v = 0; v < V; ++v) {
      double acc = m.b_out[v];
      for (int k = 0; k < H; ++k)
        acc += m.w_out[static_cast<size_t>(v) * H + k] * h[L - 1][k];
      z[v] = acc;
      if (acc > mx) mx = acc;
    }
    double lse = 0.0;
    for (int v = 0; v < V; ++v) lse += std::exp(z[v] - mx);
    lse = mx + std::log(lse);
    for (int v = 0; v < V; ++v) z[v] -= lse;
    res.logprobs.push_back(std::move(z));
  }
  return res;
}

}  // namespace lens::ref
