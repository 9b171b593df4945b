#pragma once

#include <string>
#include <vector>

#include "lens/grammar.hpp"
#include "lens/lstm.hpp"
#include "lens/rng.hpp"

namespace testutil {

using namespace lens;

// Random small model over a synthetic vocabulary.
inline Model random_model(int vocab, int embed, int hidden, int layers,
                          uint64_t seed) {
  std::vector<std::string> toks = {"<eos>", "<unk>"};
  for (int i = 2; i < vocab; ++i) toks.push_back("w" + std::to_string(i));
  return init_model({vocab, embed, hidden, layers}, Vocab::from_tokens(toks), seed);
}

inline std::vector<int> random_tokens(int n, int vocab, Rng& rng) {
  std::vector<int> out(n);
  for (int& t : out) t = rng.index(vocab);
  return out;
}

// Zero out all parameters of a model.
inline void zero_params(Model& m) {
  std::fill(m.embedding.begin(), m.embedding.end(), 0.0);
  for (auto& l : m.layers) {
    std::fill(l.w_ih.begin(), l.w_ih.end(), 0.0);
    std::fill(l.w_hh.begin(), l.w_hh.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  std::fill(m.w_out.begin(), m.w_out.end(), 0.0);
  std::fill(m.b_out.begin(), m.b_out.end(), 0.0);
}

// Hand-built single-layer circuit: unit 0 stores the number of the noun at
// the sentence start and keeps it across the filler; unit 1 copies the
// filler's sign with tiny output weights. Output rows "vs"/"vp" read
// +-(W*unit0 + eps*unit1). Forms the basis of the scoring and ablation
// contract tests.
//
// vocab: <eos> <unk> ns np f1 f2 vs vp
struct NumberCircuit {
  Model model;
  int id_ns, id_np, id_f1, id_f2;
  std::string vs = "vs", vp = "vp";
};

inline NumberCircuit build_number_circuit(int hidden = 2, double eps = 0.01) {
  NumberCircuit nc;
  Vocab vocab = Vocab::from_tokens(
      {"<eos>", "<unk>", "ns", "np", "f1", "f2", "vs", "vp"});
  const int V = 8, E = 3, H = hidden, L = 1;
  Model m = random_model(V, E, H, L, 0);
  m.vocab = vocab;
  zero_params(m);
  // embedding dims: d0 = noun number sign, d1 = is-noun, d2 = filler sign
  auto emb = [&](int tok, double d0, double d1, double d2) {
    m.embedding[tok * E + 0] = d0;
    m.embedding[tok * E + 1] = d1;
    m.embedding[tok * E + 2] = d2;
  };
  nc.id_ns = vocab.id("ns");
  nc.id_np = vocab.id("np");
  nc.id_f1 = vocab.id("f1");
  nc.id_f2 = vocab.id("f2");
  emb(nc.id_ns, 1, 1, 0);
  emb(nc.id_np, -1, 1, 0);
  emb(nc.id_f1, 0, 0, 1);
  emb(nc.id_f2, 0, 0, -1);

  LayerParams& p = m.layers[0];
  auto w_ih = [&](GateBlock g, int unit, int dim, double v) {
    p.w_ih[(static_cast<size_t>(g) * H + unit) * E + dim] = v;
  };
  auto bias = [&](GateBlock g, int unit, double v) {
    p.bias[static_cast<size_t>(g) * H + unit] = v;
  };
  // unit 0: write the noun sign, hold it elsewhere
  w_ih(kGateI, 0, 1, 40.0);
  bias(kGateI, 0, -20.0);
  w_ih(kGateF, 0, 1, -40.0);
  bias(kGateF, 0, 20.0);
  w_ih(kGateG, 0, 0, 5.0);
  bias(kGateO, 0, 40.0);
  // unit 1: always overwrite with the filler sign
  bias(kGateI, 1, 40.0);
  bias(kGateF, 1, -40.0);
  w_ih(kGateG, 1, 2, 5.0);
  bias(kGateO, 1, 40.0);

  const int id_vs = vocab.id("vs"), id_vp = vocab.id("vp");
  m.w_out[static_cast<size_t>(id_vs) * H + 0] = 10.0;
  m.w_out[static_cast<size_t>(id_vs) * H + 1] = eps;
  m.w_out[static_cast<size_t>(id_vp) * H + 0] = -10.0;
  m.w_out[static_cast<size_t>(id_vp) * H + 1] = -eps;

  nc.model = std::move(m);
  return nc;
}

// Stimuli over the circuit's vocabulary: [noun, filler, verb], verb_pos = 2.
inline StimulusSet circuit_stimuli(const NumberCircuit& nc, int n_per_condition) {
  StimulusSet set;
  set.task = "circuit";
  set.condition_labels = {"S", "P"};
  for (int c = 0; c < 2; ++c) {
    const bool sing = c == 0;
    for (int i = 0; i < n_per_condition; ++i) {
      Stimulus st;
      st.condition.subject = sing ? Number::Singular : Number::Plural;
      st.tokens = {sing ? "ns" : "np", i % 2 == 0 ? "f1" : "f2",
                   sing ? "vs" : "vp"};
      st.subject_pos = 0;
      st.verb_pos = 2;
      st.correct_verb = sing ? "vs" : "vp";
      st.wrong_verb = sing ? "vp" : "vs";
      set.stimuli.push_back(std::move(st));
    }
  }
  return set;
}

}  // namespace testutil
