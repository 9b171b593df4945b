#include <cmath>

#include "doctest.h"
#include "lens/connectivity.hpp"
#include "lens/rng.hpp"
#include "lens/stats.hpp"
#include "testutil.hpp"

using namespace lens;

namespace {

// Minimal trace with chosen per-unit h values, constant over `steps` steps.
ActivationTrace constant_trace(int layers, int hidden, int steps,
                               const std::vector<double>& h_by_unit) {
  ActivationTrace tr;
  tr.layers = layers;
  tr.hidden = hidden;
  tr.tokens.assign(steps, 0);
  const size_t n = static_cast<size_t>(steps) * layers * hidden;
  tr.h.assign(n, 0.0);
  tr.c.assign(n, 0.0);
  tr.i.assign(n, 0.0);
  tr.f.assign(n, 0.0);
  tr.o.assign(n, 0.0);
  tr.g.assign(n, 0.0);
  for (int t = 0; t < steps; ++t)
    for (int l = 0; l < layers; ++l)
      for (int u = 0; u < hidden; ++u)
        tr.h[tr.idx(t, l, u)] = h_by_unit[static_cast<size_t>(l) * hidden + u];
  return tr;
}

}  // namespace

TEST_CASE("threshold balanced accuracy") {
  SUBCASE("perfectly split groups reach 1") {
    std::vector<double> a = {-1.0, -1.1, -0.9};
    std::vector<double> b = {1.0, 1.1, 0.9};
    CHECK(threshold_balanced_accuracy(a, b) == 1.0);
    CHECK(threshold_balanced_accuracy(b, a) == 1.0);
  }
  SUBCASE("identical distributions stay near chance") {
    Rng rng(31);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> a(15), b(15);
      for (double& v : a) v = rng.normal();
      for (double& v : b) v = rng.normal();
      worst = std::max(worst, threshold_balanced_accuracy(a, b));
    }
    // same-distribution groups of 15+15: stays below 0.65 on average;
    // allow the documented bound per draw
    CHECK(worst <= 0.9);
    std::vector<double> a(15), b(15);
    double acc = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      for (double& v : a) v = rng.normal();
      for (double& v : b) v = rng.normal();
      acc += threshold_balanced_accuracy(a, b);
    }
    CHECK(acc / 200.0 <= 0.72);
  }
  SUBCASE("invariant under global sign flip plus group swap") {
    Rng rng(32);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> a(10), b(12);
      for (double& v : a) v = rng.real(-2, 2);
      for (double& v : b) v = rng.real(-2, 2);
      std::vector<double> na, nb;
      for (double v : b) na.push_back(-v);
      for (double v : a) nb.push_back(-v);
      CHECK(threshold_balanced_accuracy(a, b) ==
            doctest::Approx(threshold_balanced_accuracy(na, nb)).epsilon(1e-12));
    }
  }
  SUBCASE("empty group is an error") {
    std::vector<double> a = {1.0};
    std::vector<double> none;
    CHECK_THROWS_AS(threshold_balanced_accuracy(a, none), std::invalid_argument);
  }
}

TEST_CASE("efferent profile extraction and segregation") {
  const Lexicon lex = Lexicon::eval_default();
  // model vocabulary must contain every verb form
  std::vector<std::string> toks = {"<eos>", "<unk>"};
  for (const auto& v : lex.verbs) {
    toks.push_back(v.sing);
    toks.push_back(v.plur);
  }
  const int V = static_cast<int>(toks.size()), H = 3;
  Model m = init_model({V, 2, H, 2}, Vocab::from_tokens(toks), 1);
  testutil::zero_params(m);
  // unit (2,1): singular forms all -1, plural all +1
  for (const auto& v : lex.verbs) {
    m.w_out[static_cast<size_t>(m.vocab.id(v.sing)) * H + 0] = -1.0;
    m.w_out[static_cast<size_t>(m.vocab.id(v.plur)) * H + 0] = 1.0;
  }
  EfferentProfile prof = efferent_profile(m, UnitRef{1, 0}, lex);
  CHECK(prof.segregation == 1.0);
  CHECK(prof.singular_weights.size() == lex.verbs.size());
  CHECK(prof.plural_weights.size() == lex.verbs.size());

  SUBCASE("non-top-layer units have no efferent column") {
    CHECK_THROWS_AS(efferent_profile(m, UnitRef{0, 0}, lex),
                    std::invalid_argument);
  }
  SUBCASE("missing verb form in the vocabulary is an error") {
    Lexicon more = lex;
    more.verbs.push_back({"zzaps", "zzap"});
    CHECK_THROWS_AS(efferent_profile(m, UnitRef{1, 0}, more),
                    std::invalid_argument);
  }
}

TEST_CASE("effective afferents: scaling, z-scores, outliers") {
  const int H = 100;
  Model m = init_model({4, 2, H, 1}, Vocab::from_tokens({"<eos>", "<unk>", "a", "b"}), 2);
  testutil::zero_params(m);
  Rng rng(33);
  // input-gate row of target unit 0: random weights, one planted far out
  LayerParams& p = m.layers[0];
  for (int s = 0; s < H; ++s)
    p.w_hh[(static_cast<size_t>(kGateI) * H + 0) * H + s] = rng.normal();
  p.w_hh[(static_cast<size_t>(kGateI) * H + 0) * H + 42] = 40.0;  // planted

  std::vector<double> h_by_unit(H, 0.5);
  h_by_unit[7] = 0.0;  // dead source
  auto traces = std::vector<ActivationTrace>{constant_trace(1, H, 5, h_by_unit)};

  EffectiveAfferent rep =
      effective_afferents(m, UnitRef{0, 0}, kGateI, traces, false, 3.0);
  REQUIRE(rep.sources.size() == H);

  SUBCASE("dead sources contribute zero effective weight") {
    CHECK(rep.sources[7].scale == 0.0);
    CHECK(rep.sources[7].effective == 0.0);
  }
  SUBCASE("z-scores are an exact affine normalization") {
    std::vector<double> z;
    for (const auto& s : rep.sources) z.push_back(s.z);
    CHECK(std::abs(mean(z)) < 1e-10);
    CHECK(std::abs(sd_pop(z) - 1.0) < 1e-10);
  }
  SUBCASE("the planted source is the unique outlier") {
    int outliers = 0;
    for (const auto& s : rep.sources)
      if (s.outlier) {
        ++outliers;
        CHECK(s.source.unit == 42);
      }
    CHECK(outliers == 1);
  }
  SUBCASE("doubling a source's activity doubles its effective weight") {
    std::vector<double> doubled = h_by_unit;
    doubled[3] *= 2.0;
    auto traces2 =
        std::vector<ActivationTrace>{constant_trace(1, H, 5, doubled)};
    EffectiveAfferent rep2 =
        effective_afferents(m, UnitRef{0, 0}, kGateI, traces2, false, 3.0);
    CHECK(rep2.sources[3].effective == 2.0 * rep.sources[3].effective);
  }
  SUBCASE("empty trace set is an error (scale undefined)") {
    CHECK_THROWS_AS(
        effective_afferents(m, UnitRef{0, 0}, kGateI, {}, false, 3.0),
        std::invalid_argument);
  }
}

TEST_CASE("planted 10-SD afferent weights are flagged uniquely across populations") {
  const int H = 80;
  for (int trial = 0; trial < 25; ++trial) {
    Model m = init_model({4, 2, H, 1},
                         Vocab::from_tokens({"<eos>", "<unk>", "a", "b"}), trial);
    testutil::zero_params(m);
    Rng rng(100 + trial);
    LayerParams& p = m.layers[0];
    std::vector<double> weights(H);
    for (int s = 0; s < H; ++s) weights[s] = rng.normal();
    const double wm = mean(weights);
    const double wsd = sd_pop(weights);
    const int planted = rng.index(H);
    weights[planted] = wm + 10.0 * wsd;
    for (int s = 0; s < H; ++s)
      p.w_hh[(static_cast<size_t>(kGateF) * H + 1) * H + s] = weights[s];

    auto traces = std::vector<ActivationTrace>{
        constant_trace(1, H, 3, std::vector<double>(H, 1.0))};
    EffectiveAfferent rep =
        effective_afferents(m, UnitRef{0, 1}, kGateF, traces, false, 3.0);
    int outliers = 0;
    int which = -1;
    for (const auto& s : rep.sources)
      if (s.outlier) {
        ++outliers;
        which = s.source.unit;
      }
    CHECK(outliers == 1);
    CHECK(which == planted);
  }
}

TEST_CASE("mutual inhibition check") {
  const int H = 4;
  Model m = init_model({4, 2, H, 2}, Vocab::from_tokens({"<eos>", "<unk>", "a", "b"}), 3);
  testutil::zero_params(m);
  LayerParams& p = m.layers[1];
  auto set_w = [&](GateBlock g, int to, int from, double v) {
    p.w_hh[(static_cast<size_t>(g) * H + to) * H + from] = v;
  };
  const UnitRef a{1, 0}, b{1, 1};

  // traces: both units' C negative across the span
  ActivationTrace tr;
  tr.layers = 2;
  tr.hidden = H;
  tr.tokens.assign(6, 0);
  const size_t n = static_cast<size_t>(6) * 2 * H;
  tr.h.assign(n, 0.0);
  tr.c.assign(n, 0.0);
  tr.i.assign(n, 0.0);
  tr.f.assign(n, 0.0);
  tr.o.assign(n, 0.0);
  tr.g.assign(n, 0.0);
  for (int t = 0; t < 6; ++t) {
    tr.c[tr.idx(t, 1, 0)] = -0.8;
    tr.c[tr.idx(t, 1, 1)] = -0.6;
  }
  std::vector<ActivationTrace> traces = {tr};
  std::vector<std::pair<int, int>> spans = {{1, 5}};

  SUBCASE("positive reciprocal gate weights + negative activity") {
    set_w(kGateI, 0, 1, 0.5);
    set_w(kGateI, 1, 0, 0.4);
    set_w(kGateF, 0, 1, 0.6);
    set_w(kGateF, 1, 0, 0.7);
    auto rep = mutual_inhibition_check(m, a, b, traces, spans);
    CHECK(rep.reciprocal_weights_positive);
    CHECK(rep.activity_negative);
    CHECK(rep.interaction == PairInteraction::MutuallyInhibiting);
    CHECK(rep.w_i_ab == 0.5);
    CHECK(rep.w_f_ba == 0.7);
  }

  SUBCASE("zero reciprocal weights mean independence") {
    auto rep = mutual_inhibition_check(m, a, b, traces, spans);
    CHECK(rep.interaction == PairInteraction::Independent);
  }

  SUBCASE("positive weights with positive activity are not inhibition") {
    set_w(kGateI, 0, 1, 0.5);
    set_w(kGateI, 1, 0, 0.4);
    set_w(kGateF, 0, 1, 0.6);
    set_w(kGateF, 1, 0, 0.7);
    ActivationTrace pos = tr;
    for (int t = 0; t < 6; ++t) {
      pos.c[pos.idx(t, 1, 0)] = 0.8;
      pos.c[pos.idx(t, 1, 1)] = 0.6;
    }
    auto rep = mutual_inhibition_check(m, a, b, {pos}, spans);
    CHECK(rep.interaction == PairInteraction::Other);
  }

  SUBCASE("units in different layers are rejected") {
    CHECK_THROWS_AS(
        mutual_inhibition_check(m, UnitRef{0, 0}, UnitRef{1, 1}, traces, spans),
        std::invalid_argument);
  }
}
