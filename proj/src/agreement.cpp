#include "lens/agreement.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "lens/rng.hpp"
#include "lens/util.hpp"

namespace lens {

using nlohmann::json;

namespace {

struct PreparedStimulus {
  std::vector<int> prefix;
  int correct_id = 0;
  int wrong_id = 0;
  int condition = 0;  // index into the set's condition label list
  Number subject = Number::Singular;
};

struct PreparedSet {
  std::string task;
  std::vector<std::string> labels;
  std::vector<PreparedStimulus> stimuli;
};

int verb_id(const Vocab& vocab, const std::string& tok) {
  auto id = vocab.find(tok);
  if (!id)
    throw std::invalid_argument("verb form not in vocabulary: '" + tok + "'");
  return *id;
}

PreparedSet prepare(const Model& m, const StimulusSet& set) {
  PreparedSet ps;
  ps.task = set.task;
  ps.labels = set.condition_labels;
  std::map<std::string, int> label_idx;
  for (size_t i = 0; i < ps.labels.size(); ++i) label_idx[ps.labels[i]] = static_cast<int>(i);
  ps.stimuli.reserve(set.stimuli.size());
  for (const Stimulus& st : set.stimuli) {
    PreparedStimulus p;
    if (st.verb_pos <= st.subject_pos || st.verb_pos > static_cast<int>(st.tokens.size()))
      throw std::invalid_argument("stimulus has inconsistent positions");
    // The model is trained on an <eos>-delimited stream, so scoring starts
    // from the post-<eos> state.
    p.prefix.reserve(st.verb_pos + 1);
    p.prefix.push_back(m.vocab.eos());
    for (int t = 0; t < st.verb_pos; ++t) p.prefix.push_back(m.vocab.id(st.tokens[t]));
    p.correct_id = verb_id(m.vocab, st.correct_verb);
    p.wrong_id = verb_id(m.vocab, st.wrong_verb);
    auto it = label_idx.find(st.condition.label());
    if (it == label_idx.end()) {
      label_idx[st.condition.label()] = static_cast<int>(ps.labels.size());
      ps.labels.push_back(st.condition.label());
      it = label_idx.find(st.condition.label());
    }
    p.condition = it->second;
    p.subject = st.condition.subject;
    ps.stimuli.push_back(std::move(p));
  }
  return ps;
}

// Run the prefix and compare the two verb logits. The log-softmax shift is
// shared by both forms, so comparing raw logits is exact.
bool score_prepared(const Model& m, const PreparedStimulus& p,
                    const ResolvedMask& mask) {
  LstmState state;
  reset_state(m, state);
  StepScratch scratch;
  for (int tok : p.prefix) lstm_step(m, tok, state, mask, scratch);
  const double zc = output_logit(m, state, p.correct_id);
  const double zw = output_logit(m, state, p.wrong_id);
  return zc > zw;
}

// Hidden streams of all layers below the top one, from an unmasked pass.
// Ablating a unit in layer l leaves layers < l untouched, so the sweep can
// restart from the cached stream.
struct CachedStreams {
  // [stimulus][t][layer<L-1][H]
  std::vector<std::vector<double>> below;
  std::vector<uint8_t> baseline_correct;
};

CachedStreams cache_streams(const Model& m, const PreparedSet& ps) {
  const int H = m.dims.hidden;
  const int L = m.dims.layers;
  CachedStreams cs;
  cs.below.resize(ps.stimuli.size());
  cs.baseline_correct.assign(ps.stimuli.size(), 0);
  ResolvedMask empty;
  empty.bits.assign(static_cast<size_t>(L) * H, 0);
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(ps.stimuli.size()); ++i) {
    const PreparedStimulus& p = ps.stimuli[i];
    LstmState state;
    reset_state(m, state);
    StepScratch scratch;
    std::vector<double>& buf = cs.below[i];
    buf.resize(p.prefix.size() * static_cast<size_t>(std::max(0, L - 1)) * H);
    for (size_t t = 0; t < p.prefix.size(); ++t) {
      lstm_step(m, p.prefix[t], state, empty, scratch);
      for (int l = 0; l + 1 < L; ++l)
        std::copy(state.h.begin() + static_cast<size_t>(l) * H,
                  state.h.begin() + static_cast<size_t>(l + 1) * H,
                  buf.begin() + (t * static_cast<size_t>(L - 1) + l) * H);
    }
    const double zc = output_logit(m, state, p.correct_id);
    const double zw = output_logit(m, state, p.wrong_id);
    cs.baseline_correct[i] = zc > zw ? 1 : 0;
  }
  return cs;
}

// Re-run layers [start..L) only, reading layer start-1 activations from the
// cache. Masked unit sits in layer >= start.
bool score_partial(const Model& m, const PreparedStimulus& p,
                   const std::vector<double>& cached, int start,
                   const std::vector<uint8_t>& maskbits) {
  const int H = m.dims.hidden;
  const int L = m.dims.layers;
  const int T = static_cast<int>(p.prefix.size());
  std::vector<double> h(static_cast<size_t>(L - start) * H, 0.0);
  std::vector<double> c = h;
  std::vector<double> pre(static_cast<size_t>(4) * H);
  std::vector<double> x;

  auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };

  for (int t = 0; t < T; ++t) {
    if (start == 0) {
      const int tok = p.prefix[t];
      x.assign(m.embedding.begin() + static_cast<size_t>(tok) * m.dims.embed,
               m.embedding.begin() + static_cast<size_t>(tok + 1) * m.dims.embed);
    } else {
      const double* src =
          cached.data() + (static_cast<size_t>(t) * (L - 1) + (start - 1)) * H;
      x.assign(src, src + H);
    }
    for (int l = start; l < L; ++l) {
      const LayerParams& lp = m.layers[l];
      double* hl = h.data() + static_cast<size_t>(l - start) * H;
      double* cl = c.data() + static_cast<size_t>(l - start) * H;
      for (int r = 0; r < 4 * H; ++r) {
        const double* row = lp.w_ih.data() + static_cast<size_t>(r) * lp.in_dim;
        double acc = lp.bias[r];
        for (int k = 0; k < lp.in_dim; ++k) acc += row[k] * x[k];
        const double* rrow = lp.w_hh.data() + static_cast<size_t>(r) * H;
        for (int k = 0; k < H; ++k) acc += rrow[k] * hl[k];
        pre[r] = acc;
      }
      x.resize(H);
      const uint8_t* bits = maskbits.data() + static_cast<size_t>(l) * H;
      for (int u = 0; u < H; ++u) {
        const double gi = sigmoid(pre[kGateI * H + u]);
        const double gf = sigmoid(pre[kGateF * H + u]);
        const double gg = std::tanh(pre[kGateG * H + u]);
        const double go = sigmoid(pre[kGateO * H + u]);
        const double cu = gf * cl[u] + gi * gg;
        double hu = go * std::tanh(cu);
        if (bits[u]) hu = 0.0;
        cl[u] = cu;
        hl[u] = hu;
        x[u] = hu;
      }
    }
  }
  const double* htop = h.data() + static_cast<size_t>(L - 1 - start) * H;
  auto logit = [&](int v) {
    const double* row = m.w_out.data() + static_cast<size_t>(v) * H;
    double acc = m.b_out[v];
    for (int k = 0; k < H; ++k) acc += row[k] * htop[k];
    return acc;
  };
  return logit(p.correct_id) > logit(p.wrong_id);
}

std::vector<ConditionAccuracy> accuracy_from_bits(
    const PreparedSet& ps, const std::vector<uint8_t>& correct) {
  std::vector<int> n(ps.labels.size(), 0), good(ps.labels.size(), 0);
  for (size_t i = 0; i < ps.stimuli.size(); ++i) {
    n[ps.stimuli[i].condition]++;
    good[ps.stimuli[i].condition] += correct[i];
  }
  std::vector<ConditionAccuracy> out;
  for (size_t c = 0; c < ps.labels.size(); ++c) {
    if (n[c] == 0) continue;  // never report empty conditions
    out.push_back({ps.task, ps.labels[c], n[c],
                   static_cast<double>(good[c]) / n[c]});
  }
  return out;
}

}  // namespace

bool score_stimulus(const Model& m, const Stimulus& st, const AblationMask& mask) {
  StimulusSet one;
  one.task = "";
  one.condition_labels = {st.condition.label()};
  one.stimuli = {st};
  PreparedSet ps = prepare(m, one);
  return score_prepared(m, ps.stimuli[0], resolve_mask(mask, m.dims));
}

std::vector<uint8_t> score_set(const Model& m, const StimulusSet& set,
                               const AblationMask& mask) {
  PreparedSet ps = prepare(m, set);
  ResolvedMask rm = resolve_mask(mask, m.dims);
  std::vector<uint8_t> correct(ps.stimuli.size(), 0);
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(ps.stimuli.size()); ++i)
    correct[i] = score_prepared(m, ps.stimuli[i], rm) ? 1 : 0;
  return correct;
}

std::vector<ConditionAccuracy> task_accuracy(const Model& m,
                                             const StimulusSet& set,
                                             const AblationMask& mask) {
  PreparedSet ps = prepare(m, set);
  ResolvedMask rm = resolve_mask(mask, m.dims);
  std::vector<uint8_t> correct(ps.stimuli.size(), 0);
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(ps.stimuli.size()); ++i)
    correct[i] = score_prepared(m, ps.stimuli[i], rm) ? 1 : 0;
  return accuracy_from_bits(ps, correct);
}

double pooled_accuracy(const Model& m, const StimulusSet& set,
                       const AblationMask& mask) {
  if (set.stimuli.empty()) throw std::invalid_argument("empty stimulus set");
  auto bits = score_set(m, set, mask);
  long good = 0;
  for (uint8_t b : bits) good += b;
  return static_cast<double>(good) / static_cast<double>(bits.size());
}

SweepResult ablation_sweep(const Model& m, const std::vector<StimulusSet>& tasks,
                           double threshold_points) {
  if (tasks.empty()) throw std::invalid_argument("ablation_sweep: no tasks");
  SweepResult result;
  result.threshold_points = threshold_points;

  std::vector<PreparedSet> prepared;
  std::vector<CachedStreams> caches;
  for (const auto& set : tasks) {
    prepared.push_back(prepare(m, set));
    caches.push_back(cache_streams(m, prepared.back()));
    auto acc = accuracy_from_bits(prepared.back(), caches.back().baseline_correct);
    result.baseline.insert(result.baseline.end(), acc.begin(), acc.end());
  }

  const int H = m.dims.hidden;
  const int L = m.dims.layers;
  const int n_units = L * H;
  result.effects.resize(n_units);

#pragma omp parallel for schedule(dynamic)
  for (int flat = 0; flat < n_units; ++flat) {
    const UnitRef unit = unit_from_flat(flat, H);
    std::vector<uint8_t> maskbits(static_cast<size_t>(L) * H, 0);
    maskbits[flat] = 1;

    AblationEffect eff;
    eff.unit = unit;
    for (size_t s = 0; s < prepared.size(); ++s) {
      const PreparedSet& ps = prepared[s];
      std::vector<uint8_t> correct(ps.stimuli.size(), 0);
      for (size_t i = 0; i < ps.stimuli.size(); ++i)
        correct[i] = score_partial(m, ps.stimuli[i], caches[s].below[i],
                                   unit.layer, maskbits)
                         ? 1
                         : 0;
      auto full = accuracy_from_bits(ps, caches[s].baseline_correct);
      auto ablated = accuracy_from_bits(ps, correct);
      for (size_t c = 0; c < full.size(); ++c) {
        AblationEntry e;
        e.task = full[c].task;
        e.condition = full[c].condition;
        e.full = full[c].accuracy;
        e.ablated = ablated[c].accuracy;
        e.delta = (e.full - e.ablated) * 100.0;
        e.subject = full[c].condition[0] == 'S' ? Number::Singular : Number::Plural;
        eff.entries.push_back(e);
      }
    }
    double sing_max = -1e9, plur_max = -1e9;
    for (const auto& e : eff.entries) {
      eff.max_delta = std::max(eff.max_delta, e.delta);
      if (e.subject == Number::Singular)
        sing_max = std::max(sing_max, e.delta);
      else
        plur_max = std::max(plur_max, e.delta);
    }
    eff.flagged = eff.max_delta > threshold_points;
    if (!eff.flagged)
      eff.number_dependence = "none";
    else if (sing_max > threshold_points && plur_max <= threshold_points)
      eff.number_dependence = "singular";
    else if (plur_max > threshold_points && sing_max <= threshold_points)
      eff.number_dependence = "plural";
    else
      eff.number_dependence = "mixed";
    result.effects[flat] = std::move(eff);
  }

  std::stable_sort(result.effects.begin(), result.effects.end(),
                   [](const AblationEffect& a, const AblationEffect& b) {
                     return a.max_delta > b.max_delta;
                   });
  return result;
}

LrUnits identify_lr_units(const SweepResult& sweep, const std::string& task,
                          double drop_points, double opposite_points) {
  LrUnits out;
  struct Cand {
    UnitRef unit;
    double drop;
  };
  std::vector<Cand> sing, plur;
  for (const auto& eff : sweep.effects) {
    double sp = -1e9, ps = -1e9;
    double worst_plural = 0.0, worst_singular = 0.0;
    for (const auto& e : eff.entries) {
      if (e.task != task) continue;
      if (e.condition == "SP") sp = e.delta;
      if (e.condition == "PS") ps = e.delta;
      if (e.subject == Number::Plural)
        worst_plural = std::max(worst_plural, std::abs(e.delta));
      else
        worst_singular = std::max(worst_singular, std::abs(e.delta));
    }
    if (sp > drop_points && worst_plural <= opposite_points)
      sing.push_back({eff.unit, sp});
    if (ps > drop_points && worst_singular <= opposite_points)
      plur.push_back({eff.unit, ps});
  }
  auto by_drop = [](const Cand& a, const Cand& b) { return a.drop > b.drop; };
  std::sort(sing.begin(), sing.end(), by_drop);
  std::sort(plur.begin(), plur.end(), by_drop);
  for (const auto& c : sing) out.singular.push_back(c.unit);
  for (const auto& c : plur) out.plural.push_back(c.unit);
  return out;
}

PermutationTestResult permutation_group_ablation(const Model& m,
                                                 const std::vector<UnitRef>& units,
                                                 const StimulusSet& stimuli,
                                                 int n_random, uint64_t seed) {
  if (units.empty()) throw std::invalid_argument("permutation test: empty target group");
  if (stimuli.stimuli.empty())
    throw std::invalid_argument("permutation test: empty stimulus set");

  const int H = m.dims.hidden;
  const int L = m.dims.layers;
  PermutationTestResult res;
  res.target_units = units;
  res.set_name = stimuli.task;
  res.n_random = n_random;

  PreparedSet ps = prepare(m, stimuli);

  std::vector<uint8_t> target_bits(static_cast<size_t>(L) * H, 0);
  (void)resolve_mask(AblationMask{units}, m.dims);  // validates indices
  for (const UnitRef& u : units) target_bits[u.flat(H)] = 1;
  std::vector<int> pool;  // non-target units
  for (int flat = 0; flat < L * H; ++flat)
    if (!target_bits[flat]) pool.push_back(flat);
  const size_t k = units.size();
  if (pool.size() < k)
    throw std::invalid_argument("fewer available units than the target group size");

  // Draw the random groups up front so the evaluation order cannot shift
  // the RNG stream.
  Rng rng = Rng::derive(seed, "perm-test");
  std::vector<std::vector<int>> groups(n_random);
  for (int g = 0; g < n_random; ++g) {
    std::vector<int> p = pool;
    for (size_t i = 0; i < k; ++i) {
      size_t j = i + rng.below(p.size() - i);
      std::swap(p[i], p[j]);
    }
    groups[g].assign(p.begin(), p.begin() + k);
  }

  auto eval_mask = [&](const std::vector<uint8_t>& bits) {
    ResolvedMask rm;
    rm.bits = bits;
    rm.any = true;
    long good = 0;
    for (const auto& st : ps.stimuli) good += score_prepared(m, st, rm) ? 1 : 0;
    return static_cast<double>(good) / static_cast<double>(ps.stimuli.size());
  };

  res.observed = eval_mask(target_bits);

  res.null_distribution.assign(n_random, 0.0);
#pragma omp parallel for schedule(dynamic)
  for (int g = 0; g < n_random; ++g) {
    std::vector<uint8_t> bits(static_cast<size_t>(L) * H, 0);
    for (int flat : groups[g]) bits[flat] = 1;
    res.null_distribution[g] = eval_mask(bits);
  }

  int at_most = 0;
  for (double a : res.null_distribution)
    if (a <= res.observed) ++at_most;
  res.p_value = (1.0 + at_most) / (n_random + 1.0);
  return res;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

void write_accuracy_csv(const std::vector<ConditionAccuracy>& acc,
                        const std::filesystem::path& p) {
  std::ostringstream out;
  out << "task,condition,n,accuracy\n";
  for (const auto& a : acc)
    out << a.task << ',' << a.condition << ',' << a.n << ','
        << fmt_double(a.accuracy) << '\n';
  write_file(p, out.str());
}

void write_sweep_csv(const SweepResult& sweep, const std::filesystem::path& p) {
  // Rows: (task, condition); columns: full accuracy then one delta column per
  // unit, keyed by display form.
  std::ostringstream out;
  out << "task,condition,n,full";
  for (const auto& eff : sweep.effects) out << ',' << eff.unit.display();
  out << '\n';
  for (size_t row = 0; row < sweep.baseline.size(); ++row) {
    const auto& b = sweep.baseline[row];
    out << b.task << ',' << b.condition << ',' << b.n << ','
        << fmt_double(b.accuracy);
    for (const auto& eff : sweep.effects) {
      double delta = 0.0;
      for (const auto& e : eff.entries)
        if (e.task == b.task && e.condition == b.condition) delta = e.delta;
      out << ',' << fmt_double(delta);
    }
    out << '\n';
  }
  write_file(p, out.str());
}

void write_sweep_json(const SweepResult& sweep, const std::filesystem::path& p) {
  json j;
  j["threshold_points"] = sweep.threshold_points;
  json base = json::array();
  for (const auto& b : sweep.baseline)
    base.push_back({{"task", b.task},
                    {"condition", b.condition},
                    {"n", b.n},
                    {"accuracy", b.accuracy}});
  j["baseline"] = base;
  json effects = json::array();
  for (const auto& eff : sweep.effects) {
    json e;
    e["unit"] = eff.unit.display();
    e["max_delta"] = eff.max_delta;
    e["flagged"] = eff.flagged;
    e["number_dependence"] = eff.number_dependence;
    json entries = json::array();
    for (const auto& en : eff.entries)
      entries.push_back({{"task", en.task},
                         {"condition", en.condition},
                         {"full", en.full},
                         {"ablated", en.ablated},
                         {"delta", en.delta}});
    e["entries"] = entries;
    effects.push_back(e);
  }
  j["effects"] = effects;
  write_file(p, j.dump(1));
}

void write_permutation_json(const PermutationTestResult& r,
                            const std::filesystem::path& p) {
  json j;
  json units = json::array();
  for (const auto& u : r.target_units) units.push_back(u.display());
  j["target_units"] = units;
  j["set"] = r.set_name;
  j["observed_accuracy"] = r.observed;
  j["n_random"] = r.n_random;
  j["p_value"] = r.p_value;
  j["null_distribution"] = r.null_distribution;
  write_file(p, j.dump(1));
}

}  // namespace lens
