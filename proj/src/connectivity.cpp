#include "lens/connectivity.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "lens/stats.hpp"
#include "lens/util.hpp"

namespace lens {

using nlohmann::json;

double threshold_balanced_accuracy(std::span<const double> a,
                                   std::span<const double> b) {
  if (a.empty() || b.empty())
    throw std::invalid_argument("threshold_balanced_accuracy: empty group");
  std::vector<double> cuts(a.begin(), a.end());
  cuts.insert(cuts.end(), b.begin(), b.end());
  std::sort(cuts.begin(), cuts.end());
  double best = 0.0;
  auto frac_below = [](std::span<const double> v, double t) {
    int k = 0;
    for (double x : v) k += x < t ? 1 : 0;
    return static_cast<double>(k) / static_cast<double>(v.size());
  };
  // candidate thresholds: midpoints between adjacent distinct values plus the
  // outer extremes
  std::vector<double> thresholds = {cuts.front() - 1.0, cuts.back() + 1.0};
  for (size_t i = 0; i + 1 < cuts.size(); ++i)
    if (cuts[i] != cuts[i + 1]) thresholds.push_back(0.5 * (cuts[i] + cuts[i + 1]));
  for (double t : thresholds) {
    const double fa = frac_below(a, t), fb = frac_below(b, t);
    best = std::max(best, 0.5 * (fa + (1.0 - fb)));
    best = std::max(best, 0.5 * ((1.0 - fa) + fb));
  }
  return best;
}

EfferentProfile efferent_profile(const Model& m, UnitRef unit, const Lexicon& lex) {
  if (unit.layer != m.dims.layers - 1)
    throw std::invalid_argument(
        "efferent_profile: unit " + unit.display() +
        " is not in the output-connected (top) layer");
  if (unit.unit < 0 || unit.unit >= m.dims.hidden)
    throw std::out_of_range("efferent_profile: unit index outside dims");

  EfferentProfile prof;
  prof.unit = unit;
  const int H = m.dims.hidden;
  auto weight_of = [&](const std::string& form) {
    auto id = m.vocab.find(form);
    if (!id)
      throw std::invalid_argument("verb form not in vocabulary: '" + form + "'");
    return m.w_out[static_cast<size_t>(*id) * H + unit.unit];
  };
  for (const auto& v : lex.verbs) {
    prof.singular_forms.push_back(v.sing);
    prof.singular_weights.push_back(weight_of(v.sing));
    prof.plural_forms.push_back(v.plur);
    prof.plural_weights.push_back(weight_of(v.plur));
  }
  prof.segregation =
      threshold_balanced_accuracy(prof.singular_weights, prof.plural_weights);
  return prof;
}

EffectiveAfferent effective_afferents(const Model& m, UnitRef target,
                                      GateBlock gate,
                                      const std::vector<ActivationTrace>& traces,
                                      bool include_lower_layer,
                                      double z_threshold) {
  if (traces.empty())
    throw std::invalid_argument("effective_afferents: empty trace set (scale undefined)");
  if (target.layer < 0 || target.layer >= m.dims.layers || target.unit < 0 ||
      target.unit >= m.dims.hidden)
    throw std::out_of_range("effective_afferents: target outside dims");

  const int H = m.dims.hidden;
  EffectiveAfferent rep;
  rep.target = target;
  rep.gate = gate;
  rep.z_threshold = z_threshold;
  rep.population = include_lower_layer && target.layer > 0
                       ? "recurrent+lower-layer"
                       : "same-layer-recurrent";

  auto activity = [&](UnitRef u, double& max_abs, double& mean_val) {
    max_abs = 0.0;
    mean_val = 0.0;
    long n = 0;
    for (const auto& tr : traces) {
      for (int t = 0; t < tr.steps(); ++t) {
        const double h = tr.h_at(t, u.layer, u.unit);
        max_abs = std::max(max_abs, std::abs(h));
        mean_val += h;
        ++n;
      }
    }
    if (n > 0) mean_val /= static_cast<double>(n);
  };

  const LayerParams& lp = m.layers[target.layer];
  const size_t gate_row = static_cast<size_t>(gate) * H + target.unit;

  for (int s = 0; s < H; ++s) {
    AfferentSource src;
    src.source = UnitRef{target.layer, s};
    src.raw_weight = lp.w_hh[gate_row * H + s];
    activity(src.source, src.scale, src.mean_h);
    src.effective = src.raw_weight * src.scale;
    rep.sources.push_back(src);
  }
  if (include_lower_layer && target.layer > 0) {
    for (int s = 0; s < H; ++s) {
      AfferentSource src;
      src.source = UnitRef{target.layer - 1, s};
      src.raw_weight = lp.w_ih[gate_row * lp.in_dim + s];
      activity(src.source, src.scale, src.mean_h);
      src.effective = src.raw_weight * src.scale;
      rep.sources.push_back(src);
    }
  }

  std::vector<double> eff;
  for (const auto& s : rep.sources) eff.push_back(s.effective);
  std::vector<double> z = zscores(eff);
  for (size_t i = 0; i < rep.sources.size(); ++i) {
    rep.sources[i].z = z[i];
    rep.sources[i].outlier = std::abs(z[i]) > z_threshold;
  }
  return rep;
}

const char* interaction_name(PairInteraction i) {
  switch (i) {
    case PairInteraction::MutuallyInhibiting: return "mutually-inhibiting";
    case PairInteraction::Independent: return "independent";
    case PairInteraction::Other: return "other";
  }
  return "?";
}

MutualInhibitionReport mutual_inhibition_check(
    const Model& m, UnitRef a, UnitRef b,
    const std::vector<ActivationTrace>& traces,
    const std::vector<std::pair<int, int>>& spans) {
  if (a.layer != b.layer)
    throw std::invalid_argument("mutual_inhibition_check: units must share a layer");
  if (traces.size() != spans.size())
    throw std::invalid_argument("mutual_inhibition_check: traces/spans mismatch");

  const int H = m.dims.hidden;
  const LayerParams& lp = m.layers[a.layer];
  MutualInhibitionReport rep;
  rep.unit_a = a;
  rep.unit_b = b;
  rep.w_i_ab = lp.w_hh[(static_cast<size_t>(kGateI) * H + a.unit) * H + b.unit];
  rep.w_i_ba = lp.w_hh[(static_cast<size_t>(kGateI) * H + b.unit) * H + a.unit];
  rep.w_f_ab = lp.w_hh[(static_cast<size_t>(kGateF) * H + a.unit) * H + b.unit];
  rep.w_f_ba = lp.w_hh[(static_cast<size_t>(kGateF) * H + b.unit) * H + a.unit];
  rep.reciprocal_weights_positive =
      rep.w_i_ab > 0 && rep.w_i_ba > 0 && rep.w_f_ab > 0 && rep.w_f_ba > 0;

  // Mean C per span step (relative to span start), averaged across traces.
  int span_len = INT_MAX;
  for (const auto& [s, e] : spans) span_len = std::min(span_len, e - s);
  if (span_len == INT_MAX || span_len <= 0) span_len = 0;
  rep.span_mean_c_a.assign(span_len, 0.0);
  rep.span_mean_c_b.assign(span_len, 0.0);
  if (span_len > 0 && !traces.empty()) {
    for (size_t i = 0; i < traces.size(); ++i) {
      const auto& [s, e] = spans[i];
      for (int r = 0; r < span_len; ++r) {
        rep.span_mean_c_a[r] += traces[i].c_at(s + r, a.layer, a.unit);
        rep.span_mean_c_b[r] += traces[i].c_at(s + r, b.layer, b.unit);
      }
    }
    for (int r = 0; r < span_len; ++r) {
      rep.span_mean_c_a[r] /= static_cast<double>(traces.size());
      rep.span_mean_c_b[r] /= static_cast<double>(traces.size());
    }
  }
  rep.activity_negative = span_len > 0;
  for (int r = 0; r < span_len; ++r)
    rep.activity_negative =
        rep.activity_negative && rep.span_mean_c_a[r] < 0 && rep.span_mean_c_b[r] < 0;

  const bool all_zero = rep.w_i_ab == 0 && rep.w_i_ba == 0 && rep.w_f_ab == 0 &&
                        rep.w_f_ba == 0;
  if (all_zero)
    rep.interaction = PairInteraction::Independent;
  else if (rep.reciprocal_weights_positive && rep.activity_negative)
    rep.interaction = PairInteraction::MutuallyInhibiting;
  else
    rep.interaction = PairInteraction::Other;
  return rep;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

void write_efferent_json(const std::vector<EfferentProfile>& profiles,
                         const std::filesystem::path& p) {
  json arr = json::array();
  for (const auto& prof : profiles) {
    json j;
    j["unit"] = prof.unit.display();
    j["segregation"] = prof.segregation;
    j["singular_forms"] = prof.singular_forms;
    j["singular_weights"] = prof.singular_weights;
    j["plural_forms"] = prof.plural_forms;
    j["plural_weights"] = prof.plural_weights;
    arr.push_back(j);
  }
  write_file(p, json{{"profiles", arr}}.dump(1));
}

void write_efferent_csv(const std::vector<EfferentProfile>& profiles,
                        const std::filesystem::path& p) {
  std::ostringstream out;
  out << "unit,segregation,group,form,weight\n";
  for (const auto& prof : profiles) {
    for (size_t i = 0; i < prof.singular_forms.size(); ++i)
      out << prof.unit.display() << ',' << fmt_double(prof.segregation)
          << ",singular," << prof.singular_forms[i] << ','
          << fmt_double(prof.singular_weights[i]) << '\n';
    for (size_t i = 0; i < prof.plural_forms.size(); ++i)
      out << prof.unit.display() << ',' << fmt_double(prof.segregation)
          << ",plural," << prof.plural_forms[i] << ','
          << fmt_double(prof.plural_weights[i]) << '\n';
  }
  write_file(p, out.str());
}

namespace {
const char* gate_name(GateBlock g) {
  switch (g) {
    case kGateI: return "input";
    case kGateF: return "forget";
    case kGateG: return "candidate";
    case kGateO: return "output";
  }
  return "?";
}
}  // namespace

void write_afferent_json(const std::vector<EffectiveAfferent>& reports,
                         const std::filesystem::path& p) {
  json arr = json::array();
  for (const auto& rep : reports) {
    json j;
    j["target"] = rep.target.display();
    j["gate"] = gate_name(rep.gate);
    j["population"] = rep.population;
    j["z_threshold"] = rep.z_threshold;
    json sources = json::array();
    for (const auto& s : rep.sources)
      sources.push_back({{"source", s.source.display()},
                         {"raw_weight", s.raw_weight},
                         {"scale", s.scale},
                         {"effective", s.effective},
                         {"z", s.z},
                         {"mean_h", s.mean_h},
                         {"outlier", s.outlier}});
    j["sources"] = sources;
    arr.push_back(j);
  }
  write_file(p, json{{"reports", arr}}.dump(1));
}

void write_afferent_csv(const std::vector<EffectiveAfferent>& reports,
                        const std::filesystem::path& p) {
  std::ostringstream out;
  out << "target,gate,source,raw_weight,scale,effective,z,mean_h,outlier\n";
  for (const auto& rep : reports)
    for (const auto& s : rep.sources)
      out << rep.target.display() << ',' << gate_name(rep.gate) << ','
          << s.source.display() << ',' << fmt_double(s.raw_weight) << ','
          << fmt_double(s.scale) << ',' << fmt_double(s.effective) << ','
          << fmt_double(s.z) << ',' << fmt_double(s.mean_h) << ','
          << (s.outlier ? 1 : 0) << '\n';
  write_file(p, out.str());
}

void write_mutual_json(const MutualInhibitionReport& r,
                       const std::filesystem::path& p) {
  json j;
  j["unit_a"] = r.unit_a.display();
  j["unit_b"] = r.unit_b.display();
  j["w_input_a_from_b"] = r.w_i_ab;
  j["w_input_b_from_a"] = r.w_i_ba;
  j["w_forget_a_from_b"] = r.w_f_ab;
  j["w_forget_b_from_a"] = r.w_f_ba;
  j["reciprocal_weights_positive"] = r.reciprocal_weights_positive;
  j["activity_negative"] = r.activity_negative;
  j["span_mean_c_a"] = r.span_mean_c_a;
  j["span_mean_c_b"] = r.span_mean_c_b;
  j["interaction"] = interaction_name(r.interaction);
  write_file(p, j.dump(1));
}

}  // namespace lens
