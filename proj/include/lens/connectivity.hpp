#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lens/grammar.hpp"
#include "lens/lstm.hpp"

namespace lens {

// ---------------------------------------------------------------------------
// Efferent weights toward the verb-form output rows
// ---------------------------------------------------------------------------

struct EfferentProfile {
  UnitRef unit;
  std::vector<std::string> singular_forms, plural_forms;
  std::vector<double> singular_weights, plural_weights;
  double segregation = 0.5;  // best single-threshold balanced accuracy
};

// Balanced accuracy of the best threshold separating the two weight groups
// (both orientations considered).
double threshold_balanced_accuracy(std::span<const double> a,
                                   std::span<const double> b);

// Output-layer column of `unit` restricted to the lexicon's verb-form rows.
// Defined for top-layer units only (the output layer reads the top layer).
EfferentProfile efferent_profile(const Model& m, UnitRef unit, const Lexicon& lex);

// ---------------------------------------------------------------------------
// Effective afferent connectivity into a unit's gate
// ---------------------------------------------------------------------------

struct AfferentSource {
  UnitRef source;
  double raw_weight = 0.0;
  double scale = 0.0;      // max |h| of the source over the reference traces
  double effective = 0.0;  // raw * scale
  double z = 0.0;          // within the reported population
  double mean_h = 0.0;     // typical sign of the source's activity
  bool outlier = false;
};

struct EffectiveAfferent {
  UnitRef target;
  GateBlock gate = kGateI;
  std::string population;  // "same-layer-recurrent" or "recurrent+lower-layer"
  double z_threshold = 3.0;
  std::vector<AfferentSource> sources;
};

// Recurrent same-layer weights into the target's gate, scaled by each
// source's maximal |h| over the reference traces; optionally widened with the
// lower layer's feedforward weights.
EffectiveAfferent effective_afferents(const Model& m, UnitRef target,
                                      GateBlock gate,
                                      const std::vector<ActivationTrace>& traces,
                                      bool include_lower_layer = false,
                                      double z_threshold = 3.0);

// ---------------------------------------------------------------------------
// Mutual-inhibition check for a unit pair
// ---------------------------------------------------------------------------

enum class PairInteraction { MutuallyInhibiting, Independent, Other };
const char* interaction_name(PairInteraction i);

struct MutualInhibitionReport {
  UnitRef unit_a, unit_b;
  // reciprocal recurrent weights: w_<gate>_ab = weight into a's gate from b
  double w_i_ab = 0.0, w_i_ba = 0.0, w_f_ab = 0.0, w_f_ba = 0.0;
  bool reciprocal_weights_positive = false;
  bool activity_negative = false;  // mean C of both units < 0 across the span
  std::vector<double> span_mean_c_a, span_mean_c_b;  // per span step
  PairInteraction interaction = PairInteraction::Other;
};

// spans[i] = [start, end) token range of the subject-verb dependency in
// traces[i].
MutualInhibitionReport mutual_inhibition_check(
    const Model& m, UnitRef a, UnitRef b,
    const std::vector<ActivationTrace>& traces,
    const std::vector<std::pair<int, int>>& spans);

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

void write_efferent_json(const std::vector<EfferentProfile>& profiles,
                         const std::filesystem::path& p);
void write_efferent_csv(const std::vector<EfferentProfile>& profiles,
                        const std::filesystem::path& p);
void write_afferent_json(const std::vector<EffectiveAfferent>& reports,
                         const std::filesystem::path& p);
void write_afferent_csv(const std::vector<EffectiveAfferent>& reports,
                        const std::filesystem::path& p);
void write_mutual_json(const MutualInhibitionReport& r,
                       const std::filesystem::path& p);

}  // namespace lens
