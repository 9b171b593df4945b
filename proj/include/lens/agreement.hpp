#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lens/grammar.hpp"
#include "lens/lstm.hpp"

namespace lens {

struct ConditionAccuracy {
  std::string task;
  std::string condition;
  int n = 0;
  double accuracy = 0.0;  // fraction of stimuli preferring the correct form
};

// Likelihood comparison at the main verb: feed tokens[0..verb_pos), compare
// the model's log-likelihood of the correct vs wrong inflection. Strict
// inequality required; ties count as incorrect.
bool score_stimulus(const Model& m, const Stimulus& st, const AblationMask& mask);

// Per-stimulus correctness for a whole set (parallel over stimuli).
std::vector<uint8_t> score_set(const Model& m, const StimulusSet& set,
                               const AblationMask& mask);

// Accuracy grouped by (task, condition); conditions with no stimuli are
// omitted.
std::vector<ConditionAccuracy> task_accuracy(const Model& m,
                                             const StimulusSet& set,
                                             const AblationMask& mask);

// Pooled accuracy over every stimulus in the set.
double pooled_accuracy(const Model& m, const StimulusSet& set,
                       const AblationMask& mask);

// ---------------------------------------------------------------------------
// Single-unit ablation sweep
// ---------------------------------------------------------------------------

struct AblationEntry {
  std::string task;
  std::string condition;
  double full = 0.0;     // baseline accuracy
  double ablated = 0.0;  // accuracy with this unit masked
  double delta = 0.0;    // (full - ablated) in percentage points
  Number subject = Number::Singular;
};

struct AblationEffect {
  UnitRef unit;
  std::vector<AblationEntry> entries;  // one per (task, condition)
  double max_delta = 0.0;
  // Flag per the >threshold rule, with the number-dependence signature:
  // "singular" = only singular-subject conditions cross the threshold.
  bool flagged = false;
  std::string number_dependence;  // "singular" | "plural" | "mixed" | "none"
};

struct SweepResult {
  std::vector<ConditionAccuracy> baseline;
  std::vector<AblationEffect> effects;  // sorted by max_delta, descending
  double threshold_points = 10.0;
};

// Ablates every (layer, unit) one at a time and re-scores all tasks. The
// baseline is computed once; hidden streams below the masked layer are reused
// from the baseline pass. Parallel over units.
SweepResult ablation_sweep(const Model& m, const std::vector<StimulusSet>& tasks,
                           double threshold_points = 10.0);

// Long-range number-unit identification on one noun-intervener task:
// a singular unit drops the SP condition by > drop_points while every
// plural-subject condition of that task stays within opposite_points, and
// symmetrically for plural units. Sorted by the incongruent drop, descending.
struct LrUnits {
  std::vector<UnitRef> singular;
  std::vector<UnitRef> plural;
};
LrUnits identify_lr_units(const SweepResult& sweep, const std::string& task,
                          double drop_points = 10.0, double opposite_points = 5.0);

// ---------------------------------------------------------------------------
// Group-ablation permutation test
// ---------------------------------------------------------------------------

struct PermutationTestResult {
  std::vector<UnitRef> target_units;
  std::string set_name;
  double observed = 0.0;  // pooled accuracy under the target ablation
  int n_random = 0;
  double p_value = 1.0;   // (1 + #{random <= observed}) / (n_random + 1)
  std::vector<double> null_distribution;
};

// Random equi-size ablations drawn uniformly from all non-target units.
PermutationTestResult permutation_group_ablation(const Model& m,
                                                 const std::vector<UnitRef>& units,
                                                 const StimulusSet& stimuli,
                                                 int n_random, uint64_t seed);

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

void write_accuracy_csv(const std::vector<ConditionAccuracy>& acc,
                        const std::filesystem::path& p);
void write_sweep_csv(const SweepResult& sweep, const std::filesystem::path& p);
void write_sweep_json(const SweepResult& sweep, const std::filesystem::path& p);
void write_permutation_json(const PermutationTestResult& r,
                            const std::filesystem::path& p);

}  // namespace lens
