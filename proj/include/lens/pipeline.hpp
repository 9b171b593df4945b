#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lens/agreement.hpp"
#include "lens/connectivity.hpp"
#include "lens/decoding.hpp"
#include "lens/grammar.hpp"
#include "lens/lstm.hpp"

namespace lens {

inline constexpr const char* kToolVersion = "0.1.0";

struct ModelConfig {
  int embed = 64;
  int hidden = 64;
  int layers = 2;
};

struct DataConfig {
  int n_per_condition = 600;
  std::vector<std::string> tasks;  // empty = the seven default tasks
  DepthConfig depth;
};

struct TrainStageConfig {
  int corpus_sentences = 20000;
  double depth_fraction = 0.25;
  std::string lexicon_split = "shared";  // "shared" | "disjoint"
  double plural_bias = 0.5;
  double lr = 1.0;
  int batch = 32;
  int bptt = 32;
  double clip_norm = 5.0;
  int epochs = 10;
  double val_fraction = 0.05;
  double lr_decay = 0.5;
};

struct AnalysisConfig {
  double ablation_threshold = 10.0;  // percentage points
  double lr_drop = 10.0;
  double lr_opposite = 5.0;
  int n_random = 1000;
  int perm_per_condition = 100;   // stimuli per condition in permutation tests
  int trace_per_condition = 150;  // stimuli per condition in trace plots
  double sr_auc_threshold = 0.9;
  int cv_folds = 5;
  std::string gat_feature = "c";  // "c" | "h"
  bool afferents_include_lower = false;
  double z_threshold = 3.0;
  double outlier_sd = 3.0;
};

struct RunConfig {
  uint64_t seed = 12345;
  std::string out = "runs/default";
  int jobs = 0;
  ModelConfig model;
  DataConfig data;
  TrainStageConfig train;
  AnalysisConfig analysis;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& p);
  std::string config_hash() const;
  std::vector<TemplateId> task_ids() const;
};

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

struct StageOptions {
  bool force = false;
  bool dry_run = false;
};

// Each stage reads its inputs from the run directory and writes its outputs
// there; a content-hash marker under .stages/ lets reruns skip stages whose
// inputs did not change.
void stage_gen_data(const RunConfig& cfg, const StageOptions& opt, std::ostream& log);
void stage_train(const RunConfig& cfg, const StageOptions& opt, std::ostream& log);
void stage_eval(const RunConfig& cfg, const StageOptions& opt, std::ostream& log);
void stage_ablate(const RunConfig& cfg, const StageOptions& opt, std::ostream& log);
void stage_gat(const RunConfig& cfg, const StageOptions& opt, std::ostream& log);
void stage_depth(const RunConfig& cfg, const StageOptions& opt, std::ostream& log);
void stage_perm(const RunConfig& cfg, const StageOptions& opt, std::ostream& log);
void stage_connectivity(const RunConfig& cfg, const StageOptions& opt,
                        std::ostream& log);
void stage_traces(const RunConfig& cfg, const StageOptions& opt, std::ostream& log);
void stage_report(const RunConfig& cfg, const StageOptions& opt, std::ostream& log);

std::vector<std::string> pipeline_stage_names();

// Runs every stage in order. Throws with the failing stage's name; partial
// outputs stay on disk.
void run_pipeline(const RunConfig& cfg, const StageOptions& opt, std::ostream& log);

// ---------------------------------------------------------------------------
// Artifact access (used by subcommands, the report and the acceptance suite)
// ---------------------------------------------------------------------------

struct RunArtifacts {
  std::filesystem::path out;

  std::filesystem::path config_path() const { return out / "config.json"; }
  std::filesystem::path task_path(const std::string& task) const {
    return out / "data" / "tasks" / (task + ".jsonl");
  }
  std::filesystem::path corpus_path() const { return out / "data" / "corpus.txt"; }
  std::filesystem::path vocab_path() const { return out / "data" / "vocab.txt"; }
  std::filesystem::path depth_path() const { return out / "data" / "depth.jsonl"; }
  std::filesystem::path manifest_path() const { return out / "data" / "manifest.json"; }
  std::filesystem::path checkpoint_path() const {
    return out / "model" / "checkpoint.json";
  }
  std::filesystem::path train_log_path() const {
    return out / "model" / "train_log.csv";
  }
  std::filesystem::path analysis(const std::string& name) const {
    return out / "analysis" / name;
  }
  std::filesystem::path plot(const std::string& name) const {
    return out / "plots" / name;
  }
  std::filesystem::path trace_csv(const std::string& name) const {
    return out / "traces" / name;
  }
  std::filesystem::path report_path() const { return out / "report.json"; }
  std::filesystem::path index_path() const { return out / "index.md"; }
};

// Condensed pipeline outcome, loaded back from the artifact files.
struct PipelineSummary {
  std::vector<ConditionAccuracy> baseline;
  std::vector<UnitRef> lr_singular, lr_plural;
  bool lr_strict = true;  // false when the fallback (top-delta) rule was used
  std::vector<UnitRef> sr_flagged;
  std::vector<UnitRef> syntax_units;
  std::vector<GatSeries> gat_series;
  double perm_sr_lr_p = 1.0, perm_sr_only_p = 1.0, perm_syntax_p = 1.0;
  double depth_r2_mean = 0.0, depth_r2_sd = 0.0, depth_delta_r2 = 0.0;
  std::vector<std::pair<std::string, double>> efferent_segregation;  // unit -> stat
  std::string mutual_interaction;
  int nounpp_verb_pos = 0;
  int nounpp_intervener_pos = 0;
  int nounpp_subject_pos = 0;
};
PipelineSummary load_summary(const RunConfig& cfg);

// Token log-frequency table (log(1+count)) over the training corpus.
std::vector<double> corpus_log_frequencies(const std::vector<std::string>& lines,
                                           const Vocab& vocab);

// Deterministic subsample: first k stimuli of every condition.
StimulusSet subsample_per_condition(const StimulusSet& set, int k);
// Merge sets under a combined name.
StimulusSet merge_sets(const std::vector<StimulusSet>& sets, const std::string& name);
// Keep only the listed condition labels.
StimulusSet filter_conditions(const StimulusSet& set,
                              const std::vector<std::string>& labels);

}  // namespace lens
