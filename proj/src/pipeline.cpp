#include "lens/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "lens/parallel.hpp"
#include "lens/rng.hpp"
#include "lens/stats.hpp"
#include "lens/svgplot.hpp"
#include "lens/util.hpp"

namespace lens {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out"] = out;
  j["jobs"] = jobs;
  j["model"] = {{"embed", model.embed}, {"hidden", model.hidden}, {"layers", model.layers}};
  j["data"] = {{"n_per_condition", data.n_per_condition},
               {"tasks", data.tasks},
               {"depth",
                {{"min_len", data.depth.min_len},
                 {"max_len", data.depth.max_len},
                 {"per_length", data.depth.per_length},
                 {"pos_min", data.depth.pos_min},
                 {"pos_max", data.depth.pos_max},
                 {"depth_min", data.depth.depth_min},
                 {"depth_max", data.depth.depth_max}}}};
  j["train"] = {{"corpus_sentences", train.corpus_sentences},
                {"depth_fraction", train.depth_fraction},
                {"lexicon_split", train.lexicon_split},
                {"plural_bias", train.plural_bias},
                {"lr", train.lr},
                {"batch", train.batch},
                {"bptt", train.bptt},
                {"clip_norm", train.clip_norm},
                {"epochs", train.epochs},
                {"val_fraction", train.val_fraction},
                {"lr_decay", train.lr_decay}};
  j["analysis"] = {{"ablation_threshold", analysis.ablation_threshold},
                   {"lr_drop", analysis.lr_drop},
                   {"lr_opposite", analysis.lr_opposite},
                   {"n_random", analysis.n_random},
                   {"perm_per_condition", analysis.perm_per_condition},
                   {"trace_per_condition", analysis.trace_per_condition},
                   {"sr_auc_threshold", analysis.sr_auc_threshold},
                   {"cv_folds", analysis.cv_folds},
                   {"gat_feature", analysis.gat_feature},
                   {"afferents_include_lower", analysis.afferents_include_lower},
                   {"z_threshold", analysis.z_threshold},
                   {"outlier_sd", analysis.outlier_sd}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.out = j.value("out", c.out);
  c.jobs = j.value("jobs", c.jobs);
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model.embed = m.value("embed", c.model.embed);
    c.model.hidden = m.value("hidden", c.model.hidden);
    c.model.layers = m.value("layers", c.model.layers);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.data.n_per_condition = d.value("n_per_condition", c.data.n_per_condition);
    c.data.tasks = d.value("tasks", c.data.tasks);
    if (d.contains("depth")) {
      const auto& dd = d.at("depth");
      c.data.depth.min_len = dd.value("min_len", c.data.depth.min_len);
      c.data.depth.max_len = dd.value("max_len", c.data.depth.max_len);
      c.data.depth.per_length = dd.value("per_length", c.data.depth.per_length);
      c.data.depth.pos_min = dd.value("pos_min", c.data.depth.pos_min);
      c.data.depth.pos_max = dd.value("pos_max", c.data.depth.pos_max);
      c.data.depth.depth_min = dd.value("depth_min", c.data.depth.depth_min);
      c.data.depth.depth_max = dd.value("depth_max", c.data.depth.depth_max);
    }
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.train.corpus_sentences = t.value("corpus_sentences", c.train.corpus_sentences);
    c.train.depth_fraction = t.value("depth_fraction", c.train.depth_fraction);
    c.train.lexicon_split = t.value("lexicon_split", c.train.lexicon_split);
    c.train.plural_bias = t.value("plural_bias", c.train.plural_bias);
    c.train.lr = t.value("lr", c.train.lr);
    c.train.batch = t.value("batch", c.train.batch);
    c.train.bptt = t.value("bptt", c.train.bptt);
    c.train.clip_norm = t.value("clip_norm", c.train.clip_norm);
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.val_fraction = t.value("val_fraction", c.train.val_fraction);
    c.train.lr_decay = t.value("lr_decay", c.train.lr_decay);
  }
  if (j.contains("analysis")) {
    const auto& a = j.at("analysis");
    c.analysis.ablation_threshold =
        a.value("ablation_threshold", c.analysis.ablation_threshold);
    c.analysis.lr_drop = a.value("lr_drop", c.analysis.lr_drop);
    c.analysis.lr_opposite = a.value("lr_opposite", c.analysis.lr_opposite);
    c.analysis.n_random = a.value("n_random", c.analysis.n_random);
    c.analysis.perm_per_condition =
        a.value("perm_per_condition", c.analysis.perm_per_condition);
    c.analysis.trace_per_condition =
        a.value("trace_per_condition", c.analysis.trace_per_condition);
    c.analysis.sr_auc_threshold =
        a.value("sr_auc_threshold", c.analysis.sr_auc_threshold);
    c.analysis.cv_folds = a.value("cv_folds", c.analysis.cv_folds);
    c.analysis.gat_feature = a.value("gat_feature", c.analysis.gat_feature);
    c.analysis.afferents_include_lower =
        a.value("afferents_include_lower", c.analysis.afferents_include_lower);
    c.analysis.z_threshold = a.value("z_threshold", c.analysis.z_threshold);
    c.analysis.outlier_sd = a.value("outlier_sd", c.analysis.outlier_sd);
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& p) {
  return from_json(json::parse(read_file(p)));
}

std::string RunConfig::config_hash() const {
  json j = to_json();
  j.erase("out");   // the output location does not affect results
  j.erase("jobs");  // neither does the worker count
  return hex64(fnv1a(j.dump()));
}

std::vector<TemplateId> RunConfig::task_ids() const {
  std::vector<TemplateId> ids;
  if (data.tasks.empty()) return default_tasks();
  for (const auto& name : data.tasks) {
    auto t = template_from_name(name);
    if (!t) throw std::invalid_argument("unknown task name: " + name);
    ids.push_back(*t);
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Stage machinery
// ---------------------------------------------------------------------------

namespace {

fs::path marker_path(const RunConfig& cfg, const std::string& stage) {
  return fs::path(cfg.out) / ".stages" / (stage + ".json");
}

std::string input_hash(const RunConfig& cfg, const std::vector<fs::path>& inputs,
                       const std::string& stage) {
  uint64_t h = fnv1a(kToolVersion);
  h = fnv1a(cfg.config_hash(), h);
  for (const auto& p : inputs) {
    if (!fs::exists(p))
      throw std::runtime_error("stage '" + stage + "' needs missing input " +
                               p.string() + " (run earlier stages first)");
    h = fnv1a(read_file(p), h);
  }
  return hex64(h);
}

// Returns false when the stage is current and can be skipped.
bool begin_stage(const RunConfig& cfg, const StageOptions& opt, std::ostream& log,
                 const std::string& stage, const std::vector<fs::path>& inputs,
                 const std::vector<fs::path>& outputs, std::string& hash) {
  if (opt.dry_run) {
    log << "[plan] " << stage << "\n";
    return false;
  }
  write_file(fs::path(cfg.out) / "config.json",
             [&] {
               json j = cfg.to_json();
               j["tool_version"] = kToolVersion;
               j["config_hash"] = cfg.config_hash();
               return j.dump(1);
             }());
  hash = input_hash(cfg, inputs, stage);
  if (!opt.force && fs::exists(marker_path(cfg, stage))) {
    try {
      json m = json::parse(read_file(marker_path(cfg, stage)));
      if (m.value("input_hash", "") == hash) {
        bool all = true;
        for (const auto& o : m.at("outputs"))
          all = all && fs::exists(fs::path(o.get<std::string>()));
        if (all) {
          log << "[skip] " << stage << " (up to date)\n";
          return false;
        }
      }
    } catch (const std::exception&) {
      // corrupt marker: fall through and rerun
    }
  }
  log << "[run ] " << stage << "\n";
  return true;
}

void end_stage(const RunConfig& cfg, const std::string& stage,
               const std::string& hash, const std::vector<fs::path>& outputs) {
  json m;
  m["input_hash"] = hash;
  json outs = json::array();
  for (const auto& o : outputs) outs.push_back(o.string());
  m["outputs"] = outs;
  write_file(marker_path(cfg, stage), m.dump(1));
}

json meta_json(const RunConfig& cfg) {
  return {{"tool", "lstmlens"},
          {"version", kToolVersion},
          {"config_hash", cfg.config_hash()},
          {"seed", cfg.seed}};
}

void stamp_csv(const fs::path& p, const RunConfig& cfg) {
  write_file(p, "# lstmlens " + std::string(kToolVersion) + " config=" +
                    cfg.config_hash() + " seed=" + std::to_string(cfg.seed) +
                    "\n" + read_file(p));
}

void stamp_json(const fs::path& p, const RunConfig& cfg) {
  json j = json::parse(read_file(p));
  if (j.is_array()) j = json{{"items", j}};
  j["meta"] = meta_json(cfg);
  write_file(p, j.dump(1));
}

void stamp_svg(const fs::path& p, const RunConfig& cfg) {
  write_file(p, "<!-- lstmlens " + std::string(kToolVersion) + " config=" +
                    cfg.config_hash() + " seed=" + std::to_string(cfg.seed) +
                    " -->\n" + read_file(p));
}

Model load_model(const RunConfig& cfg) {
  return load_checkpoint(RunArtifacts{cfg.out}.checkpoint_path());
}

std::vector<std::string> unit_names(const std::vector<UnitRef>& units) {
  std::vector<std::string> out;
  for (const auto& u : units) out.push_back(u.display());
  return out;
}

std::vector<UnitRef> parse_units(const json& arr) {
  std::vector<UnitRef> out;
  for (const auto& s : arr) {
    auto u = parse_unit(s.get<std::string>());
    if (!u) throw std::runtime_error("bad unit in artifact: " + s.get<std::string>());
    out.push_back(*u);
  }
  return out;
}

struct IdentifiedUnits {
  std::vector<UnitRef> lr_singular, lr_plural, sr, syntax;
  bool lr_strict = true;
};

IdentifiedUnits load_identified(const RunArtifacts& art, bool need_sr,
                                bool need_syntax) {
  IdentifiedUnits u;
  json lr = json::parse(read_file(art.analysis("lr_units.json")));
  u.lr_singular = parse_units(lr.at("singular"));
  u.lr_plural = parse_units(lr.at("plural"));
  u.lr_strict = lr.value("strict", true);
  if (need_sr) {
    json sr = json::parse(read_file(art.analysis("sr_units.json")));
    u.sr = parse_units(sr.at("flagged"));
  }
  if (need_syntax) {
    json sy = json::parse(read_file(art.analysis("syntax_units.json")));
    u.syntax = parse_units(sy.at("units"));
  }
  return u;
}

// Primary LR pair: the strongest identified unit per number.
std::vector<UnitRef> lr_pair(const IdentifiedUnits& u) {
  std::vector<UnitRef> out;
  if (!u.lr_singular.empty()) out.push_back(u.lr_singular.front());
  if (!u.lr_plural.empty()) out.push_back(u.lr_plural.front());
  return out;
}

std::string condition_color(const std::string& label) {
  return label[0] == 'S' ? "#c62828" : "#1565c0";
}
bool condition_dashed(const std::string& label) {
  return label.size() > 1 && label[1] != label[0];
}

TraceFeature gat_feature_of(const RunConfig& cfg) {
  return cfg.analysis.gat_feature == "h" ? TraceFeature::Hidden
                                         : TraceFeature::CellState;
}

}  // namespace

StimulusSet subsample_per_condition(const StimulusSet& set, int k) {
  StimulusSet out;
  out.task = set.task;
  out.condition_labels = set.condition_labels;
  std::map<std::string, int> taken;
  for (const auto& st : set.stimuli) {
    if (taken[st.condition.label()] < k) {
      out.stimuli.push_back(st);
      taken[st.condition.label()]++;
    }
  }
  return out;
}

StimulusSet merge_sets(const std::vector<StimulusSet>& sets,
                       const std::string& name) {
  StimulusSet out;
  out.task = name;
  std::set<std::string> seen;
  for (const auto& s : sets) {
    for (const auto& lbl : s.condition_labels)
      if (seen.insert(lbl).second) out.condition_labels.push_back(lbl);
    out.stimuli.insert(out.stimuli.end(), s.stimuli.begin(), s.stimuli.end());
  }
  return out;
}

StimulusSet filter_conditions(const StimulusSet& set,
                              const std::vector<std::string>& labels) {
  StimulusSet out;
  out.task = set.task;
  out.condition_labels = labels;
  for (const auto& st : set.stimuli)
    if (std::find(labels.begin(), labels.end(), st.condition.label()) !=
        labels.end())
      out.stimuli.push_back(st);
  return out;
}

std::vector<double> corpus_log_frequencies(const std::vector<std::string>& lines,
                                           const Vocab& vocab) {
  std::vector<long> counts(vocab.tokens.size(), 0);
  for (const auto& line : lines)
    for (const auto& tok : split(line, ' '))
      if (!tok.empty())
        if (auto id = vocab.find(tok)) counts[*id]++;
  std::vector<double> out(counts.size());
  for (size_t i = 0; i < counts.size(); ++i)
    out[i] = std::log1p(static_cast<double>(counts[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void stage_gen_data(const RunConfig& cfg, const StageOptions& opt,
                    std::ostream& log) {
  RunArtifacts art{cfg.out};
  std::vector<fs::path> outputs = {art.corpus_path(), art.vocab_path(),
                                   art.depth_path(), art.manifest_path()};
  for (TemplateId t : cfg.task_ids()) outputs.push_back(art.task_path(template_name(t)));
  outputs.push_back(art.task_path("subjRel"));
  outputs.push_back(art.task_path("doubleSubjRel"));

  std::string hash;
  if (!begin_stage(cfg, opt, log, "gen-data", {}, outputs, hash)) return;

  const Lexicon lex = Lexicon::eval_default();
  json manifest;
  json task_counts = json::object();
  for (TemplateId t : cfg.task_ids()) {
    StimulusSet set = generate_na_task(t, lex, cfg.data.n_per_condition, cfg.seed);
    write_stimulus_jsonl(set, art.task_path(set.task));
    json counts = json::object();
    for (const auto& lbl : set.condition_labels) {
      int n = 0;
      for (const auto& st : set.stimuli) n += st.condition.label() == lbl ? 1 : 0;
      counts[lbl] = n;
    }
    task_counts[set.task] = counts;
  }
  // Relative-clause templates are generated for trace visualization only.
  for (TemplateId t : {TemplateId::SubjRel, TemplateId::DoubleSubjRel}) {
    StimulusSet set =
        generate_na_task(t, lex, cfg.analysis.trace_per_condition, cfg.seed);
    write_stimulus_jsonl(set, art.task_path(set.task));
  }

  CorpusConfig cc;
  cc.n_sentences = cfg.train.corpus_sentences;
  cc.depth_fraction = cfg.train.depth_fraction;
  cc.split = cfg.train.lexicon_split == "disjoint" ? LexiconSplit::Disjoint
                                                   : LexiconSplit::Shared;
  cc.plural_bias = cfg.train.plural_bias;
  Corpus corpus = generate_training_corpus(lex, cc, cfg.seed);
  {
    std::ostringstream body;
    for (const auto& line : corpus.lines) body << line << "\n";
    write_file(art.corpus_path(), body.str());
  }
  write_vocab(corpus.vocab, art.vocab_path());

  DepthDataset ds =
      generate_depth_dataset(cfg.data.depth, corpus_content_lexicon(lex, cc.split),
                             cfg.seed);
  write_depth_jsonl(ds, art.depth_path());
  if (!ds.empty_cells.empty()) {
    log << "[warn] depth dataset: " << ds.empty_cells.size()
        << " unreachable position x depth cells:";
    for (const auto& c : ds.empty_cells)
      log << " (" << c.position << "," << c.depth << ")";
    log << "\n";
  }

  manifest["tasks"] = task_counts;
  manifest["corpus_sentences"] = static_cast<int>(corpus.lines.size());
  manifest["vocab_size"] = static_cast<int>(corpus.vocab.tokens.size());
  json depth = json::object();
  depth["sentences"] = static_cast<int>(ds.sentences.size());
  depth["retained_points"] = static_cast<int>(ds.n_retained());
  depth["position_depth_correlation"] = ds.position_depth_correlation;
  json empty = json::array();
  for (const auto& c : ds.empty_cells) empty.push_back({c.position, c.depth});
  depth["empty_cells"] = empty;
  manifest["depth"] = depth;
  manifest["meta"] = meta_json(cfg);
  write_file(art.manifest_path(), manifest.dump(1));

  end_stage(cfg, "gen-data", hash, outputs);
}

void stage_train(const RunConfig& cfg, const StageOptions& opt, std::ostream& log) {
  RunArtifacts art{cfg.out};
  std::vector<fs::path> inputs = {art.corpus_path(), art.vocab_path()};
  std::vector<fs::path> outputs = {art.checkpoint_path(), art.train_log_path()};
  std::string hash;
  if (!begin_stage(cfg, opt, log, "train", inputs, outputs, hash)) return;

  Vocab vocab = read_vocab(art.vocab_path());
  auto sentences = tokenize_lines(read_lines(art.corpus_path()), vocab);

  Dims dims;
  dims.vocab = static_cast<int>(vocab.tokens.size());
  dims.embed = cfg.model.embed;
  dims.hidden = cfg.model.hidden;
  dims.layers = cfg.model.layers;
  Model init = init_model(dims, vocab, cfg.seed);

  TrainConfig tc;
  tc.lr = cfg.train.lr;
  tc.batch = cfg.train.batch;
  tc.bptt = cfg.train.bptt;
  tc.clip_norm = cfg.train.clip_norm;
  tc.epochs = cfg.train.epochs;
  tc.seed = cfg.seed;
  tc.val_fraction = cfg.train.val_fraction;
  tc.lr_decay = cfg.train.lr_decay;

  TrainResult res = train(init, sentences, tc);
  save_checkpoint(res.model, art.checkpoint_path());
  {
    std::ostringstream body;
    body << "epoch,train_ppl,val_ppl,lr\n";
    for (const auto& e : res.log)
      body << e.epoch << ',' << fmt_double(e.train_ppl) << ','
           << fmt_double(e.val_ppl) << ',' << fmt_double(e.lr) << '\n';
    write_file(art.train_log_path(), body.str());
    stamp_csv(art.train_log_path(), cfg);
  }
  for (const auto& e : res.log)
    log << "  epoch " << e.epoch << " train_ppl=" << e.train_ppl
        << " val_ppl=" << e.val_ppl << " lr=" << e.lr << "\n";
  end_stage(cfg, "train", hash, outputs);
}

void stage_eval(const RunConfig& cfg, const StageOptions& opt, std::ostream& log) {
  RunArtifacts art{cfg.out};
  std::vector<fs::path> inputs = {art.checkpoint_path()};
  for (TemplateId t : cfg.task_ids()) inputs.push_back(art.task_path(template_name(t)));
  std::vector<fs::path> outputs = {art.analysis("accuracy.csv"),
                                   art.analysis("accuracy.json")};
  std::string hash;
  if (!begin_stage(cfg, opt, log, "eval", inputs, outputs, hash)) return;

  Model model = load_model(cfg);
  std::vector<ConditionAccuracy> all;
  for (TemplateId t : cfg.task_ids()) {
    StimulusSet set = read_stimulus_jsonl(art.task_path(template_name(t)));
    auto acc = task_accuracy(model, set, AblationMask{});
    all.insert(all.end(), acc.begin(), acc.end());
  }
  write_accuracy_csv(all, art.analysis("accuracy.csv"));
  stamp_csv(art.analysis("accuracy.csv"), cfg);
  {
    json arr = json::array();
    for (const auto& a : all)
      arr.push_back({{"task", a.task},
                     {"condition", a.condition},
                     {"n", a.n},
                     {"accuracy", a.accuracy}});
    json j;
    j["accuracy"] = arr;
    write_file(art.analysis("accuracy.json"), j.dump(1));
    stamp_json(art.analysis("accuracy.json"), cfg);
  }
  for (const auto& a : all)
    log << "  " << a.task << ' ' << a.condition << " n=" << a.n
        << " acc=" << a.accuracy << "\n";
  end_stage(cfg, "eval", hash, outputs);
}

void stage_ablate(const RunConfig& cfg, const StageOptions& opt, std::ostream& log) {
  RunArtifacts art{cfg.out};
  std::vector<fs::path> inputs = {art.checkpoint_path()};
  for (TemplateId t : cfg.task_ids()) inputs.push_back(art.task_path(template_name(t)));
  std::vector<fs::path> outputs = {art.analysis("sweep.csv"),
                                   art.analysis("sweep.json"),
                                   art.analysis("lr_units.json")};
  std::string hash;
  if (!begin_stage(cfg, opt, log, "ablate", inputs, outputs, hash)) return;

  Model model = load_model(cfg);
  std::vector<StimulusSet> tasks;
  for (TemplateId t : cfg.task_ids())
    tasks.push_back(read_stimulus_jsonl(art.task_path(template_name(t))));

  SweepResult sweep = ablation_sweep(model, tasks, cfg.analysis.ablation_threshold);
  write_sweep_csv(sweep, art.analysis("sweep.csv"));
  stamp_csv(art.analysis("sweep.csv"), cfg);
  write_sweep_json(sweep, art.analysis("sweep.json"));
  stamp_json(art.analysis("sweep.json"), cfg);

  LrUnits lr = identify_lr_units(sweep, "nounPP", cfg.analysis.lr_drop,
                                 cfg.analysis.lr_opposite);
  // Downstream stages read efferent weights, which only exist for the top
  // layer: list qualifying top-layer units first within each number.
  const int top = model.dims.layers - 1;
  auto prefer_top = [top](std::vector<UnitRef>& units) {
    std::stable_partition(units.begin(), units.end(),
                          [top](const UnitRef& u) { return u.layer == top; });
  };
  prefer_top(lr.singular);
  prefer_top(lr.plural);
  bool strict = !lr.singular.empty() && !lr.plural.empty();
  if (!strict) {
    // Fallback: strongest incongruent-drop unit per number, so downstream
    // stages always have a unit to look at. The strict flag records this.
    UnitRef best_s{}, best_p{};
    double ds = -1e18, dp = -1e18;
    for (const auto& eff : sweep.effects) {
      for (const auto& e : eff.entries) {
        if (e.task != "nounPP") continue;
        if (e.condition == "SP" && e.delta > ds) { ds = e.delta; best_s = eff.unit; }
        if (e.condition == "PS" && e.delta > dp) { dp = e.delta; best_p = eff.unit; }
      }
    }
    if (lr.singular.empty()) lr.singular.push_back(best_s);
    if (lr.plural.empty()) lr.plural.push_back(best_p);
  }
  {
    json j;
    j["singular"] = unit_names(lr.singular);
    j["plural"] = unit_names(lr.plural);
    j["strict"] = strict;
    j["drop_points"] = cfg.analysis.lr_drop;
    j["opposite_points"] = cfg.analysis.lr_opposite;
    write_file(art.analysis("lr_units.json"), j.dump(1));
    stamp_json(art.analysis("lr_units.json"), cfg);
  }
  log << "  LR singular:";
  for (const auto& u : lr.singular) log << ' ' << u.display();
  log << "  | LR plural:";
  for (const auto& u : lr.plural) log << ' ' << u.display();
  log << (strict ? "" : "  (fallback, strict rule matched nothing)") << "\n";
  end_stage(cfg, "ablate", hash, outputs);
}

void stage_gat(const RunConfig& cfg, const StageOptions& opt, std::ostream& log) {
  RunArtifacts art{cfg.out};
  std::vector<fs::path> inputs = {art.checkpoint_path(), art.task_path("nounPP"),
                                  art.analysis("lr_units.json")};
  std::vector<fs::path> outputs = {art.analysis("gat.json"), art.analysis("gat.csv"),
                                   art.analysis("sr_units.json"),
                                   art.plot("gat.svg")};
  std::string hash;
  if (!begin_stage(cfg, opt, log, "gat", inputs, outputs, hash)) return;

  Model model = load_model(cfg);
  IdentifiedUnits ids = load_identified(art, false, false);
  StimulusSet nounpp = read_stimulus_jsonl(art.task_path("nounPP"));
  StimulusSet incong = filter_conditions(nounpp, {"SP", "PS"});
  if (incong.stimuli.empty())
    throw std::runtime_error("gat: no incongruent nounPP stimuli");
  const int train_time = incong.stimuli.front().subject_pos;

  std::vector<UnitRef> all_lr;
  for (const auto& u : ids.lr_singular) all_lr.push_back(u);
  for (const auto& u : ids.lr_plural) all_lr.push_back(u);

  DecoderOptions dopts;
  std::vector<GatSeries> series;
  {
    UnitSelection sel;
    sel.name = "full-minus-lr";
    sel.exclude = all_lr;
    series.push_back(gat_analysis(model, incong, sel, gat_feature_of(cfg),
                                  train_time, cfg.analysis.cv_folds, dopts,
                                  cfg.seed));
  }
  for (const UnitRef& u : lr_pair(ids)) {
    UnitSelection sel;
    sel.name = "lr-" + u.display();
    sel.units = {u};
    series.push_back(gat_analysis(model, incong, sel, gat_feature_of(cfg),
                                  train_time, cfg.analysis.cv_folds, dopts,
                                  cfg.seed));
  }

  write_gat_json(series, cfg.seed, art.analysis("gat.json"));
  stamp_json(art.analysis("gat.json"), cfg);
  write_gat_csv(series, art.analysis("gat.csv"));
  stamp_csv(art.analysis("gat.csv"), cfg);

  {
    LinePlotOptions po;
    po.title = "Subject-number decoding across time (nounPP incongruent)";
    po.y_label = "AUC";
    po.y_min = 0.0;
    po.y_max = 1.05;
    po.h_lines = {0.5};
    po.x_labels = incong.stimuli.front().tokens;
    std::vector<PlotSeries> ps;
    const char* colors[] = {"#444444", "#c62828", "#1565c0", "#2e7d32"};
    for (size_t i = 0; i < series.size(); ++i) {
      PlotSeries s;
      s.label = series[i].name;
      s.y = series[i].mean_auc;
      s.sd = series[i].sd_auc;
      s.color = colors[i % 4];
      ps.push_back(s);
    }
    write_line_plot_svg(ps, po, art.plot("gat.svg"));
    stamp_svg(art.plot("gat.svg"), cfg);
  }

  auto sr_info = identify_sr_units(model, incong, cfg.analysis.sr_auc_threshold);
  std::vector<UnitRef> flagged;
  json sr_arr = json::array();
  for (const auto& info : sr_info) {
    const bool is_lr =
        std::find(all_lr.begin(), all_lr.end(), info.unit) != all_lr.end();
    if (info.flagged && !is_lr) flagged.push_back(info.unit);
    if (info.flagged || info.auc_subject > 0.8)
      sr_arr.push_back({{"unit", info.unit.display()},
                        {"auc_subject", info.auc_subject},
                        {"auc_after_intervener", info.auc_after_intervener},
                        {"swap", info.swap},
                        {"flagged", info.flagged && !is_lr},
                        {"is_lr", is_lr}});
  }
  {
    json j;
    j["flagged"] = unit_names(flagged);
    j["auc_threshold"] = cfg.analysis.sr_auc_threshold;
    j["details"] = sr_arr;
    write_file(art.analysis("sr_units.json"), j.dump(1));
    stamp_json(art.analysis("sr_units.json"), cfg);
  }
  log << "  SR units flagged: " << flagged.size() << "\n";
  end_stage(cfg, "gat", hash, outputs);
}

void stage_depth(const RunConfig& cfg, const StageOptions& opt, std::ostream& log) {
  RunArtifacts art{cfg.out};
  std::vector<fs::path> inputs = {art.checkpoint_path(), art.depth_path(),
                                  art.corpus_path(), art.vocab_path(),
                                  art.task_path("nounPP")};
  std::vector<fs::path> outputs = {art.analysis("depth_regression.json"),
                                   art.analysis("syntax_units.json"),
                                   art.analysis("perm_syntax.json")};
  std::string hash;
  if (!begin_stage(cfg, opt, log, "depth", inputs, outputs, hash)) return;

  Model model = load_model(cfg);
  DepthDataset ds = read_depth_jsonl(art.depth_path());
  Vocab vocab = read_vocab(art.vocab_path());
  auto freq = corpus_log_frequencies(read_lines(art.corpus_path()), vocab);

  DepthRegressionOptions dopts;
  dopts.outer_folds = cfg.analysis.cv_folds;
  dopts.outlier_sd = cfg.analysis.outlier_sd;
  DepthRegressionResult res = depth_regression(model, ds, freq, dopts, cfg.seed);
  write_depth_regression_json(res, model.dims.hidden, cfg.seed,
                              art.analysis("depth_regression.json"));
  stamp_json(art.analysis("depth_regression.json"), cfg);

  {
    json j;
    j["units"] = unit_names(res.outliers);
    j["weights"] = res.outlier_weights;
    j["sd_cutoff"] = cfg.analysis.outlier_sd;
    write_file(art.analysis("syntax_units.json"), j.dump(1));
    stamp_json(art.analysis("syntax_units.json"), cfg);
  }
  log << "  depth R2 = " << res.r2_mean << " +- " << res.r2_sd
      << " (delta over frequency-only: " << res.delta_r2 << "), "
      << res.outliers.size() << " syntax units\n";

  // Causal check: group-ablate the syntax units on the incongruent nounPP
  // conditions.
  if (!res.outliers.empty()) {
    StimulusSet nounpp = read_stimulus_jsonl(art.task_path("nounPP"));
    StimulusSet incong = subsample_per_condition(
        filter_conditions(nounpp, {"SP", "PS"}), cfg.analysis.perm_per_condition);
    incong.task = "nounPP-incongruent";
    PermutationTestResult pr = permutation_group_ablation(
        model, res.outliers, incong, cfg.analysis.n_random, cfg.seed + 3);
    write_permutation_json(pr, art.analysis("perm_syntax.json"));
    stamp_json(art.analysis("perm_syntax.json"), cfg);
    log << "  syntax-unit group ablation: p = " << pr.p_value << "\n";
  } else {
    json j;
    j["skipped"] = "no syntax units identified";
    write_file(art.analysis("perm_syntax.json"), j.dump(1));
    stamp_json(art.analysis("perm_syntax.json"), cfg);
  }
  end_stage(cfg, "depth", hash, outputs);
}

void stage_perm(const RunConfig& cfg, const StageOptions& opt, std::ostream& log) {
  RunArtifacts art{cfg.out};
  std::vector<fs::path> inputs = {art.checkpoint_path(), art.task_path("Simple"),
                                  art.task_path("Adv"), art.task_path("2Adv"),
                                  art.analysis("lr_units.json"),
                                  art.analysis("sr_units.json")};
  std::vector<fs::path> outputs = {art.analysis("perm_sr_lr.json"),
                                   art.analysis("perm_sr_only.json")};
  std::string hash;
  if (!begin_stage(cfg, opt, log, "perm", inputs, outputs, hash)) return;

  Model model = load_model(cfg);
  IdentifiedUnits ids = load_identified(art, true, false);

  std::vector<StimulusSet> easy;
  for (const char* t : {"Simple", "Adv", "2Adv"})
    easy.push_back(subsample_per_condition(read_stimulus_jsonl(art.task_path(t)),
                                           cfg.analysis.perm_per_condition));
  StimulusSet suite = merge_sets(easy, "easy-suite");

  auto run_test = [&](const std::vector<UnitRef>& units, const fs::path& out,
                      const char* name, uint64_t salt) {
    if (units.empty()) {
      json j;
      j["skipped"] = std::string("no units identified for ") + name;
      write_file(out, j.dump(1));
      stamp_json(out, cfg);
      log << "  " << name << ": skipped (no units)\n";
      return;
    }
    PermutationTestResult pr = permutation_group_ablation(
        model, units, suite, cfg.analysis.n_random, cfg.seed + salt);
    write_permutation_json(pr, out);
    stamp_json(out, cfg);
    log << "  " << name << ": observed=" << pr.observed << " p=" << pr.p_value
        << "\n";
  };

  std::vector<UnitRef> sr_lr = ids.sr;
  for (const UnitRef& u : lr_pair(ids))
    if (std::find(sr_lr.begin(), sr_lr.end(), u) == sr_lr.end()) sr_lr.push_back(u);

  run_test(sr_lr, art.analysis("perm_sr_lr.json"), "SR+LR group ablation", 1);
  run_test(ids.sr, art.analysis("perm_sr_only.json"), "SR-only group ablation", 2);
  end_stage(cfg, "perm", hash, outputs);
}

void stage_connectivity(const RunConfig& cfg, const StageOptions& opt,
                        std::ostream& log) {
  RunArtifacts art{cfg.out};
  std::vector<fs::path> inputs = {art.checkpoint_path(), art.task_path("nounPP"),
                                  art.analysis("lr_units.json"),
                                  art.analysis("sr_units.json"),
                                  art.analysis("syntax_units.json")};
  std::vector<fs::path> outputs = {
      art.analysis("efferent.json"),  art.analysis("efferent.csv"),
      art.analysis("afferent.json"),  art.analysis("afferent.csv"),
      art.analysis("mutual_inhibition.json"), art.plot("efferent.svg"),
      art.plot("afferent_input.svg"), art.plot("afferent_forget.svg")};
  std::string hash;
  if (!begin_stage(cfg, opt, log, "connectivity", inputs, outputs, hash)) return;

  Model model = load_model(cfg);
  IdentifiedUnits ids = load_identified(art, true, true);
  const Lexicon lex = Lexicon::eval_default();
  const int top = model.dims.layers - 1;

  StimulusSet nounpp = read_stimulus_jsonl(art.task_path("nounPP"));
  StimulusSet ref_set =
      subsample_per_condition(nounpp, cfg.analysis.perm_per_condition);
  std::vector<std::vector<int>> seqs;
  std::vector<std::pair<int, int>> spans;
  for (const auto& st : ref_set.stimuli) {
    std::vector<int> s;
    for (const auto& tok : st.tokens) s.push_back(model.vocab.id(tok));
    seqs.push_back(std::move(s));
    spans.emplace_back(st.subject_pos, st.verb_pos);
  }
  auto traces = collect_traces(model, seqs, AblationMask{}, false, true);

  // Efferent profiles: the LR pair, the top syntax unit if it lives in the
  // top layer, and two arbitrary unflagged units.
  std::vector<UnitRef> pair = lr_pair(ids);
  std::set<UnitRef> flagged(pair.begin(), pair.end());
  for (const auto& u : ids.lr_singular) flagged.insert(u);
  for (const auto& u : ids.lr_plural) flagged.insert(u);
  for (const auto& u : ids.sr) flagged.insert(u);
  for (const auto& u : ids.syntax) flagged.insert(u);

  std::vector<UnitRef> profile_units;
  for (const auto& u : pair) {
    if (u.layer == top)
      profile_units.push_back(u);
    else
      log << "  note: " << u.display()
          << " is not in the top layer; no efferent column exists for it\n";
  }
  for (const auto& u : ids.syntax)
    if (u.layer == top) {
      profile_units.push_back(u);
      break;
    }
  {
    Rng rng = Rng::derive(cfg.seed, "efferent-random");
    std::vector<UnitRef> pool;
    for (int u = 0; u < model.dims.hidden; ++u) {
      UnitRef r{top, u};
      if (!flagged.count(r)) pool.push_back(r);
    }
    for (int k = 0; k < 2 && !pool.empty(); ++k) {
      size_t j = rng.below(pool.size());
      profile_units.push_back(pool[j]);
      pool.erase(pool.begin() + j);
    }
  }
  std::vector<EfferentProfile> profiles;
  for (const auto& u : profile_units)
    profiles.push_back(efferent_profile(model, u, lex));
  write_efferent_json(profiles, art.analysis("efferent.json"));
  stamp_json(art.analysis("efferent.json"), cfg);
  write_efferent_csv(profiles, art.analysis("efferent.csv"));
  stamp_csv(art.analysis("efferent.csv"), cfg);
  write_efferent_strip_svg(profiles, "Efferent weights to verb forms",
                           art.plot("efferent.svg"));
  stamp_svg(art.plot("efferent.svg"), cfg);
  for (const auto& prof : profiles)
    log << "  efferent " << prof.unit.display() << " segregation=" << prof.segregation
        << "\n";

  // Effective afferents into the LR units' input and forget gates.
  std::vector<EffectiveAfferent> afferents;
  for (const auto& u : pair)
    for (GateBlock g : {kGateI, kGateF})
      afferents.push_back(effective_afferents(model, u, g, traces,
                                              cfg.analysis.afferents_include_lower,
                                              cfg.analysis.z_threshold));
  write_afferent_json(afferents, art.analysis("afferent.json"));
  stamp_json(art.analysis("afferent.json"), cfg);
  write_afferent_csv(afferents, art.analysis("afferent.csv"));
  stamp_csv(art.analysis("afferent.csv"), cfg);
  {
    std::vector<EffectiveAfferent> in_reports, fg_reports;
    for (const auto& a : afferents)
      (a.gate == kGateI ? in_reports : fg_reports).push_back(a);
    write_afferent_strip_svg(in_reports, "Effective afferents (input gate)",
                             art.plot("afferent_input.svg"));
    stamp_svg(art.plot("afferent_input.svg"), cfg);
    write_afferent_strip_svg(fg_reports, "Effective afferents (forget gate)",
                             art.plot("afferent_forget.svg"));
    stamp_svg(art.plot("afferent_forget.svg"), cfg);
  }

  if (pair.size() == 2 && pair[0].layer == pair[1].layer) {
    MutualInhibitionReport rep =
        mutual_inhibition_check(model, pair[0], pair[1], traces, spans);
    write_mutual_json(rep, art.analysis("mutual_inhibition.json"));
    stamp_json(art.analysis("mutual_inhibition.json"), cfg);
    log << "  LR pair interaction: " << interaction_name(rep.interaction) << "\n";
  } else {
    json j;
    j["skipped"] = "LR pair unavailable or crosses layers";
    write_file(art.analysis("mutual_inhibition.json"), j.dump(1));
    stamp_json(art.analysis("mutual_inhibition.json"), cfg);
  }
  end_stage(cfg, "connectivity", hash, outputs);
}

void stage_traces(const RunConfig& cfg, const StageOptions& opt, std::ostream& log) {
  RunArtifacts art{cfg.out};
  std::vector<fs::path> inputs = {art.checkpoint_path(), art.task_path("nounPP"),
                                  art.task_path("2Adv"), art.task_path("subjRel"),
                                  art.task_path("doubleSubjRel"),
                                  art.analysis("lr_units.json"),
                                  art.analysis("syntax_units.json")};
  std::string hash;
  // Output list depends on identified units; collect while writing.
  std::vector<fs::path> outputs;

  if (opt.dry_run) {
    log << "[plan] traces\n";
    return;
  }
  {
    // begin_stage with a placeholder output list; reruns are keyed on inputs.
    if (!begin_stage(cfg, opt, log, "traces", inputs, outputs, hash)) return;
  }

  Model model = load_model(cfg);
  IdentifiedUnits ids = load_identified(art, false, true);

  auto mean_sd_series = [&](const StimulusSet& set, UnitRef unit,
                            auto accessor) {
    // per condition label: mean and SD across stimuli at each timestep
    std::map<std::string, std::vector<std::vector<double>>> bucket;
    std::vector<std::vector<int>> seqs;
    for (const auto& st : set.stimuli) {
      std::vector<int> s;
      for (const auto& tok : st.tokens) s.push_back(model.vocab.id(tok));
      seqs.push_back(std::move(s));
    }
    auto traces = collect_traces(model, seqs, AblationMask{}, false, true);
    const int T = traces.empty() ? 0 : traces.front().steps();
    for (size_t i = 0; i < traces.size(); ++i) {
      auto& rows = bucket[set.stimuli[i].condition.label()];
      rows.resize(T);
      for (int t = 0; t < T; ++t)
        rows[t].push_back(accessor(traces[i], t, unit.layer, unit.unit));
    }
    std::vector<PlotSeries> series;
    for (const auto& lbl : set.condition_labels) {
      auto it = bucket.find(lbl);
      if (it == bucket.end()) continue;
      PlotSeries s;
      s.label = lbl;
      s.color = condition_color(lbl);
      s.dashed = condition_dashed(lbl);
      for (int t = 0; t < T; ++t) {
        s.y.push_back(mean(it->second[t]));
        s.sd.push_back(sd_sample(it->second[t]));
      }
      series.push_back(s);
    }
    return series;
  };

  StimulusSet nounpp = subsample_per_condition(
      read_stimulus_jsonl(art.task_path("nounPP")), cfg.analysis.trace_per_condition);

  struct Quantity {
    const char* key;
    double (*get)(const ActivationTrace&, int, int, int);
    const char* label;
  };
  const Quantity quantities[] = {
      {"ctilde", [](const ActivationTrace& tr, int t, int l, int u) { return tr.g_at(t, l, u); }, "candidate C~"},
      {"i", [](const ActivationTrace& tr, int t, int l, int u) { return tr.i_at(t, l, u); }, "input gate"},
      {"f", [](const ActivationTrace& tr, int t, int l, int u) { return tr.f_at(t, l, u); }, "forget gate"},
      {"c", [](const ActivationTrace& tr, int t, int l, int u) { return tr.c_at(t, l, u); }, "cell state"},
      {"o", [](const ActivationTrace& tr, int t, int l, int u) { return tr.o_at(t, l, u); }, "output gate"},
  };

  for (const UnitRef& u : lr_pair(ids)) {
    for (const auto& q : quantities) {
      auto series = mean_sd_series(nounpp, u,
                                   [&](const ActivationTrace& tr, int t, int l,
                                       int uu) { return q.get(tr, t, l, uu); });
      LinePlotOptions po;
      po.title = u.display() + std::string(" ") + q.label + " (nounPP)";
      po.x_labels = nounpp.stimuli.front().tokens;
      po.y_label = q.label;
      fs::path out = art.plot("trace_" + u.display() + "_nounPP_" + q.key + ".svg");
      write_line_plot_svg(series, po, out);
      stamp_svg(out, cfg);
      outputs.push_back(out);
    }
  }

  if (!ids.syntax.empty()) {
    const UnitRef syn = ids.syntax.front();
    for (const char* task : {"2Adv", "nounPP", "subjRel", "doubleSubjRel"}) {
      StimulusSet set = subsample_per_condition(
          read_stimulus_jsonl(art.task_path(task)), cfg.analysis.trace_per_condition);
      if (set.stimuli.empty()) continue;
      auto series = mean_sd_series(set, syn,
                                   [](const ActivationTrace& tr, int t, int l,
                                      int u) { return tr.c_at(t, l, u); });
      LinePlotOptions po;
      po.title = syn.display() + std::string(" cell state (") + task + ")";
      po.x_labels = set.stimuli.front().tokens;
      po.y_label = "cell state";
      fs::path out = art.plot("trace_" + syn.display() + "_" + task + "_c.svg");
      write_line_plot_svg(series, po, out);
      stamp_svg(out, cfg);
      outputs.push_back(out);
    }
  }

  // Exemplar full-network trace export.
  {
    const Stimulus& st = nounpp.stimuli.front();
    std::vector<int> seq;
    for (const auto& tok : st.tokens) seq.push_back(model.vocab.id(tok));
    auto trace = collect_traces(model, {seq}, AblationMask{}, false, true).front();
    fs::path out = art.trace_csv("exemplar_nounPP.csv");
    write_trace_csv(trace, model.vocab, out);
    stamp_csv(out, cfg);
    outputs.push_back(out);
  }

  end_stage(cfg, "traces", hash, outputs);
}

void stage_report(const RunConfig& cfg, const StageOptions& opt, std::ostream& log) {
  RunArtifacts art{cfg.out};
  std::vector<fs::path> inputs = {
      art.analysis("accuracy.json"),      art.analysis("lr_units.json"),
      art.analysis("sr_units.json"),      art.analysis("gat.json"),
      art.analysis("depth_regression.json"), art.analysis("syntax_units.json"),
      art.analysis("perm_sr_lr.json"),    art.analysis("perm_sr_only.json"),
      art.analysis("perm_syntax.json"),   art.analysis("efferent.json"),
      art.analysis("afferent.json"),      art.analysis("mutual_inhibition.json")};
  std::vector<fs::path> outputs = {art.report_path(), art.index_path()};
  std::string hash;
  if (!begin_stage(cfg, opt, log, "report", inputs, outputs, hash)) return;

  json report;
  report["accuracy"] = json::parse(read_file(art.analysis("accuracy.json")))["accuracy"];
  json lr = json::parse(read_file(art.analysis("lr_units.json")));
  report["lr_units"] = lr;
  json sr = json::parse(read_file(art.analysis("sr_units.json")));
  report["sr_units"] = {{"flagged", sr["flagged"]}};
  json sy = json::parse(read_file(art.analysis("syntax_units.json")));
  report["syntax_units"] = sy;
  json gat = json::parse(read_file(art.analysis("gat.json")));
  report["gat"] = {{"series", gat["series"]}};
  json depth = json::parse(read_file(art.analysis("depth_regression.json")));
  report["depth"] = {{"r2_mean", depth["r2_mean"]},
                     {"r2_sd", depth["r2_sd"]},
                     {"delta_r2", depth["delta_r2"]}};
  auto pval = [&](const char* file) -> json {
    json j = json::parse(read_file(art.analysis(file)));
    if (j.contains("p_value")) return j["p_value"];
    return nullptr;
  };
  report["permutation"] = {{"sr_lr_p", pval("perm_sr_lr.json")},
                           {"sr_only_p", pval("perm_sr_only.json")},
                           {"syntax_p", pval("perm_syntax.json")}};
  json eff = json::parse(read_file(art.analysis("efferent.json")));
  json seg = json::object();
  for (const auto& prof : eff["profiles"])
    seg[prof["unit"].get<std::string>()] = prof["segregation"];
  report["efferent_segregation"] = seg;
  json mut = json::parse(read_file(art.analysis("mutual_inhibition.json")));
  report["mutual_inhibition"] =
      mut.contains("interaction") ? mut["interaction"] : json("skipped");

  // Cross-reference check: every identified LR unit must appear in the trace
  // plots and the connectivity outputs.
  std::vector<UnitRef> pair;
  for (const auto& key : {"singular", "plural"})
    if (!lr[key].empty()) {
      auto u = parse_unit(lr[key][0].get<std::string>());
      if (u) pair.push_back(*u);
    }
  for (const auto& u : pair) {
    const fs::path tp = art.plot("trace_" + u.display() + "_nounPP_c.svg");
    if (!fs::exists(tp))
      throw std::runtime_error("report: missing trace plot for " + u.display());
    if (!seg.contains(u.display()))
      throw std::runtime_error("report: missing efferent profile for " +
                               u.display());
  }
  report["meta"] = meta_json(cfg);
  write_file(art.report_path(), report.dump(1));

  // Markdown index
  std::ostringstream md;
  md << "# lstmlens run\n\n";
  md << "- tool version: " << kToolVersion << "\n";
  md << "- seed: " << cfg.seed << "\n";
  md << "- config hash: " << cfg.config_hash() << "\n\n";
  md << "## Accuracy (full model)\n\n| task | condition | n | accuracy |\n|---|---|---|---|\n";
  for (const auto& a : report["accuracy"])
    md << "| " << a["task"].get<std::string>() << " | "
       << a["condition"].get<std::string>() << " | " << a["n"] << " | "
       << a["accuracy"] << " |\n";
  md << "\n## Identified units\n\n";
  md << "- long-range singular: " << lr["singular"].dump() << "\n";
  md << "- long-range plural: " << lr["plural"].dump() << "\n";
  md << "- short-range (flagged): " << sr["flagged"].dump() << "\n";
  md << "- syntax (depth-regression outliers): " << sy["units"].dump() << "\n\n";
  md << "## Analyses\n\n";
  md << "- ablation sweep: [analysis/sweep.csv](analysis/sweep.csv), "
        "[analysis/sweep.json](analysis/sweep.json)\n";
  md << "- decoding across time: [plots/gat.svg](plots/gat.svg), "
        "[analysis/gat.csv](analysis/gat.csv)\n";
  md << "- depth regression: R2 = " << report["depth"]["r2_mean"]
     << " +- " << report["depth"]["r2_sd"] << " (delta over frequency-only "
     << report["depth"]["delta_r2"] << ") - "
     << "[analysis/depth_regression.json](analysis/depth_regression.json)\n";
  md << "- permutation tests: SR+LR p=" << report["permutation"]["sr_lr_p"]
     << ", SR-only p=" << report["permutation"]["sr_only_p"]
     << ", syntax p=" << report["permutation"]["syntax_p"] << "\n";
  md << "- efferent segregation: ";
  for (auto it = seg.begin(); it != seg.end(); ++it)
    md << it.key() << "=" << it.value() << " ";
  md << "([plots/efferent.svg](plots/efferent.svg))\n";
  md << "- afferent connectivity: [plots/afferent_input.svg](plots/afferent_input.svg), "
        "[plots/afferent_forget.svg](plots/afferent_forget.svg)\n";
  md << "- LR pair interaction: " << report["mutual_inhibition"] << "\n\n";
  md << "## Trace plots\n\n";
  for (const auto& u : pair)
    md << "- " << u.display() << ": plots/trace_" << u.display()
       << "_nounPP_{ctilde,i,f,c,o}.svg\n";
  md << "\nAll artifacts live under `data/`, `model/`, `analysis/`, `plots/`, "
        "`traces/`.\n";
  write_file(art.index_path(), md.str());

  end_stage(cfg, "report", hash, outputs);
}

std::vector<std::string> pipeline_stage_names() {
  return {"gen-data", "train", "eval",         "ablate", "gat",
          "depth",    "perm",  "connectivity", "traces", "report"};
}

void run_pipeline(const RunConfig& cfg, const StageOptions& opt, std::ostream& log) {
  set_max_threads(cfg.jobs);
  using StageFn = void (*)(const RunConfig&, const StageOptions&, std::ostream&);
  const std::pair<const char*, StageFn> stages[] = {
      {"gen-data", stage_gen_data}, {"train", stage_train},
      {"eval", stage_eval},         {"ablate", stage_ablate},
      {"gat", stage_gat},           {"depth", stage_depth},
      {"perm", stage_perm},         {"connectivity", stage_connectivity},
      {"traces", stage_traces},     {"report", stage_report}};
  for (const auto& [name, fn] : stages) {
    try {
      fn(cfg, opt, log);
    } catch (const std::exception& e) {
      throw std::runtime_error("pipeline stage '" + std::string(name) +
                               "' failed: " + e.what());
    }
  }
}

PipelineSummary load_summary(const RunConfig& cfg) {
  RunArtifacts art{cfg.out};
  json report = json::parse(read_file(art.report_path()));
  PipelineSummary s;
  for (const auto& a : report.at("accuracy"))
    s.baseline.push_back({a.at("task").get<std::string>(),
                          a.at("condition").get<std::string>(),
                          a.at("n").get<int>(), a.at("accuracy").get<double>()});
  s.lr_singular = parse_units(report.at("lr_units").at("singular"));
  s.lr_plural = parse_units(report.at("lr_units").at("plural"));
  s.lr_strict = report.at("lr_units").value("strict", true);
  s.sr_flagged = parse_units(report.at("sr_units").at("flagged"));
  s.syntax_units = parse_units(report.at("syntax_units").at("units"));
  for (const auto& g : report.at("gat").at("series")) {
    GatSeries gs;
    gs.name = g.at("name").get<std::string>();
    gs.train_time = g.at("train_time").get<int>();
    gs.mean_auc = g.at("mean_auc").get<std::vector<double>>();
    gs.sd_auc = g.at("sd_auc").get<std::vector<double>>();
    s.gat_series.push_back(std::move(gs));
  }
  auto p_of = [&](const char* key) {
    const json& v = report.at("permutation").at(key);
    return v.is_null() ? 1.0 : v.get<double>();
  };
  s.perm_sr_lr_p = p_of("sr_lr_p");
  s.perm_sr_only_p = p_of("sr_only_p");
  s.perm_syntax_p = p_of("syntax_p");
  s.depth_r2_mean = report.at("depth").at("r2_mean").get<double>();
  s.depth_r2_sd = report.at("depth").at("r2_sd").get<double>();
  s.depth_delta_r2 = report.at("depth").at("delta_r2").get<double>();
  for (auto it = report.at("efferent_segregation").begin();
       it != report.at("efferent_segregation").end(); ++it)
    s.efferent_segregation.emplace_back(it.key(), it.value().get<double>());
  s.mutual_interaction = report.at("mutual_inhibition").is_string()
                             ? report.at("mutual_inhibition").get<std::string>()
                             : "skipped";
  StimulusSet nounpp = read_stimulus_jsonl(art.task_path("nounPP"));
  if (!nounpp.stimuli.empty()) {
    s.nounpp_subject_pos = nounpp.stimuli.front().subject_pos;
    s.nounpp_verb_pos = nounpp.stimuli.front().verb_pos;
    s.nounpp_intervener_pos = nounpp.stimuli.front().intervening_pos.value_or(0);
  }
  return s;
}

}  // namespace lens
