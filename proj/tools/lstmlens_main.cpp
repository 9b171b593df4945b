// Command-line front end: batch pipeline plus individual analysis stages.
//
// All stage subcommands operate on a run directory (--out) with the layout
//   data/ model/ analysis/ plots/ traces/
// and skip work whose inputs have not changed. `eval`, `perm-test` and
// `traces` additionally support ad-hoc use on explicit files, which is how
// externally converted checkpoints are analyzed without a full run.

#include <iostream>

#include "CLI11.hpp"
#include "lens/agreement.hpp"
#include "lens/parallel.hpp"
#include "lens/pipeline.hpp"
#include "lens/util.hpp"

using namespace lens;

namespace {

struct CommonFlags {
  std::string config_file;
  uint64_t seed = 0;
  std::string out;
  int jobs = -1;
  bool force = false;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* jobs_opt = nullptr;

  // model/data/train overrides
  int hidden = 0, embed = 0, layers = 0, epochs = -1;
  int corpus_sentences = -1, n_per_condition = -1, n_random = -1;
  std::string lexicon_split;
  CLI::Option *hidden_opt = nullptr, *embed_opt = nullptr, *layers_opt = nullptr,
              *epochs_opt = nullptr, *corpus_opt = nullptr, *npc_opt = nullptr,
              *nrand_opt = nullptr, *split_opt = nullptr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "JSON config file");
    seed_opt = cmd->add_option("--seed", seed, "random seed");
    out_opt = cmd->add_option("--out", out, "run directory");
    jobs_opt = cmd->add_option("--jobs", jobs, "worker cap (0 = default)");
    cmd->add_flag("--force", force, "rerun even when up to date");
    hidden_opt = cmd->add_option("--hidden", hidden, "hidden units per layer");
    embed_opt = cmd->add_option("--embed", embed, "embedding size");
    layers_opt = cmd->add_option("--layers", layers, "LSTM layers");
    epochs_opt = cmd->add_option("--epochs", epochs, "training epochs");
    corpus_opt = cmd->add_option("--corpus-sentences", corpus_sentences,
                                 "training corpus size");
    npc_opt = cmd->add_option("--n-per-condition", n_per_condition,
                              "stimuli per condition");
    nrand_opt = cmd->add_option("--n-random", n_random,
                                "random groups in permutation tests");
    split_opt = cmd->add_option("--lexicon-split", lexicon_split,
                                "shared|disjoint content pools");
  }

  // precedence: command line > config file > defaults
  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_file.empty()) cfg = RunConfig::load(config_file);
    if (seed_opt && seed_opt->count()) cfg.seed = seed;
    if (out_opt && out_opt->count()) cfg.out = out;
    if (jobs_opt && jobs_opt->count()) cfg.jobs = jobs;
    if (hidden_opt && hidden_opt->count()) cfg.model.hidden = hidden;
    if (embed_opt && embed_opt->count()) cfg.model.embed = embed;
    if (layers_opt && layers_opt->count()) cfg.model.layers = layers;
    if (epochs_opt && epochs_opt->count()) cfg.train.epochs = epochs;
    if (corpus_opt && corpus_opt->count()) cfg.train.corpus_sentences = corpus_sentences;
    if (npc_opt && npc_opt->count()) cfg.data.n_per_condition = n_per_condition;
    if (nrand_opt && nrand_opt->count()) cfg.analysis.n_random = n_random;
    if (split_opt && split_opt->count()) cfg.train.lexicon_split = lexicon_split;
    return cfg;
  }
};

int run_stage(const CommonFlags& flags,
              void (*stage)(const RunConfig&, const StageOptions&, std::ostream&)) {
  RunConfig cfg = flags.resolve();
  set_max_threads(cfg.jobs);
  StageOptions opt;
  opt.force = flags.force;
  stage(cfg, opt, std::cout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lstmlens: train a small instrumented LSTM language model on "
               "synthetic agreement data and locate its number and syntax units"};
  app.require_subcommand(1);

  CommonFlags gen, trn, evl, abl, prm, gatf, dep, con, trc, pip;

  auto* c_gen = app.add_subcommand("gen-data", "generate stimulus sets, corpus and depth dataset");
  gen.attach(c_gen);
  auto* c_trn = app.add_subcommand("train", "train the language model");
  trn.attach(c_trn);

  auto* c_evl = app.add_subcommand("eval", "task accuracy (optionally under an ablation mask)");
  evl.attach(c_evl);
  std::string evl_mask, evl_checkpoint, evl_stimuli, evl_out_csv;
  c_evl->add_option("--mask", evl_mask, "ablation mask, e.g. L2-U17,L2-U42");
  c_evl->add_option("--checkpoint", evl_checkpoint, "score an explicit checkpoint file");
  c_evl->add_option("--stimuli", evl_stimuli, "score an explicit stimulus JSONL file");
  c_evl->add_option("--out-csv", evl_out_csv, "accuracy CSV destination (ad-hoc mode)");

  auto* c_abl = app.add_subcommand("ablate", "single-unit ablation sweep");
  abl.attach(c_abl);

  auto* c_prm = app.add_subcommand("perm-test", "group-ablation permutation test");
  prm.attach(c_prm);
  std::string prm_units, prm_task, prm_conditions, prm_checkpoint, prm_out;
  c_prm->add_option("--units", prm_units, "target units, e.g. L2-U17,L2-U42");
  c_prm->add_option("--task", prm_task, "task name (default: run stage on easy suite)");
  c_prm->add_option("--conditions", prm_conditions, "comma-separated condition filter");
  c_prm->add_option("--checkpoint", prm_checkpoint, "explicit checkpoint file");
  c_prm->add_option("--out-json", prm_out, "result destination (ad-hoc mode)");

  auto* c_gat = app.add_subcommand("gat", "generalization-across-time decoding");
  gatf.attach(c_gat);
  auto* c_dep = app.add_subcommand("depth", "syntactic-depth regression");
  dep.attach(c_dep);
  auto* c_con = app.add_subcommand("connectivity", "efferent/afferent weight analyses");
  con.attach(c_con);

  auto* c_trc = app.add_subcommand("traces", "gate and cell trace plots/exports");
  trc.attach(c_trc);
  std::string trc_units, trc_task, trc_checkpoint, trc_out_csv, trc_mask;
  int trc_index = 0;
  c_trc->add_option("--units", trc_units, "units to plot (ad-hoc mode exports CSV)");
  c_trc->add_option("--task", trc_task, "task for the ad-hoc trace export");
  c_trc->add_option("--index", trc_index, "stimulus index for the ad-hoc export");
  c_trc->add_option("--checkpoint", trc_checkpoint, "explicit checkpoint file");
  c_trc->add_option("--mask", trc_mask, "ablation mask during the traced run");
  c_trc->add_option("--out-csv", trc_out_csv, "trace CSV destination");

  auto* c_pip = app.add_subcommand("pipeline", "run every stage end to end");
  pip.attach(c_pip);
  bool dry_run = false;
  c_pip->add_flag("--dry-run", dry_run, "print the stage plan without executing");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_gen->parsed()) return run_stage(gen, stage_gen_data);
    if (c_trn->parsed()) return run_stage(trn, stage_train);

    if (c_evl->parsed()) {
      if (!evl_stimuli.empty() || !evl_checkpoint.empty()) {
        if (evl_stimuli.empty() || evl_checkpoint.empty())
          throw std::invalid_argument(
              "ad-hoc eval needs both --checkpoint and --stimuli");
        Model model = load_checkpoint(evl_checkpoint);
        StimulusSet set = read_stimulus_jsonl(evl_stimuli);
        auto acc = task_accuracy(model, set, AblationMask::parse(evl_mask));
        if (!evl_out_csv.empty()) write_accuracy_csv(acc, evl_out_csv);
        for (const auto& a : acc)
          std::cout << a.task << ' ' << a.condition << " n=" << a.n
                    << " accuracy=" << a.accuracy << "\n";
        return 0;
      }
      if (!evl_mask.empty()) {
        RunConfig cfg = evl.resolve();
        set_max_threads(cfg.jobs);
        Model model = load_checkpoint(RunArtifacts{cfg.out}.checkpoint_path());
        for (TemplateId t : cfg.task_ids()) {
          StimulusSet set = read_stimulus_jsonl(
              RunArtifacts{cfg.out}.task_path(template_name(t)));
          for (const auto& a :
               task_accuracy(model, set, AblationMask::parse(evl_mask)))
            std::cout << a.task << ' ' << a.condition << " n=" << a.n
                      << " accuracy=" << a.accuracy << "\n";
        }
        return 0;
      }
      return run_stage(evl, stage_eval);
    }

    if (c_abl->parsed()) return run_stage(abl, stage_ablate);

    if (c_prm->parsed()) {
      if (!prm_units.empty()) {
        RunConfig cfg = prm.resolve();
        set_max_threads(cfg.jobs);
        const std::string ckpt =
            prm_checkpoint.empty()
                ? RunArtifacts{cfg.out}.checkpoint_path().string()
                : prm_checkpoint;
        Model model = load_checkpoint(ckpt);
        const std::string task = prm_task.empty() ? "nounPP" : prm_task;
        StimulusSet set =
            read_stimulus_jsonl(RunArtifacts{cfg.out}.task_path(task));
        if (!prm_conditions.empty())
          set = filter_conditions(set, split(prm_conditions, ','));
        AblationMask mask = AblationMask::parse(prm_units);
        PermutationTestResult pr = permutation_group_ablation(
            model, mask.units, set, cfg.analysis.n_random, cfg.seed);
        if (!prm_out.empty()) write_permutation_json(pr, prm_out);
        std::cout << "observed=" << pr.observed << " p=" << pr.p_value << "\n";
        return 0;
      }
      return run_stage(prm, stage_perm);
    }

    if (c_gat->parsed()) return run_stage(gatf, stage_gat);
    if (c_dep->parsed()) return run_stage(dep, stage_depth);
    if (c_con->parsed()) return run_stage(con, stage_connectivity);

    if (c_trc->parsed()) {
      if (!trc_task.empty()) {
        RunConfig cfg = trc.resolve();
        set_max_threads(cfg.jobs);
        const std::string ckpt =
            trc_checkpoint.empty()
                ? RunArtifacts{cfg.out}.checkpoint_path().string()
                : trc_checkpoint;
        Model model = load_checkpoint(ckpt);
        StimulusSet set =
            read_stimulus_jsonl(RunArtifacts{cfg.out}.task_path(trc_task));
        if (trc_index < 0 || trc_index >= static_cast<int>(set.stimuli.size()))
          throw std::invalid_argument("stimulus index out of range");
        std::vector<int> seq;
        for (const auto& tok : set.stimuli[trc_index].tokens)
          seq.push_back(model.vocab.id(tok));
        ForwardOptions fo;
        fo.record_trace = true;
        fo.bos = true;
        auto res = forward(model, seq, AblationMask::parse(trc_mask), fo);
        const std::string dest = trc_out_csv.empty() ? "trace.csv" : trc_out_csv;
        write_trace_csv(res.trace, model.vocab, dest);
        std::cout << "wrote " << dest << "\n";
        return 0;
      }
      return run_stage(trc, stage_traces);
    }

    if (c_pip->parsed()) {
      RunConfig cfg = pip.resolve();
      StageOptions opt;
      opt.force = pip.force;
      opt.dry_run = dry_run;
      run_pipeline(cfg, opt, std::cout);
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
