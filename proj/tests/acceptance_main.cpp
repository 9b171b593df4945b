// Acceptance suite: one pass/fail line per criterion.
//
// Criteria 1-8 are exact property checks with pinned tolerances and runtime
// budgets. Criteria 9-13 run the full desk-scale pipeline on the default
// configuration and check the qualitative pattern of the trained model; if a
// seed fails, up to four alternate seeds are tried before giving up.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "lens/agreement.hpp"
#include "lens/decoding.hpp"
#include "lens/grammar.hpp"
#include "lens/parallel.hpp"
#include "lens/pipeline.hpp"
#include "lens/reference.hpp"
#include "lens/rng.hpp"
#include "lens/stats.hpp"
#include "testutil.hpp"

using namespace lens;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool pass,
            const std::string& detail) {
  std::cout << (pass ? "[PASS] " : "[FAIL] ") << "C" << criterion << " " << name
            << " (" << detail << ")\n";
  if (!pass) ++g_failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

// ---------------------------------------------------------------------------
// C1: forward oracle equivalence + update-rule recomputation, 1e-12, < 5 s
// ---------------------------------------------------------------------------
void criterion_1() {
  auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const int vocab = 5 + rng.index(8);
    Model m = testutil::random_model(vocab, 2 + rng.index(5), 2 + rng.index(5),
                                     1 + rng.index(2), 9000 + inst);
    auto tokens = testutil::random_tokens(3 + rng.index(8), vocab, rng);
    ForwardOptions opts;
    opts.record_trace = true;
    opts.want_logprobs = true;
    auto fast = forward(m, tokens, {}, opts);
    auto slow = ref::forward(m, tokens, {});
    for (size_t t = 0; t < tokens.size(); ++t) {
      for (int v = 0; v < vocab; ++v)
        worst = std::max(worst,
                         rel_err(fast.logprobs[t * vocab + v], slow.logprobs[t][v]));
      for (int l = 0; l < m.dims.layers; ++l)
        for (int u = 0; u < m.dims.hidden; ++u) {
          worst = std::max(worst, rel_err(fast.trace.h_at(t, l, u),
                                          slow.steps[t].h[l][u]));
          worst = std::max(worst, rel_err(fast.trace.c_at(t, l, u),
                                          slow.steps[t].c[l][u]));
        }
    }
    // Eq. recomputation on the recorded trace
    const ActivationTrace& tr = fast.trace;
    for (int t = 0; t < tr.steps(); ++t)
      for (int l = 0; l < tr.layers; ++l)
        for (int u = 0; u < tr.hidden; ++u) {
          const double cp = t == 0 ? 0.0 : tr.c_at(t - 1, l, u);
          worst = std::max(
              worst, rel_err(tr.c_at(t, l, u), tr.f_at(t, l, u) * cp +
                                                   tr.i_at(t, l, u) *
                                                       tr.g_at(t, l, u)));
          worst = std::max(worst,
                           rel_err(tr.h_at(t, l, u),
                                   tr.o_at(t, l, u) * std::tanh(tr.c_at(t, l, u))));
        }
  }
  const double secs = seconds_since(t0);
  std::ostringstream ss;
  ss << "max rel err " << worst << ", " << secs << " s";
  report(1, "lstm-oracle-equivalence", worst < 1e-12 && secs < 5.0, ss.str());
}

// ---------------------------------------------------------------------------
// C2: gradient check vs central differences, 1e-4, < 30 s
// ---------------------------------------------------------------------------
void criterion_2() {
  auto t0 = Clock::now();
  Rng rng(102);
  double worst = 0.0;
  for (int inst = 0; inst < 10; ++inst) {
    Model m = testutil::random_model(6, 3, 4, 2, 8800 + inst);
    auto input = testutil::random_tokens(5, 6, rng);
    auto target = testutil::random_tokens(5, 6, rng);
    Gradients grad;
    loss_and_grad(m, input, target, grad);
    auto views = param_views(m, grad);
    const double step = 1e-5;
    for (auto& view : views) {
      for (size_t k = 0; k < view.size; ++k) {
        const double orig = view.param[k];
        view.param[k] = orig + step;
        const double up = sequence_loss(m, input, target);
        view.param[k] = orig - step;
        const double dn = sequence_loss(m, input, target);
        view.param[k] = orig;
        const double numeric = (up - dn) / (2 * step);
        worst = std::max(worst, std::abs(numeric - view.grad[k]) /
                                    std::max({std::abs(numeric),
                                              std::abs(view.grad[k]), 1e-6}));
      }
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream ss;
  ss << "max rel err " << worst << ", " << secs << " s";
  report(2, "bptt-gradient-check", worst < 1e-4 && secs < 30.0, ss.str());
}

// ---------------------------------------------------------------------------
// C3: AUC equals brute-force pair enumeration exactly, < 1 s
// ---------------------------------------------------------------------------
void criterion_3() {
  auto t0 = Clock::now();
  Rng rng(103);
  bool exact = true;
  for (int inst = 0; inst < 100; ++inst) {
    const int n = 4 + rng.index(60);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = rng.index(7) / 3.0;  // coarse grid: plenty of ties
      y[i] = rng.coin() ? 1 : 0;
    }
    y[0] = 0;
    y[n - 1] = 1;
    double wins = 0.0;
    long pairs = 0;
    for (int i = 0; i < n; ++i) {
      if (!y[i]) continue;
      for (int j = 0; j < n; ++j) {
        if (y[j]) continue;
        ++pairs;
        if (s[i] > s[j]) wins += 1.0;
        else if (s[i] == s[j]) wins += 0.5;
      }
    }
    exact = exact && (auc(s, y) == wins / pairs);
  }
  const double secs = seconds_since(t0);
  std::ostringstream ss;
  ss << "100 instances, " << secs << " s";
  report(3, "auc-rank-vs-pairs", exact && secs < 1.0, ss.str());
}

// ---------------------------------------------------------------------------
// C4: ridge closed form at 1e-10; exactly-linear nested CV R^2 >= 0.999
// ---------------------------------------------------------------------------
void criterion_4() {
  std::vector<double> x = {0.5, -1.0, 2.0};
  std::vector<double> y = {1.0, -1.5, 3.5};
  const double lambda = 0.3;
  double sxy = 0, sxx = 0;
  for (int i = 0; i < 3; ++i) {
    sxy += x[i] * y[i];
    sxx += x[i] * x[i];
  }
  auto w = ridge_raw(x, 3, 1, y, lambda);
  const double closed_err = std::abs(w[0] - sxy / (sxx + lambda));

  Rng rng(104);
  const int n = 150, d = 5;
  std::vector<double> xm(n * d), ym(n);
  for (int i = 0; i < n; ++i) {
    double acc = 0.4;
    for (int c = 0; c < d; ++c) {
      xm[i * d + c] = rng.normal();
      acc += (0.3 + 0.2 * c) * xm[i * d + c];
    }
    ym[i] = acc;
  }
  auto grid = default_lambda_grid();
  auto cv = nested_cv_ridge(xm, n, d, ym, 5, 4, grid, 104);

  std::ostringstream ss;
  ss << "closed-form err " << closed_err << ", linear R2 " << cv.r2_mean;
  report(4, "ridge-oracle", closed_err < 1e-10 && cv.r2_mean >= 0.999, ss.str());
}

// ---------------------------------------------------------------------------
// C5: constructed circuit - the sweep flags exactly the carrier; its
// ablation lands at 50 +- 2 points over 600 stimuli
// ---------------------------------------------------------------------------
void criterion_5() {
  auto nc = testutil::build_number_circuit(4);
  StimulusSet set = testutil::circuit_stimuli(nc, 600);
  SweepResult sweep = ablation_sweep(nc.model, {set}, 10.0);
  int flagged = 0;
  bool carrier_first = !sweep.effects.empty() &&
                       sweep.effects.front().unit == UnitRef{0, 0};
  for (const auto& eff : sweep.effects) flagged += eff.flagged ? 1 : 0;
  double worst_off = 0.0;
  for (const auto& e : sweep.effects.front().entries)
    worst_off = std::max(worst_off, std::abs(e.ablated - 0.5));
  std::ostringstream ss;
  ss << flagged << " flagged, ablated accuracy within " << worst_off * 100
     << " points of 50";
  report(5, "constructed-circuit-ablation",
         flagged == 1 && carrier_first && worst_off <= 0.02, ss.str());
}

// ---------------------------------------------------------------------------
// C6: GAT on constructed traces
// ---------------------------------------------------------------------------
void criterion_6() {
  const int n = 100, T = 6, t_int = 3;
  Rng rng(106);

  TraceFeatures stable;
  stable.n = n;
  stable.T = T;
  stable.d = 1;
  stable.x.assign(static_cast<size_t>(n) * T, 0.0);
  stable.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    stable.labels[i] = i % 2;
    for (int t = 0; t < T; ++t)
      stable.at(i, t)[0] = (stable.labels[i] ? 1.0 : -1.0) + rng.real(-0.02, 0.02);
  }
  GatSeries gs = gat_from_features(stable, 1, 5, {}, 106);
  bool stable_ok = true;
  for (int t = 0; t < T; ++t) stable_ok = stable_ok && gs.mean_auc[t] == 1.0;

  TraceFeatures swap = stable;
  for (int i = 0; i < n; ++i) {
    const double subj = swap.labels[i] ? 1.0 : -1.0;
    for (int t = 0; t < T; ++t)
      swap.at(i, t)[0] = (t < t_int ? subj : -subj) + rng.real(-0.02, 0.02);
  }
  GatSeries gw = gat_from_features(swap, 1, 5, {}, 107);
  bool swap_ok = true;
  for (int t = 0; t < t_int; ++t) swap_ok = swap_ok && gw.mean_auc[t] >= 0.95;
  for (int t = t_int; t < T; ++t) swap_ok = swap_ok && gw.mean_auc[t] <= 0.05;

  std::ostringstream ss;
  ss << "stable min " << *std::min_element(gs.mean_auc.begin(), gs.mean_auc.end())
     << ", swap post max "
     << *std::max_element(gw.mean_auc.begin() + t_int, gw.mean_auc.end());
  report(6, "gat-constructed-traces", stable_ok && swap_ok, ss.str());
}

// ---------------------------------------------------------------------------
// C7: planted 10-SD afferent weight flagged uniquely, 100 populations
// ---------------------------------------------------------------------------
void criterion_7() {
  const int H = 100;
  int unique_flags = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Model m = init_model({4, 2, H, 1},
                         Vocab::from_tokens({"<eos>", "<unk>", "a", "b"}),
                         700 + trial);
    testutil::zero_params(m);
    Rng rng(500 + trial);
    std::vector<double> weights(H);
    for (int s = 0; s < H; ++s) weights[s] = rng.normal();
    const double wm = mean(weights);
    const double wsd = sd_pop(weights);
    const int planted = rng.index(H);
    weights[planted] = wm + 10.0 * wsd;
    LayerParams& p = m.layers[0];
    for (int s = 0; s < H; ++s)
      p.w_hh[(static_cast<size_t>(kGateI) * H + 0) * H + s] = weights[s];

    ActivationTrace tr;
    tr.layers = 1;
    tr.hidden = H;
    tr.tokens = {0, 0};
    const size_t nn = static_cast<size_t>(2) * H;
    tr.h.assign(nn, 1.0);
    tr.c.assign(nn, 0.0);
    tr.i.assign(nn, 0.0);
    tr.f.assign(nn, 0.0);
    tr.o.assign(nn, 0.0);
    tr.g.assign(nn, 0.0);
    auto rep = effective_afferents(m, UnitRef{0, 0}, kGateI, {tr}, false, 3.0);
    int outliers = 0;
    int which = -1;
    for (const auto& s : rep.sources)
      if (s.outlier) {
        ++outliers;
        which = s.source.unit;
      }
    if (outliers == 1 && which == planted) ++unique_flags;
  }
  std::ostringstream ss;
  ss << unique_flags << "/100 populations flagged uniquely";
  report(7, "afferent-outlier-detection", unique_flags == 100, ss.str());
}

// ---------------------------------------------------------------------------
// C8: dataset contracts - 600/condition and the depth grid balance
// ---------------------------------------------------------------------------
void criterion_8() {
  const Lexicon lex = Lexicon::eval_default();
  bool counts_ok = true;
  for (TemplateId t : default_tasks()) {
    StimulusSet set = generate_na_task(t, lex, 600, 2024);
    std::map<std::string, int> per;
    for (const auto& st : set.stimuli) per[st.condition.label()]++;
    counts_ok = counts_ok &&
                per.size() == template_conditions(t).size();
    for (const auto& [lbl, n] : per) counts_ok = counts_ok && n == 600;
  }

  DepthConfig dc;  // paper-style defaults: lengths 2-25, 300/length, 7-12 x 3-8
  DepthDataset ds = generate_depth_dataset(dc, lex, 2024);
  std::map<std::pair<int, int>, int> cells;
  for (const auto& s : ds.sentences)
    for (const auto& pt : s.retained) cells[{pt.position, pt.depth}]++;
  int lo = INT_MAX, hi = 0;
  for (const auto& [cell, n] : cells) {
    lo = std::min(lo, n);
    hi = std::max(hi, n);
  }
  const bool balanced = !cells.empty() && hi - lo <= 1;
  const bool decorrelated = std::abs(ds.position_depth_correlation) < 0.2;

  std::ostringstream ss;
  ss << "counts " << (counts_ok ? "ok" : "bad") << "; cells " << cells.size()
     << " max-min " << (hi - lo) << "; |r| = "
     << std::abs(ds.position_depth_correlation);
  report(8, "dataset-contracts", counts_ok && balanced && decorrelated, ss.str());
}

// ---------------------------------------------------------------------------
// C9-13: desk-scale pipeline experiment
// ---------------------------------------------------------------------------
struct PipelineChecks {
  bool c9 = false, c10 = false, c11 = false, c12 = false, c13 = false;
  std::string d9, d10, d11, d12, d13;
  bool all() const { return c9 && c10 && c11 && c12 && c13; }
};

PipelineChecks evaluate_pipeline(const RunConfig& cfg) {
  PipelineChecks pc;
  PipelineSummary s = load_summary(cfg);

  // C9: accuracy gradient from easy to hard
  auto acc_of = [&](const std::string& task, const std::string& cond) {
    for (const auto& a : s.baseline)
      if (a.task == task && a.condition == cond) return a.accuracy;
    return -1.0;
  };
  const double simple_s = acc_of("Simple", "S");
  const double simple_p = acc_of("Simple", "P");
  const double nounpp_ss = acc_of("nounPP", "SS");
  const double nounpp_pp = acc_of("nounPP", "PP");
  pc.c9 = simple_s >= 0.95 && simple_p >= 0.95 && nounpp_ss >= 0.70 &&
          nounpp_pp >= 0.70;
  {
    std::ostringstream ss;
    ss << "Simple S/P = " << simple_s << "/" << simple_p
       << ", nounPP SS/PP = " << nounpp_ss << "/" << nounpp_pp;
    pc.d9 = ss.str();
  }

  // C10: one unit per number with the one-sided incongruent signature
  pc.c10 = s.lr_strict && !s.lr_singular.empty() && !s.lr_plural.empty();
  {
    std::ostringstream ss;
    ss << "singular:";
    for (const auto& u : s.lr_singular) ss << ' ' << u.display();
    ss << "; plural:";
    for (const auto& u : s.lr_plural) ss << ' ' << u.display();
    ss << (s.lr_strict ? "" : " [fallback rule]");
    pc.d10 = ss.str();
  }

  // C11: GAT pattern - full-minus-LR drops below 0.5 after the intervener,
  // at least one identified LR unit stays above 0.8 through the dependency
  const int probe_t = s.nounpp_verb_pos - 1;
  double full_late = 1.0, best_lr_min = 0.0;
  for (const auto& g : s.gat_series) {
    if (g.name == "full-minus-lr") {
      if (probe_t >= 0 && probe_t < static_cast<int>(g.mean_auc.size()))
        full_late = g.mean_auc[probe_t];
    } else {
      double lo = 1.0;
      for (int t = s.nounpp_subject_pos; t <= probe_t; ++t)
        if (t >= 0 && t < static_cast<int>(g.mean_auc.size()))
          lo = std::min(lo, g.mean_auc[t]);
      best_lr_min = std::max(best_lr_min, lo);
    }
  }
  pc.c11 = full_late < 0.5 && best_lr_min > 0.8;
  {
    std::ostringstream ss;
    ss << "full-minus-lr AUC@" << probe_t << " = " << full_late
       << ", best LR min AUC = " << best_lr_min;
    pc.d11 = ss.str();
  }

  // C12: SR+LR group ablation vs 1000 random equi-size ablations
  pc.c12 = s.perm_sr_lr_p < 0.05;
  {
    std::ostringstream ss;
    ss << "SR+LR p = " << s.perm_sr_lr_p << " (SR-only p = " << s.perm_sr_only_p
       << ")";
    pc.d12 = ss.str();
  }

  // C13: efferent segregation of the LR pair vs two arbitrary units
  std::vector<std::string> lr_names;
  if (!s.lr_singular.empty()) lr_names.push_back(s.lr_singular.front().display());
  if (!s.lr_plural.empty()) lr_names.push_back(s.lr_plural.front().display());
  std::vector<std::string> syntax_names;
  for (const auto& u : s.syntax_units) syntax_names.push_back(u.display());
  double lr_min_seg = 1.0;
  double rand_max_seg = 0.0;
  int lr_seen = 0, rand_seen = 0;
  for (const auto& [name, seg] : s.efferent_segregation) {
    if (std::find(lr_names.begin(), lr_names.end(), name) != lr_names.end()) {
      lr_min_seg = std::min(lr_min_seg, seg);
      ++lr_seen;
    } else if (std::find(syntax_names.begin(), syntax_names.end(), name) ==
               syntax_names.end()) {
      rand_max_seg = std::max(rand_max_seg, seg);
      ++rand_seen;
    }
  }
  pc.c13 = lr_seen >= 1 && rand_seen >= 2 && lr_min_seg >= 0.9 &&
           rand_max_seg <= 0.7;
  {
    std::ostringstream ss;
    ss << "LR min segregation = " << lr_min_seg << " (" << lr_seen
       << " units), arbitrary max = " << rand_max_seg;
    pc.d13 = ss.str();
  }
  return pc;
}

void criteria_pipeline(const std::string& out_root, uint64_t base_seed,
                       int max_seeds, int jobs) {
  PipelineChecks best;
  uint64_t used_seed = base_seed;
  auto t0 = Clock::now();
  for (int attempt = 0; attempt < max_seeds; ++attempt) {
    const uint64_t seed = base_seed + attempt;
    RunConfig cfg;
    cfg.seed = seed;
    cfg.jobs = jobs;
    cfg.out = out_root + "/seed" + std::to_string(seed);
    std::cout << "-- pipeline attempt with seed " << seed << " -> " << cfg.out
              << "\n";
    try {
      StageOptions opt;
      run_pipeline(cfg, opt, std::cout);
      PipelineChecks pc = evaluate_pipeline(cfg);
      std::cout << "-- seed " << seed << ": C9 " << (pc.c9 ? "ok" : "no")
                << ", C10 " << (pc.c10 ? "ok" : "no") << ", C11 "
                << (pc.c11 ? "ok" : "no") << ", C12 " << (pc.c12 ? "ok" : "no")
                << ", C13 " << (pc.c13 ? "ok" : "no") << "\n";
      if (attempt == 0 || pc.all()) {
        best = pc;
        used_seed = seed;
      }
      if (pc.all()) break;
    } catch (const std::exception& e) {
      std::cout << "-- seed " << seed << " failed to run: " << e.what() << "\n";
    }
  }
  const double secs = seconds_since(t0);
  std::cout << "-- pipeline experiment finished in " << secs << " s (seed "
            << used_seed << ")\n";
  report(9, "task-accuracy-gradient", best.c9, best.d9);
  report(10, "lr-unit-identification", best.c10, best.d10);
  report(11, "gat-qualitative-pattern", best.c11, best.d11);
  report(12, "group-ablation-significance", best.c12, best.d12);
  report(13, "efferent-segregation", best.c13, best.d13);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lstmlens acceptance suite"};
  bool properties_only = false, pipeline_only = false;
  std::string out_root =
      (fs::temp_directory_path() / "lstmlens_acceptance").string();
  uint64_t seed = RunConfig{}.seed;
  int max_seeds = 5;
  int jobs = 0;
  app.add_flag("--properties-only", properties_only);
  app.add_flag("--pipeline-only", pipeline_only);
  app.add_option("--out", out_root, "pipeline run directory");
  app.add_option("--seed", seed, "base seed for the pipeline experiment");
  app.add_option("--max-seeds", max_seeds, "seed retries for criteria 9-13");
  app.add_option("--jobs", jobs, "worker cap");
  CLI11_PARSE(app, argc, argv);

  if (!pipeline_only) {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    criterion_8();
  }
  if (!properties_only) {
    criteria_pipeline(out_root, seed, max_seeds, jobs);
  }
  std::cout << (g_failures == 0 ? "ALL CRITERIA PASSED"
                                : std::to_string(g_failures) + " CRITERIA FAILED")
            << "\n";
  return g_failures == 0 ? 0 : 1;
}
