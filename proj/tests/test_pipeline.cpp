#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "lens/pipeline.hpp"
#include "lens/util.hpp"

using namespace lens;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config(const std::string& out) {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.out = out;
  cfg.data.n_per_condition = 8;
  cfg.train.corpus_sentences = 120;
  cfg.train.epochs = 1;
  cfg.analysis.n_random = 10;
  cfg.analysis.perm_per_condition = 4;
  cfg.analysis.trace_per_condition = 4;
  cfg.data.depth.per_length = 10;
  cfg.data.depth.max_len = 14;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("run config JSON round-trip and hashing") {
  RunConfig cfg = tiny_config("/tmp/x");
  cfg.train.lr = 1.25;
  cfg.analysis.sr_auc_threshold = 0.85;
  RunConfig back = RunConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.config_hash() == cfg.config_hash());

  // the output directory and worker count do not change the hash
  RunConfig moved = cfg;
  moved.out = "/somewhere/else";
  moved.jobs = 9;
  CHECK(moved.config_hash() == cfg.config_hash());

  RunConfig other = cfg;
  other.seed = 8;
  CHECK(other.config_hash() != cfg.config_hash());

  // partial JSON keeps defaults elsewhere
  RunConfig partial = RunConfig::from_json(nlohmann::json::parse(
      R"({"seed": 3, "model": {"hidden": 16}})"));
  CHECK(partial.seed == 3);
  CHECK(partial.model.hidden == 16);
  CHECK(partial.model.embed == RunConfig{}.model.embed);
  CHECK(partial.train.epochs == RunConfig{}.train.epochs);
}

TEST_CASE("stimulus set helpers: subsample, merge, filter") {
  StimulusSet set;
  set.task = "t";
  set.condition_labels = {"S", "P"};
  for (int i = 0; i < 10; ++i) {
    Stimulus st;
    st.condition.subject = i % 2 == 0 ? Number::Singular : Number::Plural;
    st.tokens = {"a", "b"};
    st.verb_pos = 1;
    set.stimuli.push_back(st);
  }
  StimulusSet sub = subsample_per_condition(set, 3);
  CHECK(sub.stimuli.size() == 6);

  StimulusSet merged = merge_sets({set, sub}, "joint");
  CHECK(merged.task == "joint");
  CHECK(merged.stimuli.size() == 16);
  CHECK(merged.condition_labels == std::vector<std::string>{"S", "P"});

  StimulusSet only_p = filter_conditions(set, {"P"});
  CHECK(only_p.stimuli.size() == 5);
  for (const auto& st : only_p.stimuli)
    CHECK(st.condition.subject == Number::Plural);
}

TEST_CASE("corpus log-frequency table") {
  Vocab v = Vocab::from_tokens({"<eos>", "<unk>", "a", "b"});
  std::vector<std::string> lines = {"a a b <eos>", "a <eos>"};
  auto freq = corpus_log_frequencies(lines, v);
  REQUIRE(freq.size() == 4);
  CHECK(freq[v.id("a")] == doctest::Approx(std::log1p(3.0)));
  CHECK(freq[v.id("b")] == doctest::Approx(std::log1p(1.0)));
  CHECK(freq[v.id("<eos>")] == doctest::Approx(std::log1p(2.0)));
  CHECK(freq[v.id("<unk>")] == 0.0);
}

TEST_CASE("gen-data stage: outputs, determinism, manifest") {
  TempDir dir_a("lens_pipe_a"), dir_b("lens_pipe_b");
  RunConfig a = tiny_config(dir_a.path.string());
  RunConfig b = tiny_config(dir_b.path.string());
  std::ostringstream log;
  stage_gen_data(a, {}, log);
  stage_gen_data(b, {}, log);

  RunArtifacts art_a{a.out}, art_b{b.out};
  for (const char* task : {"Simple", "Adv", "2Adv", "CoAdv", "namePP",
                           "nounPP", "nounPPAdv"}) {
    CHECK(fs::exists(art_a.task_path(task)));
    CHECK(read_file(art_a.task_path(task)) == read_file(art_b.task_path(task)));
  }
  CHECK(read_file(art_a.corpus_path()) == read_file(art_b.corpus_path()));
  CHECK(read_file(art_a.vocab_path()) == read_file(art_b.vocab_path()));
  CHECK(read_file(art_a.depth_path()) == read_file(art_b.depth_path()));

  nlohmann::json manifest = nlohmann::json::parse(read_file(art_a.manifest_path()));
  CHECK(manifest["tasks"]["nounPP"]["SP"] == 8);
  CHECK(manifest["depth"].contains("position_depth_correlation"));
  CHECK(manifest["meta"]["seed"] == 7);

  // per-condition counts in the files themselves
  StimulusSet nounpp = read_stimulus_jsonl(art_a.task_path("nounPP"));
  CHECK(nounpp.stimuli.size() == 4 * 8);
}

TEST_CASE("stages skip when inputs are unchanged and honor dry runs") {
  TempDir dir("lens_pipe_skip");
  RunConfig cfg = tiny_config(dir.path.string());

  std::ostringstream log1, log2, log3, log4;
  stage_gen_data(cfg, {}, log1);
  CHECK(log1.str().find("[run ] gen-data") != std::string::npos);
  stage_gen_data(cfg, {}, log2);
  CHECK(log2.str().find("[skip] gen-data") != std::string::npos);

  StageOptions force;
  force.force = true;
  stage_gen_data(cfg, force, log3);
  CHECK(log3.str().find("[run ] gen-data") != std::string::npos);

  StageOptions dry;
  dry.dry_run = true;
  TempDir dir2("lens_pipe_dry");
  RunConfig cfg2 = tiny_config(dir2.path.string());
  stage_gen_data(cfg2, dry, log4);
  CHECK(log4.str().find("[plan] gen-data") != std::string::npos);
  CHECK(!fs::exists(RunArtifacts{cfg2.out}.corpus_path()));

  // changing the config invalidates the marker
  RunConfig changed = cfg;
  changed.data.n_per_condition = 9;
  std::ostringstream log5;
  stage_gen_data(changed, {}, log5);
  CHECK(log5.str().find("[run ] gen-data") != std::string::npos);
}

TEST_CASE("train stage writes a loadable checkpoint and a log") {
  TempDir dir("lens_pipe_train");
  RunConfig cfg = tiny_config(dir.path.string());
  cfg.model.embed = 8;
  cfg.model.hidden = 8;
  std::ostringstream log;
  stage_gen_data(cfg, {}, log);
  stage_train(cfg, {}, log);

  RunArtifacts art{cfg.out};
  Model m = load_checkpoint(art.checkpoint_path());
  CHECK(m.dims.hidden == 8);
  CHECK(m.dims.layers == 2);
  auto lines = read_lines(art.train_log_path());
  REQUIRE(lines.size() >= 3);  // meta comment + header + 1 epoch
  CHECK(lines[0].rfind("# lstmlens", 0) == 0);
  CHECK(lines[1] == "epoch,train_ppl,val_ppl,lr");

  // CSV meta line carries version, config hash, seed
  CHECK(lines[0].find("seed=7") != std::string::npos);
  CHECK(lines[0].find(cfg.config_hash()) != std::string::npos);
}

TEST_CASE("eval stage emits stamped accuracy artifacts") {
  TempDir dir("lens_pipe_eval");
  RunConfig cfg = tiny_config(dir.path.string());
  cfg.model.embed = 8;
  cfg.model.hidden = 8;
  std::ostringstream log;
  stage_gen_data(cfg, {}, log);
  stage_train(cfg, {}, log);
  stage_eval(cfg, {}, log);

  RunArtifacts art{cfg.out};
  nlohmann::json acc = nlohmann::json::parse(read_file(art.analysis("accuracy.json")));
  CHECK(acc.contains("meta"));
  CHECK(acc["meta"]["version"] == kToolVersion);
  int rows = 0;
  for (const auto& row : acc["accuracy"]) {
    CHECK(row["accuracy"].get<double>() >= 0.0);
    CHECK(row["accuracy"].get<double>() <= 1.0);
    ++rows;
  }
  CHECK(rows == 18);  // 4x2 + 2 + 2x4 conditions
}

TEST_CASE("checkpoints from external writers are accepted by analyses") {
  // write a checkpoint through the public API, reload, and score with it;
  // the same path handles converted external models
  TempDir dir("lens_pipe_import");
  std::vector<std::string> toks = {"<eos>", "<unk>", "the", "boy", "boys",
                                   "greets", "greet", "guy"};
  Model m = init_model({8, 4, 4, 2}, Vocab::from_tokens(toks), 9);
  fs::path ckpt = dir.path / "external.json";
  fs::create_directories(dir.path);
  save_checkpoint(m, ckpt);
  Model loaded = load_checkpoint(ckpt);

  StimulusSet set;
  set.task = "import";
  set.condition_labels = {"S"};
  Stimulus st;
  st.tokens = {"the", "boy", "greets", "the", "guy"};
  st.subject_pos = 1;
  st.verb_pos = 2;
  st.correct_verb = "greets";
  st.wrong_verb = "greet";
  set.stimuli.push_back(st);
  auto acc = task_accuracy(loaded, set, AblationMask{});
  REQUIRE(acc.size() == 1);
  CHECK(acc[0].n == 1);
}
