#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lens/grammar.hpp"

namespace lens {

struct Dims {
  int vocab = 0;
  int embed = 0;
  int hidden = 0;
  int layers = 0;
  bool operator==(const Dims&) const = default;
};

// Gate block order inside every [4H x *] matrix and bias. This order is part
// of the checkpoint format.
enum GateBlock { kGateI = 0, kGateF = 1, kGateG = 2, kGateO = 3 };

struct LayerParams {
  int in_dim = 0;
  int hidden = 0;
  std::vector<double> w_ih;  // [4H x in_dim], row-major
  std::vector<double> w_hh;  // [4H x hidden], row-major
  std::vector<double> bias;  // [4H]
};

struct Model {
  Dims dims;
  Vocab vocab;
  std::vector<double> embedding;  // [vocab x embed], row-major
  std::vector<LayerParams> layers;
  std::vector<double> w_out;  // [vocab x hidden], row-major
  std::vector<double> b_out;  // [vocab]

  void validate() const;  // shapes consistent, all values finite
};

// Uniform init in [-k, k], k = 1/sqrt(hidden); forget-gate bias +1.
Model init_model(const Dims& dims, const Vocab& vocab, uint64_t seed);

// ---------------------------------------------------------------------------
// Units and ablation masks
// ---------------------------------------------------------------------------

// 0-based internally. Display form is 1-based ("L2-U17"); the flat form
// numbers units 1..H in layer 1 and H+1..2H in layer 2.
struct UnitRef {
  int layer = 0;
  int unit = 0;
  std::string display() const;
  int flat(int hidden) const { return layer * hidden + unit; }
  auto operator<=>(const UnitRef&) const = default;
};

UnitRef unit_from_flat(int flat0, int hidden);
std::optional<UnitRef> parse_unit(const std::string& text);  // "L2-U17"

struct AblationMask {
  std::vector<UnitRef> units;

  AblationMask() = default;
  AblationMask(std::initializer_list<UnitRef> us) : units(us) {}
  explicit AblationMask(std::vector<UnitRef> us) : units(std::move(us)) {}

  bool empty() const { return units.empty(); }
  // "L2-U17,L2-U42" -> mask; throws on malformed entries.
  static AblationMask parse(const std::string& text);
  std::string display() const;
};

// Mask resolved against model dims; validates indices.
struct ResolvedMask {
  std::vector<uint8_t> bits;  // [layers*hidden]
  bool any = false;
  bool clamp_cell = false;
};
ResolvedMask resolve_mask(const AblationMask& mask, const Dims& dims,
                          bool clamp_cell = false);

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct ActivationTrace {
  std::vector<int> tokens;
  int layers = 0;
  int hidden = 0;
  // [t][layer][unit]
  std::vector<double> h, c, i, f, o, g;

  int steps() const { return static_cast<int>(tokens.size()); }
  size_t idx(int t, int l, int u) const {
    return (static_cast<size_t>(t) * layers + l) * hidden + u;
  }
  double h_at(int t, int l, int u) const { return h[idx(t, l, u)]; }
  double c_at(int t, int l, int u) const { return c[idx(t, l, u)]; }
  double i_at(int t, int l, int u) const { return i[idx(t, l, u)]; }
  double f_at(int t, int l, int u) const { return f[idx(t, l, u)]; }
  double o_at(int t, int l, int u) const { return o[idx(t, l, u)]; }
  double g_at(int t, int l, int u) const { return g[idx(t, l, u)]; }
};

// Running state for incremental stepping.
struct LstmState {
  std::vector<double> h;  // [layers*hidden]
  std::vector<double> c;
};
void reset_state(const Model& m, LstmState& s);

struct StepScratch {
  std::vector<double> pre;  // [4H]
  std::vector<double> x;    // layer input
};

// One timestep over all layers; writes masked h (and optionally c) in place.
// `snapshot`, when non-null, receives the per-layer gate values of this step.
void lstm_step(const Model& m, int token, LstmState& state,
               const ResolvedMask& mask, StepScratch& scratch,
               ActivationTrace* snapshot = nullptr, int step_index = 0);

// Output-layer logit of one vocabulary row given the current state.
double output_logit(const Model& m, const LstmState& state, int token_id);

// Full log-softmax over the vocabulary for the current state.
void output_logprobs(const Model& m, const LstmState& state,
                     std::vector<double>& out);

struct ForwardOptions {
  bool record_trace = false;
  bool want_logprobs = false;
  bool clamp_cell = false;  // ablation also clamps the cell state
  bool bos = false;  // consume <eos> as start symbol first (not recorded)
};

struct ForwardResult {
  std::vector<double> logprobs;  // [T x vocab] when requested
  ActivationTrace trace;         // when requested
};

ForwardResult forward(const Model& m, std::span<const int> tokens,
                      const AblationMask& mask, const ForwardOptions& opts);

// Single-layer cell update, exposed for direct contract tests.
struct CellStep {
  std::vector<double> i, f, g, o, c, h;
};
CellStep cell_step(const LayerParams& p, std::span<const double> x,
                   std::span<const double> h_prev, std::span<const double> c_prev);

// Collect traces for a batch of token sequences (parallel over sequences,
// deterministic regardless of thread count).
std::vector<ActivationTrace> collect_traces(const Model& m,
                                            const std::vector<std::vector<int>>& seqs,
                                            const AblationMask& mask,
                                            bool clamp_cell = false,
                                            bool bos = false);

void write_trace_csv(const ActivationTrace& trace, const Vocab& vocab,
                     const std::filesystem::path& p);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct Gradients {
  std::vector<double> embedding;
  struct Layer {
    std::vector<double> w_ih, w_hh, bias;
  };
  std::vector<Layer> layers;
  std::vector<double> w_out, b_out;

  static Gradients zeros_like(const Model& m);
};

// Named views over (param, grad) buffers; shared by the optimizer, the norm
// clip and the finite-difference tests.
struct ParamView {
  std::string name;
  double* param;
  const double* grad;
  size_t size;
};
std::vector<ParamView> param_views(Model& m, const Gradients& g);

// Mean token cross-entropy and its gradient for one sequence (zero initial
// state). The BPTT path used by the trainer.
double loss_and_grad(const Model& m, std::span<const int> input,
                     std::span<const int> target, Gradients& grad);
double sequence_loss(const Model& m, std::span<const int> input,
                     std::span<const int> target);

struct TrainConfig {
  double lr = 1.0;
  int batch = 32;
  int bptt = 32;
  double clip_norm = 5.0;
  int epochs = 10;
  uint64_t seed = 1;
  double val_fraction = 0.05;
  double lr_decay = 0.5;  // applied when validation perplexity stalls
  bool verbose = false;
};

struct EpochLog {
  int epoch = 0;
  double train_ppl = 0.0;
  double val_ppl = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  Model model;  // best validation checkpoint
  std::vector<EpochLog> log;
};

// Truncated BPTT with carried state between windows; plain SGD with global
// gradient-norm clipping. Deterministic given the seed. Throws on NaN loss
// with the failing step index.
TrainResult train(const Model& init, const std::vector<std::vector<int>>& sentences,
                  const TrainConfig& cfg);

// exp of mean token NLL. Sentences are scored independently from a zero
// state with <eos> as the start symbol; parallel over sentences.
double perplexity(const Model& m, const std::vector<std::vector<int>>& sentences,
                  const AblationMask& mask);

// ---------------------------------------------------------------------------
// Checkpoint format (versioned JSON + base64 little-endian float64)
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Model& m, const std::filesystem::path& p);
Model load_checkpoint(const std::filesystem::path& p);

// Tokenize corpus lines against a vocabulary (throws on unknown tokens).
std::vector<std::vector<int>> tokenize_lines(const std::vector<std::string>& lines,
                                             const Vocab& vocab);

}  // namespace lens
