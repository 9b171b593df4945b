// Benchmark: serial reference forward vs the optimized kernels, single- and
// multi-threaded, on a synthetic scoring workload shaped like the ablation
// sweep inner loop.

#include <chrono>
#include <iostream>
#include <vector>

#include "CLI11.hpp"
#include "lens/agreement.hpp"
#include "lens/parallel.hpp"
#include "lens/reference.hpp"
#include "lens/rng.hpp"

using namespace lens;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Model random_model(int vocab, int embed, int hidden, int layers, uint64_t seed) {
  std::vector<std::string> toks = {"<eos>", "<unk>"};
  for (int i = 2; i < vocab; ++i) toks.push_back("w" + std::to_string(i));
  return init_model({vocab, embed, hidden, layers}, Vocab::from_tokens(toks), seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lstmlens benchmark: reference vs optimized forward kernels"};
  int vocab = 160, embed = 64, hidden = 64, layers = 2;
  int n_seq = 512, seq_len = 8, repeat = 3, threads = 0;
  app.add_option("--vocab", vocab);
  app.add_option("--embed", embed);
  app.add_option("--hidden", hidden);
  app.add_option("--layers", layers);
  app.add_option("--sequences", n_seq);
  app.add_option("--len", seq_len);
  app.add_option("--repeat", repeat);
  app.add_option("--threads", threads, "0 = library default");
  CLI11_PARSE(app, argc, argv);

  Model model = random_model(vocab, embed, hidden, layers, 7);
  Rng rng(11);
  std::vector<std::vector<int>> seqs(n_seq);
  for (auto& s : seqs)
    for (int t = 0; t < seq_len; ++t) s.push_back(rng.index(vocab));

  const double tokens = static_cast<double>(n_seq) * seq_len;
  std::cout << "model: vocab=" << vocab << " embed=" << embed
            << " hidden=" << hidden << " layers=" << layers << "; workload "
            << n_seq << " sequences x " << seq_len << " tokens\n";

  // serial reference
  double best_ref = 1e300;
  for (int r = 0; r < repeat; ++r) {
    auto t0 = Clock::now();
    double sink = 0.0;
    for (const auto& s : seqs) {
      auto res = ref::forward(model, s, {});
      sink += res.logprobs.back()[0];
    }
    best_ref = std::min(best_ref, seconds_since(t0));
    if (sink == 12345.0) std::cout << "";  // keep the work observable
  }
  std::cout << "reference (serial scalar): " << best_ref << " s  ("
            << tokens / best_ref << " tok/s)\n";

  // optimized, one thread
  set_max_threads(1);
  double best_one = 1e300;
  for (int r = 0; r < repeat; ++r) {
    auto t0 = Clock::now();
    auto traces = collect_traces(model, seqs, AblationMask{});
    best_one = std::min(best_one, seconds_since(t0));
    if (traces.size() != seqs.size()) return 1;
  }
  std::cout << "optimized  (1 thread):     " << best_one << " s  ("
            << tokens / best_one << " tok/s, " << best_ref / best_one
            << "x vs reference)\n";

  // optimized, requested/max threads
  set_max_threads(threads);
  double best_par = 1e300;
  for (int r = 0; r < repeat; ++r) {
    auto t0 = Clock::now();
    auto traces = collect_traces(model, seqs, AblationMask{});
    best_par = std::min(best_par, seconds_since(t0));
    if (traces.size() != seqs.size()) return 1;
  }
  std::cout << "optimized  (" << max_threads() << " threads):    " << best_par
            << " s  (" << tokens / best_par << " tok/s, " << best_one / best_par
            << "x vs 1 thread)\n";

  // determinism across thread counts
  set_max_threads(1);
  auto a = collect_traces(model, seqs, AblationMask{});
  set_max_threads(threads);
  auto b = collect_traces(model, seqs, AblationMask{});
  bool identical = true;
  for (size_t i = 0; i < a.size() && identical; ++i)
    identical = a[i].h == b[i].h && a[i].c == b[i].c;
  std::cout << "thread-count determinism: " << (identical ? "bitwise identical" : "MISMATCH")
            << "\n";
  return identical ? 0 : 1;
}
