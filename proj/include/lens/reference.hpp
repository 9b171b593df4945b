#pragma once

#include <span>
#include <vector>

#include "lens/lstm.hpp"

// Straight-line scalar reference implementation of the forward pass. Kept
// deliberately independent of the optimized path in lstm.cpp: plain nested
// loops, per-step vectors, no shared kernels. Tests and the benchmark compare
// the two.
namespace lens::ref {

struct StepValues {
  // [layer][unit]
  std::vector<std::vector<double>> i, f, g, o, c, h;
};

struct Result {
  std::vector<std::vector<double>> logprobs;  // [t][vocab]
  std::vector<StepValues> steps;              // [t]
};

Result forward(const Model& m, std::span<const int> tokens,
               const std::vector<UnitRef>& masked, bool clamp_cell = false);

// One cell update for a single layer.
StepValues cell_step(const LayerParams& p, const std::vector<double>& x,
                     const std::vector<double>& h_prev,
                     const std::vector<double>& c_prev);

}  // namespace lens::ref
