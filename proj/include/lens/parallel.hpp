#pragma once

namespace lens {

// Caps OpenMP worker count for all parallel kernels; 0 = library default.
// Results are independent of the thread count by construction (parallel
// loops only fill preallocated slots; reductions happen serially).
void set_max_threads(int n);
int max_threads();

}  // namespace lens
