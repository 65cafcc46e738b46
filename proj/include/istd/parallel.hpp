#pragma once

#include <cstddef>
#include <functional>

namespace istd {

// Worker cap: min(APP_THREADS, hardware). APP_THREADS unset or invalid
// falls back to the hardware count; values < 1 clamp to 1.
int worker_count();

// Runs fn(i) for i in [0,n). Each index writes only its own outputs; callers
// reduce sequentially afterwards, so results are identical for any worker
// count. Exceptions from workers are rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

} // namespace istd
