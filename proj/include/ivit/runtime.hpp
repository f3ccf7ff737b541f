#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ivit {

/// Training allocates and frees the same multi-megabyte activation buffers on
/// every step. By default glibc serves blocks of that size with fresh mmap
/// pages, and the resulting page faults cost about as much as the arithmetic.
/// Raising the mmap and trim thresholds keeps those blocks in the heap.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

}  // namespace ivit
