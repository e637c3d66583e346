#pragma once

namespace fastref {

// Keeps large freed blocks in the heap instead of returning them to the OS,
// so per-image temporaries reuse already-mapped pages. No-op off glibc.
void retain_freed_memory();

}  // namespace fastref
