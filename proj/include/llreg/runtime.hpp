#pragma once

namespace llreg {

/// Caps OpenMP and BLAS worker counts. Values < 1 are treated as 1.
void set_thread_count(int n);
int thread_count();

/// Deterministic mode pins every parallel region to a single thread.
void set_deterministic(bool on);
bool deterministic();

/// Reads REG_THREADS and REG_DETERMINISTIC from the environment.
void configure_runtime_from_env();

}  // namespace llreg
