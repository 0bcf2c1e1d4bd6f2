#include "llreg/runtime.hpp"

#include <cblas.h>
#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <string>

namespace llreg {

namespace {
int g_threads = 1;
bool g_deterministic = false;

void apply() {
    const int n = g_deterministic ? 1 : g_threads;
    omp_set_num_threads(n);
    openblas_set_num_threads(n);
}
}  // namespace

void set_thread_count(int n) {
    g_threads = std::max(1, n);
    apply();
}

int thread_count() { return g_deterministic ? 1 : g_threads; }

void set_deterministic(bool on) {
    g_deterministic = on;
    apply();
}

bool deterministic() { return g_deterministic; }

void configure_runtime_from_env() {
    int n = omp_get_num_procs();
    if (const char* t = std::getenv("REG_THREADS")) {
        try {
            n = std::stoi(t);
        } catch (const std::exception&) {
        }
    }
    g_threads = std::max(1, n);
    const char* d = std::getenv("REG_DETERMINISTIC");
    g_deterministic = d && std::string(d) == "1";
    apply();
}

}  // namespace llreg
