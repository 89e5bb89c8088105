#include "lfinet/common.hpp"

#include <omp.h>

#include <cstdlib>
#include <string>

namespace lfinet {

void init_threads() {
    if (const char* env = std::getenv("LFINET_THREADS")) {
        try {
            int n = std::stoi(env);
            if (n > 0) omp_set_num_threads(n);
        } catch (const std::exception&) {
            // ignore malformed values, keep the OpenMP default
        }
    }
}

}  // namespace lfinet
