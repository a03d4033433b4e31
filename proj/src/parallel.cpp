#include "maskfuse/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace maskfuse {

unsigned worker_threads() {
    const char * env = std::getenv("MASKFUSE_THREADS");
    if (!env || !*env) {
        return 1;
    }
    try {
        const long v = std::stol(env);
        return v < 1 ? 1u : static_cast<unsigned>(std::min(v, 256L));
    } catch (const std::exception &) {
        return 1;
    }
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)> & body) {
    const std::size_t workers = std::min<std::size_t>(worker_threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            body(i);
        }
        return;
    }
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            const std::size_t begin = w * chunk;
            const std::size_t end   = std::min(n, begin + chunk);
            try {
                for (std::size_t i = begin; i < end; ++i) {
                    body(i);
                }
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) {
                    error = std::current_exception();
                }
            }
        });
    }
    for (auto & t : pool) {
        t.join();
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

} // namespace maskfuse
