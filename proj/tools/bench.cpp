// Benchmark comparing the serial reference kernels (pd::ref) against the
// OpenMP variants (pd::par) that the library uses, and asserting they agree
// bit-for-bit on the benchmarked inputs.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "pd/common.hpp"
#include "pd/kernels.hpp"

using namespace pd;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void row(const char* name, double ref_ms, double par_ms, bool equal) {
    std::printf("%-12s ref %8.3f ms   par %8.3f ms   speedup %5.2fx   %s\n", name, ref_ms,
                par_ms, ref_ms / par_ms, equal ? "bit-identical" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
    int reps = 5;
    if (argc > 1) reps = std::atoi(argv[1]);
    std::printf("threads=%d reps=%d\n", max_threads(), reps);

    Rng rng(1234);
    bool all_equal = true;

    {  // matmul (256x256)x(256x256)
        const int n = 256;
        std::vector<float> a(std::size_t(n) * n), b(std::size_t(n) * n);
        for (auto& v : a) v = float(rng.normal());
        for (auto& v : b) v = float(rng.normal());
        std::vector<float> cr(std::size_t(n) * n), cp(std::size_t(n) * n);
        const double tr = time_ms(
            [&] { ref::matmul(false, false, n, n, n, a.data(), b.data(), cr.data()); }, reps);
        const double tp = time_ms(
            [&] { par::matmul(false, false, n, n, n, a.data(), b.data(), cp.data()); }, reps);
        const bool eq = cr == cp;
        all_equal = all_equal && eq;
        row("matmul", tr, tp, eq);
    }

    Cloud<float> cloud(4096);
    for (auto& p : cloud)
        p = {float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))};

    {  // nearest: 4096 queries vs 4096 sources
        std::vector<int> ir(cloud.size()), ip(cloud.size());
        std::vector<float> dr(cloud.size()), dp(cloud.size());
        const int n = int(cloud.size());
        const double tr = time_ms(
            [&] { ref::nearest(cloud.data(), n, cloud.data(), n, ir.data(), dr.data()); }, reps);
        const double tp = time_ms(
            [&] { par::nearest(cloud.data(), n, cloud.data(), n, ip.data(), dp.data()); }, reps);
        const bool eq = ir == ip && dr == dp;
        all_equal = all_equal && eq;
        row("nearest", tr, tp, eq);
    }

    {  // knn: 64 centers, k=32
        const int n = int(cloud.size()), g = 64, k = 32;
        std::vector<int> ir(std::size_t(g) * k), ip(std::size_t(g) * k);
        const double tr =
            time_ms([&] { ref::knn(cloud.data(), g, cloud.data(), n, k, ir.data()); }, reps);
        const double tp =
            time_ms([&] { par::knn(cloud.data(), g, cloud.data(), n, k, ip.data()); }, reps);
        const bool eq = ir == ip;
        all_equal = all_equal && eq;
        row("knn", tr, tp, eq);
    }

    {  // fps: 64 centers from 4096 points
        const int n = int(cloud.size()), g = 64;
        std::vector<int> ir(static_cast<std::size_t>(g)), ip(static_cast<std::size_t>(g));
        const double tr =
            time_ms([&] { ref::fps(cloud.data(), n, g, 0, ir.data()); }, reps);
        const double tp =
            time_ms([&] { par::fps(cloud.data(), n, g, 0, ip.data()); }, reps);
        const bool eq = ir == ip;
        all_equal = all_equal && eq;
        row("fps", tr, tp, eq);
    }

    if (!all_equal) {
        std::printf("FAILURE: parallel kernels diverged from the reference\n");
        return 1;
    }
    return 0;
}
