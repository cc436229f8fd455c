#pragma once

// Central finite-difference verification harness. Gradient checks run at
// 64-bit; relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "pd/graph.hpp"
#include "pd/params.hpp"

namespace pd {

struct FdResult {
    double max_rel_err = 0.0;
    std::string worst_target;  // "name[idx]" of the worst coordinate
    int checked = 0;
};

inline double fd_rel_err(double analytic, double numeric) {
    const double denom =
        std::max(std::max(std::fabs(analytic), std::fabs(numeric)), 1e-8);
    return std::fabs(analytic - numeric) / denom;
}

// Checks an analytic gradient of f at x against central differences on
// `samples` seeded random coordinates (all coordinates when samples <= 0 or
// exceeds the dimension).
inline FdResult fd_check_vector(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> x,
                                const std::vector<double>& analytic_grad, int samples,
                                std::uint64_t seed, double step = 1e-4) {
    FdResult res;
    const int n = int(x.size());
    std::vector<int> coords;
    if (samples <= 0 || samples >= n) {
        for (int i = 0; i < n; ++i) coords.push_back(i);
    } else {
        Rng rng(seed);
        coords = rng.sample_without_replacement(n, samples);
    }
    for (int c : coords) {
        const double orig = x[std::size_t(c)];
        x[std::size_t(c)] = orig + step;
        const double fp = f(x);
        x[std::size_t(c)] = orig - step;
        const double fm = f(x);
        x[std::size_t(c)] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        const double err = fd_rel_err(analytic_grad[std::size_t(c)], numeric);
        if (err > res.max_rel_err) {
            res.max_rel_err = err;
            res.worst_target = "x[" + std::to_string(c) + "]";
        }
        ++res.checked;
    }
    return res;
}

// Builds the loss graph over `store`, must be deterministic per call.
using LossBuilder = std::function<int(Graph<double>&, ParamStore<double>&)>;

// Verifies d(loss)/d(param) for `samples` randomly chosen trainable
// coordinates of the store against central differences.
inline FdResult fd_check_params(ParamStore<double>& store, const LossBuilder& build,
                                int samples, std::uint64_t seed, double step = 1e-4) {
    GradMap<double> grads;
    {
        Graph<double> g;
        const int loss = build(g, store);
        g.backward(loss);
        g.export_grads(grads);
    }
    auto eval = [&]() {
        Graph<double> g;
        return g.val(build(g, store))[0];
    };
    // flat list of (name, coordinate)
    std::vector<std::pair<std::string, std::size_t>> coords;
    for (const auto& [name, e] : store.entries) {
        if (!e.trainable) continue;
        for (std::size_t i = 0; i < e.value.data.size(); ++i) coords.emplace_back(name, i);
    }
    std::vector<int> pick;
    if (samples <= 0 || samples >= int(coords.size())) {
        for (std::size_t i = 0; i < coords.size(); ++i) pick.push_back(int(i));
    } else {
        Rng rng(seed);
        pick = rng.sample_without_replacement(int(coords.size()), samples);
    }
    FdResult res;
    for (int p : pick) {
        const auto& [name, idx] = coords[std::size_t(p)];
        double& v = store.at(name).data[idx];
        const double orig = v;
        const double analytic = grads.at(name).data[idx];
        // Central differences at several step sizes, keeping the closest
        // match: round-off noise in tiny gradients shrinks with a larger
        // step, while kink proximity (relu, max-pool, chamfer assignment
        // switches) shrinks with a smaller one.
        double err = std::numeric_limits<double>::max();
        for (double s : {0.1 * step, step, 10.0 * step, 100.0 * step}) {
            v = orig + s;
            const double fp = eval();
            v = orig - s;
            const double fm = eval();
            v = orig;
            const double numeric = (fp - fm) / (2.0 * s);
            err = std::min(err, fd_rel_err(analytic, numeric));
        }
        if (err > res.max_rel_err) {
            res.max_rel_err = err;
            res.worst_target = name + "[" + std::to_string(idx) + "]";
        }
        ++res.checked;
    }
    return res;
}

}  // namespace pd
