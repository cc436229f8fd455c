#pragma once

// Deterministic geometric primitives: farthest point sampling, kNN patch
// grouping, Chamfer distance and 3-NN feature interpolation weights. All
// functions are pure; ties are always broken toward the lowest index so
// results are reproducible across platforms and thread counts.

#include <algorithm>
#include <string>
#include <vector>

#include "pd/common.hpp"
#include "pd/kernels.hpp"
#include "pd/tensor.hpp"

namespace pd {

struct CenterSet {
    std::vector<int> indices;
    int count() const { return int(indices.size()); }
};

template <typename T>
struct PatchSet {
    Cloud<T> centers;                // g center coordinates
    std::vector<Cloud<T>> patches;   // g groups of k points, center-relative
    int group_count() const { return int(centers.size()); }
    int patch_size() const { return patches.empty() ? 0 : int(patches[0].size()); }
};

template <typename T>
CenterSet fps(const Cloud<T>& cloud, int g, int start = 0) {
    const int n = int(cloud.size());
    if (n < 1) throw InvalidArgument("fps: empty cloud");
    if (g < 1 || g > n)
        throw InvalidArgument("fps: g=" + std::to_string(g) + " out of range for n=" +
                              std::to_string(n));
    if (start < 0 || start >= n)
        throw InvalidArgument("fps: start index " + std::to_string(start) + " >= n");
    CenterSet out;
    out.indices.resize(std::size_t(g));
    par::fps(cloud.data(), n, g, start, out.indices.data());
    return out;
}

template <typename T>
PatchSet<T> knn_group(const Cloud<T>& cloud, const CenterSet& centers, int k) {
    const int n = int(cloud.size());
    const int g = centers.count();
    if (k < 1 || k > n)
        throw InvalidArgument("knn_group: k=" + std::to_string(k) + " out of range for n=" +
                              std::to_string(n));
    Cloud<T> qs(static_cast<std::size_t>(g));
    for (int i = 0; i < g; ++i) qs[std::size_t(i)] = cloud[std::size_t(centers.indices[std::size_t(i)])];
    std::vector<int> idx(std::size_t(g) * std::size_t(k));
    par::knn(qs.data(), g, cloud.data(), n, k, idx.data());
    PatchSet<T> out;
    out.centers = qs;
    out.patches.resize(std::size_t(g));
    for (int i = 0; i < g; ++i) {
        auto& patch = out.patches[std::size_t(i)];
        patch.resize(static_cast<std::size_t>(k));
        for (int j = 0; j < k; ++j) {
            const Vec3<T>& p = cloud[std::size_t(idx[std::size_t(i) * std::size_t(k) + std::size_t(j)])];
            const Vec3<T>& c = qs[std::size_t(i)];
            patch[std::size_t(j)] = {p[0] - c[0], p[1] - c[1], p[2] - c[2]};
        }
    }
    return out;
}

// Symmetric l2 Chamfer distance: mean-of-min-squared in both directions.
template <typename T>
T chamfer_l2(const Cloud<T>& a, const Cloud<T>& b) {
    if (a.empty() || b.empty()) throw InvalidArgument("chamfer_l2: empty point set");
    std::vector<int> idx(std::max(a.size(), b.size()));
    std::vector<T> d2(std::max(a.size(), b.size()));
    par::nearest(a.data(), int(a.size()), b.data(), int(b.size()), idx.data(), d2.data());
    T sum_ab = 0;
    for (std::size_t i = 0; i < a.size(); ++i) sum_ab += d2[i];
    par::nearest(b.data(), int(b.size()), a.data(), int(a.size()), idx.data(), d2.data());
    T sum_ba = 0;
    for (std::size_t i = 0; i < b.size(); ++i) sum_ba += d2[i];
    return sum_ab / T(a.size()) + sum_ba / T(b.size());
}

// 3-NN inverse-distance weights used by the segmentation upsampling path.
// Distances are clamped below by 1e-8 so a query sitting on a source point
// takes that source's feature.
template <typename T>
struct InterpWeights {
    std::vector<std::array<int, 3>> indices;
    std::vector<std::array<T, 3>> weights;
    int query_count() const { return int(indices.size()); }
};

template <typename T>
InterpWeights<T> interpolate_3nn_weights(const Cloud<T>& queries, const Cloud<T>& sources) {
    if (sources.size() < 3)
        throw InvalidArgument("interpolate_3nn: needs at least 3 source points");
    const int nq = int(queries.size());
    std::vector<int> idx(static_cast<std::size_t>(nq) * 3);
    par::knn(queries.data(), nq, sources.data(), int(sources.size()), 3, idx.data());
    InterpWeights<T> out;
    out.indices.resize(static_cast<std::size_t>(nq));
    out.weights.resize(static_cast<std::size_t>(nq));
    for (int i = 0; i < nq; ++i) {
        std::array<T, 3> inv;
        for (int j = 0; j < 3; ++j) {
            int s = idx[std::size_t(i) * 3 + std::size_t(j)];
            out.indices[std::size_t(i)][std::size_t(j)] = s;
            T d = std::sqrt(sqdist(queries[std::size_t(i)], sources[std::size_t(s)]));
            inv[std::size_t(j)] = T(1) / std::max(d, T(1e-8));
        }
        T total = inv[0] + inv[1] + inv[2];
        for (int j = 0; j < 3; ++j) out.weights[std::size_t(i)][std::size_t(j)] = inv[std::size_t(j)] / total;
    }
    return out;
}

// Per-query features = weighted sum of the 3 nearest sources' features.
template <typename T>
Tensor<T> interpolate_3nn(const Cloud<T>& queries, const Cloud<T>& sources,
                          const Tensor<T>& source_features) {
    if (source_features.rank() != 2 || source_features.dim(0) != int(sources.size()))
        throw ShapeError("interpolate_3nn: features must be (n_sources, C)");
    auto w = interpolate_3nn_weights(queries, sources);
    const int C = source_features.dim(1);
    Tensor<T> out({int(queries.size()), C});
    for (int i = 0; i < w.query_count(); ++i)
        for (int j = 0; j < 3; ++j) {
            const T wt = w.weights[std::size_t(i)][std::size_t(j)];
            const int s = w.indices[std::size_t(i)][std::size_t(j)];
            for (int c = 0; c < C; ++c)
                out[std::size_t(i) * std::size_t(C) + std::size_t(c)] +=
                    wt * source_features[std::size_t(s) * std::size_t(C) + std::size_t(c)];
        }
    return out;
}

// Flatten helpers between clouds/patches and dense tensors.
template <typename T>
Tensor<T> centers_tensor(const PatchSet<T>& ps) {
    Tensor<T> t({ps.group_count(), 3});
    for (int i = 0; i < ps.group_count(); ++i)
        for (int c = 0; c < 3; ++c) t[std::size_t(i) * 3 + std::size_t(c)] = ps.centers[std::size_t(i)][std::size_t(c)];
    return t;
}

template <typename T>
Tensor<T> patches_tensor(const PatchSet<T>& ps) {
    const int g = ps.group_count(), k = ps.patch_size();
    Tensor<T> t({g, k, 3});
    std::size_t p = 0;
    for (int i = 0; i < g; ++i)
        for (int j = 0; j < k; ++j)
            for (int c = 0; c < 3; ++c) t[p++] = ps.patches[std::size_t(i)][std::size_t(j)][std::size_t(c)];
    return t;
}

template <typename T>
Cloud<T> cloud_from_tensor(const Tensor<T>& t) {
    if (t.rank() != 2 || t.dim(1) != 3) throw ShapeError("cloud_from_tensor: expected (n,3)");
    Cloud<T> c(static_cast<std::size_t>(t.dim(0)));
    for (int i = 0; i < t.dim(0); ++i)
        for (int j = 0; j < 3; ++j) c[std::size_t(i)][std::size_t(j)] = t[std::size_t(i) * 3 + std::size_t(j)];
    return c;
}

}  // namespace pd
