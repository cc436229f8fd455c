#pragma once

// Compute kernels, each in two variants: pd::ref holds the serial reference
// implementations used as test oracles; pd::par holds the OpenMP versions the
// library actually calls. For a fixed thread count the parallel variants are
// bit-identical to the reference ones: work is split across independent output
// elements and every per-element reduction keeps the serial summation order.

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "pd/common.hpp"

namespace pd {

namespace detail {

// C[m,q] = op(A) * op(B), A is (m,p) or (p,m) when ta, likewise B.
template <typename T>
inline void matmul_row(bool ta, bool tb, int i, int m, int p, int q, const T* A,
                       const T* B, T* C) {
    (void)m;
    for (int j = 0; j < q; ++j) {
        T acc = 0;
        for (int l = 0; l < p; ++l) {
            T a = ta ? A[std::size_t(l) * std::size_t(m) + std::size_t(i)]
                     : A[std::size_t(i) * std::size_t(p) + std::size_t(l)];
            T b = tb ? B[std::size_t(j) * std::size_t(p) + std::size_t(l)]
                     : B[std::size_t(l) * std::size_t(q) + std::size_t(j)];
            acc += a * b;
        }
        C[std::size_t(i) * std::size_t(q) + std::size_t(j)] = acc;
    }
}

template <typename T>
inline void nearest_one(const Vec3<T>* queries, const Vec3<T>* sources, int ns,
                        int qi, int* out_idx, T* out_d2) {
    T best = std::numeric_limits<T>::max();
    int best_i = 0;
    for (int j = 0; j < ns; ++j) {
        T d = sqdist(queries[qi], sources[j]);
        if (d < best) {
            best = d;
            best_i = j;
        }
    }
    out_idx[qi] = best_i;
    out_d2[qi] = best;
}

// k smallest source indices for one query, ordered by (distance, index).
template <typename T>
inline void knn_one(const Vec3<T>* queries, const Vec3<T>* sources, int ns, int k,
                    int qi, int* out_idx) {
    std::vector<std::pair<T, int>> cand(static_cast<std::size_t>(ns));
    for (int j = 0; j < ns; ++j)
        cand[std::size_t(j)] = {sqdist(queries[qi], sources[j]), j};
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (int j = 0; j < k; ++j)
        out_idx[std::size_t(qi) * std::size_t(k) + std::size_t(j)] =
            cand[std::size_t(j)].second;
}

}  // namespace detail

namespace ref {

template <typename T>
void matmul(bool ta, bool tb, int m, int p, int q, const T* A, const T* B, T* C) {
    for (int i = 0; i < m; ++i) detail::matmul_row(ta, tb, i, m, p, q, A, B, C);
}

template <typename T>
void nearest(const Vec3<T>* queries, int nq, const Vec3<T>* sources, int ns,
             int* out_idx, T* out_d2) {
    for (int i = 0; i < nq; ++i)
        detail::nearest_one(queries, sources, ns, i, out_idx, out_d2);
}

template <typename T>
void knn(const Vec3<T>* queries, int nq, const Vec3<T>* sources, int ns, int k,
         int* out_idx) {
    for (int i = 0; i < nq; ++i) detail::knn_one(queries, sources, ns, k, i, out_idx);
}

// Greedy max-min farthest point sampling; ties go to the lowest index.
template <typename T>
void fps(const Vec3<T>* points, int n, int g, int start, int* out_idx) {
    std::vector<T> min_d2(static_cast<std::size_t>(n), std::numeric_limits<T>::max());
    out_idx[0] = start;
    for (int step = 1; step < g; ++step) {
        const Vec3<T>& last = points[out_idx[step - 1]];
        for (int i = 0; i < n; ++i)
            min_d2[std::size_t(i)] = std::min(min_d2[std::size_t(i)], sqdist(points[i], last));
        int best = -1;
        T best_d = T(-1);
        for (int i = 0; i < n; ++i) {
            bool taken = false;
            for (int s = 0; s < step; ++s)
                if (out_idx[s] == i) taken = true;
            if (taken) continue;
            if (min_d2[std::size_t(i)] > best_d) {
                best_d = min_d2[std::size_t(i)];
                best = i;
            }
        }
        out_idx[step] = best;
    }
}

}  // namespace ref

namespace par {

template <typename T>
void matmul(bool ta, bool tb, int m, int p, int q, const T* A, const T* B, T* C) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) detail::matmul_row(ta, tb, i, m, p, q, A, B, C);
}

template <typename T>
void nearest(const Vec3<T>* queries, int nq, const Vec3<T>* sources, int ns,
             int* out_idx, T* out_d2) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < nq; ++i)
        detail::nearest_one(queries, sources, ns, i, out_idx, out_d2);
}

template <typename T>
void knn(const Vec3<T>* queries, int nq, const Vec3<T>* sources, int ns, int k,
         int* out_idx) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < nq; ++i) detail::knn_one(queries, sources, ns, k, i, out_idx);
}

template <typename T>
void fps(const Vec3<T>* points, int n, int g, int start, int* out_idx) {
    std::vector<T> min_d2(static_cast<std::size_t>(n), std::numeric_limits<T>::max());
    std::vector<char> taken(static_cast<std::size_t>(n), 0);
    out_idx[0] = start;
    taken[std::size_t(start)] = 1;
    for (int step = 1; step < g; ++step) {
        const Vec3<T> last = points[out_idx[step - 1]];
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i)
            min_d2[std::size_t(i)] = std::min(min_d2[std::size_t(i)], sqdist(points[i], last));
        // serial argmax keeps the lowest-index tie-break deterministic
        int best = -1;
        T best_d = T(-1);
        for (int i = 0; i < n; ++i) {
            if (taken[std::size_t(i)]) continue;
            if (min_d2[std::size_t(i)] > best_d) {
                best_d = min_d2[std::size_t(i)];
                best = i;
            }
        }
        out_idx[step] = best;
        taken[std::size_t(best)] = 1;
    }
}

}  // namespace par

}  // namespace pd
