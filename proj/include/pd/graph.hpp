#pragma once

// Minimal reverse-mode autodiff over dense tensors. A Graph records one
// forward pass; backward() replays the tape in reverse, accumulating adjoints
// by summation. Leaves created via param() are tied to a ParamStore entry and
// their gradients can be exported into a GradMap after backward.
//
// Every forward op validates shapes and rejects non-finite outputs, so a NaN
// aborts the step at the op that produced it instead of propagating silently.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "pd/common.hpp"
#include "pd/geometry.hpp"
#include "pd/kernels.hpp"
#include "pd/params.hpp"
#include "pd/tensor.hpp"

namespace pd {

template <typename T>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    int input(Tensor<T> v, bool needs_grad = false) {
        Node n;
        n.value = std::move(v);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return int(nodes_.size()) - 1;
    }

    // Leaf tied to a named store entry; repeated calls with the same name
    // return the same node, so shared parameters accumulate one gradient.
    int param(ParamStore<T>& store, const std::string& name) {
        auto it = param_ids_.find(name);
        if (it != param_ids_.end()) return it->second;
        const auto& e = store.entry(name);
        int id = input(e.value, e.trainable);
        param_ids_[name] = id;
        return id;
    }

    const Tensor<T>& val(int id) const { return nodes_[std::size_t(id)].value; }

    Tensor<T> grad(int id) const {
        const Node& n = nodes_[std::size_t(id)];
        if (n.grad.data.empty()) return Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }

    // Number of adjoint accumulations a node received during backward.
    int grad_contributions(int id) const { return nodes_[std::size_t(id)].contribs; }

    void backward(int loss) {
        Node& l = nodes_[std::size_t(loss)];
        if (l.value.numel() != 1)
            throw InvalidArgument("backward: loss must be a scalar, got " +
                                  shape_str(l.value.shape));
        l.grad = Tensor<T>::full(l.value.shape, T(1));
        for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[std::size_t(i)];
            if (n.backward && !n.grad.data.empty()) n.backward(*this);
        }
    }

    // Sum parameter gradients into `out`, scaled (e.g. by 1/batch).
    void export_grads(GradMap<T>& out, T scale = T(1)) const {
        for (const auto& [name, id] : param_ids_) {
            const Node& n = nodes_[std::size_t(id)];
            if (!n.needs_grad) continue;
            grad_map_add(out, name, grad(id), scale);
        }
    }

    // ---- ops ----

    int add(int a, int b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (A.shape == B.shape) {
            Tensor<T> out(A.shape);
            for (std::size_t i = 0; i < out.data.size(); ++i) out[i] = A[i] + B[i];
            return make(std::move(out), "add", [a, b](Graph& g, const Tensor<T>& go) {
                g.accum(a, go);
                g.accum(b, go);
            });
        }
        // broadcast: B's shape must be a suffix of A's (bias add)
        if (A.rank() > B.rank() &&
            std::equal(B.shape.begin(), B.shape.end(), A.shape.end() - B.rank())) {
            const std::size_t inner = std::size_t(B.numel());
            Tensor<T> out(A.shape);
            for (std::size_t i = 0; i < out.data.size(); ++i) out[i] = A[i] + B[i % inner];
            return make(std::move(out), "add", [a, b, inner](Graph& g, const Tensor<T>& go) {
                g.accum(a, go);
                Tensor<T> gb(g.val(b).shape);
                for (std::size_t i = 0; i < go.data.size(); ++i) gb[i % inner] += go[i];
                g.accum(b, gb);
            });
        }
        throw ShapeError("add: incompatible shapes " + shape_str(A.shape) + " and " +
                         shape_str(B.shape));
    }

    int sub(int a, int b) { return add(a, scale(b, T(-1))); }

    int mul(int a, int b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (A.shape != B.shape) throw ShapeError("mul: shape mismatch");
        Tensor<T> out(A.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out[i] = A[i] * B[i];
        return make(std::move(out), "mul", [a, b](Graph& g, const Tensor<T>& go) {
            const Tensor<T>&A = g.val(a), &B = g.val(b);
            Tensor<T> ga(A.shape), gb(B.shape);
            for (std::size_t i = 0; i < go.data.size(); ++i) {
                ga[i] = go[i] * B[i];
                gb[i] = go[i] * A[i];
            }
            g.accum(a, ga);
            g.accum(b, gb);
        });
    }

    int scale(int a, T c) {
        const Tensor<T>& A = val(a);
        Tensor<T> out(A.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out[i] = A[i] * c;
        return make(std::move(out), "scale", [a, c](Graph& g, const Tensor<T>& go) {
            Tensor<T> ga(go.shape);
            for (std::size_t i = 0; i < go.data.size(); ++i) ga[i] = go[i] * c;
            g.accum(a, ga);
        });
    }

    int matmul(int a, int b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (A.rank() == 2 && B.rank() == 2) {
            if (A.dim(1) != B.dim(0))
                throw ShapeError("matmul: inner dims " + shape_str(A.shape) + " x " +
                                 shape_str(B.shape));
            const int m = A.dim(0), p = A.dim(1), q = B.dim(1);
            Tensor<T> out({m, q});
            par::matmul(false, false, m, p, q, A.data.data(), B.data.data(), out.data.data());
            return make(std::move(out), "matmul", [a, b, m, p, q](Graph& g, const Tensor<T>& go) {
                const Tensor<T>&A = g.val(a), &B = g.val(b);
                Tensor<T> ga(A.shape), gb(B.shape);
                // dA = dC * B^T ; dB = A^T * dC
                par::matmul(false, true, m, q, p, go.data.data(), B.data.data(), ga.data.data());
                par::matmul(true, false, p, m, q, A.data.data(), go.data.data(), gb.data.data());
                g.accum(a, ga);
                g.accum(b, gb);
            });
        }
        if (A.rank() == 3 && B.rank() == 3) {
            if (A.dim(0) != B.dim(0) || A.dim(2) != B.dim(1))
                throw ShapeError("matmul: batched shapes " + shape_str(A.shape) + " x " +
                                 shape_str(B.shape));
            const int bt = A.dim(0), m = A.dim(1), p = A.dim(2), q = B.dim(2);
            Tensor<T> out({bt, m, q});
            for (int i = 0; i < bt; ++i)
                par::matmul(false, false, m, p, q, A.data.data() + std::size_t(i) * std::size_t(m) * std::size_t(p),
                            B.data.data() + std::size_t(i) * std::size_t(p) * std::size_t(q),
                            out.data.data() + std::size_t(i) * std::size_t(m) * std::size_t(q));
            return make(std::move(out), "matmul",
                        [a, b, bt, m, p, q](Graph& g, const Tensor<T>& go) {
                            const Tensor<T>&A = g.val(a), &B = g.val(b);
                            Tensor<T> ga(A.shape), gb(B.shape);
                            for (int i = 0; i < bt; ++i) {
                                const std::size_t oa = std::size_t(i) * std::size_t(m) * std::size_t(p);
                                const std::size_t ob = std::size_t(i) * std::size_t(p) * std::size_t(q);
                                const std::size_t oc = std::size_t(i) * std::size_t(m) * std::size_t(q);
                                par::matmul(false, true, m, q, p, go.data.data() + oc,
                                            B.data.data() + ob, ga.data.data() + oa);
                                par::matmul(true, false, p, m, q, A.data.data() + oa,
                                            go.data.data() + oc, gb.data.data() + ob);
                            }
                            g.accum(a, ga);
                            g.accum(b, gb);
                        });
        }
        throw ShapeError("matmul: unsupported ranks " + shape_str(A.shape) + " x " +
                         shape_str(B.shape));
    }

    int reshape(int a, Shape s) {
        const Tensor<T>& A = val(a);
        if (shape_numel(s) != A.numel())
            throw ShapeError("reshape: numel mismatch " + shape_str(A.shape) + " -> " +
                             shape_str(s));
        Tensor<T> out(std::move(s));
        out.data = A.data;
        return make(std::move(out), "reshape", [a](Graph& g, const Tensor<T>& go) {
            Tensor<T> ga(g.val(a).shape);
            ga.data = go.data;
            g.accum(a, ga);
        });
    }

    int permute(int a, std::vector<int> perm) {
        const Tensor<T>& A = val(a);
        const int r = A.rank();
        if (int(perm.size()) != r) throw ShapeError("permute: rank mismatch");
        Shape out_shape(static_cast<std::size_t>(r));
        for (int i = 0; i < r; ++i) out_shape[std::size_t(i)] = A.dim(perm[std::size_t(i)]);
        Tensor<T> out(out_shape);
        permute_copy(A, perm, out);
        return make(std::move(out), "permute", [a, perm](Graph& g, const Tensor<T>& go) {
            std::vector<int> inv(perm.size());
            for (std::size_t i = 0; i < perm.size(); ++i) inv[std::size_t(perm[i])] = int(i);
            Tensor<T> ga(g.val(a).shape);
            permute_copy(go, inv, ga);
            g.accum(a, ga);
        });
    }

    int concat(const std::vector<int>& ids, int axis) {
        if (ids.empty()) throw InvalidArgument("concat: no inputs");
        const Tensor<T>& first = val(ids[0]);
        const int r = first.rank();
        Shape out_shape = first.shape;
        std::vector<int> axis_sizes;
        int total = 0;
        for (int id : ids) {
            const Tensor<T>& t = val(id);
            if (t.rank() != r) throw ShapeError("concat: rank mismatch");
            for (int d = 0; d < r; ++d)
                if (d != axis && t.dim(d) != first.dim(d))
                    throw ShapeError("concat: shape mismatch on non-concat axis");
            axis_sizes.push_back(t.dim(axis));
            total += t.dim(axis);
        }
        out_shape[std::size_t(axis)] = total;
        std::size_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= std::size_t(first.dim(d));
        for (int d = axis + 1; d < r; ++d) inner *= std::size_t(first.dim(d));
        Tensor<T> out(out_shape);
        std::size_t off = 0;
        for (std::size_t t = 0; t < ids.size(); ++t) {
            const Tensor<T>& src = val(ids[t]);
            const std::size_t blk = std::size_t(axis_sizes[t]) * inner;
            for (std::size_t o = 0; o < outer; ++o)
                std::copy_n(src.data.data() + o * blk, blk,
                            out.data.data() + o * std::size_t(total) * inner + off);
            off += blk;
        }
        auto sizes = axis_sizes;
        return make(std::move(out), "concat",
                    [ids, sizes, outer, inner, total](Graph& g, const Tensor<T>& go) {
                        std::size_t off = 0;
                        for (std::size_t t = 0; t < ids.size(); ++t) {
                            Tensor<T> gi(g.val(ids[t]).shape);
                            const std::size_t blk = std::size_t(sizes[t]) * inner;
                            for (std::size_t o = 0; o < outer; ++o)
                                std::copy_n(go.data.data() + o * std::size_t(total) * inner + off,
                                            blk, gi.data.data() + o * blk);
                            off += blk;
                            g.accum(ids[t], gi);
                        }
                    });
    }

    // rows of `a` (first axis) selected by `indices`
    int gather_rows(int a, std::vector<int> indices) {
        const Tensor<T>& A = val(a);
        if (A.rank() < 2) throw ShapeError("gather_rows: rank < 2");
        const std::size_t row = std::size_t(A.numel() / A.dim(0));
        Shape s = A.shape;
        s[0] = int(indices.size());
        Tensor<T> out(s);
        for (std::size_t i = 0; i < indices.size(); ++i)
            std::copy_n(A.data.data() + std::size_t(indices[i]) * row, row,
                        out.data.data() + i * row);
        return make(std::move(out), "gather_rows", [a, indices, row](Graph& g, const Tensor<T>& go) {
            Tensor<T> ga(g.val(a).shape);
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (std::size_t j = 0; j < row; ++j)
                    ga[std::size_t(indices[i]) * row + j] += go[i * row + j];
            g.accum(a, ga);
        });
    }

    // rows of `a` at `indices` replaced by the broadcast vector `row_vec`
    int replace_rows(int a, int row_vec, std::vector<int> indices) {
        const Tensor<T>&A = val(a), &R = val(row_vec);
        if (A.rank() != 2 || R.numel() != A.dim(1))
            throw ShapeError("replace_rows: expected (g,d) and (d)");
        const std::size_t d = std::size_t(A.dim(1));
        Tensor<T> out = A;
        std::vector<char> masked(static_cast<std::size_t>(A.dim(0)), 0);
        for (int i : indices) {
            masked[std::size_t(i)] = 1;
            std::copy_n(R.data.data(), d, out.data.data() + std::size_t(i) * d);
        }
        return make(std::move(out), "replace_rows",
                    [a, row_vec, masked, d](Graph& g, const Tensor<T>& go) {
                        Tensor<T> ga(g.val(a).shape);
                        Tensor<T> gr(g.val(row_vec).shape);
                        for (std::size_t i = 0; i < masked.size(); ++i) {
                            if (masked[i]) {
                                for (std::size_t j = 0; j < d; ++j) gr[j] += go[i * d + j];
                            } else {
                                for (std::size_t j = 0; j < d; ++j) ga[i * d + j] = go[i * d + j];
                            }
                        }
                        g.accum(a, ga);
                        g.accum(row_vec, gr);
                    });
    }

    // numerically stabilized softmax over the last axis
    int softmax(int a) {
        const Tensor<T>& A = val(a);
        const std::size_t n = std::size_t(A.dim(A.rank() - 1));
        const std::size_t rows = std::size_t(A.numel()) / n;
        Tensor<T> out(A.shape);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* x = A.data.data() + r * n;
            T* y = out.data.data() + r * n;
            T mx = x[0];
            for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
            T sum = 0;
            for (std::size_t i = 0; i < n; ++i) {
                y[i] = std::exp(x[i] - mx);
                sum += y[i];
            }
            for (std::size_t i = 0; i < n; ++i) y[i] /= sum;
        }
        int out_id = make(std::move(out), "softmax", nullptr);
        nodes_[std::size_t(out_id)].backward = [a, out_id, n, rows](Graph& g) {
            const Tensor<T>& go = g.nodes_[std::size_t(out_id)].grad;
            const Tensor<T>& y = g.val(out_id);
            Tensor<T> ga(g.val(a).shape);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gy = go.data.data() + r * n;
                const T* yy = y.data.data() + r * n;
                T dot = 0;
                for (std::size_t i = 0; i < n; ++i) dot += gy[i] * yy[i];
                for (std::size_t i = 0; i < n; ++i)
                    ga[r * n + std::size_t(i)] = yy[i] * (gy[i] - dot);
            }
            g.accum(a, ga);
        };
        return out_id;
    }

    int layer_norm(int a, int gain, int bias, T eps = T(1e-5)) {
        const Tensor<T>& A = val(a);
        const std::size_t n = std::size_t(A.dim(A.rank() - 1));
        if (std::size_t(val(gain).numel()) != n || std::size_t(val(bias).numel()) != n)
            throw ShapeError("layer_norm: gain/bias must match last dim");
        const std::size_t rows = std::size_t(A.numel()) / n;
        Tensor<T> out(A.shape);
        auto mean = std::make_shared<std::vector<T>>(rows);
        auto rstd = std::make_shared<std::vector<T>>(rows);
        const Tensor<T>& G = val(gain);
        const Tensor<T>& B = val(bias);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* x = A.data.data() + r * n;
            T mu = 0;
            for (std::size_t i = 0; i < n; ++i) mu += x[i];
            mu /= T(n);
            T var = 0;
            for (std::size_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
            var /= T(n);
            T rs = T(1) / std::sqrt(var + eps);
            (*mean)[r] = mu;
            (*rstd)[r] = rs;
            for (std::size_t i = 0; i < n; ++i)
                out.data[r * n + i] = (x[i] - mu) * rs * G[i] + B[i];
        }
        return make(std::move(out), "layer_norm",
                    [a, gain, bias, n, rows, mean, rstd](Graph& g, const Tensor<T>& go) {
                        const Tensor<T>& A = g.val(a);
                        const Tensor<T>& G = g.val(gain);
                        Tensor<T> ga(A.shape), gg(g.val(gain).shape), gb(g.val(bias).shape);
                        for (std::size_t r = 0; r < rows; ++r) {
                            const T* x = A.data.data() + r * n;
                            const T* gy = go.data.data() + r * n;
                            const T mu = (*mean)[r], rs = (*rstd)[r];
                            T sum_g = 0, sum_gx = 0;
                            for (std::size_t i = 0; i < n; ++i) {
                                const T xh = (x[i] - mu) * rs;
                                const T gl = gy[i] * G[i];
                                gg[i] += gy[i] * xh;
                                gb[i] += gy[i];
                                sum_g += gl;
                                sum_gx += gl * xh;
                            }
                            for (std::size_t i = 0; i < n; ++i) {
                                const T xh = (x[i] - mu) * rs;
                                const T gl = gy[i] * G[i];
                                ga[r * n + i] = rs * (gl - sum_g / T(n) - xh * sum_gx / T(n));
                            }
                        }
                        g.accum(a, ga);
                        g.accum(gain, gg);
                        g.accum(bias, gb);
                    });
    }

    // Batch norm over all axes except the last (channel) axis. In train mode
    // normalizes by batch statistics and updates the running buffers in place
    // with momentum; in eval mode uses the running buffers.
    int batch_norm(int a, int gain, int bias, Tensor<T>& running_mean,
                   Tensor<T>& running_var, bool train, T momentum = T(0.1),
                   T eps = T(1e-5)) {
        const Tensor<T>& A = val(a);
        const std::size_t c = std::size_t(A.dim(A.rank() - 1));
        const std::size_t rows = std::size_t(A.numel()) / c;
        if (std::size_t(val(gain).numel()) != c || std::size_t(running_mean.numel()) != c)
            throw ShapeError("batch_norm: channel mismatch");
        if (train && rows <= 1)
            throw InvalidArgument("batch_norm: degenerate batch (one sample per statistic)");
        auto mean = std::make_shared<std::vector<T>>(c);
        auto rstd = std::make_shared<std::vector<T>>(c);
        if (train) {
            for (std::size_t j = 0; j < c; ++j) {
                T mu = 0;
                for (std::size_t r = 0; r < rows; ++r) mu += A[r * c + j];
                mu /= T(rows);
                T var = 0;
                for (std::size_t r = 0; r < rows; ++r)
                    var += (A[r * c + j] - mu) * (A[r * c + j] - mu);
                var /= T(rows);
                (*mean)[j] = mu;
                (*rstd)[j] = T(1) / std::sqrt(var + eps);
                running_mean[j] = (T(1) - momentum) * running_mean[j] + momentum * mu;
                running_var[j] = (T(1) - momentum) * running_var[j] + momentum * var;
            }
        } else {
            for (std::size_t j = 0; j < c; ++j) {
                (*mean)[j] = running_mean[j];
                (*rstd)[j] = T(1) / std::sqrt(running_var[j] + eps);
            }
        }
        const Tensor<T>& G = val(gain);
        const Tensor<T>& B = val(bias);
        Tensor<T> out(A.shape);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j)
                out[r * c + j] = (A[r * c + j] - (*mean)[j]) * (*rstd)[j] * G[j] + B[j];
        return make(std::move(out), "batch_norm",
                    [a, gain, bias, c, rows, mean, rstd, train](Graph& g, const Tensor<T>& go) {
                        const Tensor<T>& A = g.val(a);
                        const Tensor<T>& G = g.val(gain);
                        Tensor<T> ga(A.shape), gg(g.val(gain).shape), gb(g.val(bias).shape);
                        for (std::size_t j = 0; j < c; ++j) {
                            const T mu = (*mean)[j], rs = (*rstd)[j];
                            T sum_g = 0, sum_gx = 0;
                            for (std::size_t r = 0; r < rows; ++r) {
                                const T xh = (A[r * c + j] - mu) * rs;
                                const T gl = go[r * c + j] * G[j];
                                gg[j] += go[r * c + j] * xh;
                                gb[j] += go[r * c + j];
                                sum_g += gl;
                                sum_gx += gl * xh;
                            }
                            for (std::size_t r = 0; r < rows; ++r) {
                                const T xh = (A[r * c + j] - mu) * rs;
                                const T gl = go[r * c + j] * G[j];
                                // eval mode treats the running stats as constants
                                ga[r * c + j] = train
                                                    ? rs * (gl - sum_g / T(rows) - xh * sum_gx / T(rows))
                                                    : rs * gl;
                            }
                        }
                        g.accum(a, ga);
                        g.accum(gain, gg);
                        g.accum(bias, gb);
                    });
    }

    int relu(int a) {
        const Tensor<T>& A = val(a);
        Tensor<T> out(A.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out[i] = A[i] > 0 ? A[i] : T(0);
        return make(std::move(out), "relu", [a](Graph& g, const Tensor<T>& go) {
            const Tensor<T>& A = g.val(a);
            Tensor<T> ga(A.shape);
            for (std::size_t i = 0; i < go.data.size(); ++i) ga[i] = A[i] > 0 ? go[i] : T(0);
            g.accum(a, ga);
        });
    }

    // tanh approximation of gelu
    int gelu(int a) {
        const Tensor<T>& A = val(a);
        Tensor<T> out(A.shape);
        constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            const double x = double(A[i]);
            out[i] = T(0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x))));
        }
        return make(std::move(out), "gelu", [a](Graph& g, const Tensor<T>& go) {
            const Tensor<T>& A = g.val(a);
            Tensor<T> ga(A.shape);
            for (std::size_t i = 0; i < go.data.size(); ++i) {
                const double x = double(A[i]);
                const double u = kC * (x + 0.044715 * x * x * x);
                const double t = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
                const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                ga[i] = T(double(go[i]) * d);
            }
            g.accum(a, ga);
        });
    }

    int mse(int a, int b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (A.shape != B.shape) throw ShapeError("mse: shape mismatch");
        const T n = T(A.numel());
        T acc = 0;
        for (std::size_t i = 0; i < A.data.size(); ++i) {
            const T d = A[i] - B[i];
            acc += d * d;
        }
        return make(Tensor<T>::scalar(acc / n), "mse", [a, b, n](Graph& g, const Tensor<T>& go) {
            const Tensor<T>&A = g.val(a), &B = g.val(b);
            Tensor<T> ga(A.shape), gb(B.shape);
            const T s = go[0] * T(2) / n;
            for (std::size_t i = 0; i < A.data.size(); ++i) {
                ga[i] = s * (A[i] - B[i]);
                gb[i] = -ga[i];
            }
            g.accum(a, ga);
            g.accum(b, gb);
        });
    }

    int sum_all(int a) {
        const Tensor<T>& A = val(a);
        T acc = 0;
        for (T v : A.data) acc += v;
        return make(Tensor<T>::scalar(acc), "sum", [a](Graph& g, const Tensor<T>& go) {
            g.accum(a, Tensor<T>::full(g.val(a).shape, go[0]));
        });
    }

    int mean_axis(int a, int axis) {
        const Tensor<T>& A = val(a);
        auto [outer, red, inner] = reduce_dims(A, axis);
        Tensor<T> out(reduced_shape(A, axis));
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                T acc = 0;
                for (std::size_t r = 0; r < red; ++r) acc += A[(o * red + r) * inner + i];
                out[o * inner + i] = acc / T(red);
            }
        return make(std::move(out), "mean_axis",
                    [a, outer = outer, red = red, inner = inner](Graph& g, const Tensor<T>& go) {
                        Tensor<T> ga(g.val(a).shape);
                        for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < inner; ++i) {
                                const T v = go[o * inner + i] / T(red);
                                for (std::size_t r = 0; r < red; ++r)
                                    ga[(o * red + r) * inner + i] = v;
                            }
                        g.accum(a, ga);
                    });
    }

    // max over one axis; the gradient routes to the argmax, ties to the lowest index
    int max_axis(int a, int axis) {
        const Tensor<T>& A = val(a);
        auto [outer, red, inner] = reduce_dims(A, axis);
        Tensor<T> out(reduced_shape(A, axis));
        auto arg = std::make_shared<std::vector<std::size_t>>(outer * inner);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                T best = A[(o * red + 0) * inner + i];
                std::size_t bi = 0;
                for (std::size_t r = 1; r < red; ++r) {
                    const T v = A[(o * red + r) * inner + i];
                    if (v > best) {
                        best = v;
                        bi = r;
                    }
                }
                out[o * inner + i] = best;
                (*arg)[o * inner + i] = bi;
            }
        return make(std::move(out), "max_axis",
                    [a, outer = outer, red = red, inner = inner, arg](Graph& g, const Tensor<T>& go) {
                        Tensor<T> ga(g.val(a).shape);
                        for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < inner; ++i)
                                ga[(o * red + (*arg)[o * inner + i]) * inner + i] =
                                    go[o * inner + i];
                        g.accum(a, ga);
                    });
    }

    // Differentiable symmetric l2 Chamfer distance between (na,3) and (nb,3);
    // nearest-neighbor assignments are treated as constant in the backward pass.
    int chamfer(int a, int b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != 3 || B.dim(1) != 3)
            throw ShapeError("chamfer: expected (n,3) point sets");
        if (A.dim(0) < 1 || B.dim(0) < 1) throw InvalidArgument("chamfer: empty point set");
        const int na = A.dim(0), nb = B.dim(0);
        auto nn_ab = std::make_shared<std::vector<int>>(std::size_t(na));
        auto nn_ba = std::make_shared<std::vector<int>>(std::size_t(nb));
        std::vector<T> d2(std::size_t(std::max(na, nb)));
        const auto* pa = reinterpret_cast<const Vec3<T>*>(A.data.data());
        const auto* pb = reinterpret_cast<const Vec3<T>*>(B.data.data());
        par::nearest(pa, na, pb, nb, nn_ab->data(), d2.data());
        T sum_ab = 0;
        for (int i = 0; i < na; ++i) sum_ab += d2[std::size_t(i)];
        par::nearest(pb, nb, pa, na, nn_ba->data(), d2.data());
        T sum_ba = 0;
        for (int i = 0; i < nb; ++i) sum_ba += d2[std::size_t(i)];
        const T loss = sum_ab / T(na) + sum_ba / T(nb);
        return make(Tensor<T>::scalar(loss), "chamfer",
                    [a, b, na, nb, nn_ab, nn_ba](Graph& g, const Tensor<T>& go) {
                        const Tensor<T>&A = g.val(a), &B = g.val(b);
                        Tensor<T> ga(A.shape), gb(B.shape);
                        const T s = go[0];
                        for (int i = 0; i < na; ++i) {
                            const int j = (*nn_ab)[std::size_t(i)];
                            for (int c = 0; c < 3; ++c) {
                                const T d = A[std::size_t(i) * 3 + std::size_t(c)] -
                                            B[std::size_t(j) * 3 + std::size_t(c)];
                                ga[std::size_t(i) * 3 + std::size_t(c)] += s * T(2) * d / T(na);
                                gb[std::size_t(j) * 3 + std::size_t(c)] -= s * T(2) * d / T(na);
                            }
                        }
                        for (int j = 0; j < nb; ++j) {
                            const int i = (*nn_ba)[std::size_t(j)];
                            for (int c = 0; c < 3; ++c) {
                                const T d = B[std::size_t(j) * 3 + std::size_t(c)] -
                                            A[std::size_t(i) * 3 + std::size_t(c)];
                                gb[std::size_t(j) * 3 + std::size_t(c)] += s * T(2) * d / T(nb);
                                ga[std::size_t(i) * 3 + std::size_t(c)] -= s * T(2) * d / T(nb);
                            }
                        }
                        g.accum(a, ga);
                        g.accum(b, gb);
                    });
    }

    // -log softmax(logits)[label]; logits rank-1 or (1,C)
    int cross_entropy(int logits, int label) {
        const Tensor<T>& L = val(logits);
        const std::size_t c = std::size_t(L.numel());
        if (label < 0 || std::size_t(label) >= c)
            throw InvalidArgument("cross_entropy: label out of range");
        T mx = L[0];
        for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, L[i]);
        T sum = 0;
        for (std::size_t i = 0; i < c; ++i) sum += std::exp(L[i] - mx);
        const T loss = -(L[std::size_t(label)] - mx - std::log(sum));
        return make(Tensor<T>::scalar(loss), "cross_entropy",
                    [logits, label, c](Graph& g, const Tensor<T>& go) {
                        const Tensor<T>& L = g.val(logits);
                        T mx = L[0];
                        for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, L[i]);
                        T sum = 0;
                        for (std::size_t i = 0; i < c; ++i) sum += std::exp(L[i] - mx);
                        Tensor<T> gl(L.shape);
                        for (std::size_t i = 0; i < c; ++i) {
                            T p = std::exp(L[i] - mx) / sum;
                            gl[i] = go[0] * (p - (int(i) == label ? T(1) : T(0)));
                        }
                        g.accum(logits, gl);
                    });
    }

    // seeded inverted dropout; no-op at p = 0
    int dropout(int a, double p, Rng& rng) {
        if (p <= 0.0) return a;
        const Tensor<T>& A = val(a);
        auto mask = std::make_shared<std::vector<T>>(A.data.size());
        const T keep = T(1.0 / (1.0 - p));
        Tensor<T> out(A.shape);
        for (std::size_t i = 0; i < A.data.size(); ++i) {
            (*mask)[i] = rng.uniform() < p ? T(0) : keep;
            out[i] = A[i] * (*mask)[i];
        }
        return make(std::move(out), "dropout", [a, mask](Graph& g, const Tensor<T>& go) {
            Tensor<T> ga(go.shape);
            for (std::size_t i = 0; i < go.data.size(); ++i) ga[i] = go[i] * (*mask)[i];
            g.accum(a, ga);
        });
    }

    // weighted 3-NN feature propagation; weights/indices are constants
    int interpolate(int features, const InterpWeights<T>& w) {
        const Tensor<T>& F = val(features);
        if (F.rank() != 2) throw ShapeError("interpolate: features must be 2-D");
        const std::size_t c = std::size_t(F.dim(1));
        Tensor<T> out({w.query_count(), int(c)});
        for (int i = 0; i < w.query_count(); ++i)
            for (int j = 0; j < 3; ++j) {
                const T wt = w.weights[std::size_t(i)][std::size_t(j)];
                const std::size_t s = std::size_t(w.indices[std::size_t(i)][std::size_t(j)]);
                for (std::size_t ch = 0; ch < c; ++ch)
                    out[std::size_t(i) * c + ch] += wt * F[s * c + ch];
            }
        auto idx = std::make_shared<InterpWeights<T>>(w);
        return make(std::move(out), "interpolate", [features, idx, c](Graph& g, const Tensor<T>& go) {
            Tensor<T> gf(g.val(features).shape);
            for (int i = 0; i < idx->query_count(); ++i)
                for (int j = 0; j < 3; ++j) {
                    const T wt = idx->weights[std::size_t(i)][std::size_t(j)];
                    const std::size_t s = std::size_t(idx->indices[std::size_t(i)][std::size_t(j)]);
                    for (std::size_t ch = 0; ch < c; ++ch)
                        gf[s * c + ch] += wt * go[std::size_t(i) * c + ch];
                }
            g.accum(features, gf);
        });
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool needs_grad = false;
        int contribs = 0;
        std::function<void(Graph&)> backward;
    };

    std::vector<Node> nodes_;
    std::map<std::string, int> param_ids_;

    static constexpr double kC = 0.7978845608028654;

    int make(Tensor<T> out, const char* opname,
             std::function<void(Graph&, const Tensor<T>&)> bw) {
        if (!out.all_finite())
            throw NumericError(std::string("non-finite value produced by op '") + opname + "'");
        Node n;
        n.value = std::move(out);
        nodes_.push_back(std::move(n));
        const int id = int(nodes_.size()) - 1;
        if (bw) {
            nodes_[std::size_t(id)].backward = [id, bw = std::move(bw)](Graph& g) {
                bw(g, g.nodes_[std::size_t(id)].grad);
            };
        }
        return id;
    }

    void accum(int id, const Tensor<T>& g) {
        Node& n = nodes_[std::size_t(id)];
        // leaves that do not require gradients (e.g. frozen teacher tensors)
        // never receive adjoints
        if (!n.backward && !n.needs_grad) return;
        if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
        for (std::size_t i = 0; i < g.data.size(); ++i) n.grad[i] += g[i];
        ++n.contribs;
    }

    static std::tuple<std::size_t, std::size_t, std::size_t> reduce_dims(const Tensor<T>& A,
                                                                         int axis) {
        if (axis < 0 || axis >= A.rank()) throw ShapeError("reduce: bad axis");
        std::size_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= std::size_t(A.dim(d));
        for (int d = axis + 1; d < A.rank(); ++d) inner *= std::size_t(A.dim(d));
        return {outer, std::size_t(A.dim(axis)), inner};
    }

    static Shape reduced_shape(const Tensor<T>& A, int axis) {
        Shape s;
        for (int d = 0; d < A.rank(); ++d)
            if (d != axis) s.push_back(A.dim(d));
        if (s.empty()) s.push_back(1);
        return s;
    }

    static void permute_copy(const Tensor<T>& src, const std::vector<int>& perm,
                             Tensor<T>& dst) {
        const int r = src.rank();
        std::vector<std::size_t> in_strides(static_cast<std::size_t>(r), 1);
        for (int d = r - 2; d >= 0; --d)
            in_strides[std::size_t(d)] = in_strides[std::size_t(d) + 1] * std::size_t(src.dim(d + 1));
        std::vector<std::size_t> strides(static_cast<std::size_t>(r));
        for (int d = 0; d < r; ++d) strides[std::size_t(d)] = in_strides[std::size_t(perm[std::size_t(d)])];
        std::vector<int> idx(static_cast<std::size_t>(r), 0);
        const std::size_t n = std::size_t(src.numel());
        std::size_t in_off = 0;
        for (std::size_t out_i = 0; out_i < n; ++out_i) {
            dst.data[out_i] = src.data[in_off];
            for (int d = r - 1; d >= 0; --d) {
                if (++idx[std::size_t(d)] < dst.dim(d)) {
                    in_off += strides[std::size_t(d)];
                    break;
                }
                idx[std::size_t(d)] = 0;
                in_off -= strides[std::size_t(d)] * (std::size_t(dst.dim(d)) - 1);
            }
        }
    }
};

}  // namespace pd
