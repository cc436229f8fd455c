#pragma once

// Registry of finite-difference gradient checks: one entry per differentiable
// op plus end-to-end losses on the tiny profile. Used by both the gradcheck
// command and the acceptance suite, so op coverage is asserted in one place.

#include <memory>
#include <string>
#include <vector>

#include "pd/fdcheck.hpp"
#include "pd/model.hpp"

namespace pd {
namespace checks {

struct Check {
    std::string name;
    std::shared_ptr<ParamStore<double>> store;
    LossBuilder build;
};

namespace detail {

inline Tensor<double> rnd(Shape s, std::uint64_t seed, double scale = 1.0) {
    Tensor<double> t(std::move(s));
    Rng rng(seed);
    for (auto& v : t.data) v = scale * rng.normal();
    return t;
}

inline Check make(std::string name, std::vector<std::pair<std::string, Tensor<double>>> params,
                  std::function<int(Graph<double>&, ParamStore<double>&)> body) {
    auto store = std::make_shared<ParamStore<double>>();
    for (auto& [n, t] : params) store->add(n, std::move(t));
    return {std::move(name), store, std::move(body)};
}

// reduce an op output to a scalar with a fixed random cotangent pattern
inline int to_scalar(Graph<double>& G, int out, std::uint64_t seed) {
    return G.mse(out, G.input(rnd(G.val(out).shape, seed)));
}

}  // namespace detail

inline std::vector<Check> op_checks() {
    using detail::make;
    using detail::rnd;
    using detail::to_scalar;
    std::vector<Check> cs;

    cs.push_back(make("add", {{"x", rnd({3, 4}, 1)}, {"y", rnd({3, 4}, 2)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.add(G.param(P, "x"), G.param(P, "y")), 100);
                      }));
    cs.push_back(make("add_broadcast", {{"x", rnd({3, 4}, 3)}, {"b", rnd({4}, 4)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.add(G.param(P, "x"), G.param(P, "b")), 101);
                      }));
    cs.push_back(make("sub", {{"x", rnd({3, 4}, 5)}, {"y", rnd({3, 4}, 6)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.sub(G.param(P, "x"), G.param(P, "y")), 102);
                      }));
    cs.push_back(make("mul", {{"x", rnd({3, 4}, 7)}, {"y", rnd({3, 4}, 8)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.mul(G.param(P, "x"), G.param(P, "y")), 103);
                      }));
    cs.push_back(make("scale", {{"x", rnd({3, 4}, 9)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.scale(G.param(P, "x"), -1.7), 104);
                      }));
    cs.push_back(make("matmul", {{"a", rnd({3, 5}, 10)}, {"b", rnd({5, 4}, 11)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.matmul(G.param(P, "a"), G.param(P, "b")), 105);
                      }));
    cs.push_back(make("matmul_batched", {{"a", rnd({2, 3, 4}, 12)}, {"b", rnd({2, 4, 5}, 13)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.matmul(G.param(P, "a"), G.param(P, "b")), 106);
                      }));
    cs.push_back(make("reshape", {{"x", rnd({3, 4}, 14)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.reshape(G.param(P, "x"), {2, 6}), 107);
                      }));
    cs.push_back(make("permute", {{"x", rnd({2, 3, 4}, 15)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.permute(G.param(P, "x"), {2, 0, 1}), 108);
                      }));
    cs.push_back(make("concat", {{"x", rnd({2, 3}, 16)}, {"y", rnd({2, 5}, 17)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(
                              G, G.concat({G.param(P, "x"), G.param(P, "y")}, 1), 109);
                      }));
    cs.push_back(make("gather_rows", {{"x", rnd({5, 3}, 18)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.gather_rows(G.param(P, "x"), {4, 1, 1}), 110);
                      }));
    cs.push_back(make("replace_rows", {{"x", rnd({5, 3}, 19)}, {"r", rnd({3}, 20)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(
                              G, G.replace_rows(G.param(P, "x"), G.param(P, "r"), {0, 3}), 111);
                      }));
    cs.push_back(make("softmax", {{"x", rnd({3, 5}, 21)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.softmax(G.param(P, "x")), 112);
                      }));
    cs.push_back(make("layer_norm",
                      {{"x", rnd({4, 6}, 22)}, {"g", rnd({6}, 23)}, {"b", rnd({6}, 24)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(
                              G,
                              G.layer_norm(G.param(P, "x"), G.param(P, "g"), G.param(P, "b")),
                              113);
                      }));
    {
        auto rm = std::make_shared<Tensor<double>>(Tensor<double>::zeros({6}));
        auto rv = std::make_shared<Tensor<double>>(Tensor<double>::full({6}, 1.0));
        cs.push_back(make("batch_norm",
                          {{"x", rnd({8, 6}, 25)}, {"g", rnd({6}, 26)}, {"b", rnd({6}, 27)}},
                          [rm, rv](Graph<double>& G, ParamStore<double>& P) {
                              return detail::to_scalar(
                                  G,
                                  G.batch_norm(G.param(P, "x"), G.param(P, "g"),
                                               G.param(P, "b"), *rm, *rv, /*train=*/true),
                                  114);
                          }));
    }
    cs.push_back(make("relu", {{"x", rnd({4, 5}, 28)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.relu(G.param(P, "x")), 115);
                      }));
    cs.push_back(make("gelu", {{"x", rnd({4, 5}, 29)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.gelu(G.param(P, "x")), 116);
                      }));
    cs.push_back(make("mse", {{"x", rnd({4, 5}, 30)}, {"y", rnd({4, 5}, 31)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return G.mse(G.param(P, "x"), G.param(P, "y"));
                      }));
    cs.push_back(make("sum_all", {{"x", rnd({4, 5}, 32)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return G.sum_all(G.mul(G.param(P, "x"), G.param(P, "x")));
                      }));
    cs.push_back(make("mean_axis", {{"x", rnd({4, 5}, 33)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.mean_axis(G.param(P, "x"), 0), 117);
                      }));
    cs.push_back(make("max_axis", {{"x", rnd({4, 5}, 34)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return to_scalar(G, G.max_axis(G.param(P, "x"), 1), 118);
                      }));
    cs.push_back(make("chamfer", {{"x", rnd({6, 3}, 35)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return G.chamfer(G.param(P, "x"), G.input(rnd({5, 3}, 36)));
                      }));
    cs.push_back(make("cross_entropy", {{"x", rnd({5}, 37)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          return G.cross_entropy(G.param(P, "x"), 2);
                      }));
    cs.push_back(make("dropout", {{"x", rnd({6, 5}, 38)}},
                      [](Graph<double>& G, ParamStore<double>& P) {
                          Rng rng(99);  // fresh per build, so the mask is fixed
                          return to_scalar(G, G.dropout(G.param(P, "x"), 0.3, rng), 119);
                      }));
    {
        // fixed interpolation geometry shared by every evaluation
        Cloud<double> src(4), q(7);
        Rng rng(40);
        for (auto& p : src) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        for (auto& p : q) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        auto w = std::make_shared<InterpWeights<double>>(interpolate_3nn_weights(q, src));
        cs.push_back(make("interpolate", {{"f", rnd({4, 5}, 41)}},
                          [w](Graph<double>& G, ParamStore<double>& P) {
                              return detail::to_scalar(G, G.interpolate(G.param(P, "f"), *w),
                                                       120);
                          }));
    }
    return cs;
}

// End-to-end losses on the tiny profile; parameters are the full model.
inline std::vector<Check> model_checks() {
    std::vector<Check> cs;
    const ModelConfig cfg = ModelConfig::tiny();
    auto patches = std::make_shared<Tensor<double>>(
        detail::rnd({cfg.groups, cfg.patch_size, 3}, 50, 0.3));
    auto centers = std::make_shared<Tensor<double>>(detail::rnd({cfg.groups, 3}, 51, 0.5));
    auto teacher =
        std::make_shared<Tensor<double>>(detail::rnd({cfg.prefix_len, cfg.d_cap}, 52));
    {
        auto store = std::make_shared<ParamStore<double>>();
        model::init_pretrain(*store, cfg, 53, /*distill=*/true, /*recon=*/false);
        cs.push_back({"loss.distill", store,
                      [cfg, patches, centers, teacher](Graph<double>& G, ParamStore<double>& S) {
                          return model::pretrain_forward(G, S, cfg, *patches, *centers,
                                                         teacher.get(), {}, true)
                              .distill;
                      }});
    }
    {
        auto store = std::make_shared<ParamStore<double>>();
        model::init_pretrain(*store, cfg, 54, /*distill=*/false, /*recon=*/true);
        auto mask = model::choose_mask(cfg.groups, cfg.mask_ratio, 55);
        cs.push_back({"loss.recon", store,
                      [cfg, patches, centers, mask](Graph<double>& G, ParamStore<double>& S) {
                          const Tensor<double>* no_teacher = nullptr;
                          return model::pretrain_forward(G, S, cfg, *patches, *centers,
                                                         no_teacher, mask, true)
                              .recon;
                      }});
    }
    return cs;
}

struct Report {
    std::string name;
    FdResult fd;
    bool pass = false;
};

inline std::vector<Report> run_checks(const std::vector<Check>& cs, int samples,
                                      std::uint64_t seed, double tol) {
    std::vector<Report> out;
    for (const auto& c : cs) {
        Report r;
        r.name = c.name;
        r.fd = fd_check_params(*c.store, c.build, samples, seed);
        r.pass = r.fd.max_rel_err < tol;
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace checks
}  // namespace pd
