// Model-level invariants: canonical parameter naming, scope-isolated init,
// shape contracts, residual/pooling identities, permutation behavior, shared
// cross-attention gradient fan-in, and finite-difference checks of the full
// pre-training loss.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "pd/fdcheck.hpp"
#include "pd/model.hpp"

using namespace pd;

namespace {

ModelConfig micro() {
    ModelConfig c = ModelConfig::tiny();
    c.points = 48;
    c.groups = 6;
    c.patch_size = 8;
    c.dim = 16;
    c.depth = 2;
    c.heads = 2;
    c.concept_tokens = 4;
    c.prefix_len = 2;
    c.d_cap = 8;
    c.dec_depth = 1;
    c.tok_channels = {8, 12, 16, 16};
    c.pos_hidden = 8;
    c.cls_hidden = 8;
    c.seg_hidden = 8;
    return c;
}

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
    Tensor<double> t(std::move(s));
    Rng rng(seed);
    for (auto& v : t.data) v = scale * rng.normal();
    return t;
}

}  // namespace

TEST_CASE("config validation") {
    CHECK_NOTHROW(ModelConfig::full_scale().validate());
    CHECK_NOTHROW(ModelConfig::tiny().validate());
    ModelConfig bad = ModelConfig::tiny();
    bad.heads = 5;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = ModelConfig::tiny();
    bad.tok_channels[3] = 32;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("full-scale defaults") {
    ModelConfig c = ModelConfig::full_scale();
    CHECK(c.points == 4096);
    CHECK(c.groups == 64);
    CHECK(c.patch_size == 32);
    CHECK(c.dim == 384);
    CHECK(c.depth == 12);
    CHECK(c.heads == 6);
    CHECK(c.concept_tokens == 32);
    CHECK(c.prefix_len == 10);
    CHECK(c.d_cap == 768);
    CHECK(c.mask_ratio == doctest::Approx(0.6));
}

TEST_CASE("init produces canonical names and decay flags") {
    ModelConfig cfg = micro();
    ParamStore<double> P;
    model::init_pretrain(P, cfg, 7, /*distill=*/true, /*recon=*/true);
    for (const char* name :
         {"tokenizer.conv0.weight", "tokenizer.bn0.gain", "tokenizer.bn2.running_var",
          "posenc.fc1.bias", "encoder.0.ln1.gain", "encoder.1.attn.q.weight",
          "encoder.1.ffn.fc1.bias", "concept.queries", "concept.cross.attn.o.weight",
          "projection.fc0.weight", "decoder.mask_token", "decoder.0.ln2.bias",
          "decoder.head.weight"})
        CHECK(P.has(name));
    // biases, norm params, queries, and the mask token are excluded from decay
    CHECK(P.entry("encoder.0.attn.q.weight").decay);
    CHECK_FALSE(P.entry("encoder.0.attn.q.bias").decay);
    CHECK_FALSE(P.entry("encoder.0.ln1.gain").decay);
    CHECK_FALSE(P.entry("concept.queries").decay);
    CHECK_FALSE(P.entry("decoder.mask_token").decay);
    CHECK_FALSE(P.entry("tokenizer.bn0.running_mean").trainable);
}

TEST_CASE("per-scope seeding isolates modules") {
    ModelConfig cfg = micro();
    ParamStore<double> a, b, c;
    model::init_pretrain(a, cfg, 7, true, true);
    model::init_pretrain(b, cfg, 7, true, false);  // no decoder
    ModelConfig nc = cfg;
    nc.no_concept = true;
    model::init_pretrain(c, nc, 7, true, true);  // no concept block
    // backbone is bit-identical no matter which heads are attached
    for (const auto& [name, e] : a.entries) {
        if (name.rfind("decoder.", 0) == 0) continue;
        CHECK(b.at(name).data == e.value.data);
        if (name.rfind("concept.", 0) == 0 || name.rfind("projection.", 0) == 0) continue;
        CHECK(c.at(name).data == e.value.data);
    }
    // different seed changes trainable weights
    ParamStore<double> d;
    model::init_pretrain(d, cfg, 8, true, true);
    CHECK(d.at("encoder.0.attn.q.weight").data != a.at("encoder.0.attn.q.weight").data);
}

TEST_CASE("distill and recon variants share the same backbone parameter count") {
    ModelConfig cfg = micro();
    ParamStore<double> d, r;
    model::init_pretrain(d, cfg, 3, true, false);
    model::init_pretrain(r, cfg, 3, false, true);
    auto backbone_count = [](const ParamStore<double>& P) {
        std::int64_t n = 0;
        for (const auto& [name, e] : P.entries)
            if (e.trainable && (name.rfind("tokenizer.", 0) == 0 ||
                                name.rfind("posenc.", 0) == 0 || name.rfind("encoder.", 0) == 0))
                n += e.value.numel();
        return n;
    };
    CHECK(backbone_count(d) == backbone_count(r));
    CHECK(backbone_count(d) > 0);
}

TEST_CASE("tokenize shape and within-patch permutation invariance") {
    ModelConfig cfg = micro();
    ParamStore<double> P;
    model::init_tokenizer(P, cfg, 11);
    Tensor<double> patches = random_tensor({cfg.groups, cfg.patch_size, 3}, 42, 0.3);
    Graph<double> G;
    const int t = model::tokenize(G, P, cfg, G.input(patches), /*train=*/false);
    CHECK(G.val(t).shape == Shape{cfg.groups, cfg.dim});
    // shuffle the points inside each patch; eval-mode BN is per-row and the
    // pool is a max, so the tokens must be unchanged
    Tensor<double> shuffled = patches;
    Rng rng(5);
    for (int i = 0; i < cfg.groups; ++i) {
        std::vector<std::size_t> order(std::size_t(cfg.patch_size));
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        for (int j = 0; j < cfg.patch_size; ++j)
            for (int c = 0; c < 3; ++c)
                shuffled[std::size_t((i * cfg.patch_size + j) * 3 + c)] =
                    patches[std::size_t((i * cfg.patch_size + order[std::size_t(j)]) * 3 + c)];
    }
    Graph<double> G2;
    const int t2 = model::tokenize(G2, P, cfg, G2.input(shuffled), false);
    for (std::size_t i = 0; i < G.val(t).data.size(); ++i)
        CHECK(G2.val(t2)[i] == G.val(t)[i]);
}

TEST_CASE("batch-norm train mode updates running buffers") {
    ModelConfig cfg = micro();
    ParamStore<double> P;
    model::init_tokenizer(P, cfg, 11);
    Tensor<double> patches = random_tensor({cfg.groups, cfg.patch_size, 3}, 42, 0.3);
    const auto before = P.at("tokenizer.bn0.running_mean").data;
    Graph<double> G;
    model::tokenize(G, P, cfg, G.input(patches), /*train=*/true);
    CHECK(P.at("tokenizer.bn0.running_mean").data != before);
}

TEST_CASE("zeroed output projections make a block an identity") {
    ModelConfig cfg = micro();
    ParamStore<double> P;
    model::init_encoder(P, cfg, 13);
    for (const char* n : {"encoder.0.attn.o.weight", "encoder.0.attn.o.bias",
                          "encoder.0.ffn.fc1.weight", "encoder.0.ffn.fc1.bias"})
        for (auto& v : P.at(n).data) v = 0.0;
    Tensor<double> x = random_tensor({cfg.groups, cfg.dim}, 77);
    Graph<double> G;
    const int out = model::encoder_block(G, P, "encoder.0", G.input(x), cfg);
    for (std::size_t i = 0; i < x.data.size(); ++i)
        CHECK(G.val(out)[i] == doctest::Approx(x[i]).epsilon(1e-12));
}

TEST_CASE("encoder is equivariant and classify is invariant to token order") {
    ModelConfig cfg = micro();
    ParamStore<double> P;
    model::init_backbone(P, cfg, 17);
    model::init_cls_head(P, cfg, 4, 17);
    Tensor<double> f0 = random_tensor({cfg.groups, cfg.dim}, 1);
    Tensor<double> pos = random_tensor({cfg.groups, cfg.dim}, 2);
    std::vector<int> perm{3, 0, 5, 1, 4, 2};
    Tensor<double> f0p(f0.shape), posp(pos.shape);
    for (int i = 0; i < cfg.groups; ++i)
        for (int j = 0; j < cfg.dim; ++j) {
            f0p[std::size_t(i * cfg.dim + j)] = f0[std::size_t(perm[std::size_t(i)] * cfg.dim + j)];
            posp[std::size_t(i * cfg.dim + j)] = pos[std::size_t(perm[std::size_t(i)] * cfg.dim + j)];
        }
    Graph<double> G, Gp;
    auto feats = model::encode(G, P, cfg, G.input(f0), G.input(pos));
    auto featsp = model::encode(Gp, P, cfg, Gp.input(f0p), Gp.input(posp));
    for (int i = 0; i < cfg.groups; ++i)
        for (int j = 0; j < cfg.dim; ++j)
            CHECK(Gp.val(featsp.back())[std::size_t(i * cfg.dim + j)] ==
                  doctest::Approx(G.val(feats.back())[std::size_t(perm[std::size_t(i)] * cfg.dim + j)])
                      .epsilon(1e-9));
    const int l1 = model::classify(G, P, cfg, feats.back());
    const int l2 = model::classify(Gp, P, cfg, featsp.back());
    for (std::size_t i = 0; i < G.val(l1).data.size(); ++i)
        CHECK(Gp.val(l2)[i] == doctest::Approx(G.val(l1)[i]).epsilon(1e-9));
}

TEST_CASE("shared cross block receives one gradient contribution per layer") {
    ModelConfig cfg = micro();
    ParamStore<double> P;
    model::init_backbone(P, cfg, 19);
    model::init_concept(P, cfg, 19);
    Graph<double> G;
    const int f0 = G.input(random_tensor({cfg.groups, cfg.dim}, 3));
    const int pos = G.input(random_tensor({cfg.groups, cfg.dim}, 4));
    auto feats = model::encode(G, P, cfg, f0, pos);
    const int c = model::extract_concepts(G, P, cfg, feats);
    CHECK(G.val(c).shape == Shape{cfg.concept_tokens, cfg.dim});
    G.backward(G.mse(c, G.input(Tensor<double>::zeros({cfg.concept_tokens, cfg.dim}))));
    CHECK(G.grad_contributions(G.param(P, "concept.cross.attn.q.weight")) == cfg.depth);
    CHECK(G.grad_contributions(G.param(P, "concept.cross.ffn.fc0.weight")) == cfg.depth);
    // a per-layer encoder weight is touched once
    CHECK(G.grad_contributions(G.param(P, "encoder.0.attn.q.weight")) == 1);
}

TEST_CASE("projection maps concepts to the teacher prefix shape") {
    ModelConfig cfg = micro();
    ParamStore<double> P;
    model::init_concept(P, cfg, 23);
    model::init_projection(P, cfg, 23);
    Graph<double> G;
    const int c = G.input(random_tensor({cfg.concept_tokens, cfg.dim}, 5));
    const int p = model::project(G, P, cfg, c);
    CHECK(G.val(p).shape == Shape{cfg.prefix_len, cfg.d_cap});
}

TEST_CASE("choose_mask picks ceil(ratio*g) sorted distinct patches") {
    auto m = model::choose_mask(16, 0.6, 99);
    CHECK(int(m.size()) == 10);  // ceil(9.6)
    CHECK(std::is_sorted(m.begin(), m.end()));
    CHECK(std::adjacent_find(m.begin(), m.end()) == m.end());
    for (int i : m) CHECK((i >= 0 && i < 16));
    CHECK(model::choose_mask(16, 0.6, 99) == m);   // deterministic
    CHECK(model::choose_mask(16, 0.6, 100) != m);  // seed-sensitive
    CHECK_THROWS_AS(model::choose_mask(1, 0.6, 0), InvalidArgument);
}

TEST_CASE("pretrain pipeline produces both losses with expected shapes") {
    ModelConfig cfg = micro();
    ParamStore<double> P;
    model::init_pretrain(P, cfg, 29, true, true);
    Tensor<double> patches = random_tensor({cfg.groups, cfg.patch_size, 3}, 6, 0.3);
    Tensor<double> centers = random_tensor({cfg.groups, 3}, 7, 0.5);
    Tensor<double> teacher = random_tensor({cfg.prefix_len, cfg.d_cap}, 8);
    auto mask = model::choose_mask(cfg.groups, cfg.mask_ratio, 31);
    Graph<double> G;
    auto out = model::pretrain_forward(G, P, cfg, patches, centers, &teacher, mask, true);
    CHECK(out.distill >= 0);
    CHECK(out.recon >= 0);
    CHECK(G.val(out.distill).numel() == 1);
    CHECK(G.val(out.recon).numel() == 1);
    CHECK(G.val(out.distill)[0] > 0.0);
    CHECK(G.val(out.recon)[0] > 0.0);
    CHECK(int(out.layer_feats.size()) == cfg.depth);
    // teacher tensor never receives a gradient
    G.backward(G.add(out.distill, out.recon));
    CHECK(G.grad_contributions(out.teacher) == 0);
    Tensor<double> tg = G.grad(out.teacher);
    for (double v : tg.data) CHECK(v == 0.0);
}

TEST_CASE("pretrain loss gradients match finite differences") {
    ModelConfig cfg = micro();
    ParamStore<double> P;
    model::init_pretrain(P, cfg, 37, true, true);
    Tensor<double> patches = random_tensor({cfg.groups, cfg.patch_size, 3}, 16, 0.3);
    Tensor<double> centers = random_tensor({cfg.groups, 3}, 17, 0.5);
    Tensor<double> teacher = random_tensor({cfg.prefix_len, cfg.d_cap}, 18);
    auto mask = model::choose_mask(cfg.groups, cfg.mask_ratio, 41);
    auto build = [&](Graph<double>& G, ParamStore<double>& S) {
        auto out = model::pretrain_forward(G, S, cfg, patches, centers, &teacher, mask, true);
        return G.add(out.distill, out.recon);
    };
    auto res = fd_check_params(P, build, 40, 123, 1e-5);
    INFO("worst: ", res.worst_target, " err ", res.max_rel_err);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("no-concept ablation projects pooled features") {
    ModelConfig cfg = micro();
    cfg.no_concept = true;
    ParamStore<double> P;
    model::init_pretrain(P, cfg, 43, true, false);
    CHECK_FALSE(P.has("concept.queries"));
    CHECK(P.at("projection.fc0.weight").dim(0) == cfg.dim);
    Tensor<double> patches = random_tensor({cfg.groups, cfg.patch_size, 3}, 26, 0.3);
    Tensor<double> centers = random_tensor({cfg.groups, 3}, 27, 0.5);
    Tensor<double> teacher = random_tensor({cfg.prefix_len, cfg.d_cap}, 28);
    Graph<double> G;
    auto out = model::pretrain_forward(G, P, cfg, patches, centers, &teacher, {}, true);
    CHECK(out.recon == -1);
    CHECK(G.val(out.distill).numel() == 1);
    auto build = [&](Graph<double>& g, ParamStore<double>& S) {
        return model::pretrain_forward(g, S, cfg, patches, centers, &teacher, {}, true).distill;
    };
    auto res = fd_check_params(P, build, 25, 321, 1e-5);
    INFO("worst: ", res.worst_target, " err ", res.max_rel_err);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("classification head gradients match finite differences") {
    ModelConfig cfg = micro();
    ParamStore<double> P;
    model::init_backbone(P, cfg, 47);
    model::init_cls_head(P, cfg, 4, 47);
    Tensor<double> patches = random_tensor({cfg.groups, cfg.patch_size, 3}, 36, 0.3);
    Tensor<double> centers = random_tensor({cfg.groups, 3}, 37, 0.5);
    auto build = [&](Graph<double>& G, ParamStore<double>& S) {
        const int f0 = model::tokenize(G, S, cfg, G.input(patches), true);
        const int pos = model::pos_encode(G, S, G.input(centers));
        auto feats = model::encode(G, S, cfg, f0, pos);
        return G.cross_entropy(model::classify(G, S, cfg, feats.back()), 2);
    };
    auto res = fd_check_params(P, build, 30, 555, 1e-5);
    INFO("worst: ", res.worst_target, " err ", res.max_rel_err);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("segmentation head emits per-point logits") {
    ModelConfig cfg = micro();
    ParamStore<double> P;
    model::init_backbone(P, cfg, 53);
    model::init_seg_head(P, cfg, 5, 53);
    Rng rng(61);
    Cloud<double> pts(std::size_t(cfg.points));
    for (auto& p : pts)
        p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    auto cs = fps(pts, cfg.groups);
    auto ps = knn_group(pts, cs, cfg.patch_size);
    auto weights = interpolate_3nn_weights(pts, ps.centers);
    Graph<double> G;
    const int f0 = model::tokenize(G, P, cfg, G.input(patches_tensor(ps)), true);
    const int pos = model::pos_encode(G, P, G.input(centers_tensor(ps)));
    auto feats = model::encode(G, P, cfg, f0, pos);
    const int logits = model::segment(G, P, cfg, feats, weights);
    CHECK(G.val(logits).shape == Shape{cfg.points, 5});
}
