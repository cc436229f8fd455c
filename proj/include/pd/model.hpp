#pragma once

// The student network: PointNet-style patch tokenizer, positional MLP,
// pre-norm transformer encoder, shared cross-attention concept extraction,
// projection head onto teacher prefix embeddings, masked-reconstruction
// decoder, and the downstream classification/segmentation heads.
//
// All forward functions append onto a caller-owned Graph and fetch their
// parameters from a ParamStore by canonical name ("module.block.role"), so
// the same code serves float training and double gradient verification.

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "pd/geometry.hpp"
#include "pd/graph.hpp"
#include "pd/params.hpp"

namespace pd {

struct ModelConfig {
    int points = 4096;
    int groups = 64;
    int patch_size = 32;
    int dim = 384;
    int depth = 12;
    int heads = 6;
    int ffn_mult = 4;
    int concept_tokens = 32;
    int prefix_len = 10;
    int d_cap = 768;
    int dec_depth = 3;
    double mask_ratio = 0.6;
    std::array<int, 4> tok_channels{128, 256, 512, 384};
    int pos_hidden = 128;
    int cls_hidden = 256;
    int seg_hidden = 256;
    bool no_concept = false;          // ablation: project pooled features directly
    bool pos_inject_every_layer = true;
    bool relu_ffn = false;            // feed-forward activation: gelu by default
    double dropout = 0.0;

    int head_dim() const { return dim / heads; }

    void validate() const {
        if (dim % heads != 0) throw InvalidArgument("config: dim not divisible by heads");
        if (tok_channels[3] != dim) throw InvalidArgument("config: tokenizer output != dim");
        if (mask_ratio <= 0.0 || mask_ratio > 1.0)
            throw InvalidArgument("config: mask ratio out of (0,1]");
    }

    static ModelConfig full_scale() { return ModelConfig{}; }

    // desk-scale profile used by CI and the acceptance suite
    static ModelConfig tiny() {
        ModelConfig c;
        c.points = 256;
        c.groups = 16;
        c.patch_size = 16;
        c.dim = 64;
        c.depth = 2;
        c.heads = 4;
        c.concept_tokens = 8;
        c.d_cap = 64;
        c.tok_channels = {32, 48, 64, 64};
        c.pos_hidden = 32;
        c.cls_hidden = 64;
        c.seg_hidden = 64;
        return c;
    }
};

inline std::string config_dump(const ModelConfig& c) {
    std::ostringstream os;
    os << "points=" << c.points << "\ngroups=" << c.groups << "\npatch_size=" << c.patch_size
       << "\ndim=" << c.dim << "\ndepth=" << c.depth << "\nheads=" << c.heads
       << "\nffn_mult=" << c.ffn_mult << "\nconcept_tokens=" << c.concept_tokens
       << "\nprefix_len=" << c.prefix_len << "\nd_cap=" << c.d_cap
       << "\ndec_depth=" << c.dec_depth << "\nmask_ratio=" << c.mask_ratio
       << "\ntok_channels=" << c.tok_channels[0] << "," << c.tok_channels[1] << ","
       << c.tok_channels[2] << "," << c.tok_channels[3] << "\npos_hidden=" << c.pos_hidden
       << "\nno_concept=" << (c.no_concept ? 1 : 0)
       << "\npos_inject_every_layer=" << (c.pos_inject_every_layer ? 1 : 0)
       << "\nrelu_ffn=" << (c.relu_ffn ? 1 : 0) << "\ndropout=" << c.dropout << "\n";
    return os.str();
}

inline std::uint64_t config_digest(const ModelConfig& c) { return fnv1a64(config_dump(c)); }

namespace model {

// ---- initialization ------------------------------------------------------

template <typename T>
void init_linear(ParamStore<T>& P, const std::string& prefix, int din, int dout, Rng& rng) {
    Tensor<T> w({din, dout});
    for (auto& v : w.data) v = T(rng.truncated_normal(0.02));
    P.add(prefix + ".weight", std::move(w), true, true);
    P.add(prefix + ".bias", Tensor<T>::zeros({dout}), true, false);
}

template <typename T>
void init_norm(ParamStore<T>& P, const std::string& prefix, int d) {
    P.add(prefix + ".gain", Tensor<T>::full({d}, T(1)), true, false);
    P.add(prefix + ".bias", Tensor<T>::zeros({d}), true, false);
}

template <typename T>
void init_bn(ParamStore<T>& P, const std::string& prefix, int d) {
    init_norm(P, prefix, d);
    P.add(prefix + ".running_mean", Tensor<T>::zeros({d}), false, false);
    P.add(prefix + ".running_var", Tensor<T>::full({d}, T(1)), false, false);
}

template <typename T>
void init_attention(ParamStore<T>& P, const std::string& prefix, int dim, Rng& rng) {
    init_linear(P, prefix + ".q", dim, dim, rng);
    init_linear(P, prefix + ".k", dim, dim, rng);
    init_linear(P, prefix + ".v", dim, dim, rng);
    init_linear(P, prefix + ".o", dim, dim, rng);
}

template <typename T>
void init_block(ParamStore<T>& P, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
    init_norm(P, prefix + ".ln1", cfg.dim);
    init_attention(P, prefix + ".attn", cfg.dim, rng);
    init_norm(P, prefix + ".ln2", cfg.dim);
    init_linear(P, prefix + ".ffn.fc0", cfg.dim, cfg.dim * cfg.ffn_mult, rng);
    init_linear(P, prefix + ".ffn.fc1", cfg.dim * cfg.ffn_mult, cfg.dim, rng);
}

template <typename T>
void init_tokenizer(ParamStore<T>& P, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(hash_combine(seed, fnv1a64("tokenizer")));
    int din = 3;
    for (int i = 0; i < 4; ++i) {
        init_linear(P, "tokenizer.conv" + std::to_string(i), din, cfg.tok_channels[std::size_t(i)], rng);
        if (i < 3) init_bn(P, "tokenizer.bn" + std::to_string(i), cfg.tok_channels[std::size_t(i)]);
        din = cfg.tok_channels[std::size_t(i)];
    }
}

template <typename T>
void init_posenc(ParamStore<T>& P, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(hash_combine(seed, fnv1a64("posenc")));
    init_linear(P, "posenc.fc0", 3, cfg.pos_hidden, rng);
    init_linear(P, "posenc.fc1", cfg.pos_hidden, cfg.dim, rng);
}

template <typename T>
void init_encoder(ParamStore<T>& P, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(hash_combine(seed, fnv1a64("encoder")));
    for (int i = 0; i < cfg.depth; ++i)
        init_block(P, "encoder." + std::to_string(i), cfg, rng);
}

// one shared cross-attention block used at every encoder layer
template <typename T>
void init_concept(ParamStore<T>& P, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(hash_combine(seed, fnv1a64("concept")));
    Tensor<T> q({cfg.concept_tokens, cfg.dim});
    for (auto& v : q.data) v = T(rng.truncated_normal(0.02));
    P.add("concept.queries", std::move(q), true, false);
    init_norm(P, "concept.cross.lnq", cfg.dim);
    init_norm(P, "concept.cross.lnkv", cfg.dim);
    init_attention(P, "concept.cross.attn", cfg.dim, rng);
    init_norm(P, "concept.cross.ln2", cfg.dim);
    init_linear(P, "concept.cross.ffn.fc0", cfg.dim, cfg.dim * cfg.ffn_mult, rng);
    init_linear(P, "concept.cross.ffn.fc1", cfg.dim * cfg.ffn_mult, cfg.dim, rng);
}

inline int projection_input_width(const ModelConfig& cfg) {
    return cfg.no_concept ? cfg.dim : cfg.concept_tokens * cfg.dim;
}

template <typename T>
void init_projection(ParamStore<T>& P, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(hash_combine(seed, fnv1a64("projection")));
    const int din = projection_input_width(cfg);
    init_norm(P, "projection.ln", cfg.dim);
    init_linear(P, "projection.fc0", din, din, rng);
    init_linear(P, "projection.fc1", din, cfg.prefix_len * cfg.d_cap, rng);
}

template <typename T>
void init_decoder(ParamStore<T>& P, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(hash_combine(seed, fnv1a64("decoder")));
    Tensor<T> mt({cfg.dim});
    for (auto& v : mt.data) v = T(rng.truncated_normal(0.02));
    P.add("decoder.mask_token", std::move(mt), true, false);
    for (int i = 0; i < cfg.dec_depth; ++i)
        init_block(P, "decoder." + std::to_string(i), cfg, rng);
    init_linear(P, "decoder.head", cfg.dim, cfg.patch_size * 3, rng);
}

template <typename T>
void init_cls_head(ParamStore<T>& P, const ModelConfig& cfg, int classes, std::uint64_t seed) {
    Rng rng(hash_combine(seed, fnv1a64("head.cls")));
    init_linear(P, "head.cls.fc0", 2 * cfg.dim, cfg.cls_hidden, rng);
    init_linear(P, "head.cls.fc1", cfg.cls_hidden, classes, rng);
}

template <typename T>
void init_seg_head(ParamStore<T>& P, const ModelConfig& cfg, int labels, std::uint64_t seed) {
    Rng rng(hash_combine(seed, fnv1a64("head.seg")));
    // per-point input: propagated 3-layer concat (3d) + two global pools (6d)
    init_linear(P, "head.seg.fc0", 9 * cfg.dim, cfg.seg_hidden, rng);
    init_linear(P, "head.seg.fc1", cfg.seg_hidden, labels, rng);
}

template <typename T>
void init_backbone(ParamStore<T>& P, const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    init_tokenizer(P, cfg, seed);
    init_posenc(P, cfg, seed);
    init_encoder(P, cfg, seed);
}

template <typename T>
void init_pretrain(ParamStore<T>& P, const ModelConfig& cfg, std::uint64_t seed,
                   bool with_distill, bool with_recon) {
    init_backbone(P, cfg, seed);
    if (with_distill) {
        if (!cfg.no_concept) init_concept(P, cfg, seed);
        init_projection(P, cfg, seed);
    }
    if (with_recon) init_decoder(P, cfg, seed);
}

// ---- forward -------------------------------------------------------------

template <typename T>
int linear(Graph<T>& G, ParamStore<T>& P, const std::string& prefix, int x) {
    return G.add(G.matmul(x, G.param(P, prefix + ".weight")), G.param(P, prefix + ".bias"));
}

template <typename T>
int norm(Graph<T>& G, ParamStore<T>& P, const std::string& prefix, int x) {
    return G.layer_norm(x, G.param(P, prefix + ".gain"), G.param(P, prefix + ".bias"));
}

template <typename T>
int ffn_act(Graph<T>& G, const ModelConfig& cfg, int x) {
    return cfg.relu_ffn ? G.relu(x) : G.gelu(x);
}

// multi-head attention; queries from q_in, keys/values from kv_in
template <typename T>
int mha(Graph<T>& G, ParamStore<T>& P, const std::string& prefix, int q_in, int kv_in,
        const ModelConfig& cfg) {
    const int nq = G.val(q_in).dim(0);
    const int nk = G.val(kv_in).dim(0);
    const int h = cfg.heads, dh = cfg.head_dim();
    auto split = [&](int x, int n) {
        return G.permute(G.reshape(x, {n, h, dh}), {1, 0, 2});  // (h, n, dh)
    };
    const int q = split(linear(G, P, prefix + ".q", q_in), nq);
    const int k = split(linear(G, P, prefix + ".k", kv_in), nk);
    const int v = split(linear(G, P, prefix + ".v", kv_in), nk);
    const int scores = G.scale(G.matmul(q, G.permute(k, {0, 2, 1})),
                               T(1.0 / std::sqrt(double(dh))));
    const int ctx = G.matmul(G.softmax(scores), v);  // (h, nq, dh)
    const int merged = G.reshape(G.permute(ctx, {1, 0, 2}), {nq, h * dh});
    return linear(G, P, prefix + ".o", merged);
}

// pre-norm transformer block: x + attn(ln1 x), then x + ffn(ln2 x)
template <typename T>
int encoder_block(Graph<T>& G, ParamStore<T>& P, const std::string& prefix, int x,
                  const ModelConfig& cfg) {
    const int h = norm(G, P, prefix + ".ln1", x);
    x = G.add(x, mha(G, P, prefix + ".attn", h, h, cfg));
    const int h2 = norm(G, P, prefix + ".ln2", x);
    const int f = linear(G, P, prefix + ".ffn.fc1",
                         ffn_act(G, cfg, linear(G, P, prefix + ".ffn.fc0", h2)));
    return G.add(x, f);
}

// shared cross-attention block: concept queries attend over patch features
template <typename T>
int cross_block(Graph<T>& G, ParamStore<T>& P, int c, int f, const ModelConfig& cfg) {
    const std::string p = "concept.cross";
    const int cn = norm(G, P, p + ".lnq", c);
    const int fn = norm(G, P, p + ".lnkv", f);
    c = G.add(c, mha(G, P, p + ".attn", cn, fn, cfg));
    const int h2 = norm(G, P, p + ".ln2", c);
    const int ff = linear(G, P, p + ".ffn.fc1",
                          ffn_act(G, cfg, linear(G, P, p + ".ffn.fc0", h2)));
    return G.add(c, ff);
}

// patches (g,k,3) -> per-patch tokens (g,d); pointwise convs then max-pool
template <typename T>
int tokenize(Graph<T>& G, ParamStore<T>& P, const ModelConfig& cfg, int patches, bool train) {
    const Tensor<T>& t = G.val(patches);
    if (t.rank() != 3 || t.dim(2) != 3) throw ShapeError("tokenize: expected (g,k,3)");
    const int g = t.dim(0), k = t.dim(1);
    int x = G.reshape(patches, {g * k, 3});
    for (int i = 0; i < 4; ++i) {
        x = linear(G, P, "tokenizer.conv" + std::to_string(i), x);
        if (i < 3) {
            const std::string bn = "tokenizer.bn" + std::to_string(i);
            x = G.batch_norm(x, G.param(P, bn + ".gain"), G.param(P, bn + ".bias"),
                             P.at(bn + ".running_mean"), P.at(bn + ".running_var"), train);
            x = G.relu(x);
        }
    }
    return G.max_axis(G.reshape(x, {g, k, cfg.dim}), 1);
}

// centers (g,3) -> positional embeddings (g,d)
template <typename T>
int pos_encode(Graph<T>& G, ParamStore<T>& P, int centers) {
    return linear(G, P, "posenc.fc1", G.gelu(linear(G, P, "posenc.fc0", centers)));
}

// Runs the encoder stack, returning the per-layer feature list. Positional
// embeddings are added to the first block's input and to every block's
// output.
template <typename T>
std::vector<int> encode(Graph<T>& G, ParamStore<T>& P, const ModelConfig& cfg, int f0, int pos) {
    std::vector<int> feats;
    int x = G.add(f0, pos);
    for (int i = 0; i < cfg.depth; ++i) {
        x = encoder_block(G, P, "encoder." + std::to_string(i), x, cfg);
        if (cfg.pos_inject_every_layer) x = G.add(x, pos);
        feats.push_back(x);
    }
    return feats;
}

// concept tokens after one shared cross-attention application per layer
template <typename T>
int extract_concepts(Graph<T>& G, ParamStore<T>& P, const ModelConfig& cfg,
                     const std::vector<int>& layer_feats) {
    if (int(layer_feats.size()) != cfg.depth)
        throw InvalidArgument("extract_concepts: layer list length != depth");
    int c = G.param(P, "concept.queries");
    for (int f : layer_feats) c = cross_block(G, P, c, f, cfg);
    return c;
}

// Final per-token layer norm (the pre-norm stack leaves outputs unnormalized),
// then a flattened two-layer MLP, reshaped to (prefix_len, d_cap).
template <typename T>
int project(Graph<T>& G, ParamStore<T>& P, const ModelConfig& cfg, int concepts) {
    const int din = projection_input_width(cfg);
    int x = norm(G, P, "projection.ln", G.reshape(concepts, {din / cfg.dim, cfg.dim}));
    x = G.reshape(x, {1, din});
    x = linear(G, P, "projection.fc1", G.gelu(linear(G, P, "projection.fc0", x)));
    return G.reshape(x, {cfg.prefix_len, cfg.d_cap});
}

template <typename T>
int distill_loss(Graph<T>& G, int projected, int teacher_prefix) {
    return G.mse(projected, teacher_prefix);
}

inline int masked_patch_count(int groups, double ratio) {
    return int(std::ceil(ratio * double(groups)));
}

inline std::vector<int> choose_mask(int groups, double ratio, std::uint64_t seed) {
    if (groups < 2) throw InvalidArgument("choose_mask: need at least 2 patches");
    const int m = masked_patch_count(groups, ratio);
    Rng rng(seed);
    auto idx = rng.sample_without_replacement(groups, m);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Masked tokens replaced by the learnable mask token before encoding; the
// decoder sees all encoded tokens and the head predicts the k points of each
// masked patch. Loss = mean Chamfer over masked patches.
template <typename T>
int reconstruct_loss(Graph<T>& G, ParamStore<T>& P, const ModelConfig& cfg, int patches,
                     int encoded_last, const std::vector<int>& mask_idx) {
    const int k = G.val(patches).dim(1);
    int x = encoded_last;
    for (int i = 0; i < cfg.dec_depth; ++i)
        x = encoder_block(G, P, "decoder." + std::to_string(i), x, cfg);
    const int masked = G.gather_rows(x, mask_idx);          // (m, d)
    const int pred = linear(G, P, "decoder.head", masked);  // (m, k*3)
    int loss = -1;
    for (std::size_t j = 0; j < mask_idx.size(); ++j) {
        const int pj = G.reshape(G.gather_rows(pred, {int(j)}), {k, 3});
        const int gt = G.reshape(G.gather_rows(patches, {mask_idx[j]}), {k, 3});
        const int c = G.chamfer(pj, gt);
        loss = (loss < 0) ? c : G.add(loss, c);
    }
    return G.scale(loss, T(1.0 / double(mask_idx.size())));
}

// mean-pool and max-pool over tokens, concatenated, then a two-layer MLP
template <typename T>
int classify(Graph<T>& G, ParamStore<T>& P, const ModelConfig& cfg, int final_tokens) {
    const int pooled = G.concat({G.mean_axis(final_tokens, 0), G.max_axis(final_tokens, 0)}, 0);
    const int x = G.reshape(pooled, {1, 2 * cfg.dim});
    return G.reshape(linear(G, P, "head.cls.fc1", G.gelu(linear(G, P, "head.cls.fc0", x))),
                     {G.val(G.param(P, "head.cls.fc1.bias")).dim(0)});
}

// layer-4/8/12 features per patch, propagated to query points, concatenated
// with the two global pooled features, per-point MLP
template <typename T>
int segment(Graph<T>& G, ParamStore<T>& P, const ModelConfig& cfg,
            const std::vector<int>& layer_feats, const InterpWeights<T>& weights) {
    std::vector<int> picks;
    for (int frac = 3; frac >= 1; --frac) {
        int li = std::max(0, cfg.depth * frac / 3 - 1);  // layers depth/3, 2*depth/3, depth
        picks.push_back(layer_feats[std::size_t(li)]);
    }
    std::reverse(picks.begin(), picks.end());
    const int per_patch = G.concat(picks, 1);  // (g, 3d)
    const int gmean = G.mean_axis(per_patch, 0);
    const int gmax = G.max_axis(per_patch, 0);
    const int propagated = G.interpolate(per_patch, weights);  // (nq, 3d)
    const int nq = G.val(propagated).dim(0);
    // broadcast global features to every point via an all-ones outer product
    const int ones = G.input(Tensor<T>::full({nq, 1}, T(1)));
    const int gl = G.concat({G.reshape(gmean, {1, 3 * cfg.dim}), G.reshape(gmax, {1, 3 * cfg.dim})}, 1);
    const int global_rows = G.matmul(ones, gl);  // (nq, 6d)
    const int x = G.concat({propagated, global_rows}, 1);  // (nq, 9d)
    return linear(G, P, "head.seg.fc1", G.gelu(linear(G, P, "head.seg.fc0", x)));
}

// ablation without concept tokens: pool the final layer directly
template <typename T>
int extract_pooled(Graph<T>& G, const ModelConfig& cfg, int final_tokens) {
    (void)cfg;
    return G.mean_axis(final_tokens, 0);
}

// ---- full pre-training pipeline ------------------------------------------

template <typename T>
struct PipelineOut {
    int distill = -1;  // node ids; -1 when the branch is off
    int recon = -1;
    int final_tokens = -1;
    std::vector<int> layer_feats;
    int teacher = -1;
};

// One sample's pre-training forward pass. When `mask_idx` is non-empty the
// tokens are masked before encoding (reconstruction path); the distillation
// branch, when enabled, consumes the same encoding.
template <typename T>
PipelineOut<T> pretrain_forward(Graph<T>& G, ParamStore<T>& P, const ModelConfig& cfg,
                                const Tensor<T>& patches, const Tensor<T>& centers,
                                const Tensor<T>* teacher_prefix,
                                const std::vector<int>& mask_idx, bool train) {
    PipelineOut<T> out;
    const int patches_in = G.input(patches);
    const int centers_in = G.input(centers);
    int f0 = tokenize(G, P, cfg, patches_in, train);
    if (!mask_idx.empty())
        f0 = G.replace_rows(f0, G.param(P, "decoder.mask_token"), mask_idx);
    const int pos = pos_encode(G, P, centers_in);
    out.layer_feats = encode(G, P, cfg, f0, pos);
    out.final_tokens = out.layer_feats.back();
    if (teacher_prefix) {
        require_shape(*teacher_prefix, {cfg.prefix_len, cfg.d_cap}, "teacher prefix");
        int c;
        if (cfg.no_concept)
            c = extract_pooled(G, cfg, out.final_tokens);
        else
            c = extract_concepts(G, P, cfg, out.layer_feats);
        const int proj = project(G, P, cfg, c);
        out.teacher = G.input(*teacher_prefix, /*needs_grad=*/false);
        out.distill = distill_loss(G, proj, out.teacher);
    }
    if (!mask_idx.empty())
        out.recon = reconstruct_loss(G, P, cfg, patches_in, out.final_tokens, mask_idx);
    return out;
}

}  // namespace model

}  // namespace pd
