#pragma once

// Training loops: self-supervised pre-training (distillation and/or masked
// reconstruction), classification fine-tuning with encoder transfer,
// evaluation, and the frozen-decoder reconstruction probe.
//
// Determinism contract: every random draw comes from a stream keyed by
// (seed, purpose, epoch, sample), and all loop state is derived from the
// global step count, so resuming from a checkpoint at step s replays steps
// s.. bit-identically.

#include <cstdint>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pd/geometry.hpp"
#include "pd/model.hpp"
#include "pd/optim.hpp"
#include "pd/persistence.hpp"

namespace pd {

enum class LossMode { distill, recon, both, none };

inline std::string loss_mode_name(LossMode m) {
    switch (m) {
        case LossMode::distill: return "distill";
        case LossMode::recon: return "recon";
        case LossMode::both: return "both";
        case LossMode::none: return "none";
    }
    return "?";
}

inline LossMode parse_loss_mode(const std::string& s) {
    if (s == "distill") return LossMode::distill;
    if (s == "recon") return LossMode::recon;
    if (s == "both") return LossMode::both;
    if (s == "none") return LossMode::none;
    throw InvalidArgument("unknown loss mode '" + s + "'");
}

struct AugmentConfig {
    bool enabled = true;
    double scale_lo = 0.9, scale_hi = 1.1;  // isotropic
    double translate = 0.1;                 // per-axis uniform in [-t, t]
};

struct TrainConfig {
    ModelConfig model;
    LossMode mode = LossMode::both;
    int epochs = 250;
    int warmup_epochs = 10;
    double base_lr = 1e-3;
    double min_lr = 1e-6;
    AdamWConfig adamw;  // weight decay 0.05
    AugmentConfig augment;
    std::uint64_t seed = 1;

    bool uses_distill() const { return mode == LossMode::distill || mode == LossMode::both; }
    bool uses_recon() const { return mode == LossMode::recon || mode == LossMode::both; }
};

// Digest binding a checkpoint to model architecture and training objective.
inline std::uint64_t train_digest(const TrainConfig& cfg) {
    return hash_combine(config_digest(cfg.model), fnv1a64(loss_mode_name(cfg.mode)));
}

// ---- per-sample geometry -------------------------------------------------

template <typename T>
struct SampleGeom {
    Tensor<T> patches;  // (g, k, 3)
    Tensor<T> centers;  // (g, 3)
};

// Augments (optional), then runs FPS + kNN grouping. The geometric path runs
// in double so center-relative patches reconstruct their inputs exactly; the
// result is cast to the training precision.
template <typename T>
SampleGeom<T> prepare_sample(const Cloud<float>& pts, const ModelConfig& cfg,
                             const AugmentConfig* aug, std::uint64_t aug_seed) {
    Cloud<double> c(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (int d = 0; d < 3; ++d) c[i][std::size_t(d)] = double(pts[i][std::size_t(d)]);
    if (aug && aug->enabled) {
        Rng rng(aug_seed);
        const double s = rng.uniform(aug->scale_lo, aug->scale_hi);
        const double tx = rng.uniform(-aug->translate, aug->translate);
        const double ty = rng.uniform(-aug->translate, aug->translate);
        const double tz = rng.uniform(-aug->translate, aug->translate);
        for (auto& p : c) {
            p[0] = p[0] * s + tx;
            p[1] = p[1] * s + ty;
            p[2] = p[2] * s + tz;
        }
    }
    auto cs = fps(c, cfg.groups);
    auto ps = knn_group(c, cs, cfg.patch_size);
    return {patches_tensor(ps).template cast<T>(), centers_tensor(ps).template cast<T>()};
}

// ---- pre-training --------------------------------------------------------

struct EpochStats {
    int epoch = 0;
    double loss = 0.0, distill = 0.0, recon = 0.0;
    double lr = 0.0;
};

struct PretrainResult {
    Checkpoint checkpoint;
    std::int64_t steps = 0;
    std::vector<EpochStats> epochs;
    bool aborted = false;
    std::string abort_reason;
};

namespace detail {

inline void log_epoch(std::ostream* log, const EpochStats& s, std::int64_t step) {
    if (!log) return;
    std::ostringstream os;
    os << "epoch=" << s.epoch << " step=" << step << " lr=" << std::setprecision(8) << s.lr
       << " loss=" << s.loss << " distill=" << s.distill << " recon=" << s.recon;
    *log << os.str() << "\n";
    log->flush();
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(hash_combine(hash_combine(seed, fnv1a64("order")), std::uint64_t(epoch)));
    rng.shuffle(order);
    return order;
}

}  // namespace detail

// Self-supervised pre-training over one dataset; `fixtures` must cover every
// sample id when the mode includes distillation. A non-finite loss aborts the
// run, returning the checkpoint of the last completed epoch.
// `stop_at_step` pauses the run after that many optimizer steps (checkpoint
// resumable under the same config); < 0 runs the full schedule.
inline PretrainResult pretrain(const TrainConfig& cfg, const Dataset& data,
                               const TeacherFixtureSet* fixtures, std::ostream* log,
                               const Checkpoint* resume = nullptr,
                               std::int64_t stop_at_step = -1) {
    cfg.model.validate();
    if (data.samples.empty()) throw InvalidArgument("pretrain: empty dataset");
    if (cfg.uses_distill()) {
        if (!fixtures) throw MissingInputError("pretrain: distillation requires teacher fixtures");
        if (int(fixtures->l) != cfg.model.prefix_len || int(fixtures->d_cap) != cfg.model.d_cap)
            throw IncompatibleError("pretrain: fixture shape (" + std::to_string(fixtures->l) +
                                    "," + std::to_string(fixtures->d_cap) +
                                    ") does not match model prefix (" +
                                    std::to_string(cfg.model.prefix_len) + "," +
                                    std::to_string(cfg.model.d_cap) + ")");
    }

    ParamStore<float> P;
    model::init_pretrain(P, cfg.model, cfg.seed, cfg.uses_distill(), cfg.uses_recon());
    AdamW<float> opt(cfg.adamw);

    const std::int64_t spe = std::int64_t(data.samples.size());
    const LrSchedule sched{cfg.base_lr, cfg.min_lr, std::int64_t(cfg.warmup_epochs) * spe,
                           std::int64_t(cfg.epochs) * spe};

    std::int64_t step = 0;
    if (resume) {
        if (resume->meta.config_digest != train_digest(cfg))
            throw IncompatibleError("pretrain: checkpoint was produced by a different config");
        apply_checkpoint(P, *resume, /*subset_ok=*/false);
        step = std::int64_t(resume->meta.step);
        if (resume->optimizer)
            opt.restore(std::int64_t(resume->optimizer->step), resume->optimizer->m,
                        resume->optimizer->v);
    }

    PretrainResult res;
    auto snapshot = [&](std::int64_t at_step) {
        OptimizerBlob blob{std::uint64_t(opt.step_count()), opt.m(), opt.v()};
        return make_checkpoint(P, {train_digest(cfg), cfg.seed, std::uint64_t(at_step)}, &blob);
    };
    res.checkpoint = snapshot(step);
    if (cfg.mode == LossMode::none) return res;  // untrained baseline

    std::vector<std::size_t> order;
    int order_epoch = -1;
    EpochStats es;
    std::int64_t total = std::int64_t(cfg.epochs) * spe;
    if (stop_at_step >= 0) total = std::min(total, stop_at_step);
    for (; step < total; ++step) {
        const int epoch = int(step / spe);
        const std::size_t slot = std::size_t(step % spe);
        if (epoch != order_epoch) {
            order = detail::epoch_order(data.samples.size(), cfg.seed, epoch);
            order_epoch = epoch;
            es = EpochStats{};
            es.epoch = epoch;
        }
        const auto& sample = data.samples[order[slot]];
        const std::uint64_t per = hash_combine(
            hash_combine(cfg.seed, std::uint64_t(epoch)), fnv1a64(sample_id_str(sample.id)));
        try {
            auto geom = prepare_sample<float>(sample.points, cfg.model,
                                              cfg.augment.enabled ? &cfg.augment : nullptr,
                                              hash_combine(per, fnv1a64("augment")));
            const Tensor<float>* teacher = nullptr;
            if (cfg.uses_distill()) {
                teacher = fixtures->find(sample.id);
                if (!teacher)
                    throw MissingInputError("pretrain: no teacher fixture for sample '" +
                                            sample_id_str(sample.id) + "'");
            }
            std::vector<int> mask;
            if (cfg.uses_recon())
                mask = model::choose_mask(cfg.model.groups, cfg.model.mask_ratio,
                                          hash_combine(per, fnv1a64("mask")));
            Graph<float> G;
            auto out = model::pretrain_forward(G, P, cfg.model, geom.patches, geom.centers,
                                               teacher, mask, /*train=*/true);
            int loss = -1;
            if (out.distill >= 0) loss = out.distill;
            if (out.recon >= 0) loss = (loss >= 0) ? G.add(loss, out.recon) : out.recon;
            G.backward(loss);
            GradMap<float> grads;
            G.export_grads(grads);
            const double lr = lr_at(sched, step);
            opt.update(P, grads, lr);
            es.loss += double(G.val(loss)[0]);
            if (out.distill >= 0) es.distill += double(G.val(out.distill)[0]);
            if (out.recon >= 0) es.recon += double(G.val(out.recon)[0]);
            es.lr = lr;
        } catch (const NumericError& e) {
            res.aborted = true;
            res.abort_reason = e.what();
            res.steps = step;
            if (log) *log << "abort step=" << step << " reason=" << e.what() << "\n";
            return res;  // res.checkpoint still holds the last completed epoch
        }
        if (slot + 1 == std::size_t(spe)) {
            es.loss /= double(spe);
            es.distill /= double(spe);
            es.recon /= double(spe);
            detail::log_epoch(log, es, step + 1);
            res.epochs.push_back(es);
            res.checkpoint = snapshot(step + 1);
        }
    }
    res.steps = step;
    res.checkpoint = snapshot(step);
    return res;
}

// ---- encoder transfer ----------------------------------------------------

inline bool is_backbone_param(const std::string& name) {
    return name.rfind("tokenizer.", 0) == 0 || name.rfind("posenc.", 0) == 0 ||
           name.rfind("encoder.", 0) == 0;
}

// Copies only tokenizer/positional/encoder tensors from a pre-training
// checkpoint, leaving heads (and anything else) freshly initialized.
inline std::vector<std::string> apply_backbone(ParamStore<float>& store, const Checkpoint& ck) {
    Checkpoint sub;
    sub.meta = ck.meta;
    for (const auto& [name, t] : ck.tensors)
        if (is_backbone_param(name)) sub.tensors[name] = t;
    if (sub.tensors.empty())
        throw IncompatibleError("checkpoint contains no backbone tensors");
    return apply_checkpoint(store, sub, /*subset_ok=*/true);
}

// ---- fine-tuning ---------------------------------------------------------

struct FinetuneConfig {
    ModelConfig model;
    int classes = 4;
    int epochs = 30;
    int warmup_epochs = 2;
    double base_lr = 5e-4;
    double min_lr = 1e-6;
    AdamWConfig adamw;
    AugmentConfig augment;
    std::uint64_t seed = 1;
};

struct FinetuneResult {
    Checkpoint checkpoint;
    std::vector<EpochStats> epochs;
    std::vector<std::string> transferred;   // backbone tensors loaded, if any
    std::uint64_t data_order_digest = 0;    // hash of the full visit order
};

inline std::uint64_t finetune_digest(const FinetuneConfig& cfg) {
    return hash_combine(hash_combine(config_digest(cfg.model), fnv1a64("classify")),
                        std::uint64_t(cfg.classes));
}

// Supervised classification; when `pretrained` is given its backbone replaces
// the fresh initialization before training starts.
inline FinetuneResult finetune_classify(const FinetuneConfig& cfg, const Dataset& data,
                                        const Checkpoint* pretrained, std::ostream* log) {
    cfg.model.validate();
    if (!data.has_labels) throw MissingInputError("finetune: dataset has no labels");
    if (data.samples.empty()) throw InvalidArgument("finetune: empty dataset");

    ParamStore<float> P;
    model::init_backbone(P, cfg.model, cfg.seed);
    model::init_cls_head(P, cfg.model, cfg.classes, cfg.seed);
    FinetuneResult res;
    if (pretrained) res.transferred = apply_backbone(P, *pretrained);

    AdamW<float> opt(cfg.adamw);
    const std::int64_t spe = std::int64_t(data.samples.size());
    const LrSchedule sched{cfg.base_lr, cfg.min_lr, std::int64_t(cfg.warmup_epochs) * spe,
                           std::int64_t(cfg.epochs) * spe};
    std::uint64_t order_digest = fnv1a64("finetune-order");
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = detail::epoch_order(data.samples.size(), cfg.seed, epoch);
        EpochStats es;
        es.epoch = epoch;
        for (std::size_t slot = 0; slot < order.size(); ++slot) {
            const std::int64_t step = std::int64_t(epoch) * spe + std::int64_t(slot);
            const auto& sample = data.samples[order[slot]];
            order_digest = hash_combine(order_digest, fnv1a64(sample_id_str(sample.id)));
            const std::uint64_t per = hash_combine(
                hash_combine(cfg.seed, std::uint64_t(epoch)), fnv1a64(sample_id_str(sample.id)));
            auto geom = prepare_sample<float>(sample.points, cfg.model,
                                              cfg.augment.enabled ? &cfg.augment : nullptr,
                                              hash_combine(per, fnv1a64("augment")));
            Graph<float> G;
            const int f0 = model::tokenize(G, P, cfg.model, G.input(geom.patches), true);
            const int pos = model::pos_encode(G, P, G.input(geom.centers));
            auto feats = model::encode(G, P, cfg.model, f0, pos);
            const int logits = model::classify(G, P, cfg.model, feats.back());
            const int label = int(*sample.label);
            const int loss = G.cross_entropy(logits, label);
            G.backward(loss);
            GradMap<float> grads;
            G.export_grads(grads);
            const double lr = lr_at(sched, step);
            opt.update(P, grads, lr);
            es.loss += double(G.val(loss)[0]);
            es.lr = lr;
        }
        es.loss /= double(spe);
        detail::log_epoch(log, es, std::int64_t(epoch + 1) * spe);
        res.epochs.push_back(es);
    }
    res.data_order_digest = order_digest;
    OptimizerBlob blob{std::uint64_t(opt.step_count()), opt.m(), opt.v()};
    res.checkpoint =
        make_checkpoint(P, {finetune_digest(cfg), cfg.seed, std::uint64_t(cfg.epochs * spe)}, &blob);
    return res;
}

// ---- evaluation ----------------------------------------------------------

struct EvalResult {
    int correct = 0;
    int total = 0;
    std::vector<int> predictions;
    double accuracy() const { return total ? double(correct) / double(total) : 0.0; }
};

// Deterministic eval-mode classification. Voting averages the logits of
// `views` copies of each sample (the first un-augmented, the rest augmented
// from seeded streams); ties break toward the lowest class id.
inline EvalResult evaluate_classify(const ModelConfig& cfg, ParamStore<float>& P,
                                    const Dataset& data, int views = 1,
                                    std::uint64_t seed = 1) {
    if (!data.has_labels) throw MissingInputError("evaluate: dataset has no labels");
    if (views < 1) throw InvalidArgument("evaluate: views must be >= 1");
    const int classes = P.at("head.cls.fc1.bias").dim(0);
    EvalResult res;
    AugmentConfig aug;  // defaults; only used when views > 1
    for (const auto& sample : data.samples) {
        std::vector<double> sum(std::size_t(classes), 0.0);
        for (int v = 0; v < views; ++v) {
            const std::uint64_t vs = hash_combine(
                hash_combine(seed, fnv1a64(sample_id_str(sample.id))), std::uint64_t(v));
            auto geom = prepare_sample<float>(sample.points, cfg, v == 0 ? nullptr : &aug, vs);
            Graph<float> G;
            const int f0 = model::tokenize(G, P, cfg, G.input(geom.patches), /*train=*/false);
            const int pos = model::pos_encode(G, P, G.input(geom.centers));
            auto feats = model::encode(G, P, cfg, f0, pos);
            const auto& lv = G.val(model::classify(G, P, cfg, feats.back()));
            for (int c = 0; c < classes; ++c) sum[std::size_t(c)] += double(lv[std::size_t(c)]);
        }
        int pred = 0;
        for (int c = 1; c < classes; ++c)
            if (sum[std::size_t(c)] > sum[std::size_t(pred)]) pred = c;
        res.predictions.push_back(pred);
        ++res.total;
        if (sample.label && int(*sample.label) == pred) ++res.correct;
    }
    return res;
}

// Mean intersection-over-union across labels; labels absent from both
// prediction and ground truth are skipped.
inline double mean_iou(const std::vector<int>& pred, const std::vector<int>& gt, int labels) {
    if (pred.size() != gt.size()) throw InvalidArgument("mean_iou: length mismatch");
    double sum = 0.0;
    int counted = 0;
    for (int l = 0; l < labels; ++l) {
        std::int64_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred[i] == l, g = gt[i] == l;
            inter += (p && g) ? 1 : 0;
            uni += (p || g) ? 1 : 0;
        }
        if (uni == 0) continue;
        sum += double(inter) / double(uni);
        ++counted;
    }
    return counted ? sum / double(counted) : 0.0;
}

// ---- reconstruction probe ------------------------------------------------

struct ProbeResult {
    double mean_chamfer = 0.0;
    int samples = 0;
};

// Feature-quality probe: the backbone under test is frozen and a decoder
// drawn from `probe_seed` (identical across the backbones being compared)
// reads its masked encoding. With `fit_steps` > 0 the decoder alone is first
// fitted to the dataset — deterministic in `probe_seed` — so the reported
// Chamfer error measures how reconstructable the backbone's features are
// rather than how lucky the random decoder was. The backbone never moves.
inline ProbeResult recon_probe(const ModelConfig& cfg, const Checkpoint& backbone,
                               const Dataset& data, std::uint64_t probe_seed,
                               int fit_steps = 0, double fit_lr = 1e-3) {
    ParamStore<float> P;
    model::init_backbone(P, cfg, probe_seed);
    model::init_decoder(P, cfg, probe_seed);
    apply_backbone(P, backbone);
    if (fit_steps > 0) {
        AdamW<float> opt(AdamWConfig{});
        LrSchedule sched{fit_lr, fit_lr / 1000.0, std::min<std::int64_t>(10, fit_steps),
                         std::int64_t(fit_steps)};
        Rng ord(hash_combine(probe_seed, fnv1a64("order")));
        std::vector<std::size_t> order(data.samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::size_t cursor = order.size();
        for (int step = 0; step < fit_steps; ++step) {
            if (cursor >= order.size()) {
                ord.shuffle(order);
                cursor = 0;
            }
            const auto& sample = data.samples[order[cursor++]];
            auto geom = prepare_sample<float>(sample.points, cfg, nullptr, 0);
            auto mask = model::choose_mask(
                cfg.groups, cfg.mask_ratio,
                hash_combine(hash_combine(probe_seed, std::uint64_t(step)),
                             fnv1a64(sample_id_str(sample.id))));
            Graph<float> G;
            const Tensor<float>* no_teacher = nullptr;
            auto out = model::pretrain_forward(G, P, cfg, geom.patches, geom.centers,
                                               no_teacher, mask, /*train=*/true);
            G.backward(out.recon);
            GradMap<float> grads;
            G.export_grads(grads);
            GradMap<float> dec_grads;
            for (auto& [name, g] : grads)
                if (name.rfind("decoder.", 0) == 0) dec_grads.emplace(name, std::move(g));
            opt.update(P, dec_grads, lr_at(sched, step));
        }
    }
    ProbeResult res;
    for (const auto& sample : data.samples) {
        auto geom = prepare_sample<float>(sample.points, cfg, nullptr, 0);
        auto mask = model::choose_mask(
            cfg.groups, cfg.mask_ratio,
            hash_combine(probe_seed, fnv1a64(sample_id_str(sample.id))));
        Graph<float> G;
        const Tensor<float>* no_teacher = nullptr;
        auto out = model::pretrain_forward(G, P, cfg, geom.patches, geom.centers, no_teacher,
                                           mask, /*train=*/false);
        res.mean_chamfer += double(G.val(out.recon)[0]);
        ++res.samples;
    }
    if (res.samples) res.mean_chamfer /= double(res.samples);
    return res;
}

}  // namespace pd
