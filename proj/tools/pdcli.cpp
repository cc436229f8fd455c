// pdcli: reproducible experiment driver.
//
// Subcommands: gen-data, pretrain, finetune, eval, gradcheck, inspect.
// Exit codes: 0 success, 1 runtime failure (e.g. non-finite loss or a failed
// gradient check), 2 usage error, 3 missing input, 4 incompatible
// checkpoint/config, 5 corrupt file.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "pd/checks.hpp"
#include "pd/datagen.hpp"
#include "pd/train.hpp"

namespace fs = std::filesystem;
using namespace pd;

namespace {

// ---- key=value config files ----------------------------------------------

std::map<std::string, std::string> read_kv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw InvalidArgument(path + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

template <typename T>
void kv_get(const std::map<std::string, std::string>& kv, const std::string& key, T& out) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    std::istringstream is(it->second);
    T v;
    if (!(is >> v)) throw InvalidArgument("config key '" + key + "': bad value '" + it->second + "'");
    out = v;
}

void kv_get(const std::map<std::string, std::string>& kv, const std::string& key,
            std::string& out) {
    auto it = kv.find(key);
    if (it != kv.end()) out = it->second;
}

// model fields overridable from a config file
void apply_model_kv(const std::map<std::string, std::string>& kv, ModelConfig& m) {
    kv_get(kv, "points", m.points);
    kv_get(kv, "groups", m.groups);
    kv_get(kv, "patch_size", m.patch_size);
    kv_get(kv, "dim", m.dim);
    kv_get(kv, "depth", m.depth);
    kv_get(kv, "heads", m.heads);
    kv_get(kv, "ffn_mult", m.ffn_mult);
    kv_get(kv, "concept_tokens", m.concept_tokens);
    kv_get(kv, "prefix_len", m.prefix_len);
    kv_get(kv, "d_cap", m.d_cap);
    kv_get(kv, "dec_depth", m.dec_depth);
    kv_get(kv, "mask_ratio", m.mask_ratio);
    kv_get(kv, "pos_hidden", m.pos_hidden);
    kv_get(kv, "cls_hidden", m.cls_hidden);
    kv_get(kv, "seg_hidden", m.seg_hidden);
    int nc = m.no_concept ? 1 : 0;
    kv_get(kv, "no_concept", nc);
    m.no_concept = nc != 0;
    if (auto it = kv.find("tok_channels"); it != kv.end()) {
        std::istringstream is(it->second);
        std::string tok;
        for (int i = 0; i < 4; ++i) {
            if (!std::getline(is, tok, ','))
                throw InvalidArgument("tok_channels: expected 4 comma-separated values");
            m.tok_channels[std::size_t(i)] = std::stoi(tok);
        }
    }
}

// ---- output helpers -------------------------------------------------------

fs::path prepare_out_dir(const std::string& out_dir) {
    fs::path p = out_dir.empty() ? fs::path(".") : fs::path(out_dir);
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    if (!f) throw IoError("cannot write: " + p.string());
    f << text;
}

std::string train_dump(const TrainConfig& tc) {
    std::ostringstream os;
    os << config_dump(tc.model) << "mode=" << loss_mode_name(tc.mode) << "\nepochs=" << tc.epochs
       << "\nwarmup_epochs=" << tc.warmup_epochs << "\nbase_lr=" << tc.base_lr
       << "\nmin_lr=" << tc.min_lr << "\nweight_decay=" << tc.adamw.weight_decay
       << "\nbeta1=" << tc.adamw.beta1 << "\nbeta2=" << tc.adamw.beta2
       << "\neps=" << tc.adamw.eps << "\naugment=" << (tc.augment.enabled ? 1 : 0)
       << "\nseed=" << tc.seed << "\n";
    return os.str();
}

ModelConfig profile_config(const std::string& profile) {
    if (profile == "tiny") return ModelConfig::tiny();
    if (profile == "full") return ModelConfig::full_scale();
    throw InvalidArgument("unknown profile '" + profile + "' (expected tiny|full)");
}

// ---- subcommands ----------------------------------------------------------

int cmd_gen_data(const GenConfig& gc, const std::string& out_dir) {
    const auto dir = prepare_out_dir(out_dir);
    auto gen = generate_shapes(gc);
    write_dataset(gen.dataset, (dir / "dataset.pdds").string());
    write_fixtures(gen.fixtures, (dir / "fixtures.pdtf").string());
    std::ostringstream cfg;
    cfg << "command=gen-data\nclasses=" << gc.classes
        << "\nsamples_per_class=" << gc.samples_per_class << "\npoints=" << gc.points
        << "\nnoise=" << gc.noise << "\nteacher_noise=" << gc.teacher_noise
        << "\nprefix_len=" << gc.prefix_len << "\nd_cap=" << gc.d_cap << "\nseed=" << gc.seed
        << "\n";
    write_text(dir / "config.dump", cfg.str());
    std::cout << "wrote " << gen.dataset.size() << " samples and " << gen.fixtures.size()
              << " fixtures to " << dir.string() << "\n";
    return 0;
}

int cmd_pretrain(const TrainConfig& tc, const std::string& data_path,
                 const std::string& fixtures_path, const std::string& resume_path,
                 std::int64_t stop_at_step, const std::string& out_dir) {
    const auto dir = prepare_out_dir(out_dir);
    auto data = read_dataset(data_path);
    TeacherFixtureSet fixtures;
    if (tc.uses_distill()) {
        if (fixtures_path.empty())
            throw MissingInputError("--fixtures is required for loss mode " +
                                    loss_mode_name(tc.mode));
        fixtures = load_fixtures(fixtures_path);
    }
    Checkpoint resume;
    const bool resuming = !resume_path.empty();
    if (resuming) resume = load_checkpoint(resume_path);
    write_text(dir / "config.dump", "command=pretrain\n" + train_dump(tc));
    std::ofstream log(dir / "train.log");
    auto res = pretrain(tc, data, tc.uses_distill() ? &fixtures : nullptr, &log,
                        resuming ? &resume : nullptr, stop_at_step);
    save_checkpoint(res.checkpoint, (dir / "model.ckpt").string());
    std::ostringstream m;
    m << "steps=" << res.steps << "\naborted=" << (res.aborted ? 1 : 0) << "\n";
    if (!res.epochs.empty()) {
        const auto& last = res.epochs.back();
        m << "final_loss=" << last.loss << "\nfinal_distill=" << last.distill
          << "\nfinal_recon=" << last.recon << "\n";
    }
    write_text(dir / "metrics.txt", m.str());
    if (res.aborted) {
        std::cerr << "pretrain aborted: " << res.abort_reason
                  << " (last-good checkpoint saved)\n";
        return 1;
    }
    std::cout << "pretrain done: steps=" << res.steps;
    if (!res.epochs.empty()) std::cout << " final_loss=" << res.epochs.back().loss;
    std::cout << "\n";
    return 0;
}

int cmd_finetune(const FinetuneConfig& fc, const std::string& data_path,
                 const std::string& ckpt_path, const std::string& out_dir) {
    const auto dir = prepare_out_dir(out_dir);
    auto data = read_dataset(data_path);
    Checkpoint pre;
    const bool transfer = !ckpt_path.empty();
    if (transfer) pre = load_checkpoint(ckpt_path);
    std::ostringstream cfg;
    cfg << "command=finetune\n" << config_dump(fc.model) << "classes=" << fc.classes
        << "\nepochs=" << fc.epochs << "\nwarmup_epochs=" << fc.warmup_epochs
        << "\nbase_lr=" << fc.base_lr << "\nmin_lr=" << fc.min_lr
        << "\nweight_decay=" << fc.adamw.weight_decay << "\nseed=" << fc.seed
        << "\ninit=" << (transfer ? "pretrained" : "scratch") << "\n";
    write_text(dir / "config.dump", cfg.str());
    std::ofstream log(dir / "train.log");
    auto res = finetune_classify(fc, data, transfer ? &pre : nullptr, &log);
    save_checkpoint(res.checkpoint, (dir / "model.ckpt").string());
    std::ostringstream m;
    m << "final_loss=" << (res.epochs.empty() ? 0.0 : res.epochs.back().loss)
      << "\ntransferred=" << res.transferred.size() << "\ndata_order_digest=" << std::hex
      << res.data_order_digest << std::dec << "\n";
    write_text(dir / "metrics.txt", m.str());
    std::cout << "finetune done: final_loss="
              << (res.epochs.empty() ? 0.0 : res.epochs.back().loss)
              << " transferred=" << res.transferred.size() << "\n";
    return 0;
}

int cmd_eval(const ModelConfig& mc, int classes, const std::string& data_path,
             const std::string& ckpt_path, int votes, std::uint64_t seed,
             const std::string& out_dir) {
    const auto dir = prepare_out_dir(out_dir);
    auto data = read_dataset(data_path);
    auto ck = load_checkpoint(ckpt_path);
    FinetuneConfig fc;
    fc.model = mc;
    fc.classes = classes;
    if (ck.meta.config_digest != finetune_digest(fc))
        throw IncompatibleError("checkpoint was not produced by this model/classes config");
    ParamStore<float> P;
    model::init_backbone(P, mc, seed);
    model::init_cls_head(P, mc, classes, seed);
    apply_checkpoint(P, ck, /*subset_ok=*/false);
    auto res = evaluate_classify(mc, P, data, votes, seed);
    std::ostringstream cfg;
    cfg << "command=eval\n" << config_dump(mc) << "classes=" << classes << "\nvotes=" << votes
        << "\nseed=" << seed << "\n";
    write_text(dir / "config.dump", cfg.str());
    std::ostringstream m;
    m << "accuracy=" << res.accuracy() << "\ncorrect=" << res.correct
      << "\ntotal=" << res.total << "\nvotes=" << votes << "\n";
    write_text(dir / "metrics.txt", m.str());
    std::cout << "accuracy=" << res.accuracy() << " correct=" << res.correct
              << " total=" << res.total << " votes=" << votes << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& scope, int samples, std::uint64_t seed) {
    bool all_pass = true;
    auto report = [&](const std::vector<checks::Report>& rs, double tol) {
        for (const auto& r : rs) {
            std::cout << "check=" << r.name << " worst=" << r.fd.worst_target
                      << " rel_err=" << r.fd.max_rel_err << " tol=" << tol
                      << " status=" << (r.pass ? "ok" : "FAIL") << "\n";
            all_pass = all_pass && r.pass;
        }
    };
    if (scope == "ops" || scope == "all")
        report(checks::run_checks(checks::op_checks(), samples, seed, 1e-4), 1e-4);
    if (scope == "model" || scope == "all")
        report(checks::run_checks(checks::model_checks(), samples, seed, 1e-3), 1e-3);
    if (scope != "ops" && scope != "model" && scope != "all")
        throw InvalidArgument("unknown scope '" + scope + "' (expected ops|model|all)");
    std::cout << (all_pass ? "gradcheck: all targets passed" : "gradcheck: FAILURES above")
              << "\n";
    return all_pass ? 0 : 1;
}

int cmd_inspect(const std::string& ckpt_path) {
    auto ck = load_checkpoint(ckpt_path);
    std::cout << "checkpoint " << ckpt_path << "\n";
    std::cout << "  config_digest=0x" << std::hex << ck.meta.config_digest << std::dec
              << " seed=" << ck.meta.seed << " step=" << ck.meta.step << "\n";
    std::int64_t total = 0;
    for (const auto& [name, t] : ck.tensors) {
        std::cout << "  " << name << " " << shape_str(t.shape) << " numel=" << t.numel()
                  << "\n";
        total += t.numel();
    }
    std::cout << "  tensors=" << ck.tensors.size() << " total_values=" << total << "\n";
    if (ck.optimizer)
        std::cout << "  optimizer: step=" << ck.optimizer->step
                  << " moment_tensors=" << ck.optimizer->m.size() + ck.optimizer->v.size()
                  << "\n";
    else
        std::cout << "  optimizer: none\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"point-cloud distillation pre-training toolkit"};
    app.require_subcommand(1);

    int exit_code = 0;

    // gen-data
    {
        auto* c = app.add_subcommand("gen-data", "generate a synthetic shape dataset + fixtures");
        auto gc = std::make_shared<GenConfig>();
        auto out_dir = std::make_shared<std::string>("out");
        c->add_option("--classes", gc->classes);
        c->add_option("--samples-per-class", gc->samples_per_class);
        c->add_option("--points", gc->points);
        c->add_option("--noise", gc->noise);
        c->add_option("--teacher-noise", gc->teacher_noise);
        c->add_option("--prefix-len", gc->prefix_len);
        c->add_option("--d-cap", gc->d_cap);
        c->add_option("--seed", gc->seed);
        c->add_option("--out-dir", *out_dir);
        c->callback([=, &exit_code] { exit_code = cmd_gen_data(*gc, *out_dir); });
    }

    // pretrain
    {
        auto* c = app.add_subcommand("pretrain", "self-supervised pre-training");
        struct Opts {
            std::string data, fixtures, resume, config, out_dir = "out";
            std::string loss = "both", profile = "tiny";
            bool no_concept = false, no_augment = false;
            std::int64_t stop_at_step = -1;
            int threads = 0;
            TrainConfig tc;
        };
        auto o = std::make_shared<Opts>();
        c->add_option("--data", o->data)->required();
        c->add_option("--fixtures", o->fixtures);
        c->add_option("--loss", o->loss, "distill|recon|both|none");
        c->add_flag("--no-concept", o->no_concept);
        c->add_flag("--no-augment", o->no_augment);
        c->add_option("--profile", o->profile, "tiny|full");
        auto* oe = c->add_option("--epochs", o->tc.epochs);
        auto* ow = c->add_option("--warmup-epochs", o->tc.warmup_epochs);
        auto* ol = c->add_option("--lr", o->tc.base_lr);
        auto* om = c->add_option("--min-lr", o->tc.min_lr);
        auto* od = c->add_option("--weight-decay", o->tc.adamw.weight_decay);
        auto* os_ = c->add_option("--seed", o->tc.seed);
        c->add_option("--stop-at-step", o->stop_at_step);
        c->add_option("--resume", o->resume);
        c->add_option("--threads", o->threads);
        c->add_option("--config", o->config, "key=value file; flags take precedence");
        c->callback([=, &exit_code] {
            if (o->threads > 0) set_threads(o->threads);
            o->tc.model = profile_config(o->profile);
            o->tc.mode = parse_loss_mode(o->loss);
            if (!o->config.empty()) {
                auto kv = read_kv(o->config);
                apply_model_kv(kv, o->tc.model);
                if (!oe->count()) kv_get(kv, "epochs", o->tc.epochs);
                if (!ow->count()) kv_get(kv, "warmup_epochs", o->tc.warmup_epochs);
                if (!ol->count()) kv_get(kv, "base_lr", o->tc.base_lr);
                if (!om->count()) kv_get(kv, "min_lr", o->tc.min_lr);
                if (!od->count()) kv_get(kv, "weight_decay", o->tc.adamw.weight_decay);
                if (!os_->count()) kv_get(kv, "seed", o->tc.seed);
            }
            if (o->no_concept) o->tc.model.no_concept = true;
            if (o->no_augment) o->tc.augment.enabled = false;
            exit_code = cmd_pretrain(o->tc, o->data, o->fixtures, o->resume, o->stop_at_step,
                                     o->out_dir);
        });
        c->add_option("--out-dir", o->out_dir);
    }

    // finetune
    {
        auto* c = app.add_subcommand("finetune", "supervised classification fine-tuning");
        struct Opts {
            std::string data, ckpt, config, out_dir = "out", profile = "tiny";
            int threads = 0;
            FinetuneConfig fc;
        };
        auto o = std::make_shared<Opts>();
        c->add_option("--data", o->data)->required();
        c->add_option("--ckpt", o->ckpt, "pre-training checkpoint for encoder transfer");
        c->add_option("--classes", o->fc.classes);
        c->add_option("--profile", o->profile);
        c->add_option("--epochs", o->fc.epochs);
        c->add_option("--warmup-epochs", o->fc.warmup_epochs);
        c->add_option("--lr", o->fc.base_lr);
        c->add_option("--min-lr", o->fc.min_lr);
        c->add_option("--weight-decay", o->fc.adamw.weight_decay);
        c->add_option("--seed", o->fc.seed);
        c->add_option("--threads", o->threads);
        c->add_option("--config", o->config);
        c->add_option("--out-dir", o->out_dir);
        c->callback([=, &exit_code] {
            if (o->threads > 0) set_threads(o->threads);
            o->fc.model = profile_config(o->profile);
            if (!o->config.empty()) apply_model_kv(read_kv(o->config), o->fc.model);
            exit_code = cmd_finetune(o->fc, o->data, o->ckpt, o->out_dir);
        });
    }

    // eval
    {
        auto* c = app.add_subcommand("eval", "evaluate a fine-tuned classifier");
        struct Opts {
            std::string data, ckpt, config, out_dir = "out", profile = "tiny";
            int classes = 4, votes = 1, threads = 0;
            std::uint64_t seed = 1;
        };
        auto o = std::make_shared<Opts>();
        c->add_option("--data", o->data)->required();
        c->add_option("--ckpt", o->ckpt)->required();
        c->add_option("--classes", o->classes);
        c->add_option("--votes", o->votes);
        c->add_option("--profile", o->profile);
        c->add_option("--seed", o->seed);
        c->add_option("--threads", o->threads);
        c->add_option("--config", o->config);
        c->add_option("--out-dir", o->out_dir);
        c->callback([=, &exit_code] {
            if (o->threads > 0) set_threads(o->threads);
            ModelConfig mc = profile_config(o->profile);
            if (!o->config.empty()) apply_model_kv(read_kv(o->config), mc);
            exit_code =
                cmd_eval(mc, o->classes, o->data, o->ckpt, o->votes, o->seed, o->out_dir);
        });
    }

    // gradcheck
    {
        auto* c = app.add_subcommand("gradcheck", "finite-difference gradient verification");
        auto scope = std::make_shared<std::string>("all");
        auto samples = std::make_shared<int>(25);
        auto seed = std::make_shared<std::uint64_t>(1);
        c->add_option("--scope", *scope, "ops|model|all");
        c->add_option("--samples", *samples, "coordinates sampled per target");
        c->add_option("--seed", *seed);
        c->callback([=, &exit_code] { exit_code = cmd_gradcheck(*scope, *samples, *seed); });
    }

    // inspect
    {
        auto* c = app.add_subcommand("inspect", "print checkpoint header and tensor table");
        auto ckpt = std::make_shared<std::string>();
        c->add_option("--ckpt", *ckpt)->required();
        c->callback([=, &exit_code] { exit_code = cmd_inspect(*ckpt); });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const MissingInputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const IncompatibleError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}
