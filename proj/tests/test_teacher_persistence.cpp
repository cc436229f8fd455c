// Teacher fixture synthesis and the binary persistence layer: round-trips,
// byte-level determinism, corruption/truncation diagnostics, and the
// encoder-only transfer name set.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pd/datagen.hpp"
#include "pd/model.hpp"
#include "pd/teacher.hpp"
#include "pd/train.hpp"

using namespace pd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("pdtest-" + std::to_string(std::rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const char* name) const { return (path / name).string(); }
};

std::vector<char> slurp(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void truncate_to(const std::string& p, std::size_t n) {
    auto bytes = slurp(p);
    bytes.resize(n);
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), std::streamsize(bytes.size()));
}

}  // namespace

TEST_CASE("synth_teacher is deterministic and class-structured") {
    auto a = synth_teacher(0, 4, 16, 0.1f, 7, 1);
    auto b = synth_teacher(0, 4, 16, 0.1f, 7, 1);
    CHECK(a.data == b.data);
    CHECK(a.shape == Shape{4, 16});
    // different nonce perturbs, different class replaces the prototype
    auto c = synth_teacher(0, 4, 16, 0.1f, 7, 2);
    CHECK(c.data != a.data);
    auto proto0 = synth_teacher(0, 4, 16, 0.0f, 7, 99);
    auto proto0b = synth_teacher(0, 4, 16, 0.0f, 7, 5);
    CHECK(proto0.data == proto0b.data);  // zero noise -> pure class prototype
    auto proto1 = synth_teacher(1, 4, 16, 0.0f, 7, 0);
    double between = 0, within = 0;
    for (std::size_t i = 0; i < proto0.data.size(); ++i) {
        const double d = double(proto0[i]) - double(proto1[i]);
        between += d * d;
        const double w = double(a[i]) - double(proto0[i]);
        within += w * w;
    }
    CHECK(between > 4.0 * within);  // class separation dominates sample noise
}

TEST_CASE("dataset round-trips through PDDS") {
    TempDir td;
    GenConfig gc;
    gc.classes = 3;
    gc.samples_per_class = 2;
    gc.points = 32;
    gc.prefix_len = 2;
    gc.d_cap = 8;
    auto gen = generate_shapes(gc);
    CHECK(gen.dataset.size() == 6);
    CHECK(gen.dataset.has_labels);
    CHECK(gen.dataset.class_names.size() == 3);
    const auto p = td.file("d.pdds");
    write_dataset(gen.dataset, p);
    auto rd = read_dataset(p);
    CHECK(rd.points_per_sample == gen.dataset.points_per_sample);
    CHECK(rd.class_names == gen.dataset.class_names);
    REQUIRE(rd.size() == gen.dataset.size());
    for (std::size_t i = 0; i < rd.size(); ++i) {
        CHECK(rd.samples[i].id == gen.dataset.samples[i].id);
        CHECK(rd.samples[i].label == gen.dataset.samples[i].label);
        CHECK(rd.samples[i].points == gen.dataset.samples[i].points);
    }
    // rewriting produces identical bytes
    const auto p2 = td.file("d2.pdds");
    write_dataset(rd, p2);
    CHECK(slurp(p) == slurp(p2));
}

TEST_CASE("fixtures round-trip through PDTF and pair by id") {
    TempDir td;
    GenConfig gc;
    gc.classes = 2;
    gc.samples_per_class = 3;
    gc.points = 32;
    gc.prefix_len = 2;
    gc.d_cap = 8;
    auto gen = generate_shapes(gc);
    CHECK(gen.fixtures.size() == gen.dataset.size());
    const auto p = td.file("t.pdtf");
    write_fixtures(gen.fixtures, p);
    auto fx = load_fixtures(p);
    CHECK(fx.l == 2);
    CHECK(fx.d_cap == 8);
    REQUIRE(fx.size() == gen.fixtures.size());
    for (const auto& sample : gen.dataset.samples) {
        const auto* emb = fx.find(sample.id);
        REQUIRE(emb != nullptr);
        CHECK(emb->data == gen.fixtures.find(sample.id)->data);
    }
    SampleId bogus = make_sample_id("no-such-sample");
    CHECK(fx.find(bogus) == nullptr);
}

TEST_CASE("checkpoint round-trips byte-identically with optimizer state") {
    TempDir td;
    ModelConfig cfg = ModelConfig::tiny();
    cfg.groups = 8;
    cfg.patch_size = 8;
    cfg.points = 64;
    ParamStore<float> P;
    model::init_pretrain(P, cfg, 5, true, true);
    OptimizerBlob blob;
    blob.step = 17;
    Rng rng(3);
    for (const auto& [name, e] : P.entries) {
        if (!e.trainable) continue;
        Tensor<float> m(e.value.shape), v(e.value.shape);
        for (auto& x : m.data) x = float(rng.normal());
        for (auto& x : v.data) x = float(rng.uniform());
        blob.m[name] = std::move(m);
        blob.v[name] = std::move(v);
    }
    auto ck = make_checkpoint(P, {0xabcdef12u, 7, 42}, &blob);
    const auto p = td.file("m.pdck");
    save_checkpoint(ck, p);
    auto rd = load_checkpoint(p);
    CHECK(rd.meta.config_digest == ck.meta.config_digest);
    CHECK(rd.meta.seed == 7);
    CHECK(rd.meta.step == 42);
    REQUIRE(rd.tensors.size() == ck.tensors.size());
    for (const auto& [name, t] : ck.tensors) {
        REQUIRE(rd.tensors.count(name));
        CHECK(rd.tensors.at(name).shape == t.shape);
        CHECK(rd.tensors.at(name).data == t.data);
    }
    REQUIRE(rd.optimizer.has_value());
    CHECK(rd.optimizer->step == 17);
    CHECK(rd.optimizer->m.size() == blob.m.size());
    CHECK(rd.optimizer->v.at("encoder.0.attn.q.weight").data ==
          blob.v.at("encoder.0.attn.q.weight").data);
    const auto p2 = td.file("m2.pdck");
    save_checkpoint(rd, p2);
    CHECK(slurp(p) == slurp(p2));
}

TEST_CASE("corrupt and truncated files raise ParseError with an offset") {
    TempDir td;
    ModelConfig cfg = ModelConfig::tiny();
    ParamStore<float> P;
    model::init_posenc(P, cfg, 1);
    auto ck = make_checkpoint(P, {1, 2, 3});
    const auto p = td.file("c.pdck");
    save_checkpoint(ck, p);

    SUBCASE("bad magic") {
        auto bytes = slurp(p);
        bytes[0] = 'X';
        std::ofstream(p, std::ios::binary | std::ios::trunc)
            .write(bytes.data(), std::streamsize(bytes.size()));
        try {
            load_checkpoint(p);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.offset == 0);
        }
    }
    SUBCASE("truncated mid-record") {
        const auto full = slurp(p).size();
        truncate_to(p, full - 7);
        try {
            load_checkpoint(p);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.offset > 0);
            CHECK(e.offset <= std::int64_t(full));
        }
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint(td.file("nope.pdck")), IoError); }
}

TEST_CASE("apply_checkpoint enforces exact match unless subset_ok") {
    ModelConfig cfg = ModelConfig::tiny();
    ParamStore<float> full, enc;
    model::init_pretrain(full, cfg, 9, true, true);
    model::init_backbone(enc, cfg, 10);
    auto ck = make_checkpoint(full, {0, 9, 0});
    CHECK_THROWS_AS(apply_checkpoint(enc, ck, /*subset_ok=*/false), IncompatibleError);
    auto loaded = apply_checkpoint(enc, ck, /*subset_ok=*/true);
    CHECK(!loaded.empty());
    for (const auto& name : loaded) CHECK(enc.at(name).data == full.at(name).data);
    // shape conflicts are rejected even with subset_ok
    ModelConfig other = cfg;
    other.dim = 32;
    other.tok_channels[3] = 32;
    ParamStore<float> small;
    model::init_backbone(small, other, 10);
    CHECK_THROWS_AS(apply_checkpoint(small, ck, /*subset_ok=*/true), IncompatibleError);
}

TEST_CASE("encoder-only transfer loads exactly the backbone name set") {
    ModelConfig cfg = ModelConfig::tiny();
    ParamStore<float> full, target;
    model::init_pretrain(full, cfg, 11, true, true);
    model::init_backbone(target, cfg, 12);
    model::init_cls_head(target, cfg, 4, 12);
    auto ck = make_checkpoint(full, {0, 11, 0});
    auto head_before = target.at("head.cls.fc0.weight").data;
    auto loaded = apply_backbone(target, ck);
    for (const auto& name : loaded) {
        CHECK(is_backbone_param(name));
        CHECK(target.at(name).data == full.at(name).data);
    }
    // every backbone tensor in the store was covered; heads untouched
    for (const auto& [name, e] : target.entries)
        if (is_backbone_param(name))
            CHECK(std::find(loaded.begin(), loaded.end(), name) != loaded.end());
    CHECK(target.at("head.cls.fc0.weight").data == head_before);
    // a heads-only checkpoint has no backbone to transfer
    ParamStore<float> heads;
    model::init_cls_head(heads, cfg, 4, 1);
    auto hck = make_checkpoint(heads, {0, 1, 0});
    CHECK_THROWS_AS(apply_backbone(target, hck), IncompatibleError);
}

TEST_CASE("sample ids preserve their text form") {
    auto id = make_sample_id("c003s000042");
    CHECK(sample_id_str(id) == "c003s000042");
    CHECK_THROWS_AS(make_sample_id("this-name-is-way-too-long"), InvalidArgument);
}
