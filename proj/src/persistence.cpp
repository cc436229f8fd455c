#include "pd/persistence.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace pd {

namespace {

class Writer {
public:
    explicit Writer(const std::string& path) : final_path_(path), tmp_path_(path + ".tmp") {
        out_.open(tmp_path_, std::ios::binary | std::ios::trunc);
        if (!out_) throw IoError("cannot open for writing: " + tmp_path_);
    }

    ~Writer() {
        if (!committed_) {
            out_.close();
            std::error_code ec;
            std::filesystem::remove(tmp_path_, ec);
        }
    }

    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), std::streamsize(n));
        if (!out_) throw IoError("write failed: " + tmp_path_);
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f32s(const float* p, std::size_t n) { bytes(p, n * 4); }
    void str(const std::string& s) {
        u32(std::uint32_t(s.size()));
        bytes(s.data(), s.size());
    }

    void commit() {
        out_.close();
        if (out_.fail()) throw IoError("close failed: " + tmp_path_);
        std::filesystem::rename(tmp_path_, final_path_);
        committed_ = true;
    }

private:
    std::string final_path_, tmp_path_;
    std::ofstream out_;
    bool committed_ = false;
};

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path) {
        in_.open(path, std::ios::binary);
        if (!in_) throw IoError("cannot open: " + path);
    }

    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), std::streamsize(n));
        if (std::size_t(in_.gcount()) != n)
            throw ParseError("truncated file " + path_, offset_);
        offset_ += n;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        bytes(&v, 1);
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    std::string str(std::size_t max_len = 4096) {
        const std::uint32_t n = u32();
        if (n > max_len) throw ParseError("implausible string length in " + path_, offset_ - 4);
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    void f32s(float* p, std::size_t n) { bytes(p, n * 4); }

    void magic(const char expect[4], const char* what) {
        char m[4];
        bytes(m, 4);
        if (std::memcmp(m, expect, 4) != 0)
            throw ParseError(std::string("bad magic for ") + what + " in " + path_, offset_ - 4);
    }

    std::uint64_t offset() const { return offset_; }
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ifstream in_;
    std::uint64_t offset_ = 0;
};

void write_tensor_record(Writer& w, const std::string& name, const Tensor<float>& t) {
    w.str(name);
    w.u32(std::uint32_t(t.rank()));
    for (int d : t.shape) w.u32(std::uint32_t(d));
    w.f32s(t.data.data(), t.data.size());
}

std::pair<std::string, Tensor<float>> read_tensor_record(Reader& r) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw ParseError("implausible tensor rank in " + r.path(), r.offset() - 4);
    Shape s(rank);
    for (std::uint32_t i = 0; i < rank; ++i) s[i] = int(r.u32());
    Tensor<float> t(s);
    r.f32s(t.data.data(), t.data.size());
    return {std::move(name), std::move(t)};
}

}  // namespace

SampleId make_sample_id(const std::string& s) {
    if (s.size() > 16)
        throw InvalidArgument("sample id '" + s + "' exceeds 16 bytes");
    SampleId id{};
    std::memcpy(id.data(), s.data(), s.size());
    return id;
}

std::string sample_id_str(const SampleId& id) {
    std::size_t n = 16;
    while (n > 0 && id[n - 1] == '\0') --n;
    return std::string(id.data(), n);
}

void write_dataset(const Dataset& ds, const std::string& path) {
    Writer w(path);
    w.bytes("PDDS", 4);
    w.u32(1);
    w.u64(ds.samples.size());
    w.u32(ds.points_per_sample);
    w.u8(ds.has_labels ? 1 : 0);
    if (ds.has_labels) {
        w.u32(std::uint32_t(ds.class_names.size()));
        for (const auto& name : ds.class_names) w.str(name);
    }
    for (const auto& s : ds.samples) {
        if (s.points.size() != ds.points_per_sample)
            throw InvalidArgument("write_dataset: sample " + sample_id_str(s.id) +
                                  " has wrong point count");
        w.bytes(s.id.data(), 16);
        if (ds.has_labels) {
            if (!s.label) throw InvalidArgument("write_dataset: missing label");
            w.u32(*s.label);
        }
        w.f32s(&s.points[0][0], s.points.size() * 3);
    }
    w.commit();
}

Dataset read_dataset(const std::string& path) {
    Reader r(path);
    r.magic("PDDS", "dataset");
    const std::uint32_t version = r.u32();
    if (version != 1) throw ParseError("unsupported dataset version " + std::to_string(version),
                                       r.offset() - 4);
    Dataset ds;
    const std::uint64_t count = r.u64();
    ds.points_per_sample = r.u32();
    ds.has_labels = r.u8() != 0;
    if (ds.has_labels) {
        const std::uint32_t nc = r.u32();
        for (std::uint32_t i = 0; i < nc; ++i) ds.class_names.push_back(r.str());
    }
    ds.samples.resize(count);
    for (auto& s : ds.samples) {
        r.bytes(s.id.data(), 16);
        if (ds.has_labels) s.label = r.u32();
        s.points.resize(ds.points_per_sample);
        if (ds.points_per_sample) r.f32s(&s.points[0][0], s.points.size() * 3);
        for (const auto& p : s.points)
            for (float c : p)
                if (!std::isfinite(c))
                    throw ParseError("non-finite coordinate in sample " + sample_id_str(s.id),
                                     r.offset());
    }
    return ds;
}

Checkpoint make_checkpoint(const ParamStore<float>& store, CheckpointMeta meta,
                           const OptimizerBlob* opt) {
    Checkpoint ck;
    ck.meta = meta;
    for (const auto& [name, e] : store.entries) ck.tensors[name] = e.value;
    if (opt) ck.optimizer = *opt;
    return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    Writer w(path);
    w.bytes("PDCK", 4);
    w.u32(1);
    w.u64(ck.meta.config_digest);
    w.u64(ck.meta.seed);
    w.u64(ck.meta.step);
    w.u64(ck.tensors.size());
    for (const auto& [name, t] : ck.tensors) write_tensor_record(w, name, t);
    w.u8(ck.optimizer ? 1 : 0);
    if (ck.optimizer) {
        w.u64(ck.optimizer->step);
        w.u64(ck.optimizer->m.size() + ck.optimizer->v.size());
        for (const auto& [name, t] : ck.optimizer->m) write_tensor_record(w, "m:" + name, t);
        for (const auto& [name, t] : ck.optimizer->v) write_tensor_record(w, "v:" + name, t);
    }
    w.commit();
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader r(path);
    r.magic("PDCK", "checkpoint");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw ParseError("unsupported checkpoint version " + std::to_string(version),
                         r.offset() - 4);
    Checkpoint ck;
    ck.meta.config_digest = r.u64();
    ck.meta.seed = r.u64();
    ck.meta.step = r.u64();
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        auto [name, t] = read_tensor_record(r);
        if (ck.tensors.count(name))
            throw ParseError("duplicate tensor '" + name + "'", r.offset());
        ck.tensors.emplace(std::move(name), std::move(t));
    }
    if (r.u8()) {
        OptimizerBlob opt;
        opt.step = r.u64();
        const std::uint64_t n = r.u64();
        for (std::uint64_t i = 0; i < n; ++i) {
            auto [name, t] = read_tensor_record(r);
            if (name.rfind("m:", 0) == 0)
                opt.m.emplace(name.substr(2), std::move(t));
            else if (name.rfind("v:", 0) == 0)
                opt.v.emplace(name.substr(2), std::move(t));
            else
                throw ParseError("bad optimizer tensor name '" + name + "'", r.offset());
        }
        ck.optimizer = std::move(opt);
    }
    return ck;
}

std::vector<std::string> apply_checkpoint(ParamStore<float>& store, const Checkpoint& ck,
                                          bool subset_ok) {
    std::vector<std::string> loaded;
    for (const auto& [name, t] : ck.tensors) {
        if (!store.has(name)) {
            if (subset_ok) continue;
            throw IncompatibleError("checkpoint tensor '" + name + "' not in model");
        }
        Tensor<float>& dst = store.at(name);
        if (dst.shape != t.shape)
            throw IncompatibleError("shape mismatch for '" + name + "': model " +
                                    shape_str(dst.shape) + " vs checkpoint " +
                                    shape_str(t.shape));
        dst = t;
        loaded.push_back(name);
    }
    if (!subset_ok) {
        for (const auto& [name, e] : store.entries)
            if (!ck.tensors.count(name))
                throw IncompatibleError("model parameter '" + name + "' missing from checkpoint");
    }
    return loaded;
}

const Tensor<float>* TeacherFixtureSet::find(const SampleId& id) const {
    for (const auto& [sid, t] : embeddings)
        if (sid == id) return &t;
    return nullptr;
}

void write_fixtures(const TeacherFixtureSet& fx, const std::string& path) {
    Writer w(path);
    w.bytes("PDTF", 4);
    w.u32(1);
    w.u64(fx.embeddings.size());
    w.u32(fx.l);
    w.u32(fx.d_cap);
    const Shape expect{int(fx.l), int(fx.d_cap)};
    for (const auto& [id, t] : fx.embeddings) {
        if (t.shape != expect)
            throw InvalidArgument("write_fixtures: embedding shape " + shape_str(t.shape) +
                                  " does not match header " + shape_str(expect));
        w.bytes(id.data(), 16);
        w.f32s(t.data.data(), t.data.size());
    }
    w.commit();
}

TeacherFixtureSet load_fixtures(const std::string& path) {
    Reader r(path);
    r.magic("PDTF", "teacher fixtures");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw ParseError("unsupported fixture version " + std::to_string(version),
                         r.offset() - 4);
    TeacherFixtureSet fx;
    const std::uint64_t count = r.u64();
    fx.l = r.u32();
    fx.d_cap = r.u32();
    for (std::uint64_t i = 0; i < count; ++i) {
        SampleId id{};
        r.bytes(id.data(), 16);
        Tensor<float> t({int(fx.l), int(fx.d_cap)});
        r.f32s(t.data.data(), t.data.size());
        if (!t.all_finite())
            throw NumericError("non-finite teacher embedding for sample " + sample_id_str(id));
        fx.embeddings.emplace_back(id, std::move(t));
    }
    return fx;
}

}  // namespace pd
