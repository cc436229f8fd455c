#pragma once

// Binary file formats (all little-endian, platform independent):
//
// Dataset "PDDS" v1:
//   magic[4] version:u32 count:u64 points_per_sample:u32 has_labels:u8
//   [has_labels] class_count:u32 { len:u32 name[len] } x class_count
//   per sample: id[16] [has_labels: label:u32] points: n*3 f32
//
// Checkpoint "PDCK" v1:
//   magic[4] version:u32 config_digest:u64 seed:u64 step:u64 tensor_count:u64
//   per tensor: name_len:u32 name rank:u32 dims:u32[rank] data: f32[numel]
//   has_opt:u8 [has_opt: opt_step:u64 count:u64 then tensor records named
//   "m:<param>" / "v:<param>"]
//
// Teacher fixtures "PDTF" v1:
//   magic[4] version:u32 count:u64 l:u32 d_cap:u32
//   per sample: id[16] data: l*d_cap f32
//
// Worked hex examples live in docs/formats.md. All writes are atomic
// (temp file + rename).

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pd/common.hpp"
#include "pd/params.hpp"
#include "pd/tensor.hpp"

namespace pd {

using SampleId = std::array<char, 16>;

SampleId make_sample_id(const std::string& s);
std::string sample_id_str(const SampleId& id);

struct DatasetSample {
    SampleId id{};
    Cloud<float> points;
    std::optional<std::uint32_t> label;
};

struct Dataset {
    std::uint32_t points_per_sample = 0;
    bool has_labels = false;
    std::vector<std::string> class_names;
    std::vector<DatasetSample> samples;

    std::size_t size() const { return samples.size(); }
};

void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

struct CheckpointMeta {
    std::uint64_t config_digest = 0;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
};

struct OptimizerBlob {
    std::uint64_t step = 0;
    std::map<std::string, Tensor<float>> m;
    std::map<std::string, Tensor<float>> v;
};

struct Checkpoint {
    CheckpointMeta meta;
    std::map<std::string, Tensor<float>> tensors;
    std::optional<OptimizerBlob> optimizer;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint tensors into an initialized store by name. With
// subset_ok, checkpoint tensors missing from the store are ignored and store
// entries missing from the checkpoint keep their fresh initialization (used
// for encoder-only transfer); otherwise the name sets must match exactly.
// Returns the names that were loaded.
std::vector<std::string> apply_checkpoint(ParamStore<float>& store, const Checkpoint& ck,
                                          bool subset_ok);

Checkpoint make_checkpoint(const ParamStore<float>& store, CheckpointMeta meta,
                           const OptimizerBlob* opt = nullptr);

struct TeacherFixtureSet {
    std::uint32_t l = 0;
    std::uint32_t d_cap = 0;
    std::vector<std::pair<SampleId, Tensor<float>>> embeddings;

    std::size_t size() const { return embeddings.size(); }
    const Tensor<float>* find(const SampleId& id) const;
};

void write_fixtures(const TeacherFixtureSet& fx, const std::string& path);
TeacherFixtureSet load_fixtures(const std::string& path);

}  // namespace pd
