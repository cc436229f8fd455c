#pragma once

// Synthetic labeled shape clouds (sphere, box, cylinder, plane surfaces with
// Gaussian jitter) plus paired class-structured teacher fixtures.

#include <cstdint>
#include <string>

#include "pd/common.hpp"
#include "pd/persistence.hpp"

namespace pd {

struct GenConfig {
    int classes = 4;
    int samples_per_class = 16;
    int points = 256;
    float noise = 0.01f;            // surface jitter sigma
    std::uint64_t seed = 1;
    float teacher_noise = 0.1f;     // per-sample noise around the class prototype
    int prefix_len = 10;
    int d_cap = 64;
};

struct GeneratedData {
    Dataset dataset;
    TeacherFixtureSet fixtures;
};

std::string shape_class_name(int class_id);

Cloud<float> sample_shape(int class_id, int points, float noise, Rng& rng);

GeneratedData generate_shapes(const GenConfig& cfg);

}  // namespace pd
