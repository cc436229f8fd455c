#include "pd/datagen.hpp"

#include <cmath>
#include <cstdio>

#include "pd/teacher.hpp"

namespace pd {

namespace {

constexpr double kTau = 6.283185307179586476925286766559;

Vec3<float> jitter(Vec3<float> p, float noise, Rng& rng) {
    for (auto& c : p) c += noise * float(rng.normal());
    return p;
}

Vec3<float> sphere_point(float r, Rng& rng) {
    double x = rng.normal(), y = rng.normal(), z = rng.normal();
    double n = std::sqrt(x * x + y * y + z * z);
    while (n < 1e-9) {
        x = rng.normal();
        y = rng.normal();
        z = rng.normal();
        n = std::sqrt(x * x + y * y + z * z);
    }
    return {float(r * x / n), float(r * y / n), float(r * z / n)};
}

Vec3<float> box_point(Vec3<float> half, Rng& rng) {
    // pick a face pair weighted by area, then a uniform point on it
    const double ax = double(half[1]) * half[2];
    const double ay = double(half[0]) * half[2];
    const double az = double(half[0]) * half[1];
    const double u = rng.uniform() * (ax + ay + az);
    const float sgn = rng.uniform() < 0.5 ? -1.0f : 1.0f;
    Vec3<float> p{float(rng.uniform(-half[0], half[0])), float(rng.uniform(-half[1], half[1])),
                  float(rng.uniform(-half[2], half[2]))};
    if (u < ax)
        p[0] = sgn * half[0];
    else if (u < ax + ay)
        p[1] = sgn * half[1];
    else
        p[2] = sgn * half[2];
    return p;
}

Vec3<float> cylinder_point(float r, float h, Rng& rng) {
    const double lateral = kTau * r * h;
    const double caps = 2.0 * (kTau / 2.0) * r * r;
    if (rng.uniform() * (lateral + caps) < lateral) {
        const double a = rng.uniform() * kTau;
        return {float(r * std::cos(a)), float(r * std::sin(a)), float(rng.uniform(-h / 2, h / 2))};
    }
    const double a = rng.uniform() * kTau;
    const double rr = r * std::sqrt(rng.uniform());
    const float z = rng.uniform() < 0.5 ? -h / 2 : h / 2;
    return {float(rr * std::cos(a)), float(rr * std::sin(a)), z};
}

Vec3<float> plane_point(float side, Rng& rng) {
    return {float(rng.uniform(-side / 2, side / 2)), float(rng.uniform(-side / 2, side / 2)), 0.0f};
}

}  // namespace

std::string shape_class_name(int class_id) {
    static const char* kinds[4] = {"sphere", "box", "cylinder", "plane"};
    std::string name = kinds[class_id % 4];
    if (class_id >= 4) name += "_v" + std::to_string(class_id / 4);
    return name;
}

Cloud<float> sample_shape(int class_id, int points, float noise, Rng& rng) {
    // classes beyond the four base kinds are scaled variants
    const float s = 1.0f / (1.0f + 0.35f * float(class_id / 4));
    Cloud<float> cloud(static_cast<std::size_t>(points));
    for (auto& p : cloud) {
        switch (class_id % 4) {
            case 0: p = sphere_point(0.8f * s, rng); break;
            case 1: p = box_point({0.7f * s, 0.5f * s, 0.4f * s}, rng); break;
            case 2: p = cylinder_point(0.5f * s, 1.2f * s, rng); break;
            default: p = plane_point(1.6f * s, rng); break;
        }
        p = jitter(p, noise, rng);
    }
    return cloud;
}

GeneratedData generate_shapes(const GenConfig& cfg) {
    if (cfg.classes < 1 || cfg.samples_per_class < 1 || cfg.points < 1)
        throw InvalidArgument("generate_shapes: counts must be positive");
    GeneratedData out;
    out.dataset.points_per_sample = std::uint32_t(cfg.points);
    out.dataset.has_labels = true;
    for (int c = 0; c < cfg.classes; ++c)
        out.dataset.class_names.push_back(shape_class_name(c));
    out.fixtures.l = std::uint32_t(cfg.prefix_len);
    out.fixtures.d_cap = std::uint32_t(cfg.d_cap);
    for (int c = 0; c < cfg.classes; ++c) {
        for (int s = 0; s < cfg.samples_per_class; ++s) {
            char buf[17];
            std::snprintf(buf, sizeof buf, "c%03ds%06d", c, s);
            DatasetSample sample;
            sample.id = make_sample_id(buf);
            sample.label = std::uint32_t(c);
            Rng rng(hash_combine(hash_combine(cfg.seed, std::uint64_t(c)), std::uint64_t(s)));
            sample.points = sample_shape(c, cfg.points, cfg.noise, rng);
            out.dataset.samples.push_back(std::move(sample));
            const std::uint64_t nonce =
                hash_combine(std::uint64_t(c) * 1000003ULL, std::uint64_t(s));
            out.fixtures.embeddings.emplace_back(
                make_sample_id(buf), synth_teacher(std::uint32_t(c), cfg.prefix_len, cfg.d_cap,
                                                   cfg.teacher_noise, cfg.seed, nonce));
        }
    }
    return out;
}

}  // namespace pd
