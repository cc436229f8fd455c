#include "pd/teacher.hpp"

#include <cmath>

namespace pd {

Tensor<float> synth_teacher(std::uint32_t class_id, int l, int d_cap, float noise_scale,
                            std::uint64_t seed, std::uint64_t sample_nonce) {
    if (noise_scale < 0.0f) throw InvalidArgument("synth_teacher: negative noise scale");
    Tensor<float> out({l, d_cap});
    const float scale = 1.0f / std::sqrt(float(d_cap));
    Rng proto(hash_combine(hash_combine(seed, 0x70726f746fULL), class_id));
    for (auto& v : out.data) v = float(proto.normal()) * scale;
    if (noise_scale > 0.0f) {
        Rng noise(hash_combine(hash_combine(seed, 0x6e6f697365ULL), sample_nonce));
        for (auto& v : out.data) v += noise_scale * float(noise.normal()) * scale;
    }
    return out;
}

}  // namespace pd
