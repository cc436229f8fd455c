#pragma once

// Frozen teacher prefix embeddings. Real image/caption models are consumed,
// never run here: embeddings either come from fixture files or are
// synthesized deterministically with class structure so that distillation has
// informative targets at desk scale.

#include <cstdint>

#include "pd/common.hpp"
#include "pd/persistence.hpp"
#include "pd/tensor.hpp"

namespace pd {

// Class prototype plus per-sample noise, both from counter-based seeded
// streams; bit-identical for identical arguments. Values are standard normal
// scaled by 1/sqrt(d_cap) so target magnitudes stay comparable to unit-scale
// student outputs.
Tensor<float> synth_teacher(std::uint32_t class_id, int l, int d_cap, float noise_scale,
                            std::uint64_t seed, std::uint64_t sample_nonce = 0);

}  // namespace pd
