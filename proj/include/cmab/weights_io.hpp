#pragma once

#include <string>

#include "cmab/cmanp.hpp"

namespace cmab {

// JSON weight document: {"format_version": 1, "meta": {...}, "tensors":
// {name: {"shape": [r, c], "data": [row-major reals]}}}. Tensor order
// follows the parameter store; reals are written with 17 significant
// digits so a 64-bit round trip is value-exact and repeated save/load
// cycles are byte-identical.
void save_weights(const std::string& path, const CmanpConfig& cfg,
                  const ParamStore& params);

struct LoadedWeights {
    CmanpConfig cfg;
    ParamStore params;
};

LoadedWeights load_weights(const std::string& path);

}  // namespace cmab
