#pragma once

#include "iclea/aggregator.hpp"
#include "iclea/checkpoint.hpp"
#include "iclea/config.hpp"
#include "iclea/contrastive.hpp"
#include "iclea/dataset.hpp"
#include "iclea/embedding_io.hpp"
#include "iclea/error.hpp"
#include "iclea/evaluator.hpp"
#include "iclea/kg.hpp"
#include "iclea/matrix.hpp"
#include "iclea/optim.hpp"
#include "iclea/parallel.hpp"
#include "iclea/pseudo_miner.hpp"
#include "iclea/rng.hpp"
#include "iclea/synth.hpp"
#include "iclea/tensor.hpp"
#include "iclea/trainer.hpp"

namespace iclea {
inline constexpr const char* kVersion = "0.1.0";
}  // namespace iclea
