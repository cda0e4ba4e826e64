#pragma once

// Umbrella header for the whole library: tensor core with reverse-mode
// differentiation, network definitions, distillation losses, synthetic
// tasks, metrics, and the training harness.

#include "structkd/common.hpp"
#include "structkd/config.hpp"
#include "structkd/distill.hpp"
#include "structkd/io.hpp"
#include "structkd/metrics.hpp"
#include "structkd/nets.hpp"
#include "structkd/ops.hpp"
#include "structkd/rng.hpp"
#include "structkd/tasks.hpp"
#include "structkd/tensor.hpp"
#include "structkd/train.hpp"
