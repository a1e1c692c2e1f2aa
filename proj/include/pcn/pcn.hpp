#pragma once

#include "pcn/tensor.hpp"
#include "pcn/ops.hpp"
#include "pcn/nn_blocks.hpp"
#include "pcn/geometry.hpp"
#include "pcn/box_coder.hpp"
#include "pcn/checkpoint.hpp"
#include "pcn/model.hpp"
#include "pcn/synth.hpp"
#include "pcn/eval.hpp"
#include "pcn/training.hpp"
#include "pcn/config.hpp"
#include "pcn/experiment.hpp"
