#pragma once

#include "schunk/attention.hpp"
#include "schunk/bench.hpp"
#include "schunk/checkpoint.hpp"
#include "schunk/chunk.hpp"
#include "schunk/config.hpp"
#include "schunk/ctc.hpp"
#include "schunk/encoder.hpp"
#include "schunk/model.hpp"
#include "schunk/ops.hpp"
#include "schunk/rng.hpp"
#include "schunk/streaming.hpp"
#include "schunk/synth.hpp"
#include "schunk/tensor.hpp"
#include "schunk/train.hpp"
