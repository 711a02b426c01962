#pragma once

// Umbrella header.
#include "mopebaf/bool_matrix.hpp"
#include "mopebaf/checkpoint.hpp"
#include "mopebaf/commands.hpp"
#include "mopebaf/config.hpp"
#include "mopebaf/data.hpp"
#include "mopebaf/errors.hpp"
#include "mopebaf/eval.hpp"
#include "mopebaf/gradcheck.hpp"
#include "mopebaf/layout.hpp"
#include "mopebaf/model.hpp"
#include "mopebaf/ops.hpp"
#include "mopebaf/random.hpp"
#include "mopebaf/sample.hpp"
#include "mopebaf/tensor.hpp"
#include "mopebaf/training.hpp"
#include "mopebaf/vocab.hpp"
