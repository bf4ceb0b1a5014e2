#pragma once

#include "selene/checkpoint.hpp"
#include "selene/data.hpp"
#include "selene/gradcheck.hpp"
#include "selene/gradcheck_suite.hpp"
#include "selene/jigsaw.hpp"
#include "selene/losses.hpp"
#include "selene/metrics.hpp"
#include "selene/nn_ops.hpp"
#include "selene/parallel.hpp"
#include "selene/rng.hpp"
#include "selene/routing.hpp"
#include "selene/semisup.hpp"
#include "selene/tensor.hpp"
#include "selene/trainer.hpp"
