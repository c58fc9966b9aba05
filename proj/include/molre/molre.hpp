#pragma once

// Umbrella header.

#include "molre/config.hpp"
#include "molre/cost.hpp"
#include "molre/data.hpp"
#include "molre/errors.hpp"
#include "molre/flops.hpp"
#include "molre/fusion.hpp"
#include "molre/grad_check.hpp"
#include "molre/gradcheck_suite.hpp"
#include "molre/model.hpp"
#include "molre/rng.hpp"
#include "molre/tensor.hpp"
#include "molre/train.hpp"
#include "molre/unitse.hpp"
