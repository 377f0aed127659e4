// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Umbrella header: the whole library in dependency order.

#include "fedsim/error.hpp"
#include "fedsim/tensor.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/param_set.hpp"
#include "fedsim/layers.hpp"
#include "fedsim/gradcheck.hpp"
#include "fedsim/dataset.hpp"
#include "fedsim/dataset_io.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/partition.hpp"
#include "fedsim/corruption.hpp"
#include "fedsim/model.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/experiment.hpp"
