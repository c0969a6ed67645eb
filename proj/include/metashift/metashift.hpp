#pragma once

// Umbrella header for the metashift library: test-time adaptation of a
// calibrated meta-label classifier to shifted class/group priors.

#include "metashift/adapt.hpp"
#include "metashift/calibrate.hpp"
#include "metashift/core.hpp"
#include "metashift/errors.hpp"
#include "metashift/harness.hpp"
#include "metashift/io.hpp"
#include "metashift/metrics.hpp"
#include "metashift/rng.hpp"
#include "metashift/synthdata.hpp"
#include "metashift/train.hpp"
