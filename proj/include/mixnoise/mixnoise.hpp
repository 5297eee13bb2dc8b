#pragma once

#include "mixnoise/clusterkit.hpp"
#include "mixnoise/error.hpp"
#include "mixnoise/evalstats.hpp"
#include "mixnoise/experiment.hpp"
#include "mixnoise/extended_matrix.hpp"
#include "mixnoise/io.hpp"
#include "mixnoise/losses.hpp"
#include "mixnoise/netcore.hpp"
#include "mixnoise/robusttrain.hpp"
#include "mixnoise/synthdata.hpp"
#include "mixnoise/transition.hpp"
