#pragma once

#include "caltrans/error.hpp"
#include "caltrans/core.hpp"
#include "caltrans/csv.hpp"
#include "caltrans/solver.hpp"
#include "caltrans/glm.hpp"
#include "caltrans/estimators.hpp"
#include "caltrans/inference.hpp"
#include "caltrans/rng.hpp"
#include "caltrans/sim.hpp"
