#pragma once

// Umbrella header.

#include "rankgauge/core.hpp"
#include "rankgauge/expression.hpp"
#include "rankgauge/field_io.hpp"
#include "rankgauge/grid.hpp"
#include "rankgauge/hessian_analysis.hpp"
#include "rankgauge/linalg.hpp"
#include "rankgauge/operator.hpp"
#include "rankgauge/pde_lab.hpp"
#include "rankgauge/rank_verifier.hpp"
#include "rankgauge/scenario.hpp"
#include "rankgauge/structure_condition.hpp"
#include "rankgauge/symfun.hpp"
