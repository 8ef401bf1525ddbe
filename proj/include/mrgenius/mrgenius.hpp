#pragma once

#include "mrgenius/additive.hpp"
#include "mrgenius/baselines.hpp"
#include "mrgenius/data.hpp"
#include "mrgenius/errors.hpp"
#include "mrgenius/estimate.hpp"
#include "mrgenius/inference.hpp"
#include "mrgenius/link.hpp"
#include "mrgenius/linalg.hpp"
#include "mrgenius/nuisance.hpp"
#include "mrgenius/parallel.hpp"
#include "mrgenius/regression.hpp"
#include "mrgenius/rootfind.hpp"
#include "mrgenius/simulation.hpp"
#include "mrgenius/stats.hpp"
#include "mrgenius/survival.hpp"
