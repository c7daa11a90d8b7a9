#pragma once

#include "sepctl/errors.hpp"
#include "sepctl/grid.hpp"
#include "sepctl/schedule.hpp"
#include "sepctl/path.hpp"
#include "sepctl/random.hpp"
#include "sepctl/model.hpp"
#include "sepctl/transition.hpp"
#include "sepctl/noise.hpp"
#include "sepctl/simulate.hpp"
#include "sepctl/skorohod.hpp"
#include "sepctl/synthesis.hpp"
#include "sepctl/kalman.hpp"
#include "sepctl/volterra.hpp"
#include "sepctl/laws.hpp"
#include "sepctl/loop.hpp"
#include "sepctl/shiryaev.hpp"
#include "sepctl/experiments.hpp"
