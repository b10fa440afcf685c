#pragma once

#include "marlcpc/agents.hpp"
#include "marlcpc/autodiff.hpp"
#include "marlcpc/checkpoint.hpp"
#include "marlcpc/config.hpp"
#include "marlcpc/cpc.hpp"
#include "marlcpc/envs.hpp"
#include "marlcpc/gae.hpp"
#include "marlcpc/harness.hpp"
#include "marlcpc/nn.hpp"
#include "marlcpc/optim.hpp"
#include "marlcpc/rng.hpp"
#include "marlcpc/stats.hpp"
#include "marlcpc/trainers.hpp"
