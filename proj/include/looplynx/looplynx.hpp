#pragma once

#include "looplynx/attention.hpp"
#include "looplynx/config.hpp"
#include "looplynx/engine.hpp"
#include "looplynx/error.hpp"
#include "looplynx/model.hpp"
#include "looplynx/quant.hpp"
#include "looplynx/report.hpp"
#include "looplynx/ring.hpp"
#include "looplynx/scheduler.hpp"
#include "looplynx/shard.hpp"
#include "looplynx/sim.hpp"
#include "looplynx/timing.hpp"
#include "looplynx/weights_io.hpp"
