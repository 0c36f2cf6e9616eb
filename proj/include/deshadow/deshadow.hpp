#pragma once

#include "deshadow/tensor.hpp"
#include "deshadow/ops.hpp"
#include "deshadow/image_ops.hpp"
#include "deshadow/rtn.hpp"
#include "deshadow/random.hpp"
#include "deshadow/parallel.hpp"
#include "deshadow/filters.hpp"
#include "deshadow/guidance.hpp"
#include "deshadow/cascade.hpp"
#include "deshadow/losses.hpp"
#include "deshadow/synth.hpp"
#include "deshadow/metrics.hpp"
#include "deshadow/image_io.hpp"
#include "deshadow/optim.hpp"
#include "deshadow/schedule.hpp"
#include "deshadow/config.hpp"
#include "deshadow/checkpoint.hpp"
#include "deshadow/trainer.hpp"
#include "deshadow/inference.hpp"
#include "deshadow/experiments.hpp"
