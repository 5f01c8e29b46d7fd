#pragma once

// Umbrella header.

#include "armforge/arm.hpp"
#include "armforge/config.hpp"
#include "armforge/dataset_io.hpp"
#include "armforge/field.hpp"
#include "armforge/likelihood_stats.hpp"
#include "armforge/losses.hpp"
#include "armforge/metrics.hpp"
#include "armforge/run_io.hpp"
#include "armforge/synth_data.hpp"
#include "armforge/toy_model.hpp"
#include "armforge/trainer.hpp"
#include "armforge/verify.hpp"
