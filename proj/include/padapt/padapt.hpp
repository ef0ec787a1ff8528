#pragma once

// Umbrella header.
#include "padapt/tensor.hpp"
#include "padapt/rng.hpp"
#include "padapt/autodiff.hpp"
#include "padapt/checkpoint.hpp"
#include "padapt/layers.hpp"
#include "padapt/vision.hpp"
#include "padapt/pool_adapter.hpp"
#include "padapt/query_adapter.hpp"
#include "padapt/lm.hpp"
#include "padapt/log.hpp"
#include "padapt/prompt.hpp"
#include "padapt/model.hpp"
#include "padapt/synth.hpp"
#include "padapt/training.hpp"
#include "padapt/eval.hpp"
#include "padapt/config.hpp"
#include "padapt/gradcheck.hpp"
#include "padapt/pipeline.hpp"
