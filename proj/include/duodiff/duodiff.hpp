#pragma once

// Umbrella header: the whole library.

#include "duodiff/adamw.hpp"
#include "duodiff/attention.hpp"
#include "duodiff/checkpoint.hpp"
#include "duodiff/codec.hpp"
#include "duodiff/config.hpp"
#include "duodiff/dataset.hpp"
#include "duodiff/diffusion.hpp"
#include "duodiff/experiments.hpp"
#include "duodiff/features.hpp"
#include "duodiff/metrics.hpp"
#include "duodiff/model.hpp"
#include "duodiff/ops.hpp"
#include "duodiff/phantom.hpp"
#include "duodiff/prompt.hpp"
#include "duodiff/rng.hpp"
#include "duodiff/sampling.hpp"
#include "duodiff/schedule.hpp"
#include "duodiff/segmenter.hpp"
#include "duodiff/serialize.hpp"
#include "duodiff/tape.hpp"
#include "duodiff/tensor.hpp"
#include "duodiff/train.hpp"
#include "duodiff/util.hpp"
