#pragma once

// Teacher-student diffusion segmentation toolkit: conditional denoising
// models trained with cycle-consistency pretraining and semi-supervised
// cross-pseudo-supervision co-training, plus the experiment harness around
// them.

#include "diffseg/adam.hpp"
#include "diffseg/autodiff.hpp"
#include "diffseg/checkpoint.hpp"
#include "diffseg/common.hpp"
#include "diffseg/cotrain.hpp"
#include "diffseg/csv.hpp"
#include "diffseg/data.hpp"
#include "diffseg/denoiser.hpp"
#include "diffseg/harness.hpp"
#include "diffseg/image_io.hpp"
#include "diffseg/inference.hpp"
#include "diffseg/losses.hpp"
#include "diffseg/metrics.hpp"
#include "diffseg/nn_ops.hpp"
#include "diffseg/plot.hpp"
#include "diffseg/pretrain.hpp"
#include "diffseg/rng.hpp"
#include "diffseg/schedule.hpp"
#include "diffseg/tensor.hpp"
