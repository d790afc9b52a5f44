#pragma once

#include "pedseg/augmentation.hpp"
#include "pedseg/config.hpp"
#include "pedseg/error.hpp"
#include "pedseg/grid.hpp"
#include "pedseg/inference.hpp"
#include "pedseg/log.hpp"
#include "pedseg/losses.hpp"
#include "pedseg/metrics.hpp"
#include "pedseg/morphology.hpp"
#include "pedseg/nifti.hpp"
#include "pedseg/nn/architecture.hpp"
#include "pedseg/nn/checkpoint.hpp"
#include "pedseg/nn/model.hpp"
#include "pedseg/nn/ops.hpp"
#include "pedseg/nn/optimizer.hpp"
#include "pedseg/phantom.hpp"
#include "pedseg/postprocess.hpp"
#include "pedseg/training.hpp"
#include "pedseg/volume_io.hpp"
