#pragma once

#include "viewsynth/checkpoint.hpp"
#include "viewsynth/config.hpp"
#include "viewsynth/data.hpp"
#include "viewsynth/errors.hpp"
#include "viewsynth/featnet.hpp"
#include "viewsynth/geometry.hpp"
#include "viewsynth/image_io.hpp"
#include "viewsynth/keypoint_io.hpp"
#include "viewsynth/losses.hpp"
#include "viewsynth/mapping_grid.hpp"
#include "viewsynth/matchloc.hpp"
#include "viewsynth/ops.hpp"
#include "viewsynth/optim.hpp"
#include "viewsynth/pipeline.hpp"
#include "viewsynth/pnp.hpp"
#include "viewsynth/tensor.hpp"
#include "viewsynth/vsm.hpp"
