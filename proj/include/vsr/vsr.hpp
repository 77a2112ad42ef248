#pragma once

#include "vsr/tensor.hpp"
#include "vsr/ops.hpp"
#include "vsr/image.hpp"
#include "vsr/models.hpp"
#include "vsr/losses.hpp"
#include "vsr/optim.hpp"
#include "vsr/flow.hpp"
#include "vsr/metrics.hpp"
#include "vsr/data_io.hpp"
#include "vsr/train.hpp"
