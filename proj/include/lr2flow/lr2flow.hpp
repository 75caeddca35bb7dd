#pragma once

#include "lr2flow/autodiff.hpp"
#include "lr2flow/bicubic.hpp"
#include "lr2flow/checkpoint.hpp"
#include "lr2flow/config.hpp"
#include "lr2flow/dataset.hpp"
#include "lr2flow/flow.hpp"
#include "lr2flow/framelet.hpp"
#include "lr2flow/image_io.hpp"
#include "lr2flow/jpeg.hpp"
#include "lr2flow/kernels.hpp"
#include "lr2flow/losses.hpp"
#include "lr2flow/lrtf.hpp"
#include "lr2flow/metrics.hpp"
#include "lr2flow/operators.hpp"
#include "lr2flow/optim.hpp"
#include "lr2flow/rng.hpp"
#include "lr2flow/tensor.hpp"
#include "lr2flow/theory.hpp"
#include "lr2flow/train.hpp"
