#pragma once

#include "skelnet/errors.hpp"
#include "skelnet/tensor.hpp"
#include "skelnet/autodiff.hpp"
#include "skelnet/grad_check.hpp"
#include "skelnet/pose_data.hpp"
#include "skelnet/synthgen.hpp"
#include "skelnet/network.hpp"
#include "skelnet/training.hpp"
#include "skelnet/evaluation.hpp"
#include "skelnet/attnviz.hpp"
