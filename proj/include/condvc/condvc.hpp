#pragma once

#include "condvc/tensor.hpp"
#include "condvc/autograd.hpp"
#include "condvc/ops.hpp"
#include "condvc/nn.hpp"
#include "condvc/optim.hpp"
#include "condvc/entropy_models.hpp"
#include "condvc/coders.hpp"
#include "condvc/video.hpp"
#include "condvc/motion.hpp"
#include "condvc/entropy_lab.hpp"
#include "condvc/mode_codec.hpp"
