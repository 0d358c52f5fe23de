#pragma once

#include "sprc/errors.hpp"
#include "sprc/tensor.hpp"
#include "sprc/autograd.hpp"
#include "sprc/io.hpp"
#include "sprc/dataset.hpp"
#include "sprc/encoders.hpp"
#include "sprc/prompting.hpp"
#include "sprc/objective.hpp"
#include "sprc/config.hpp"
#include "sprc/training.hpp"
#include "sprc/evaluation.hpp"
#include "sprc/experiment.hpp"
