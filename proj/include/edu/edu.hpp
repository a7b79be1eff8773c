// Umbrella header for the EDU stack-propagation library.

#pragma once

#include "edu/tensor.hpp"
#include "edu/blocks.hpp"
#include "edu/model.hpp"
#include "edu/data.hpp"
#include "edu/objectives.hpp"
#include "edu/eval.hpp"
#include "edu/checkpoint.hpp"
#include "edu/trainer.hpp"
