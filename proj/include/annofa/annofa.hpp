#pragma once

#include "types.hpp"
#include "random.hpp"
#include "model.hpp"
#include "priors.hpp"
#include "inference.hpp"
#include "evaluation.hpp"
#include "synthetic.hpp"
#include "io.hpp"
