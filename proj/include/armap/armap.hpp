#pragma once

#include "armap/checkpoint.hpp"
#include "armap/error.hpp"
#include "armap/parallel.hpp"
#include "armap/philox.hpp"
#include "armap/reward.hpp"
#include "armap/spectral.hpp"
#include "armap/synthetic.hpp"
#include "armap/task_vector.hpp"
#include "armap/tiny_lm.hpp"
