#pragma once

#include "saematch/assignment.hpp"
#include "saematch/error.hpp"
#include "saematch/io.hpp"
#include "saematch/matching.hpp"
#include "saematch/matrix.hpp"
#include "saematch/metrics.hpp"
#include "saematch/pruning.hpp"
#include "saematch/rng.hpp"
#include "saematch/sae.hpp"
#include "saematch/synth.hpp"
