#pragma once

// Everything except fetch.hpp, which additionally needs libcurl.

#include "percept/config.hpp"
#include "percept/datasets.hpp"
#include "percept/evaluation.hpp"
#include "percept/experiment.hpp"
#include "percept/formats.hpp"
#include "percept/hash.hpp"
#include "percept/lander.hpp"
#include "percept/losses.hpp"
#include "percept/models.hpp"
#include "percept/nn/adam.hpp"
#include "percept/nn/layers.hpp"
#include "percept/perceptual.hpp"
#include "percept/predictors.hpp"
#include "percept/rng.hpp"
#include "percept/tensor.hpp"
#include "percept/training.hpp"
#include "percept/weights_io.hpp"
