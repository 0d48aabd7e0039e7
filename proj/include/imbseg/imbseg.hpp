#pragma once

// Umbrella header: the whole pipeline in dependency order.

#include "imbseg/errors.hpp"
#include "imbseg/rng.hpp"
#include "imbseg/volume.hpp"
#include "imbseg/nifti.hpp"
#include "imbseg/preprocess.hpp"
#include "imbseg/loss.hpp"
#include "imbseg/net.hpp"
#include "imbseg/checkpoint.hpp"
#include "imbseg/postprocess.hpp"
#include "imbseg/metrics.hpp"
#include "imbseg/inference.hpp"
#include "imbseg/train.hpp"
#include "imbseg/synth.hpp"
