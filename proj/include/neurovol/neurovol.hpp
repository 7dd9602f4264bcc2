#pragma once

#include "neurovol/annotations.hpp"
#include "neurovol/batch.hpp"
#include "neurovol/block_io.hpp"
#include "neurovol/classify.hpp"
#include "neurovol/concurrency.hpp"
#include "neurovol/config.hpp"
#include "neurovol/error.hpp"
#include "neurovol/features.hpp"
#include "neurovol/phantom.hpp"
#include "neurovol/pipeline.hpp"
#include "neurovol/retrain.hpp"
#include "neurovol/segmentation.hpp"
#include "neurovol/serve.hpp"
#include "neurovol/stitching.hpp"
#include "neurovol/store.hpp"
#include "neurovol/volume.hpp"
