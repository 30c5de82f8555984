#pragma once

#include "oodforge/cider.hpp"
#include "oodforge/container.hpp"
#include "oodforge/dataio.hpp"
#include "oodforge/detectors.hpp"
#include "oodforge/error.hpp"
#include "oodforge/eval.hpp"
#include "oodforge/evt.hpp"
#include "oodforge/nnet.hpp"
#include "oodforge/numerics.hpp"
#include "oodforge/pipeline.hpp"
#include "oodforge/random.hpp"
