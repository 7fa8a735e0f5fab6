#pragma once

#include "chebcam/data.hpp"
#include "chebcam/errors.hpp"
#include "chebcam/nn.hpp"
#include "chebcam/random.hpp"
#include "chebcam/saliency.hpp"
#include "chebcam/spectral.hpp"
#include "chebcam/train.hpp"
