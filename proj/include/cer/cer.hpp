#pragma once

#include "cer/checkpoint.hpp"
#include "cer/config.hpp"
#include "cer/data.hpp"
#include "cer/fusion.hpp"
#include "cer/label_space.hpp"
#include "cer/manet.hpp"
#include "cer/metrics.hpp"
#include "cer/resnet.hpp"
#include "cer/training.hpp"
#include "cer/vit.hpp"
