#ifndef VQAUDIT_VQAUDIT_HPP
#define VQAUDIT_VQAUDIT_HPP

#include "audit.hpp"
#include "codestats.hpp"
#include "embedder.hpp"
#include "errors.hpp"
#include "image.hpp"
#include "layers.hpp"
#include "network.hpp"
#include "params.hpp"
#include "projection.hpp"
#include "regions.hpp"
#include "report.hpp"
#include "rng.hpp"
#include "saliency.hpp"
#include "tensor.hpp"
#include "tileworld.hpp"
#include "vqcodec.hpp"

#endif
