#pragma once

#include "vilseg/autodiff.hpp"
#include "vilseg/checkpoint.hpp"
#include "vilseg/config.hpp"
#include "vilseg/data.hpp"
#include "vilseg/errors.hpp"
#include "vilseg/image.hpp"
#include "vilseg/inference.hpp"
#include "vilseg/losses.hpp"
#include "vilseg/metrics.hpp"
#include "vilseg/model.hpp"
#include "vilseg/nn.hpp"
#include "vilseg/optim.hpp"
#include "vilseg/plot.hpp"
#include "vilseg/tokenizer.hpp"
#include "vilseg/trainer.hpp"
#include "vilseg/transforms.hpp"
