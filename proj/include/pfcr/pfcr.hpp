#pragma once

#include "pfcr/ablation.hpp"
#include "pfcr/checkpoint.hpp"
#include "pfcr/data.hpp"
#include "pfcr/errors.hpp"
#include "pfcr/experiment.hpp"
#include "pfcr/ops.hpp"
#include "pfcr/optim.hpp"
#include "pfcr/pos.hpp"
#include "pfcr/quantizer.hpp"
#include "pfcr/recon.hpp"
#include "pfcr/schedule.hpp"
#include "pfcr/serialize.hpp"
#include "pfcr/tensor.hpp"
#include "pfcr/train.hpp"
#include "pfcr/vit.hpp"
