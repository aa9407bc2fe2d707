#pragma once

#include "bridgepath/autograd.hpp"
#include "bridgepath/bridge.hpp"
#include "bridgepath/checkpoint.hpp"
#include "bridgepath/config.hpp"
#include "bridgepath/corpus.hpp"
#include "bridgepath/distill.hpp"
#include "bridgepath/gradcheck.hpp"
#include "bridgepath/infer.hpp"
#include "bridgepath/mapper.hpp"
#include "bridgepath/metrics.hpp"
#include "bridgepath/model.hpp"
#include "bridgepath/params.hpp"
#include "bridgepath/paths.hpp"
#include "bridgepath/rng.hpp"
#include "bridgepath/seq2seq.hpp"
#include "bridgepath/train.hpp"
