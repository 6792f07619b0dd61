#pragma once

#include "prediag/error.hpp"
#include "prediag/utf8.hpp"

#include "prediag/text/pipeline.hpp"

#include "prediag/chat/dialogue.hpp"
#include "prediag/chat/knowledge_store.hpp"
#include "prediag/chat/matcher.hpp"

#include "prediag/nn/activation.hpp"
#include "prediag/nn/adam.hpp"
#include "prediag/nn/grad_check.hpp"
#include "prediag/nn/layers.hpp"
#include "prediag/nn/tensor.hpp"

#include "prediag/classifier/backbone.hpp"
#include "prediag/classifier/dataset.hpp"
#include "prediag/classifier/head.hpp"
#include "prediag/classifier/training.hpp"

#include "prediag/service/chat_service.hpp"
