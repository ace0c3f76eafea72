#pragma once

#include "efllm/error.hpp"
#include "efllm/rng.hpp"
#include "efllm/tensor.hpp"
#include "efllm/text_codec.hpp"
#include "efllm/prefix_encoder.hpp"
#include "efllm/fusion_model.hpp"
#include "efllm/trainer.hpp"
#include "efllm/config.hpp"
#include "efllm/checkpoint.hpp"
#include "efllm/forecast.hpp"
#include "efllm/data_synth.hpp"
#include "efllm/agent.hpp"
#include "efllm/diagnostics.hpp"
#include "efllm/pipeline.hpp"
