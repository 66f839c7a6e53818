#pragma once

#include "ster/adapters.hpp"
#include "ster/dataset.hpp"
#include "ster/decompose.hpp"
#include "ster/error.hpp"
#include "ster/frame_select.hpp"
#include "ster/harness.hpp"
#include "ster/image.hpp"
#include "ster/llm_gateway.hpp"
#include "ster/metrics.hpp"
#include "ster/prompt_forge.hpp"
#include "ster/text.hpp"
#include "ster/visual_prompt.hpp"
