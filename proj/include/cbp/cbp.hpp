// Copyright 2026 The CBP Grounding Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Umbrella header for the library (everything except the CLI driver).

#pragma once

#include "cbp/context.hpp"
#include "cbp/dataio.hpp"
#include "cbp/errors.hpp"
#include "cbp/heads.hpp"
#include "cbp/inference.hpp"
#include "cbp/interaction.hpp"
#include "cbp/metrics.hpp"
#include "cbp/model.hpp"
#include "cbp/numerics.hpp"
#include "cbp/recurrent.hpp"
#include "cbp/supervision.hpp"
#include "cbp/trainer.hpp"
