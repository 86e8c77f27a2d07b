// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "json.hpp"
#include "sublab/model.hpp"

namespace sublab {

nlohmann::json model_config_to_json(const ModelConfig& c);
/// Missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

}  // namespace sublab
