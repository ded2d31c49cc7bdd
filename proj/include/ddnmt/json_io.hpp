// json_io.hpp -- JSON bindings for configuration and report types, shared by
// checkpoints, run manifests and the CLI.
#pragma once

#include <json.hpp>

#include "ddnmt/decode.hpp"
#include "ddnmt/diversify.hpp"
#include "ddnmt/model.hpp"
#include "ddnmt/toytask.hpp"

namespace ddnmt {

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

void to_json(nlohmann::json& j, const DecodeConfig& c);
void from_json(const nlohmann::json& j, DecodeConfig& c);

void to_json(nlohmann::json& j, const ToyTaskSpec& c);
void from_json(const nlohmann::json& j, ToyTaskSpec& c);

void to_json(nlohmann::json& j, const TraceEntry& e);
void from_json(const nlohmann::json& j, TraceEntry& e);

void to_json(nlohmann::json& j, const TrainingTrace& t);
void from_json(const nlohmann::json& j, TrainingTrace& t);

void to_json(nlohmann::json& j, const DiversifyConfig& c);
void from_json(const nlohmann::json& j, DiversifyConfig& c);

// Stable fingerprint of any JSON value (order-independent for objects).
std::uint64_t json_hash(const nlohmann::json& j);

}  // namespace ddnmt
