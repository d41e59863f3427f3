#pragma once

#include "knnmoe/jsonutil.hpp"
#include "knnmoe/model.hpp"

namespace knnmoe {

// Checkpoint file: magic "MOEKNN1\0", u32 LE header length, JSON header
// (config plus tensor manifest), then f32 LE payloads in manifest order.
// Weights are stored in 32-bit precision; a model serializes to the same
// bytes before and after a save/load cycle.

std::vector<uint8_t> serialize_checkpoint(const Model& m);
void save_checkpoint(const Model& m, const std::string& path);
Model parse_checkpoint(const std::vector<uint8_t>& bytes, const std::string& what);
Model load_checkpoint(const std::string& path);

// FNV-1a over the serialized checkpoint, as 16 hex digits. Memory files
// record it so a memory is never queried against the wrong weights.
std::string model_fingerprint(const Model& m);

ojson model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const ojson& j, const std::string& what);

}  // namespace knnmoe
