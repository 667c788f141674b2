#pragma once

#include <optional>
#include <string>

#include <json.hpp>

#include "flowrl/diffnet.hpp"
#include "flowrl/dynamics.hpp"

namespace flowrl::io {

using nlohmann::json;

/// FNV-1a over the canonical (sorted-key) JSON dump; used to stamp every
/// emitted file with the configuration it came from.
std::string hash_hex(const json& j);

json to_json(const diffnet::NetworkSpec& s);
diffnet::NetworkSpec network_spec_from_json(const json& j);

json to_json(const diffnet::AdamState& a);
diffnet::AdamState adam_from_json(const json& j);

json to_json(const dyn::SIModel& m);
dyn::SIModel model_from_json(const json& j);

json to_json(const dyn::AnnealNet& a);
dyn::AnnealNet anneal_from_json(const json& j);

/// Versioned checkpoint: model, optional annealing net, optional optimizer
/// state. Plain JSON, so the byte layout is identical on every platform.
struct Checkpoint {
  dyn::SIModel model;
  std::optional<dyn::AnnealNet> anneal;
  std::optional<diffnet::AdamState> adam;
  std::string config_hash;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

void write_json_file(const json& j, const std::string& path);
json read_json_file(const std::string& path);

}  // namespace flowrl::io
