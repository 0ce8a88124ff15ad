#pragma once

#include <filesystem>

#include <json.hpp>

#include "scseg/data.hpp"
#include "scseg/network.hpp"
#include "scseg/trainer.hpp"

// JSON schema for configuration files. Unknown keys are rejected; omitted keys
// keep their defaults except seeds, which are mandatory.
namespace scseg {

using Json = nlohmann::ordered_json;

inline constexpr int kConfigSchemaVersion = 1;

Json to_json(const NetworkConfig& c);
NetworkConfig network_config_from_json(const Json& j);

Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j);

Json to_json(const PhantomSpec& s);
PhantomSpec phantom_spec_from_json(const Json& j);

Json to_json(const DatasetSpec& s);
DatasetSpec dataset_spec_from_json(const Json& j);

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const Json& j);

}  // namespace scseg
