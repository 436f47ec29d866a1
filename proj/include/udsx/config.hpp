#pragma once
// Flat key=value configuration. Lines are `key = value`; `#` starts a comment.
// Unknown keys are rejected with the key name so typos never pass silently.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "udsx/harness.hpp"
#include "udsx/synthdata.hpp"

namespace udsx {

using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text, const std::string& origin = "<string>");
KeyValues load_key_values(const std::filesystem::path& path);

// "key=value" as given to --set.
void apply_override(KeyValues& kv, const std::string& assignment);

// Keys accepted by train_config_from / synth_spec_from, with a one-line help each.
const std::vector<std::pair<std::string, std::string>>& train_keys();
const std::vector<std::pair<std::string, std::string>>& data_keys();

// Start from the defaults and apply every key. Keys from the other family are
// ignored so one file can hold both the data and the training section.
TrainConfig train_config_from(const KeyValues& kv);
SynthSpec synth_spec_from(const KeyValues& kv);

// Reject keys that belong to neither family.
void check_known_keys(const KeyValues& kv);

// Fully resolved configuration, suitable for the manifest.
KeyValues to_key_values(const TrainConfig& cfg);
KeyValues to_key_values(const SynthSpec& spec);

std::string format_key_values(const KeyValues& kv);

}  // namespace udsx
