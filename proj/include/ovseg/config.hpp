#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ovseg/distill.hpp"
#include "ovseg/encoder.hpp"
#include "ovseg/pipeline.hpp"
#include "ovseg/upsampler.hpp"

namespace ovseg {

enum class KeyType { kInt, kReal, kBool, kString };

struct ConfigKey {
  std::string name;
  KeyType type;
  std::string default_value;
  std::string help;
};

// The complete set of recognized keys with their defaults.
const std::vector<ConfigKey>& config_schema();

// `key = value` settings over the schema defaults. Unknown keys and values
// that do not parse as the key's type raise ConfigError.
class RunConfig {
 public:
  RunConfig();

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool is_default(const std::string& key) const;

  std::int64_t get_int(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;  // rejects negatives
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Canonical text: every key in schema order.
  std::string dump() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Help listing of every key, its default and description.
std::string config_help();

std::uint64_t run_seed(const RunConfig& rc);
EncoderConfig encoder_config(const RunConfig& rc);
UpsamplerTrainConfig upsampler_train_config(const RunConfig& rc);
DistillConfig distill_config(const RunConfig& rc);
SlideConfig slide_config(const RunConfig& rc);
BiasConfig bias_config(const RunConfig& rc);

}  // namespace ovseg
